#include "doctest.h"

#include "osd/neural.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

using namespace osd;
using namespace osd::neural;

namespace {

std::filesystem::path tmp(const char* name) {
  const auto dir = std::filesystem::temp_directory_path() / "osd_test_neural";
  std::filesystem::create_directories(dir);
  return dir / name;
}

StateMatrix random_states(int n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  StateMatrix X(n, kStateDim);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < kStateDim; ++j) X(i, j) = g(rng);
  return X;
}

NetSpec resnet(int depth, int width, Shortcut s = Shortcut::Affine) {
  NetSpec spec;
  spec.depth = depth;
  spec.width = width;
  spec.shortcut = s;
  return spec;
}

NetSpec mlp(int depth, int width) {
  NetSpec spec;
  spec.kind = Kind::Mlp;
  spec.depth = depth;
  spec.width = width;
  return spec;
}

// Random non-trivial normalization and biases so every code path is exercised.
void randomize(NetSpec& spec, NetParams& p, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.5, 0.5), pos(0.5, 2.0);
  for (int j = 0; j < kStateDim; ++j) {
    spec.norm.mu[j] = u(rng);
    spec.norm.sigma[j] = pos(rng);
  }
  for (auto& l : p.layers)
    for (Eigen::Index i = 0; i < l.b.size(); ++i) l.b[i] = 0.2 * u(rng);
}

}  // namespace

TEST_CASE("init shapes, counts and determinism") {
  const NetSpec spec = resnet(12, 16);
  const auto a = init(spec, 7), b = init(spec, 7), c = init(spec, 8);
  CHECK(a.layers.size() == 1 + 12 * 3 + 1);
  CHECK(a.parameter_count() == 144 + 12 * 3 * 272 + 17);
  CHECK(a.flatten() == b.flatten());
  CHECK(a.flatten() != c.flatten());
  for (std::size_t i = 0; i < a.layers.size(); ++i) CHECK(a.layers[i].b.isZero(0));
  // He-uniform bound on the first block layer, identity on its shortcut.
  CHECK(a.layers[1].W.cwiseAbs().maxCoeff() <= std::sqrt(6.0 / 16));
  CHECK(a.layers[3].W.isIdentity(0));

  const auto id = init(resnet(12, 16, Shortcut::Identity), 7);
  CHECK(id.parameter_count() == 144 + 12 * 2 * 272 + 17);
  CHECK(init(mlp(3, 10), 1).parameter_count() == 90 + 110 + 110 + 11);

  CHECK_THROWS_AS(init(resnet(2, 0), 1), ValidationError);
  NetSpec bad = resnet(2, 4);
  bad.norm.sigma[3] = 0.0;
  CHECK_THROWS_AS(init(bad, 1), ValidationError);
}

TEST_CASE("all-zero parameters give zero output") {
  for (const NetSpec& spec : {resnet(3, 5), mlp(2, 4)}) {
    NetParams p = init(spec, 1);
    p.unflatten(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p.parameter_count())));
    std::mt19937_64 rng(2);
    const StateMatrix X = random_states(20, rng, 50.0);
    CHECK(forward_batch(p, spec, X).isZero(0));
    CHECK(forward(p, spec, X.row(0).transpose()) == 0.0);
  }
}

TEST_CASE("zero block weights reduce the ResNet to output(lift(normalize(x)))") {
  std::mt19937_64 rng(3);
  for (Shortcut s : {Shortcut::Identity, Shortcut::Affine}) {
    NetSpec spec = resnet(4, 6, s);
    NetParams p = init(spec, 4);
    randomize(spec, p, rng);
    const std::size_t step = s == Shortcut::Affine ? 3 : 2;
    for (int k = 0; k < 4; ++k) {
      p.layers[1 + step * k].W.setZero();
      p.layers[1 + step * k].b.setZero();
      p.layers[2 + step * k].W.setZero();
      p.layers[2 + step * k].b.setZero();
      if (s == Shortcut::Affine) p.layers[3 + step * k].b.setZero();  // P stays at its identity init
    }
    for (int t = 0; t < 10; ++t) {
      const Vec8 x = random_states(1, rng, 3.0).row(0).transpose();
      Vec8 z;
      for (int j = 0; j < kStateDim; ++j)
        z[j] = (x[j] - spec.norm.mu[j]) / (std::sqrt(spec.norm.sigma[j]) + spec.norm.epsilon);
      const Eigen::VectorXd y = p.layers.front().W * z + p.layers.front().b;
      const double expect = p.layers.back().W.row(0).dot(y) + p.layers.back().b[0];
      CHECK(forward(p, spec, x) == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("single ReLU layer, hand-computed 2x2 case") {
  NetSpec spec = mlp(1, 2);
  spec.norm.epsilon = 0.0;
  NetParams p = init(spec, 1);
  p.layers[0].W.setZero();
  p.layers[0].W(0, 0) = 1;
  p.layers[0].W(0, 1) = 2;
  p.layers[0].W(1, 0) = 3;
  p.layers[0].W(1, 1) = -1;
  p.layers[0].b << 0.5, -1;
  p.layers[1].W << 2, -1;
  p.layers[1].b << 0.25;
  Vec8 x = Vec8::Zero();
  x[0] = 1;
  x[1] = -1;
  // hidden = relu(1 - 2 + 0.5, 3 + 1 - 1) = (0, 3); output = 2*0 - 3 + 0.25
  CHECK(forward(p, spec, x) == -2.75);
}

TEST_CASE("forward rejects non-finite input") {
  const NetSpec spec = resnet(1, 4);
  const auto p = init(spec, 1);
  Vec8 x = Vec8::Zero();
  x[2] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(forward(p, spec, x), ValidationError);
  x[2] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(forward(p, spec, x), ValidationError);
}

TEST_CASE("single-sample and batched forward agree") {
  std::mt19937_64 rng(5);
  NetSpec spec = resnet(12, 16);
  NetParams p = init(spec, 6);
  randomize(spec, p, rng);
  const StateMatrix X = random_states(64, rng, 2.0);
  const Eigen::VectorXd yb = forward_batch(p, spec, X);
  for (int i = 0; i < X.rows(); ++i)
    CHECK(forward(p, spec, X.row(i).transpose()) == doctest::Approx(yb[i]).epsilon(1e-12));
}

TEST_CASE("analytic gradient matches central differences") {
  std::mt19937_64 rng(11);
  double worst = 0.0;
  for (int net = 0; net < 20; ++net) {
    NetSpec spec = net % 2 == 0 ? resnet(1 + net % 5, 4 + net % 7, net % 4 == 0 ? Shortcut::Identity : Shortcut::Affine)
                                : mlp(1 + net % 4, 3 + net % 9);
    NetParams p = init(spec, 100 + net);
    randomize(spec, p, rng);
    const StateMatrix X = random_states(16, rng);
    const Eigen::VectorXd u = Eigen::VectorXd::Random(16);
    const auto gc = check_gradient(p, spec, X, u, 50, 200 + net);
    worst = std::max(worst, gc.max_relative_error);
  }
  MESSAGE("worst relative gradient error " << worst);
  CHECK(worst <= 1e-4);
}

TEST_CASE("gradient vanishes at an exact fit and ignores duplication") {
  std::mt19937_64 rng(12);
  NetSpec spec = resnet(3, 8);
  NetParams p = init(spec, 13);
  randomize(spec, p, rng);
  const StateMatrix X = random_states(10, rng);
  const Eigen::VectorXd fit = forward_batch(p, spec, X);
  const auto at_fit = gradient(p, spec, X, fit);
  CHECK(at_fit.loss == 0.0);
  CHECK(at_fit.grad.flatten().isZero(0));

  const Eigen::VectorXd u = Eigen::VectorXd::Random(10);
  StateMatrix X2(20, kStateDim);
  X2 << X, X;
  Eigen::VectorXd u2(20);
  u2 << u, u;
  const auto g1 = gradient(p, spec, X, u), g2 = gradient(p, spec, X2, u2);
  CHECK(g2.loss == doctest::Approx(g1.loss).epsilon(1e-14));
  CHECK((g1.grad.flatten() - g2.grad.flatten()).cwiseAbs().maxCoeff() <= 1e-14);
  CHECK_THROWS_AS(gradient(p, spec, StateMatrix(0, kStateDim), Eigen::VectorXd(0)), ValidationError);
}

TEST_CASE("memorizes ten points") {
  std::mt19937_64 rng(21);
  io::Dataset d;
  d.X = random_states(10, rng);
  d.u = Eigen::VectorXd::Random(10);
  TrainConfig cfg;
  cfg.batch_size = 10;
  cfg.steps = 4000;
  cfg.learning_rate = 3e-3;
  cfg.learning_rate_min = 1e-6;
  cfg.validation_fraction = 0.0;
  const auto r = train(resnet(2, 32), d, cfg);
  const double mse = (forward_batch(r.params, r.spec, d.X) - d.u).squaredNorm() / 10;
  MESSAGE("memorization MSE " << mse);
  CHECK(mse <= 1e-6);
  CHECK(r.log.steps == 4000);
}

TEST_CASE("learns a saturated affine map along one axis") {
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> a(-2.0, 2.0);
  auto target = [](double x) { return std::clamp(3.0 * x - 1.0, -2.0, 2.0); };
  auto sample = [&](int n) {
    io::Dataset d;
    d.resize(n);
    d.X.setZero();
    for (int i = 0; i < n; ++i) {
      d.X(i, 0) = a(rng);
      d.u[i] = target(d.X(i, 0));
    }
    return d;
  };
  const auto tr = sample(4096), te = sample(1000);
  TrainConfig cfg;
  cfg.batch_size = 256;
  cfg.steps = 3000;
  cfg.learning_rate = 3e-3;
  cfg.learning_rate_min = 1e-5;
  cfg.seed = 5;
  const auto r = train(resnet(2, 16), tr, cfg);
  const double mse = (forward_batch(r.params, r.spec, te.X) - te.u).squaredNorm() / te.size();
  MESSAGE("saturated affine test MSE " << mse);
  CHECK(mse <= 1e-4);
}

TEST_CASE("training is deterministic and spends exactly the step budget") {
  std::mt19937_64 rng(31);
  io::Dataset d;
  d.X = random_states(3000, rng);
  d.u = d.X.col(0).array().sin() + d.X.col(3).array();
  TrainConfig cfg;
  cfg.batch_size = 128;
  cfg.steps = 150;
  cfg.eval_interval = 25;
  const auto a = train(resnet(3, 8), d, cfg), b = train(resnet(3, 8), d, cfg);
  CHECK(a.params.flatten() == b.params.flatten());
  CHECK(a.spec.norm.mu == b.spec.norm.mu);
  CHECK(a.log.steps == 150);
  CHECK(a.log.entries.size() == 6);
  CHECK(a.log.val_size == 150);
  CHECK(a.log.entries.back().val_loss < a.log.entries.front().val_loss);
  // Returned weights are already in single-precision deployment form.
  const Eigen::VectorXd t = a.params.flatten();
  CHECK(t == t.cast<float>().cast<double>());
}

TEST_CASE("divergence aborts training") {
  std::mt19937_64 rng(32);
  io::Dataset d;
  d.X = random_states(256, rng);
  d.u = Eigen::VectorXd::Random(256);
  TrainConfig cfg;
  cfg.batch_size = 64;
  cfg.steps = 50;
  cfg.learning_rate = 1e300;
  cfg.learning_rate_min = 1e300;
  CHECK_THROWS_AS(train(resnet(2, 8), d, cfg), InvariantViolation);

  TrainConfig bad;
  bad.batch_size = 0;
  CHECK_THROWS_AS(train(resnet(2, 8), d, bad), ValidationError);
  CHECK_THROWS_AS(train(resnet(2, 8), io::Dataset{}, TrainConfig{}), ValidationError);
}

TEST_CASE("forward is continuous and piecewise affine") {
  std::mt19937_64 rng(41);
  NetSpec spec = resnet(12, 16);
  NetParams p = init(spec, 42);
  randomize(spec, p, rng);

  // Lipschitz bound from spectral norms of the composed maps.
  auto op = [](const Eigen::MatrixXd& M) { return Eigen::JacobiSVD<Eigen::MatrixXd>(M).singularValues()[0]; };
  double L = op(p.layers.back().W) * op(p.layers.front().W);
  for (int k = 0; k < spec.depth; ++k)
    L *= op(p.layers[3 + 3 * k].W) + op(p.layers[2 + 3 * k].W) * op(p.layers[1 + 3 * k].W);
  L /= (spec.norm.sigma.array().sqrt() + spec.norm.epsilon).minCoeff();

  std::normal_distribution<double> g(0.0, 1.0);
  int kinks_probed = 0;
  for (int t = 0; t < 200; ++t) {
    Vec8 x, dir;
    for (int j = 0; j < kStateDim; ++j) {
      x[j] = g(rng);
      dir[j] = g(rng);
    }
    dir.normalize();
    const double delta = 1e-3;
    const double f0 = forward(p, spec, x), f1 = forward(p, spec, x + delta * dir);
    CHECK(std::abs(f1 - f0) <= L * delta * (1 + 1e-12));

    // Three-point collinearity along a short segment.
    const double h = 1e-7;
    const double fm = forward(p, spec, x - h * dir), fp = forward(p, spec, x + h * dir);
    CHECK(std::abs(fp - 2 * f0 + fm) <= 1e-6);

    // A kink between x and x + 0.5 dir shows up as a slope change; bisect it and
    // check that the values on both sides still meet.
    const double s0 = (forward(p, spec, x + 1e-6 * dir) - f0) / 1e-6;
    const Vec8 far = x + 0.5 * dir;
    const double s1 = (forward(p, spec, far + 1e-6 * dir) - forward(p, spec, far)) / 1e-6;
    if (std::abs(s1 - s0) > 1e-3) {
      double lo = 0.0, hi = 0.5;
      for (int it = 0; it < 40; ++it) {
        const double mid = 0.5 * (lo + hi);
        const Vec8 xm = x + mid * dir;
        const double sm = (forward(p, spec, xm + 1e-9 * dir) - forward(p, spec, xm)) / 1e-9;
        (std::abs(sm - s0) > 1e-3 ? hi : lo) = mid;
      }
      const double jump = std::abs(forward(p, spec, x + hi * dir) - forward(p, spec, x + lo * dir));
      CHECK(jump <= L * (hi - lo) * (1 + 1e-9) + 1e-12);
      ++kinks_probed;
    }
  }
  MESSAGE("kinks probed " << kinks_probed);
  CHECK(kinks_probed > 0);
}

TEST_CASE("footprint accounting") {
  const NetSpec spec = resnet(12, 16);
  const auto f = footprint(spec, init(spec, 1));
  CHECK(f.parameter_count == 9953);
  CHECK(f.param_bytes == 9953 * 4);
  CHECK(f.matmul_count == 38);
  CHECK(f.file_bytes >= 40000);
  CHECK(f.file_bytes <= 44000);
  CHECK(f.peak_ram_bytes == (272 + 48) * 4);

  const NetSpec id = resnet(12, 16, Shortcut::Identity);
  CHECK(footprint(id, init(id, 1)).matmul_count == 26);
  const NetSpec empty = resnet(0, 16);
  CHECK(footprint(empty, init(empty, 1)).matmul_count == 2);
  const NetSpec m = mlp(0, 4);
  CHECK(footprint(m, init(m, 1)).matmul_count == 1);
}

TEST_CASE("weights file round trip is bitwise") {
  std::mt19937_64 rng(51);
  for (const NetSpec& base : {resnet(12, 16), resnet(2, 5, Shortcut::Identity), mlp(3, 7)}) {
    NetSpec spec = base;
    NetParams p = init(spec, 52);
    randomize(spec, p, rng);
    round_to_float(spec, p);
    const auto path = tmp("w.nnw");
    save_weights(path, spec, p);
    CHECK(std::filesystem::file_size(path) == footprint(spec, p).file_bytes);
    const auto [s2, p2] = load_weights(path);
    CHECK(s2.kind == spec.kind);
    CHECK(s2.shortcut == spec.shortcut);
    CHECK(s2.depth == spec.depth);
    CHECK(s2.width == spec.width);
    CHECK(p2.flatten() == p.flatten());
    const StateMatrix X = random_states(100, rng, 5.0);
    const Eigen::VectorXd a = forward_batch(p, spec, X), b = forward_batch(p2, s2, X);
    CHECK(std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0);
  }
}

TEST_CASE("corrupt weights files are rejected") {
  const NetSpec spec = resnet(2, 4);
  const auto p = init(spec, 1);
  const auto path = tmp("c.nnw");
  save_weights(path, spec, p);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& b) {
    std::ofstream o(path, std::ios::binary | std::ios::trunc);
    o.write(b.data(), static_cast<std::streamsize>(b.size()));
  };
  std::string bad = bytes;
  bad[0] = 'X';
  write(bad);
  CHECK_THROWS_AS(load_weights(path), IoError);
  write(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(load_weights(path), IoError);
  write(bytes + "z");
  CHECK_THROWS_AS(load_weights(path), IoError);
  bad = bytes;
  bad[20] = 0;  // width 0
  write(bad);
  CHECK_THROWS_AS(load_weights(path), IoError);
  CHECK_THROWS_AS(load_weights(tmp("missing.nnw")), IoError);
}
