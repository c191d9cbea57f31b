#include "osd/neural.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

namespace osd::neural {

using Eigen::MatrixXd;
using Eigen::VectorXd;

Normalization Normalization::fit(const StateMatrix& X) {
  require(X.rows() >= 1, "Normalization::fit: empty data");
  Normalization n;
  n.mu = X.colwise().mean().transpose();
  Vec8 var = Vec8::Zero();
  for (Eigen::Index i = 0; i < X.rows(); ++i) var += (X.row(i).transpose() - n.mu).cwiseAbs2();
  var /= static_cast<double>(X.rows());
  // Constant features keep unit scale.
  for (int j = 0; j < kStateDim; ++j) n.sigma[j] = var[j] > 0 ? var[j] : 1.0;
  return n;
}

void NetSpec::validate() const {
  require(input_dim == kStateDim && output_dim == 1, "NetSpec: only 8 inputs and 1 output are supported");
  require(width >= 1, "NetSpec: width must be >= 1");
  require(depth >= 0, "NetSpec: depth must be >= 0");
  require(norm.mu.allFinite() && norm.sigma.allFinite() && (norm.sigma.array() > 0).all(),
          "NetSpec: normalization sigma must be positive");
  require(norm.epsilon >= 0, "NetSpec: normalization epsilon must be >= 0");
}

std::vector<std::pair<int, int>> layer_shapes(const NetSpec& spec) {
  spec.validate();
  std::vector<std::pair<int, int>> s;
  const int w = spec.width;
  if (spec.kind == Kind::ResNet) {
    s.emplace_back(w, spec.input_dim);
    for (int k = 0; k < spec.depth; ++k) {
      s.emplace_back(w, w);
      s.emplace_back(w, w);
      if (spec.shortcut == Shortcut::Affine) s.emplace_back(w, w);
    }
    s.emplace_back(spec.output_dim, w);
  } else {
    int in = spec.input_dim;
    for (int k = 0; k < spec.depth; ++k) {
      s.emplace_back(w, in);
      in = w;
    }
    s.emplace_back(spec.output_dim, in);
  }
  return s;
}

std::size_t NetParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += static_cast<std::size_t>(l.W.size() + l.b.size());
  return n;
}

VectorXd NetParams::flatten() const {
  VectorXd t(parameter_count());
  Eigen::Index o = 0;
  for (const auto& l : layers) {
    for (Eigen::Index i = 0; i < l.W.rows(); ++i)
      for (Eigen::Index j = 0; j < l.W.cols(); ++j) t[o++] = l.W(i, j);
    t.segment(o, l.b.size()) = l.b;
    o += l.b.size();
  }
  return t;
}

void NetParams::unflatten(const VectorXd& t) {
  require(static_cast<std::size_t>(t.size()) == parameter_count(), "NetParams::unflatten: size mismatch");
  Eigen::Index o = 0;
  for (auto& l : layers) {
    for (Eigen::Index i = 0; i < l.W.rows(); ++i)
      for (Eigen::Index j = 0; j < l.W.cols(); ++j) l.W(i, j) = t[o++];
    l.b = t.segment(o, l.b.size());
    o += l.b.size();
  }
}

NetParams NetParams::zeros_like() const {
  NetParams z;
  for (const auto& l : layers) z.layers.push_back({MatrixXd::Zero(l.W.rows(), l.W.cols()), VectorXd::Zero(l.b.size())});
  return z;
}

namespace {

bool is_shortcut_layer(const NetSpec& spec, std::size_t idx) {
  return spec.kind == Kind::ResNet && spec.shortcut == Shortcut::Affine && idx >= 1 && (idx - 1) % 3 == 2 &&
         static_cast<int>(idx) <= 3 * spec.depth;
}

void check_shapes(const NetParams& params, const NetSpec& spec) {
  const auto shapes = layer_shapes(spec);
  require(params.layers.size() == shapes.size(), "NetParams: layer count does not match the spec");
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto& l = params.layers[i];
    require(l.W.rows() == shapes[i].first && l.W.cols() == shapes[i].second && l.b.size() == shapes[i].first,
            "NetParams: layer shape does not match the spec");
  }
}

MatrixXd normalize(const NetSpec& spec, const StateMatrix& X) {
  MatrixXd Z = X.transpose();  // features x batch
  const Vec8 scale = (spec.norm.sigma.array().sqrt() + spec.norm.epsilon).inverse();
  for (Eigen::Index c = 0; c < Z.cols(); ++c) Z.col(c) = (Z.col(c) - spec.norm.mu).cwiseProduct(scale);
  return Z;
}

MatrixXd affine(const Layer& l, const MatrixXd& Y) {
  MatrixXd out = l.W * Y;
  out.colwise() += l.b;
  return out;
}

// Activations kept for the backward pass.
struct Tape {
  MatrixXd z;               // normalized input
  std::vector<MatrixXd> y;  // ResNet: residual stream entering each block, plus the final one
  std::vector<MatrixXd> a;  // pre-activations of ReLU layers
  std::vector<MatrixXd> h;  // post-activations of ReLU layers
  MatrixXd out;
};

void run_forward(const NetParams& p, const NetSpec& spec, const StateMatrix& X, Tape& t) {
  t.z = normalize(spec, X);
  t.y.clear();
  t.a.clear();
  t.h.clear();
  if (spec.kind == Kind::ResNet) {
    MatrixXd y = affine(p.layers[0], t.z);
    std::size_t li = 1;
    for (int k = 0; k < spec.depth; ++k) {
      t.y.push_back(y);
      MatrixXd a1 = affine(p.layers[li], y);
      MatrixXd h1 = a1.cwiseMax(0.0);
      MatrixXd a2 = affine(p.layers[li + 1], h1);
      MatrixXd h2 = a2.cwiseMax(0.0);
      if (spec.shortcut == Shortcut::Affine) {
        y = affine(p.layers[li + 2], y) + h2;
        li += 3;
      } else {
        y += h2;
        li += 2;
      }
      t.a.push_back(std::move(a1));
      t.h.push_back(std::move(h1));
      t.a.push_back(std::move(a2));
      t.h.push_back(std::move(h2));
    }
    t.y.push_back(y);
    t.out = affine(p.layers[li], y);
  } else {
    MatrixXd h = t.z;
    t.h.push_back(h);  // h[0] is the layer input
    for (int k = 0; k < spec.depth; ++k) {
      MatrixXd a = affine(p.layers[k], h);
      h = a.cwiseMax(0.0);
      t.a.push_back(std::move(a));
      t.h.push_back(h);
    }
    t.out = affine(p.layers[spec.depth], h);
  }
}

void accumulate(Layer& g, const MatrixXd& delta, const MatrixXd& input) {
  g.W.noalias() += delta * input.transpose();
  g.b += delta.rowwise().sum();
}

}  // namespace

NetParams init(const NetSpec& spec, std::uint64_t seed) {
  const auto shapes = layer_shapes(spec);
  std::mt19937_64 rng(seed);
  NetParams p;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto [rows, cols] = shapes[i];
    Layer l{MatrixXd(rows, cols), VectorXd::Zero(rows)};
    if (is_shortcut_layer(spec, i)) {
      l.W.setIdentity();
    } else {
      const double bound = std::sqrt(6.0 / cols);
      std::uniform_real_distribution<double> u(-bound, bound);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) l.W(r, c) = u(rng);
    }
    p.layers.push_back(std::move(l));
  }
  return p;
}

void round_to_float(NetSpec& spec, NetParams& params) {
  auto r = [](auto& m) { m = m.template cast<float>().template cast<double>(); };
  for (auto& l : params.layers) {
    r(l.W);
    r(l.b);
  }
  r(spec.norm.mu);
  r(spec.norm.sigma);
  spec.norm.epsilon = static_cast<double>(static_cast<float>(spec.norm.epsilon));
}

VectorXd forward_batch(const NetParams& params, const NetSpec& spec, const StateMatrix& X) {
  check_shapes(params, spec);
  require(X.allFinite(), "forward: non-finite input");
  Tape t;
  run_forward(params, spec, X, t);
  return t.out.row(0).transpose();
}

double forward(const NetParams& params, const NetSpec& spec, const Vec8& x) {
  check_shapes(params, spec);
  require(x.allFinite(), "forward: non-finite input");
  const Vec8 scale = (spec.norm.sigma.array().sqrt() + spec.norm.epsilon).inverse();
  const Vec8 z = (x - spec.norm.mu).cwiseProduct(scale);
  const auto& L = params.layers;
  if (spec.kind == Kind::ResNet) {
    VectorXd y = L[0].W * z + L[0].b;
    VectorXd h(spec.width), s(spec.width);
    std::size_t li = 1;
    for (int k = 0; k < spec.depth; ++k) {
      h.noalias() = L[li].W * y;
      h = (h + L[li].b).cwiseMax(0.0);
      s.noalias() = L[li + 1].W * h;
      s = (s + L[li + 1].b).cwiseMax(0.0);
      if (spec.shortcut == Shortcut::Affine) {
        h.noalias() = L[li + 2].W * y;
        y = h + L[li + 2].b + s;
        li += 3;
      } else {
        y += s;
        li += 2;
      }
    }
    return L[li].W.row(0).dot(y) + L[li].b[0];
  }
  VectorXd h = z;
  for (int k = 0; k < spec.depth; ++k) h = (L[k].W * h + L[k].b).cwiseMax(0.0);
  return L[spec.depth].W.row(0).dot(h) + L[spec.depth].b[0];
}

LossGradient gradient(const NetParams& params, const NetSpec& spec, const StateMatrix& X, const VectorXd& u) {
  check_shapes(params, spec);
  require(X.rows() >= 1 && X.rows() == u.size(), "gradient: empty or mismatched batch");
  Tape t;
  run_forward(params, spec, X, t);
  const auto B = static_cast<double>(X.rows());
  const Eigen::RowVectorXd err = t.out.row(0) - u.transpose();
  LossGradient lg;
  lg.loss = err.squaredNorm() / B;
  lg.grad = params.zeros_like();
  auto& g = lg.grad.layers;
  MatrixXd dout = (2.0 / B) * err;  // 1 x B

  if (spec.kind == Kind::ResNet) {
    const std::size_t step = spec.shortcut == Shortcut::Affine ? 3 : 2;
    const std::size_t out_idx = 1 + step * spec.depth;
    accumulate(g[out_idx], dout, t.y.back());
    MatrixXd dy = params.layers[out_idx].W.transpose() * dout;
    for (int k = spec.depth - 1; k >= 0; --k) {
      const std::size_t li = 1 + step * k;
      const MatrixXd& y_in = t.y[k];
      const MatrixXd& a1 = t.a[2 * k];
      const MatrixXd& h1 = t.h[2 * k];
      const MatrixXd& a2 = t.a[2 * k + 1];
      MatrixXd da2 = (a2.array() > 0).select(dy, 0.0);
      accumulate(g[li + 1], da2, h1);
      MatrixXd dh1 = params.layers[li + 1].W.transpose() * da2;
      MatrixXd da1 = (a1.array() > 0).select(dh1, 0.0);
      accumulate(g[li], da1, y_in);
      MatrixXd dprev = params.layers[li].W.transpose() * da1;
      if (spec.shortcut == Shortcut::Affine) {
        accumulate(g[li + 2], dy, y_in);
        dprev.noalias() += params.layers[li + 2].W.transpose() * dy;
      } else {
        dprev += dy;
      }
      dy = std::move(dprev);
    }
    accumulate(g[0], dy, t.z);
  } else {
    const auto L = static_cast<std::size_t>(spec.depth);
    accumulate(g[L], dout, t.h[L]);
    MatrixXd dh = params.layers[L].W.transpose() * dout;
    for (std::size_t k = L; k-- > 0;) {
      MatrixXd da = (t.a[k].array() > 0).select(dh, 0.0);
      accumulate(g[k], da, t.h[k]);
      if (k > 0) dh = params.layers[k].W.transpose() * da;
    }
  }
  return lg;
}

GradientCheck check_gradient(const NetParams& params, const NetSpec& spec, const StateMatrix& X,
                             const VectorXd& u, int n_coordinates, std::uint64_t seed, double h, double floor) {
  require(n_coordinates >= 1 && h > 0 && floor > 0, "check_gradient: invalid arguments");
  const VectorXd g = gradient(params, spec, X, u).grad.flatten();
  const VectorXd theta = params.flatten();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Eigen::Index> pick(0, theta.size() - 1);
  NetParams probe = params;
  auto loss_at = [&](const VectorXd& t) {
    probe.unflatten(t);
    const VectorXd r = forward_batch(probe, spec, X) - u;
    return r.squaredNorm() / static_cast<double>(X.rows());
  };
  GradientCheck out;
  out.coordinates = n_coordinates;
  for (int c = 0; c < n_coordinates; ++c) {
    const Eigen::Index i = pick(rng);
    VectorXd tp = theta, tm = theta;
    tp[i] += h;
    tm[i] -= h;
    const double fd = (loss_at(tp) - loss_at(tm)) / (2 * h);
    const double rel = std::abs(g[i] - fd) / std::max({std::abs(g[i]), std::abs(fd), floor});
    out.max_relative_error = std::max(out.max_relative_error, rel);
  }
  return out;
}

void TrainConfig::validate() const {
  require(batch_size >= 1, "TrainConfig: batch size must be >= 1");
  require(learning_rate > 0 && learning_rate_min >= 0 && learning_rate_min <= learning_rate,
          "TrainConfig: invalid learning-rate schedule");
  require(epochs >= 1 || steps > 0, "TrainConfig: need epochs >= 1 or steps > 0");
  require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_epsilon > 0, "TrainConfig: invalid moments");
  require(validation_fraction >= 0 && validation_fraction < 1, "TrainConfig: validation fraction outside [0, 1)");
  require(patience >= 0 && eval_interval >= 0, "TrainConfig: negative patience or interval");
}

TrainResult train(NetSpec spec, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  require(data.size() >= 1, "train: empty dataset");
  require(data.X.allFinite() && data.u.allFinite(), "train: non-finite data");

  std::mt19937_64 rng(cfg.seed);
  const auto n = static_cast<Eigen::Index>(data.size());
  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  Eigen::Index n_val = static_cast<Eigen::Index>(std::floor(cfg.validation_fraction * static_cast<double>(n)));
  if (n - n_val < 1) n_val = 0;
  const Eigen::Index n_train = n - n_val;

  StateMatrix Xtr(n_train, kStateDim), Xval(n_val, kStateDim);
  VectorXd utr(n_train), uval(n_val);
  for (Eigen::Index i = 0; i < n_train; ++i) {
    Xtr.row(i) = data.X.row(order[i]);
    utr[i] = data.u[order[i]];
  }
  for (Eigen::Index i = 0; i < n_val; ++i) {
    Xval.row(i) = data.X.row(order[n_train + i]);
    uval[i] = data.u[order[n_train + i]];
  }

  spec.norm = Normalization::fit(Xtr);
  spec.validate();
  // Targets are standardized during training; the scaling is folded into the output layer at the end.
  const double u_mean = utr.mean();
  const double u_sd = std::max(std::sqrt((utr.array() - u_mean).square().mean()), 1e-12);
  const VectorXd ytr = (utr.array() - u_mean) / u_sd;
  const VectorXd yval = (uval.array() - u_mean) / u_sd;

  NetParams params = init(spec, rng());
  const std::size_t n_layers = params.layers.size();
  NetParams m = params.zeros_like(), v = params.zeros_like();

  const int B = static_cast<int>(std::min<Eigen::Index>(cfg.batch_size, n_train));
  const long steps_per_epoch = (n_train + B - 1) / B;
  const long total = cfg.steps > 0 ? cfg.steps : steps_per_epoch * cfg.epochs;
  const long interval = cfg.eval_interval > 0 ? cfg.eval_interval : std::max<long>(1, total / 100);

  auto val_loss = [&](const NetParams& p) {
    const StateMatrix& Xe = n_val > 0 ? Xval : Xtr;
    const VectorXd& ye = n_val > 0 ? yval : ytr;
    double s = 0.0;
    constexpr Eigen::Index kChunk = 8192;
    for (Eigen::Index i = 0; i < Xe.rows(); i += kChunk) {
      const Eigen::Index c = std::min(kChunk, Xe.rows() - i);
      const VectorXd pred = forward_batch(p, spec, Xe.middleRows(i, c));
      s += (pred - ye.segment(i, c)).squaredNorm();
    }
    return s / static_cast<double>(Xe.rows());
  };

  TrainResult res;
  res.log.train_size = static_cast<std::size_t>(n_train);
  res.log.val_size = static_cast<std::size_t>(n_val);
  NetParams best = params;
  double best_val = std::numeric_limits<double>::infinity();
  int stale = 0;

  std::vector<Eigen::Index> perm(n_train);
  std::iota(perm.begin(), perm.end(), 0);
  Eigen::Index cursor = n_train;  // forces a shuffle on the first step
  StateMatrix Xb(B, kStateDim);
  VectorXd yb(B);
  double running = 0.0;
  long running_n = 0;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  double b1t = 1.0, b2t = 1.0;

  long step = 0;
  for (; step < total; ++step) {
    if (cursor + B > n_train) {
      std::shuffle(perm.begin(), perm.end(), rng);
      cursor = 0;
    }
    for (int i = 0; i < B; ++i) {
      Xb.row(i) = Xtr.row(perm[cursor + i]);
      yb[i] = ytr[perm[cursor + i]];
    }
    cursor += B;

    const LossGradient lg = gradient(params, spec, Xb, yb);
    if (!std::isfinite(lg.loss)) {
      throw InvariantViolation("train: loss diverged at step " + std::to_string(step) + " (learning rate " +
                               std::to_string(cfg.learning_rate) + ")");
    }
    running += lg.loss;
    ++running_n;

    const double progress = static_cast<double>(step) / static_cast<double>(std::max<long>(1, total - 1));
    const double lr = cfg.learning_rate_min +
                      0.5 * (cfg.learning_rate - cfg.learning_rate_min) * (1.0 + std::cos(M_PI * progress));
    b1t *= b1;
    b2t *= b2;
    const double c1 = 1.0 / (1.0 - b1t), c2 = 1.0 / (1.0 - b2t);
    for (std::size_t li = 0; li < n_layers; ++li) {
      auto update = [&](auto& w, auto& mm, auto& vv, const auto& gg) {
        mm = b1 * mm + (1 - b1) * gg;
        vv = b2 * vv + (1 - b2) * gg.cwiseAbs2();
        w.array() -= lr * (mm.array() * c1) / ((vv.array() * c2).sqrt() + cfg.adam_epsilon);
      };
      update(params.layers[li].W, m.layers[li].W, v.layers[li].W, lg.grad.layers[li].W);
      update(params.layers[li].b, m.layers[li].b, v.layers[li].b, lg.grad.layers[li].b);
    }

    if ((step + 1) % interval == 0 || step + 1 == total) {
      const double vl = val_loss(params);
      if (!std::isfinite(vl)) throw InvariantViolation("train: validation loss diverged at step " + std::to_string(step));
      res.log.entries.push_back({step + 1, running / running_n, vl, lr});
      running = 0.0;
      running_n = 0;
      if (vl < best_val) {
        best_val = vl;
        best = params;
        res.log.best_step = step + 1;
        stale = 0;
      } else if (cfg.patience > 0 && ++stale >= cfg.patience) {
        ++step;
        break;
      }
    }
  }
  res.log.steps = step;
  res.log.best_val_loss = best_val * u_sd * u_sd;

  // Fold the target scaling into the output layer.
  Layer& out = best.layers.back();
  out.W *= u_sd;
  out.b = out.b * u_sd + VectorXd::Constant(out.b.size(), u_mean);
  round_to_float(spec, best);
  res.spec = spec;
  res.params = std::move(best);
  spdlog::info("train: {} steps, best validation MSE {:.6g} at step {}", res.log.steps, res.log.best_val_loss,
               res.log.best_step);
  return res;
}

Footprint footprint(const NetSpec& spec, const NetParams& params, int precision_bytes) {
  check_shapes(params, spec);
  require(precision_bytes == 4 || precision_bytes == 8, "footprint: precision must be 4 or 8 bytes");
  Footprint f;
  f.parameter_count = params.parameter_count();
  f.param_bytes = f.parameter_count * precision_bytes;
  f.matmul_count = static_cast<int>(params.layers.size());
  std::size_t largest = 0;
  for (const auto& l : params.layers) largest = std::max<std::size_t>(largest, l.W.size() + l.b.size());
  // Residual stream, hidden buffer and output buffer of one block.
  const std::size_t activations = static_cast<std::size_t>(std::max(spec.width, spec.input_dim)) * 3;
  f.peak_ram_bytes = (largest + activations) * precision_bytes;
  f.file_bytes = 32 + (2 * kStateDim + 1) * 4 + params.layers.size() * 8 + f.parameter_count * 4;
  return f;
}

// ---------------------------------------------------------------------------
// File layout (little-endian):
//   "NNW1", u32 kind, u32 input_dim, u32 output_dim, u32 depth, u32 width, u32 shortcut, u32 precision (=4)
//   f32 mu[8], f32 sigma[8], f32 epsilon
//   per layer: u32 rows, u32 cols, f32 W[rows*cols] row-major, f32 b[rows]

namespace {

void put_u32(std::ofstream& o, std::uint32_t v) { o.write(reinterpret_cast<const char*>(&v), 4); }
void put_f32(std::ofstream& o, double v) {
  const float f = static_cast<float>(v);
  o.write(reinterpret_cast<const char*>(&f), 4);
}
std::uint32_t get_u32(std::ifstream& i) {
  std::uint32_t v = 0;
  i.read(reinterpret_cast<char*>(&v), 4);
  if (!i) throw IoError("weights file truncated");
  return v;
}
double get_f32(std::ifstream& i) {
  float f = 0;
  i.read(reinterpret_cast<char*>(&f), 4);
  if (!i) throw IoError("weights file truncated");
  return f;
}

}  // namespace

void save_weights(const std::filesystem::path& path, const NetSpec& spec, const NetParams& params) {
  check_shapes(params, spec);
  std::ofstream o(path, std::ios::binary);
  if (!o) throw IoError("cannot open " + path.string() + " for writing");
  o.write("NNW1", 4);
  put_u32(o, spec.kind == Kind::ResNet ? 1 : 0);
  put_u32(o, static_cast<std::uint32_t>(spec.input_dim));
  put_u32(o, static_cast<std::uint32_t>(spec.output_dim));
  put_u32(o, static_cast<std::uint32_t>(spec.depth));
  put_u32(o, static_cast<std::uint32_t>(spec.width));
  put_u32(o, spec.shortcut == Shortcut::Affine ? 1 : 0);
  put_u32(o, 4);
  for (int j = 0; j < kStateDim; ++j) put_f32(o, spec.norm.mu[j]);
  for (int j = 0; j < kStateDim; ++j) put_f32(o, spec.norm.sigma[j]);
  put_f32(o, spec.norm.epsilon);
  for (const auto& l : params.layers) {
    put_u32(o, static_cast<std::uint32_t>(l.W.rows()));
    put_u32(o, static_cast<std::uint32_t>(l.W.cols()));
    for (Eigen::Index r = 0; r < l.W.rows(); ++r)
      for (Eigen::Index c = 0; c < l.W.cols(); ++c) put_f32(o, l.W(r, c));
    for (Eigen::Index r = 0; r < l.b.size(); ++r) put_f32(o, l.b[r]);
  }
  o.close();
  if (!o) throw IoError("write failed: " + path.string());
}

std::pair<NetSpec, NetParams> load_weights(const std::filesystem::path& path) {
  std::ifstream i(path, std::ios::binary);
  if (!i) throw IoError("cannot open " + path.string());
  char magic[4];
  i.read(magic, 4);
  if (!i || std::memcmp(magic, "NNW1", 4) != 0) throw IoError("bad weights magic in " + path.string());
  NetSpec spec;
  const std::uint32_t kind = get_u32(i);
  if (kind > 1) throw IoError("unknown network kind in " + path.string());
  spec.kind = kind == 1 ? Kind::ResNet : Kind::Mlp;
  spec.input_dim = static_cast<int>(get_u32(i));
  spec.output_dim = static_cast<int>(get_u32(i));
  spec.depth = static_cast<int>(get_u32(i));
  spec.width = static_cast<int>(get_u32(i));
  const std::uint32_t shortcut = get_u32(i);
  if (shortcut > 1) throw IoError("unknown shortcut kind in " + path.string());
  spec.shortcut = shortcut == 1 ? Shortcut::Affine : Shortcut::Identity;
  if (get_u32(i) != 4) throw IoError("unsupported precision in " + path.string());
  for (int j = 0; j < kStateDim; ++j) spec.norm.mu[j] = get_f32(i);
  for (int j = 0; j < kStateDim; ++j) spec.norm.sigma[j] = get_f32(i);
  spec.norm.epsilon = get_f32(i);
  std::vector<std::pair<int, int>> shapes;
  try {
    shapes = layer_shapes(spec);
  } catch (const ValidationError& e) {
    throw IoError(std::string("invalid header in ") + path.string() + ": " + e.what());
  }
  NetParams p;
  for (const auto& [rows, cols] : shapes) {
    if (get_u32(i) != static_cast<std::uint32_t>(rows) || get_u32(i) != static_cast<std::uint32_t>(cols)) {
      throw IoError("layer shape mismatch in " + path.string());
    }
    Layer l{MatrixXd(rows, cols), VectorXd(rows)};
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) l.W(r, c) = get_f32(i);
    for (int r = 0; r < rows; ++r) l.b[r] = get_f32(i);
    p.layers.push_back(std::move(l));
  }
  if (i.peek() != std::char_traits<char>::eof()) throw IoError("trailing bytes in " + path.string());
  return {spec, p};
}

}  // namespace osd::neural
