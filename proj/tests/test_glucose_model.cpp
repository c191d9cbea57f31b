#include "doctest.h"

#include "osd/glucose_model.hpp"

#include <cmath>
#include <random>
#include <vector>

using namespace osd;
using namespace osd::glucose;

namespace {

PlantState equilibrium(const SubjectParams& p) { return steady_state(p, p.basal_rate()); }

}  // namespace

TEST_CASE("nonlinear_rhs vanishes at the basal equilibrium") {
  SubjectParams p;
  const auto s = equilibrium(p);
  CHECK(s.chi == doctest::Approx(0.0));
  CHECK(s.I_p == doctest::Approx(p.I_b));
  const auto dx = nonlinear_rhs(s, p.basal_rate(), p);
  CHECK(dx.cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("disturbance enters the glucose equation additively") {
  SubjectParams p;
  auto s = equilibrium(p);
  s.d = 1.0;
  const auto dx = nonlinear_rhs(s, p.basal_rate(), p);
  CHECK(dx[0] == doctest::Approx(1.0));
  CHECK(dx.tail<5>().cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("glucose derivative by direct evaluation") {
  SubjectParams p;
  p.S_g = 0.01;
  p.G_b = 120;
  p.S_i = 5e-4;
  PlantState s = equilibrium(p);
  s.G = 220;
  s.chi = 10;
  s.d = 0;
  CHECK(nonlinear_rhs(s, p.basal_rate(), p)[0] == doctest::Approx(-2.1).epsilon(1e-12));
}

TEST_CASE("nonlinear_rhs rejects non-finite state") {
  SubjectParams p;
  PlantState s = equilibrium(p);
  s.G = std::nan("");
  CHECK_THROWS_AS(nonlinear_rhs(s, 1.0, p), ValidationError);
}

TEST_CASE("RK4 preserves the fixed point") {
  SubjectParams p;
  const auto s = equilibrium(p);
  const auto s1 = integrate_step(s, p.basal_rate(), 5.0, p);
  CHECK((s1.to_vector() - s.to_vector()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("RK4 observed order on a smooth trajectory") {
  SubjectParams p;
  PlantState s0 = equilibrium(p);
  s0.G = 200;
  s0.d = 1.5;
  auto run = [&](double dt) {
    PlantState s = s0;
    const int steps = static_cast<int>(std::lround(240.0 / dt));
    for (int i = 0; i < steps; ++i) s = integrate_step(s, 3.0 * p.basal_rate(), dt, p);
    return s.to_vector();
  };
  const auto x1 = run(8.0), x2 = run(4.0), x3 = run(2.0);
  const double e1 = (x1 - x2).norm(), e2 = (x2 - x3).norm();
  const double order = std::log2(e1 / e2);
  MESSAGE("observed RK4 order " << order);
  CHECK(order >= 3.5);
}

TEST_CASE("without delivery insulin compartments decay monotonically") {
  SubjectParams p;
  PlantState s = equilibrium(p);
  for (int i = 0; i < 72; ++i) {
    const PlantState n = integrate_step(s, 0.0, 5.0, p);
    CHECK(n.I_sc1 < s.I_sc1);
    CHECK(n.I_sc2 < s.I_sc2);
    CHECK(n.I_p < s.I_p);
    s = n;
  }
}

TEST_CASE("glucose is clamped at the floor") {
  SubjectParams p;
  PlantState s = equilibrium(p);
  s.G = 2.0;
  s.d = -50.0;
  const auto n = integrate_step(s, p.basal_rate(), 5.0, p);
  CHECK(n.G == kGlucoseFloor);
}

TEST_CASE("linearize matches hand partial derivatives") {
  SubjectParams p;
  const auto cm = linearize(p, 120.0, p.basal_rate());
  CHECK(cm.A(0, 0) == doctest::Approx(-p.S_g));
  CHECK(cm.A(0, 1) == doctest::Approx(-p.S_i * 120.0));
  CHECK(cm.B_d == Vec5::Unit(0));
  CHECK(cm.B_u == Vec5::Unit(2));
}

TEST_CASE("linearize agrees with a central finite-difference Jacobian") {
  SubjectParams p;
  p.S_i = 7e-4;
  p.k_cl = 0.11;
  const double ub = p.basal_rate();
  const auto cm = linearize(p, 120.0, ub);
  PlantState op = steady_state(p, ub);
  op.G = 120.0;
  // map model index -> plant vector index (plant vector has d at position 2)
  const int idx[5] = {0, 1, 3, 4, 5};
  Mat5 fd;
  for (int j = 0; j < 5; ++j) {
    const double h = 1e-4 * std::max(1.0, std::abs(op.to_vector()[idx[j]]));
    auto plus = op.to_vector(), minus = op.to_vector();
    plus[idx[j]] += h;
    minus[idx[j]] -= h;
    const auto fp = nonlinear_rhs(PlantState::from_vector(plus), ub, p);
    const auto fm = nonlinear_rhs(PlantState::from_vector(minus), ub, p);
    for (int i = 0; i < 5; ++i) fd(i, j) = (fp[idx[i]] - fm[idx[i]]) / (2 * h);
  }
  CHECK((fd - cm.A).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("discretize special cases") {
  SUBCASE("zero dynamics") {
    Eigen::MatrixXd Ac = Eigen::MatrixXd::Zero(5, 5);
    Eigen::MatrixXd Bc = Eigen::MatrixXd::Random(5, 1);
    auto [A, B] = discretize_zoh(Ac, Bc, 5.0);
    CHECK(A.isIdentity(1e-14));
    CHECK((B - Bc * 5.0).cwiseAbs().maxCoeff() < 1e-13);
  }
  SUBCASE("scalar closed form") {
    Eigen::MatrixXd Ac(1, 1), Bc(1, 1);
    Ac << -0.1;
    Bc << 1.0;
    auto [A, B] = discretize_zoh(Ac, Bc, 5.0);
    CHECK(A(0, 0) == doctest::Approx(std::exp(-0.5)).epsilon(1e-14));
    CHECK(B(0, 0) == doctest::Approx((1 - std::exp(-0.5)) / 0.1).epsilon(1e-12));
  }
}

TEST_CASE("ZOH semigroup property") {
  SubjectParams p;
  const auto cm = linearize(p, 120.0, p.basal_rate());
  const auto full = discretize(cm, 5.0);
  const auto half = discretize(cm, 2.5);
  const Mat5 A2 = half.A * half.A;
  const Vec5 Bu2 = half.A * half.B_u + half.B_u;
  const Vec5 Bd2 = half.A * half.B_d + half.B_d;
  CHECK((A2 - full.A).cwiseAbs().maxCoeff() <= 1e-10);
  CHECK((Bu2 - full.B_u).cwiseAbs().maxCoeff() <= 1e-10);
  CHECK((Bd2 - full.B_d).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("discrete model matches the continuous linear system at sample instants") {
  SubjectParams p;
  const auto cm = linearize(p, 120.0, p.basal_rate());
  const auto lm = discretize(cm, 5.0);
  Vec5 xc;
  xc << 40, 2, 100, -50, 3;
  Vec5 xd = xc;
  const double u = 7.0, d = 0.8;
  const double h = 0.005;
  for (int k = 0; k < 12; ++k) {
    for (int i = 0; i < 1000; ++i) {
      auto f = [&](const Vec5& v) -> Vec5 { return cm.A * v + cm.B_u * u + cm.B_d * d; };
      const Vec5 k1 = f(xc), k2 = f(xc + 0.5 * h * k1), k3 = f(xc + 0.5 * h * k2), k4 = f(xc + h * k3);
      xc += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4);
    }
    xd = lm.A * xd + lm.B_u * u + lm.B_d * d;
    CHECK((xc - xd).cwiseAbs().maxCoeff() <= 1e-9);
  }
}

TEST_CASE("equilibrium is a fixed point of the discrete model") {
  const auto lm = nominal_model(SubjectParams{});
  const Vec5 next = lm.A * Vec5::Zero() + lm.B_u * 0.0 + lm.B_d * 0.0;
  CHECK(next.isZero(0.0));
}

TEST_CASE("Kalman update") {
  const auto lm = nominal_model(SubjectParams{});
  EstimatorState est;
  est.x_hat << 30, 1, 20, 10, 2;
  est.d_hat = 0.5;

  SUBCASE("large measurement noise reduces to prediction") {
    KalmanNoise noise = KalmanNoise::defaults();
    noise.R_v = 1e14;
    const auto out = kalman_step(est, 500.0, 3.0, lm, noise);
    const Vec5 pred = lm.A * est.x_hat + lm.B_u * 3.0 + lm.B_d * est.d_hat;
    CHECK((out.x_hat - pred).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(out.d_hat == doctest::Approx(est.d_hat).epsilon(1e-6));
  }
  SUBCASE("zero innovation leaves the prediction unchanged") {
    KalmanNoise noise = KalmanNoise::defaults();
    noise.Q_w.setZero();
    const Vec5 pred = lm.A * est.x_hat + lm.B_u * 3.0 + lm.B_d * est.d_hat;
    const auto out = kalman_step(est, pred[0], 3.0, lm, noise);
    CHECK((out.x_hat - pred).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(out.d_hat == doctest::Approx(est.d_hat));
  }
  SUBCASE("non-finite measurement") {
    CHECK_THROWS_AS(kalman_step(est, std::nan(""), 0.0, lm, KalmanNoise::defaults()), ValidationError);
  }
}

TEST_CASE("Kalman filter tracks a disturbance ramp") {
  const auto lm = nominal_model(SubjectParams{});
  std::mt19937_64 rng(7);
  std::normal_distribution<double> noise(0.0, 1.0);
  Vec5 x = Vec5::Zero();
  EstimatorState est;
  double d = 0.0;
  for (int k = 0; k < 200; ++k) {
    d = std::min(2.0, 0.02 * k);  // ramp to a plateau
    const double u = 0.0;
    x = lm.A * x + lm.B_u * u + lm.B_d * d;
    est = kalman_step(est, x[0] + noise(rng), u, lm, KalmanNoise::defaults());
  }
  MESSAGE("d_hat=" << est.d_hat << " true d=" << d);
  CHECK(std::abs(est.d_hat - d) <= 0.1 * std::abs(d));
}

TEST_CASE("estimator covariance stays symmetric PSD") {
  const auto lm = nominal_model(SubjectParams{});
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 20.0);
  EstimatorState est;
  for (int k = 0; k < 10000; ++k) {
    est = kalman_step(est, n(rng), n(rng) * 0.1, lm, KalmanNoise::defaults());
    REQUIRE((est.P - est.P.transpose()).cwiseAbs().maxCoeff() == 0.0);
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 6, 6>> es(est.P);
  CHECK(es.eigenvalues().minCoeff() >= 0.0);
}

TEST_CASE("insulin on board") {
  const double ub = 13.104;
  InsulinHistory h(5.0, 97);
  for (int i = 0; i <= 96; ++i) h.push(i * 5.0, ub);
  const double now = 96 * 5.0;
  CHECK(iob(h, ub, now) == 0.0);

  SUBCASE("bolus just delivered") {
    InsulinHistory hb = h;
    hb.push(now + 5.0, ub + 200.0);  // 1 U over one 5-minute cycle
    CHECK(iob(hb, ub, now + 5.0) == doctest::Approx(1.0));
  }
  SUBCASE("bolus two hours ago") {
    InsulinHistory hb(5.0, 97);
    double t = 0;
    for (int i = 0; i < 60; ++i, t += 5) hb.push(t, ub);
    hb.push(t, ub + 200.0);
    const double t_bolus = t;
    for (int i = 0; i < 24; ++i) hb.push(t += 5, ub);
    CHECK(iob(hb, ub, t_bolus + 120.0) == doctest::Approx(0.5));
    CHECK(iob(hb, ub, t_bolus + 240.0) == 0.0);
  }
  SUBCASE("gaps are rejected") {
    InsulinHistory hb(5.0, 10);
    hb.push_unchecked(0, ub);
    hb.push_unchecked(10, ub + 10);
    CHECK_THROWS_AS(iob(hb, ub, 10), ValidationError);
    CHECK_THROWS_AS(hb.push(12, ub), ValidationError);
  }
}

TEST_CASE("IOB is non-negative and decays to zero after delivery stops") {
  const double ub = 13.104;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> rate(0.0, 80.0);
  InsulinHistory h(5.0, 97);
  double t = 0;
  for (int i = 0; i < 97; ++i, t += 5) {
    h.push(t, rate(rng));
    CHECK(iob(h, ub, t) >= 0.0);
  }
  double last = iob(h, ub, t - 5);
  for (int i = 0; i < 48; ++i, t += 5) {
    h.push(t, 0.0);
    const double v = iob(h, ub, t);
    CHECK(v <= last + 1e-12);
    last = v;
  }
  CHECK(iob(h, ub, t - 5) == 0.0);
}

TEST_CASE("glucose rate") {
  const double flat[] = {10, 10, 10};
  CHECK(glucose_rate(flat, 5.0) == 0.0);
  const double ramp[] = {0, 5, 10};
  CHECK(glucose_rate(ramp, 5.0) == doctest::Approx(1.0));
  const double two[] = {1, 2};
  CHECK_THROWS_AS(glucose_rate(two, 5.0), ValidationError);

  std::mt19937_64 rng(5);
  std::normal_distribution<double> noise(0.0, 1.0);
  int inside = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const double y[] = {0 + noise(rng), 10 + noise(rng), 20 + noise(rng)};
    const double s = glucose_rate(y, 5.0);
    if (std::abs(s - 2.0) <= 0.5) ++inside;
  }
  CHECK(inside == 100);
}
