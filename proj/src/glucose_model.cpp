#include "osd/glucose_model.hpp"

#include <unsupported/Eigen/MatrixFunctions>
#include <spdlog/spdlog.h>

#include <cmath>

namespace osd::glucose {

void SubjectParams::validate() const {
  for (double r : {S_g, S_i, p_2, k_a1, k_d, k_a2, k_cl, V_I}) {
    require(std::isfinite(r) && r > 0, "subject rate constants must be positive");
  }
  require(G_b >= 70 && G_b <= 180, "G_b must lie in [70, 180]");
  require(BW > 0 && I_b > 0, "BW and I_b must be positive");
}

PlantState steady_state(const SubjectParams& p, double u) {
  PlantState s;
  s.G = p.G_b;
  s.I_sc1 = u / (p.k_a1 + p.k_d);
  s.I_sc2 = p.k_d * s.I_sc1 / p.k_a2;
  s.I_p = (p.k_a1 * s.I_sc1 + p.k_a2 * s.I_sc2) / (p.V_I * p.BW * p.k_cl);
  s.chi = s.I_p - p.I_b;
  if (s.chi != 0.0) {
    // Glucose balance with nonzero remote insulin.
    s.G = p.S_g * p.G_b / (p.S_g + p.S_i * s.chi);
  }
  return s;
}

PlantState::Vector nonlinear_rhs(const PlantState& s, double u, const SubjectParams& p) {
  if (!s.to_vector().allFinite() || !std::isfinite(u)) {
    throw ValidationError("nonlinear_rhs: non-finite state or input");
  }
  PlantState::Vector dx;
  dx[0] = -p.S_g * (s.G - p.G_b) - p.S_i * s.chi * s.G + s.d;
  dx[1] = -p.p_2 * s.chi + p.p_2 * (s.I_p - p.I_b);
  dx[2] = 0.0;
  dx[3] = -(p.k_a1 + p.k_d) * s.I_sc1 + u;
  dx[4] = -p.k_a2 * s.I_sc2 + p.k_d * s.I_sc1;
  dx[5] = -p.k_cl * s.I_p + (p.k_a1 * s.I_sc1 + p.k_a2 * s.I_sc2) / (p.V_I * p.BW);
  return dx;
}

PlantState integrate_step(const PlantState& s, double u, double dt, const SubjectParams& p) {
  require(dt > 0, "integrate_step: dt must be positive");
  using V = PlantState::Vector;
  const V x = s.to_vector();
  auto f = [&](const V& v) { return nonlinear_rhs(PlantState::from_vector(v), u, p); };
  const V k1 = f(x);
  const V k2 = f(x + 0.5 * dt * k1);
  const V k3 = f(x + 0.5 * dt * k2);
  const V k4 = f(x + dt * k3);
  PlantState out = PlantState::from_vector(x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4));
  if (out.G < kGlucoseFloor) {
    spdlog::debug("glucose floor reached (G={:.3f}), clamping", out.G);
    out.G = kGlucoseFloor;
  }
  return out;
}

void LinearModel::validate() const {
  require(A.allFinite() && B_u.allFinite() && B_d.allFinite(), "LinearModel: non-finite entries");
  require(C(0) == 1.0 && C.tail<4>().isZero(), "LinearModel: C must select the first state");
  require(T > 0, "LinearModel: T must be positive");
}

ContinuousModel linearize(const SubjectParams& p, double G_op, double u_op) {
  const PlantState op = steady_state(p, u_op);
  const double vb = p.V_I * p.BW;
  ContinuousModel cm;
  cm.A.setZero();
  cm.A(0, 0) = -p.S_g - p.S_i * op.chi;
  cm.A(0, 1) = -p.S_i * G_op;
  cm.A(1, 1) = -p.p_2;
  cm.A(1, 4) = p.p_2;
  cm.A(2, 2) = -(p.k_a1 + p.k_d);
  cm.A(3, 2) = p.k_d;
  cm.A(3, 3) = -p.k_a2;
  cm.A(4, 2) = p.k_a1 / vb;
  cm.A(4, 3) = p.k_a2 / vb;
  cm.A(4, 4) = -p.k_cl;
  cm.B_u = Vec5::Unit(2);
  cm.B_d = Vec5::Unit(0);
  return cm;
}

std::pair<Eigen::MatrixXd, Eigen::MatrixXd> discretize_zoh(const Eigen::MatrixXd& Ac,
                                                           const Eigen::MatrixXd& Bc, double T) {
  require(T > 0, "discretize: T must be positive");
  require(Ac.rows() == Ac.cols() && Bc.rows() == Ac.rows(), "discretize: dimension mismatch");
  const Eigen::Index n = Ac.rows(), m = Bc.cols();
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(n + m, n + m);
  M.topLeftCorner(n, n) = Ac * T;
  M.topRightCorner(n, m) = Bc * T;
  const Eigen::MatrixXd E = M.exp();
  return {E.topLeftCorner(n, n), E.topRightCorner(n, m)};
}

LinearModel discretize(const ContinuousModel& cm, double T) {
  Eigen::MatrixXd Bc(kModelDim, 2);
  Bc << cm.B_u, cm.B_d;
  auto [A, B] = discretize_zoh(cm.A, Bc, T);
  LinearModel lm;
  lm.A = A;
  lm.B_u = B.col(0);
  lm.B_d = B.col(1);
  lm.T = T;
  return lm;
}

LinearModel nominal_model(const SubjectParams& p) {
  return discretize(linearize(p, 120.0, p.basal_rate()), 5.0);
}

// ---------------------------------------------------------------------------

KalmanNoise KalmanNoise::defaults() {
  KalmanNoise n;
  n.Q_w.setZero();
  n.Q_w.diagonal() << 0.5, 1e-4, 1.0, 1.0, 1e-3, 0.02;
  n.R_v = 4.0;
  return n;
}

EstimatorState kalman_step(const EstimatorState& est, double y_meas, double u_applied,
                           const LinearModel& model, const KalmanNoise& noise) {
  using M6 = Eigen::Matrix<double, 6, 6>;
  using V6 = Eigen::Matrix<double, 6, 1>;
  require(noise.R_v > 0, "kalman_step: R_v must be positive");

  M6 F = M6::Zero();
  F.topLeftCorner<5, 5>() = model.A;
  F.block<5, 1>(0, 5) = model.B_d;
  F(5, 5) = 1.0;
  V6 Gu = V6::Zero();
  Gu.head<5>() = model.B_u;
  Eigen::Matrix<double, 1, 6> H = Eigen::Matrix<double, 1, 6>::Zero();
  H.head<5>() = model.C;

  V6 z;
  z << est.x_hat, est.d_hat;
  const V6 z_pred = F * z + Gu * u_applied;
  const M6 P_pred = F * est.P * F.transpose() + noise.Q_w;

  const double innovation = y_meas - H.dot(z_pred);
  if (!std::isfinite(innovation)) throw ValidationError("kalman_step: non-finite innovation");
  const double S = H * P_pred * H.transpose() + noise.R_v;
  const V6 K = P_pred * H.transpose() / S;

  const M6 IKH = M6::Identity() - K * H;
  M6 P = IKH * P_pred * IKH.transpose() + K * noise.R_v * K.transpose();
  P = 0.5 * (P + P.transpose()).eval();

  EstimatorState out;
  const V6 z_new = z_pred + K * innovation;
  out.x_hat = z_new.head<5>();
  out.d_hat = z_new[5];
  out.P = P;
  return out;
}

// ---------------------------------------------------------------------------

double IobCurve::operator()(double tau) const {
  if (tau < 0) return 0.0;
  if (tau >= duration) return 0.0;
  switch (kind) {
    case Kind::Linear:
      return 1.0 - tau / duration;
    case Kind::Exponential: {
      const double tail = std::exp(-duration / time_constant);
      return (std::exp(-tau / time_constant) - tail) / (1.0 - tail);
    }
  }
  return 0.0;
}

InsulinHistory::InsulinHistory(double T, std::size_t capacity) : T_(T), buf_(capacity) {
  require(T > 0 && capacity >= 2, "InsulinHistory: invalid period or capacity");
}

void InsulinHistory::push(double t, double delivered) {
  if (count_ > 0) {
    const double last = (*this)[count_ - 1].t;
    if (std::abs(t - last - T_) > 1e-9) {
      throw ValidationError("InsulinHistory: timestamps must advance by exactly one period");
    }
  }
  push_unchecked(t, delivered);
}

void InsulinHistory::push_unchecked(double t, double delivered) {
  const std::size_t cap = buf_.size();
  buf_[(head_ + count_) % cap] = {t, delivered};
  if (count_ < cap) {
    ++count_;
  } else {
    head_ = (head_ + 1) % cap;
  }
}

const InsulinHistory::Sample& InsulinHistory::operator[](std::size_t i) const {
  return buf_[(head_ + i) % buf_.size()];
}

double iob(const InsulinHistory& history, double u_b, double now, const IobCurve& curve) {
  const double T = history.period();
  double total = 0.0;
  for (std::size_t i = 0; i < history.size(); ++i) {
    const auto& s = history[i];
    if (i > 0 && std::abs(s.t - history[i - 1].t - T) > 1e-9) {
      throw ValidationError("iob: gap in insulin history");
    }
    const double excess = std::max(0.0, s.delivered - u_b);
    if (excess > 0) total += excess * T * curve(now - s.t) / 1000.0;
  }
  return total;
}

double glucose_rate(std::span<const double> y_recent, double T) {
  require(y_recent.size() >= 3, "glucose_rate: need at least 3 samples");
  const auto n = y_recent.size();
  // Equally spaced points at -T, 0, +T: the least-squares slope reduces to a central difference.
  return (y_recent[n - 1] - y_recent[n - 3]) / (2.0 * T);
}

}  // namespace osd::glucose
