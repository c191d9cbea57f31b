#include "osd/mpc.hpp"

#include <cmath>

namespace osd::mpc {

using Eigen::MatrixXd;
using Eigen::VectorXd;

void MpcParams::validate() const {
  require(horizon >= 1, "MpcParams: horizon must be >= 1");
  require(kappa > 0, "MpcParams: kappa must be positive");
  require(u_b > 0 && u_b < u_max_abs, "MpcParams: need 0 < u_b < u_max_abs");
  require(rate_limit > 0, "MpcParams: rate_limit must be positive");
  require(q_max > 0 && q_rate >= 0 && q_floor >= 0 && q_floor <= q_max, "MpcParams: invalid Q schedule");
  require(lambda_min > 0 && lambda_max >= lambda_min && lambda_beta >= 0, "MpcParams: invalid lambda schedule");
  require(ref_decay > 0 && dist_decay > 0, "MpcParams: decay constants must be positive");
}

Vec8 AugmentedState::to_vector() const {
  Vec8 v;
  v << x, d, y_dot, iob;
  return v;
}

AugmentedState AugmentedState::from_vector(const Eigen::Ref<const Vec8>& v) {
  AugmentedState s;
  s.x = v.head<5>();
  s.d = v[5];
  s.y_dot = v[6];
  s.iob = v[7];
  return s;
}

Weights adaptive_weights(double iob, double y0, double y_dot, const MpcParams& p) {
  if (!std::isfinite(iob) || !std::isfinite(y0) || !std::isfinite(y_dot)) {
    throw ValidationError("adaptive_weights: non-finite input");
  }
  require(iob >= 0, "adaptive_weights: IOB must be non-negative");
  Weights w;
  w.Q = p.q_floor + (p.q_max - p.q_floor) / (1.0 + p.q_rate * std::max(0.0, iob));
  const double rise = std::max(0.0, y_dot);
  const double sig2 = 2.0 / (1.0 + std::exp(p.lambda_beta * rise));  // 2 sigmoid(-beta rise)
  w.lambda = p.lambda_min + (p.lambda_max - p.lambda_min) * sig2;
  return w;
}

VectorXd reference_trajectory(double y0, int horizon, const MpcParams& p) {
  require(horizon >= 1, "reference_trajectory: horizon must be >= 1");
  VectorXd r = VectorXd::Zero(horizon);
  if (y0 > 0) {
    for (int k = 0; k < horizon; ++k) r[k] = y0 * std::exp(-k / p.ref_decay);
  }
  return r;
}

VectorXd disturbance_forecast(double d0, double y_dot, int horizon, const MpcParams& p) {
  require(horizon >= 1, "disturbance_forecast: horizon must be >= 1");
  VectorXd d(horizon);
  if (y_dot >= p.dist_rate_threshold) {
    d.setConstant(d0);
  } else {
    for (int k = 0; k < horizon; ++k) d[k] = std::exp(-k / p.dist_decay) * d0;
  }
  return d;
}

// ---------------------------------------------------------------------------

Predictor::Predictor(const MatrixXd& A, const VectorXd& B_u, const VectorXd& B_d, const Eigen::RowVectorXd& C,
                     int horizon)
    : horizon_(horizon) {
  require(horizon >= 1, "Predictor: horizon must be >= 1");
  const auto n = A.rows();
  require(A.cols() == n && B_u.size() == n && B_d.size() == n && C.size() == n, "Predictor: dimension mismatch");
  require(A.allFinite() && B_u.allFinite() && B_d.allFinite(), "Predictor: non-finite model");
  const int N = horizon;
  Phi_.resize(N, n);
  Gamma_ = MatrixXd::Zero(N, N);
  Psi_ = MatrixXd::Zero(N, N);

  // Markov parameters C A^i B.
  VectorXd hu(N), hd(N);
  Eigen::RowVectorXd CAi = C;
  for (int i = 0; i < N; ++i) {
    hu[i] = CAi.dot(B_u);
    hd[i] = CAi.dot(B_d);
    CAi = CAi * A;
    Phi_.row(i) = CAi;  // C A^{i+1}
  }
  for (int k = 0; k < N; ++k) {
    for (int j = 0; j <= k; ++j) {
      Gamma_(k, j) = hu[k - j];
      Psi_(k, j) = hd[k - j];
    }
  }
  GtG_ = Gamma_.transpose() * Gamma_;
}

Predictor::Predictor(const LinearModel& model, int horizon)
    : Predictor(model.A, model.B_u, model.B_d, model.C, horizon) {
  model.validate();
}

int constraint_rows(const MpcParams& p) {
  const int N = p.horizon;
  return 2 * N + 2 * (N - 1) + (p.anchor_rate_to_previous ? 2 : 0) + 2 * N;
}

qp::QpProblem assemble_qp(const Predictor& pred, const MpcParams& p, const VectorXd& x0, const VectorXd& reference,
                          const VectorXd& disturbance, const Weights& w, double u_prev) {
  const int N = pred.horizon();
  require(reference.size() == N && disturbance.size() == N, "assemble_qp: horizon mismatch");
  require(x0.size() == pred.Phi().cols(), "assemble_qp: state dimension mismatch");
  require(x0.allFinite() && std::isfinite(u_prev), "assemble_qp: non-finite state");

  const VectorXd free = pred.Phi() * x0 + pred.Psi() * disturbance;

  qp::QpProblem qp;
  const int nv = 2 * N;
  qp.H = MatrixXd::Zero(nv, nv);
  qp.H.topLeftCorner(N, N) = 2.0 * w.Q * pred.GammaTGamma();
  qp.H.topLeftCorner(N, N).diagonal().array() += 2.0 * w.lambda;
  qp.H.bottomRightCorner(N, N).diagonal().setConstant(2.0 * p.kappa);
  qp.c = VectorXd::Zero(nv);
  qp.c.head(N) = -2.0 * w.Q * (pred.Gamma().transpose() * (free - reference));

  const int m = constraint_rows(p);
  qp.A = MatrixXd::Zero(m, nv);
  qp.b = VectorXd::Zero(m);
  int row = 0;
  for (int k = 0; k < N; ++k, ++row) {
    qp.A(row, k) = 1.0;
    qp.b[row] = p.u_max_abs - p.u_b;
  }
  for (int k = 0; k < N; ++k, ++row) {
    qp.A(row, k) = -1.0;
    qp.b[row] = p.u_b;
  }
  for (int k = 1; k < N; ++k) {
    qp.A(row, k) = 1.0;
    qp.A(row, k - 1) = -1.0;
    qp.b[row++] = p.rate_limit;
    qp.A(row, k) = -1.0;
    qp.A(row, k - 1) = 1.0;
    qp.b[row++] = p.rate_limit;
  }
  if (p.anchor_rate_to_previous) {
    qp.A(row, 0) = 1.0;
    qp.b[row++] = u_prev + p.rate_limit;
    qp.A(row, 0) = -1.0;
    qp.b[row++] = p.rate_limit - u_prev;
  }
  // hypo_level - y_k <= eta_k  <=>  -Gamma_k U - eta_k <= free_k - hypo_level
  for (int k = 0; k < N; ++k, ++row) {
    qp.A.row(row).head(N) = -pred.Gamma().row(k);
    qp.A(row, N + k) = -1.0;
    qp.b[row] = free[k] - p.hypo_level;
  }
  for (int k = 0; k < N; ++k, ++row) qp.A(row, N + k) = -1.0;
  return qp;
}

qp::QpProblem build_condensed_qp(const Predictor& pred, const MpcParams& p, const AugmentedState& s, double u_prev) {
  p.validate();
  require(s.to_vector().allFinite(), "build_condensed_qp: non-finite state");
  const int N = pred.horizon();
  const Weights w = adaptive_weights(s.iob, s.y0(), s.y_dot, p);
  // The cost runs over y_1..y_N, so the reference is shifted one step.
  const VectorXd r = reference_trajectory(s.y0(), N + 1, p).tail(N);
  const VectorXd d = disturbance_forecast(s.d, s.y_dot, N, p);
  return assemble_qp(pred, p, s.x, r, d, w, u_prev);
}

qp::QpProblem build_condensed_qp(const LinearModel& model, const MpcParams& p, const AugmentedState& s,
                                 double u_prev) {
  return build_condensed_qp(Predictor(model, p.horizon), p, s, u_prev);
}

MpcResult mpc_solve(const Predictor& pred, const MpcParams& p, const AugmentedState& s, double u_prev, double tol) {
  const qp::QpProblem qp = build_condensed_qp(pred, p, s, u_prev);
  MpcResult res;
  res.solution = qp::solve_qp(qp, tol);
  if (res.solution.status == qp::QpStatus::Infeasible) {
    throw ValidationError("mpc_solve: QP reported infeasible");
  }
  // Clip rounding excursions so the box always holds exactly.
  res.u = std::clamp(res.solution.z[0], -p.u_b, p.u_max_abs - p.u_b);
  return res;
}

double mpc_step(const AugmentedState& state, const LinearModel& model, const MpcParams& params, double u_prev) {
  return mpc_solve(Predictor(model, params.horizon), params, state, u_prev).u;
}

}  // namespace osd::mpc
