#pragma once

#include "osd/common.hpp"

namespace osd::qp {

/// min 1/2 z'Hz - c'z  subject to  A z <= b.
struct QpProblem {
  Eigen::MatrixXd H;
  Eigen::VectorXd c;
  Eigen::MatrixXd A;
  Eigen::VectorXd b;

  Eigen::Index num_vars() const { return H.rows(); }
  Eigen::Index num_constraints() const { return A.rows(); }
  double objective(const Eigen::VectorXd& z) const { return 0.5 * z.dot(H * z) - c.dot(z); }
  void validate() const;
};

enum class QpStatus { Optimal, MaxIter, Infeasible };
const char* to_string(QpStatus s);

/// The four KKT residual groups, each scaled by the problem data magnitude.
struct KktResiduals {
  double stationarity = 0;
  double primal = 0;
  double dual = 0;
  double complementarity = 0;
  double max() const { return std::max(std::max(stationarity, primal), std::max(dual, complementarity)); }
};

struct QpSolution {
  Eigen::VectorXd z;
  Eigen::VectorXd multipliers;  // one per constraint row, zero when inactive
  QpStatus status = QpStatus::MaxIter;
  double kkt_residual = 0;
  int iterations = 0;
};

/// KKT residuals of (z, mu) for the problem. Stationarity is Hz - c + A'mu.
KktResiduals kkt_residuals(const QpProblem& qp, const Eigen::VectorXd& z, const Eigen::VectorXd& mu);

struct ActiveSetOptions {
  double tol = 1e-8;
  int max_iter = 0;  // 0 selects 10 * (n + m)
};

/// Dual active-set (Goldfarb-Idnani) solver with incremental QR/Cholesky updates.
/// Requires H positive definite; throws ValidationError otherwise.
QpSolution solve_qp(const QpProblem& qp, const ActiveSetOptions& opts = {});
inline QpSolution solve_qp(const QpProblem& qp, double tol) { return solve_qp(qp, ActiveSetOptions{tol, 0}); }

struct ProjectedGradientOptions {
  double tol = 1e-10;          // relative step-length stopping threshold
  int max_iter = 200000;
  double step = 0;             // 0 selects 1 / lambda_max of the scaled Hessian
  bool accelerate = true;      // FISTA momentum with adaptive restart
  bool diagonal_scaling = true;
  Eigen::VectorXd z0;          // optional starting point
};

/// Projected-gradient cross-check solver. The projection onto {A z <= b} is computed by
/// Dykstra's alternating projections over the half-spaces (Hildreth form, warm-started).
QpSolution solve_qp_pg_oracle(const QpProblem& qp, const ProjectedGradientOptions& opts = {});

/// Euclidean projection of v onto {z : A z <= b} by Dykstra iteration. `duals` carries the
/// correction terms between calls and may be empty on entry.
Eigen::VectorXd project_polyhedron(const Eigen::MatrixXd& A, const Eigen::VectorXd& b,
                                   const Eigen::VectorXd& v, Eigen::VectorXd& duals,
                                   double tol = 1e-13, int max_sweeps = 100000);

}  // namespace osd::qp
