#include "osd/qp.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <limits>
#include <vector>

namespace osd::qp {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kEps = std::numeric_limits<double>::epsilon();
}  // namespace

void QpProblem::validate() const {
  const Index n = H.rows();
  require(n > 0 && H.cols() == n, "QpProblem: H must be square and nonempty");
  require(c.size() == n, "QpProblem: c has wrong size");
  require(A.cols() == n || A.rows() == 0, "QpProblem: A has wrong column count");
  require(b.size() == A.rows(), "QpProblem: b has wrong size");
  require(H.allFinite() && c.allFinite() && A.allFinite() && b.allFinite(), "QpProblem: non-finite data");
}

const char* to_string(QpStatus s) {
  switch (s) {
    case QpStatus::Optimal: return "Optimal";
    case QpStatus::MaxIter: return "MaxIter";
    case QpStatus::Infeasible: return "Infeasible";
  }
  return "?";
}

KktResiduals kkt_residuals(const QpProblem& qp, const VectorXd& z, const VectorXd& mu) {
  KktResiduals r;
  const double zinf = z.size() ? z.cwiseAbs().maxCoeff() : 0.0;
  const double cinf = qp.c.size() ? qp.c.cwiseAbs().maxCoeff() : 0.0;
  const double hmax = qp.H.size() ? qp.H.cwiseAbs().maxCoeff() : 0.0;
  VectorXd grad = qp.H * z - qp.c;
  if (qp.A.rows() > 0) grad.noalias() += qp.A.transpose() * mu;
  r.stationarity = grad.cwiseAbs().maxCoeff() / (1.0 + cinf + hmax * zinf);
  if (qp.A.rows() == 0) return r;

  const VectorXd Az = qp.A * z;
  const double scale_b = 1.0 + qp.b.cwiseAbs().maxCoeff() + Az.cwiseAbs().maxCoeff();
  const double muinf = mu.cwiseAbs().maxCoeff();
  const VectorXd slack = qp.b - Az;
  r.primal = std::max(0.0, -slack.minCoeff()) / scale_b;
  r.dual = std::max(0.0, -mu.minCoeff()) / (1.0 + muinf);
  r.complementarity = (mu.array() * slack.array()).abs().maxCoeff() / ((1.0 + muinf) * scale_b);
  return r;
}

// ---------------------------------------------------------------------------
// Goldfarb-Idnani dual active-set method. Constraints are kept in the form
// s_i(z) = b_i - a_i'z >= 0 with normal n_i = -a_i.

namespace {

class DualActiveSet {
 public:
  DualActiveSet(const QpProblem& qp, const Eigen::LLT<MatrixXd>& llt)
      : qp_(qp), n_(qp.num_vars()), R_(MatrixXd::Zero(n_, n_)), u_(VectorXd::Zero(n_ + 1)) {
    J_ = llt.matrixU().solve(MatrixXd::Identity(n_, n_));
    active_.reserve(static_cast<std::size_t>(n_));
  }

  MatrixXd J_;

  bool add_constraint(VectorXd& d) {
    const Index q = active_size();
    for (Index j = n_ - 1; j > q; --j) {
      double cc = d[j - 1];
      double ss = d[j];
      const double h = std::hypot(cc, ss);
      if (h == 0.0) continue;
      d[j] = 0.0;
      ss /= h;
      cc /= h;
      if (cc < 0.0) {
        cc = -cc;
        ss = -ss;
        d[j - 1] = -h;
      } else {
        d[j - 1] = h;
      }
      const double xny = ss / (1.0 + cc);
      for (Index k = 0; k < n_; ++k) {
        const double t1 = J_(k, j - 1);
        const double t2 = J_(k, j);
        J_(k, j - 1) = t1 * cc + t2 * ss;
        J_(k, j) = xny * (t1 + J_(k, j - 1)) - t2;
      }
    }
    R_.col(q).head(q + 1) = d.head(q + 1);
    if (std::abs(d[q]) <= kEps * r_norm_) return false;
    r_norm_ = std::max(r_norm_, std::abs(d[q]));
    return true;
  }

  // Removes the active constraint at position pos; the candidate multiplier at
  // u_[q] shifts down with the others.
  void delete_constraint(Index pos) {
    const Index q = active_size();
    for (Index i = pos; i < q - 1; ++i) {
      active_[static_cast<std::size_t>(i)] = active_[static_cast<std::size_t>(i + 1)];
      u_[i] = u_[i + 1];
      R_.col(i) = R_.col(i + 1);
    }
    u_[q - 1] = u_[q];
    u_[q] = 0.0;
    R_.col(q - 1).setZero();
    active_.pop_back();
    const Index nq = q - 1;
    for (Index j = pos; j < nq; ++j) {
      double cc = R_(j, j);
      double ss = R_(j + 1, j);
      const double h = std::hypot(cc, ss);
      if (h == 0.0) continue;
      cc /= h;
      ss /= h;
      R_(j + 1, j) = 0.0;
      if (cc < 0.0) {
        R_(j, j) = -h;
        cc = -cc;
        ss = -ss;
      } else {
        R_(j, j) = h;
      }
      const double xny = ss / (1.0 + cc);
      for (Index k = j + 1; k < nq; ++k) {
        const double t1 = R_(j, k);
        const double t2 = R_(j + 1, k);
        R_(j, k) = t1 * cc + t2 * ss;
        R_(j + 1, k) = xny * (t1 + R_(j, k)) - t2;
      }
      for (Index k = 0; k < n_; ++k) {
        const double t1 = J_(k, j);
        const double t2 = J_(k, j + 1);
        J_(k, j) = t1 * cc + t2 * ss;
        J_(k, j + 1) = xny * (J_(k, j) + t1) - t2;
      }
    }
  }

  Index active_size() const { return static_cast<Index>(active_.size()); }

  const QpProblem& qp_;
  Index n_;
  MatrixXd R_;
  VectorXd u_;
  std::vector<Index> active_;
  double r_norm_ = 1.0;
};

// Re-solves the equality-constrained problem on the final working set.
bool polish(const QpProblem& qp, const Eigen::LLT<MatrixXd>& llt, const std::vector<Index>& active,
            VectorXd& z, VectorXd& mu) {
  const Index q = static_cast<Index>(active.size());
  const Index m = qp.num_constraints();
  VectorXd x0 = llt.solve(qp.c);
  mu = VectorXd::Zero(m);
  if (q == 0) {
    z = x0;
    return true;
  }
  MatrixXd Aw(q, qp.num_vars());
  VectorXd bw(q);
  for (Index j = 0; j < q; ++j) {
    Aw.row(j) = qp.A.row(active[static_cast<std::size_t>(j)]);
    bw[j] = qp.b[active[static_cast<std::size_t>(j)]];
  }
  const MatrixXd HinvAt = llt.solve(Aw.transpose());
  const MatrixXd M = Aw * HinvAt;
  Eigen::LDLT<MatrixXd> ldlt(M);
  if (ldlt.info() != Eigen::Success) return false;
  const VectorXd muw = ldlt.solve(Aw * x0 - bw);
  if (!muw.allFinite()) return false;
  z = x0 - HinvAt * muw;
  for (Index j = 0; j < q; ++j) mu[active[static_cast<std::size_t>(j)]] = muw[j];
  return true;
}

}  // namespace

QpSolution solve_qp(const QpProblem& qp, const ActiveSetOptions& opts) {
  qp.validate();
  const Index n = qp.num_vars();
  const Index m = qp.num_constraints();
  Eigen::LLT<MatrixXd> llt(qp.H);
  if (llt.info() != Eigen::Success) {
    throw ValidationError("solve_qp: Hessian is not positive definite");
  }
  const int max_iter = opts.max_iter > 0 ? opts.max_iter : static_cast<int>(10 * (n + m) + 10);

  DualActiveSet as(qp, llt);
  VectorXd x = llt.solve(qp.c);
  std::vector<char> is_active(static_cast<std::size_t>(m), 0);

  QpSolution sol;
  sol.status = QpStatus::MaxIter;
  VectorXd s(m), d(n), zstep(n), r;
  int iter = 0;
  bool done = false;

  while (!done && iter < max_iter) {
    ++iter;
    // Step 1: pick the most violated inactive constraint (smallest index on ties).
    if (m == 0) {
      sol.status = QpStatus::Optimal;
      break;
    }
    s.noalias() = qp.b - qp.A * x;
    Index p = -1;
    double worst = 0.0;
    for (Index i = 0; i < m; ++i) {
      if (is_active[static_cast<std::size_t>(i)]) continue;
      const double thr = 1e-13 * (1.0 + std::abs(qp.b[i]) + qp.A.row(i).cwiseAbs().dot(x.cwiseAbs()));
      if (s[i] < -thr && s[i] < worst) {
        worst = s[i];
        p = i;
      }
    }
    if (p < 0) {
      sol.status = QpStatus::Optimal;
      break;
    }
    double sp = s[p];
    as.u_[as.active_size()] = 0.0;

    // Step 2: move towards satisfying constraint p, dropping blocking constraints.
    while (true) {
      if (++iter > max_iter) break;
      const Index q = as.active_size();
      const VectorXd np = -qp.A.row(p).transpose();
      d.noalias() = as.J_.transpose() * np;
      zstep.noalias() = as.J_.rightCols(n - q) * d.tail(n - q);
      r = as.R_.topLeftCorner(q, q).triangularView<Eigen::Upper>().solve(d.head(q));

      double t1 = kInf;
      Index drop = -1;
      for (Index j = 0; j < q; ++j) {
        if (r[j] > 0.0) {
          const double ratio = as.u_[j] / r[j];
          if (ratio < t1) {
            t1 = ratio;
            drop = j;
          }
        }
      }
      double t2 = kInf;
      const double zn = zstep.dot(np);
      if (zstep.lpNorm<Eigen::Infinity>() > kEps * (1.0 + x.lpNorm<Eigen::Infinity>()) && zn > 0.0) {
        t2 = -sp / zn;
      }
      const double t = std::min(t1, t2);
      if (t == kInf) {
        sol.status = QpStatus::Infeasible;
        done = true;
        break;
      }
      if (t2 == kInf) {
        as.u_.head(q) -= t * r;
        as.u_[q] += t;
        is_active[static_cast<std::size_t>(as.active_[static_cast<std::size_t>(drop)])] = 0;
        as.delete_constraint(drop);
        continue;
      }
      x += t * zstep;
      as.u_.head(q) -= t * r;
      as.u_[q] += t;
      if (t == t2) {
        if (!as.add_constraint(d)) {
          // Numerically dependent constraint: treat it as satisfied at this point.
          as.u_[q] = 0.0;
        } else {
          as.active_.push_back(p);
          is_active[static_cast<std::size_t>(p)] = 1;
        }
        break;
      }
      is_active[static_cast<std::size_t>(as.active_[static_cast<std::size_t>(drop)])] = 0;
      as.delete_constraint(drop);
      sp = qp.b[p] - qp.A.row(p).dot(x);
    }
  }

  VectorXd mu = VectorXd::Zero(m);
  for (std::size_t j = 0; j < as.active_.size(); ++j) mu[as.active_[j]] = as.u_[static_cast<Index>(j)];

  sol.z = x;
  sol.multipliers = mu;
  sol.iterations = iter;
  double best = kkt_residuals(qp, x, mu).max();
  if (sol.status == QpStatus::Optimal) {
    VectorXd zp, mup;
    if (polish(qp, llt, as.active_, zp, mup)) {
      const double rp = kkt_residuals(qp, zp, mup).max();
      if (rp < best) {
        best = rp;
        sol.z = zp;
        sol.multipliers = mup;
      }
    }
    if (best > opts.tol) sol.status = QpStatus::MaxIter;
  }
  sol.kkt_residual = best;
  return sol;
}

// ---------------------------------------------------------------------------

namespace {

class HalfspaceProjector {
 public:
  HalfspaceProjector(const MatrixXd& A, const VectorXd& b) : A_(A), b_(b) {
    inv_norm2_ = A_.rowwise().squaredNorm().cwiseInverse();
    for (Index i = 0; i < inv_norm2_.size(); ++i) {
      if (!std::isfinite(inv_norm2_[i])) inv_norm2_[i] = 0.0;
    }
  }

  VectorXd project(const VectorXd& v, VectorXd& duals, double tol, int max_sweeps) const {
    const Index m = A_.rows();
    if (duals.size() != m) duals = VectorXd::Zero(m);
    VectorXd z = v;
    if (m == 0) return z;
    z.noalias() -= A_.transpose() * duals;
    const double scale = 1.0 + v.lpNorm<Eigen::Infinity>();
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
      double moved = 0.0;
      for (Index i = 0; i < m; ++i) {
        if (inv_norm2_[i] == 0.0) continue;
        const double viol = A_.row(i).dot(z) - b_[i];
        const double next = std::max(0.0, duals[i] + viol * inv_norm2_[i]);
        const double delta = next - duals[i];
        if (delta != 0.0) {
          z.noalias() -= delta * A_.row(i).transpose();
          duals[i] = next;
          moved = std::max(moved, std::abs(delta) / std::sqrt(inv_norm2_[i]));
        }
      }
      if (moved <= tol * scale) break;
    }
    return z;
  }

 private:
  const MatrixXd& A_;
  const VectorXd& b_;
  VectorXd inv_norm2_;
};

}  // namespace

VectorXd project_polyhedron(const MatrixXd& A, const VectorXd& b, const VectorXd& v, VectorXd& duals,
                            double tol, int max_sweeps) {
  require(A.rows() == b.size() && (A.rows() == 0 || A.cols() == v.size()),
          "project_polyhedron: dimension mismatch");
  return HalfspaceProjector(A, b).project(v, duals, tol, max_sweeps);
}

QpSolution solve_qp_pg_oracle(const QpProblem& qp, const ProjectedGradientOptions& opts) {
  qp.validate();
  const Index n = qp.num_vars();
  VectorXd D = VectorXd::Ones(n);
  if (opts.diagonal_scaling) {
    for (Index i = 0; i < n; ++i) D[i] = qp.H(i, i) > 0 ? 1.0 / std::sqrt(qp.H(i, i)) : 1.0;
  }
  const MatrixXd Hs = D.asDiagonal() * qp.H * D.asDiagonal();
  const VectorXd cs = D.cwiseProduct(qp.c);
  const MatrixXd As = qp.A * D.asDiagonal();
  HalfspaceProjector proj(As, qp.b);

  double step = opts.step;
  if (step <= 0) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(Hs, Eigen::EigenvaluesOnly);
    step = 1.0 / std::max(es.eigenvalues().maxCoeff(), 1e-300);
  }

  VectorXd duals;
  VectorXd w = opts.z0.size() == n ? VectorXd(opts.z0.cwiseQuotient(D)) : VectorXd::Zero(n);
  constexpr double kProjTol = 1e-15;
  constexpr int kSweeps = 20000;
  if (opts.max_iter > 1) w = proj.project(w, duals, kProjTol, kSweeps);
  VectorXd y = w, w_next(n), g(n);
  double t = 1.0;

  QpSolution sol;
  sol.status = QpStatus::MaxIter;
  int it = 0;
  while (it < opts.max_iter) {
    ++it;
    g.noalias() = Hs * y - cs;
    w_next = proj.project(y - step * g, duals, kProjTol, kSweeps);
    const double delta = (w_next - w).lpNorm<Eigen::Infinity>();
    if (opts.accelerate) {
      if ((y - w_next).dot(w_next - w) > 0.0) {
        t = 1.0;
        y = w_next;
      } else {
        const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
        y = w_next + ((t - 1.0) / t_next) * (w_next - w);
        t = t_next;
      }
    } else {
      y = w_next;
    }
    w = w_next;
    if (delta <= opts.tol * (1.0 + w.lpNorm<Eigen::Infinity>())) {
      sol.status = QpStatus::Optimal;
      break;
    }
  }
  sol.z = D.cwiseProduct(w);
  // Projection corrections at the fixed point give the constraint multipliers.
  sol.multipliers = duals.size() == qp.num_constraints() ? VectorXd(duals / step) : VectorXd::Zero(qp.num_constraints());
  sol.iterations = it;
  sol.kkt_residual = kkt_residuals(qp, sol.z, sol.multipliers).max();
  return sol;
}

}  // namespace osd::qp
