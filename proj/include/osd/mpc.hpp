#pragma once

#include "osd/common.hpp"
#include "osd/glucose_model.hpp"
#include "osd/qp.hpp"

namespace osd::mpc {

using glucose::LinearModel;

struct MpcParams {
  int horizon = 24;
  double kappa = 10.0;        // slack weight
  double u_b = 13.104;        // basal rate, mU/min
  double u_max_abs = 1000.0;  // absolute delivery ceiling, mU/min
  double rate_limit = 50.0;   // per-step change bound, mU/min
  double hypo_level = -50.0;  // soft-constraint level, deviation mg/dL

  // Q(IOB) = q_floor + (q_max - q_floor) / (1 + q_rate * max(0, IOB))
  double q_max = 1.0;
  double q_rate = 0.25;
  double q_floor = 0.0;
  // lambda = lambda_min + (lambda_max - lambda_min) * 2 sigmoid(-beta * max(ydot, 0))
  double lambda_min = 0.05;
  double lambda_max = 1.0;
  double lambda_beta = 2.0;

  double ref_decay = 10.0;             // r_k = y0 exp(-k / ref_decay) for y0 >= 0
  double dist_decay = 6.0;             // alpha_k = exp(-k / dist_decay)
  double dist_rate_threshold = 0.05;   // ydot at or above which d is held constant

  // Adds the u_0 - u_prev rate rows. Off by default so that u is a function of the
  // augmented state alone.
  bool anchor_rate_to_previous = false;

  void validate() const;
};

/// Augmented MPC input in deviation coordinates.
struct AugmentedState {
  Vec5 x = Vec5::Zero();
  double d = 0.0;
  double y_dot = 0.0;
  double iob = 0.0;

  Vec8 to_vector() const;
  static AugmentedState from_vector(const Eigen::Ref<const Vec8>& v);
  double y0() const { return x[0]; }
};

struct Weights {
  double Q;
  double lambda;
};

Weights adaptive_weights(double iob, double y0, double y_dot, const MpcParams& params);
Eigen::VectorXd reference_trajectory(double y0, int horizon, const MpcParams& params);
Eigen::VectorXd disturbance_forecast(double d0, double y_dot, int horizon, const MpcParams& params);

/// Condensed prediction matrices for outputs y_1..y_N:
///   Y = Phi x0 + Gamma U + Psi D.
/// Works for any state dimension so small toy models can be checked by hand.
class Predictor {
 public:
  Predictor(const Eigen::MatrixXd& A, const Eigen::VectorXd& B_u, const Eigen::VectorXd& B_d,
            const Eigen::RowVectorXd& C, int horizon);
  Predictor(const LinearModel& model, int horizon);

  int horizon() const { return horizon_; }
  const Eigen::MatrixXd& Phi() const { return Phi_; }
  const Eigen::MatrixXd& Gamma() const { return Gamma_; }
  const Eigen::MatrixXd& Psi() const { return Psi_; }
  const Eigen::MatrixXd& GammaTGamma() const { return GtG_; }

 private:
  int horizon_;
  Eigen::MatrixXd Phi_, Gamma_, Psi_, GtG_;
};

/// Assembles the QP over z = [u_0..u_{N-1}, eta_1..eta_N]. Row layout of A:
///   N upper bounds, N lower bounds, 2(N-1) rate rows [+2 anchored rows],
///   N soft hypoglycemia rows, N rows eta >= 0.
qp::QpProblem assemble_qp(const Predictor& pred, const MpcParams& params, const Eigen::VectorXd& x0,
                          const Eigen::VectorXd& reference, const Eigen::VectorXd& disturbance,
                          const Weights& w, double u_prev = 0.0);

qp::QpProblem build_condensed_qp(const Predictor& pred, const MpcParams& params, const AugmentedState& state,
                                 double u_prev = 0.0);
qp::QpProblem build_condensed_qp(const LinearModel& model, const MpcParams& params, const AugmentedState& state,
                                 double u_prev = 0.0);

/// Number of constraint rows produced for the given settings.
int constraint_rows(const MpcParams& params);

struct MpcResult {
  double u = 0.0;
  qp::QpSolution solution;
  Eigen::VectorXd u_seq() const { return solution.z.head(solution.z.size() / 2); }
  Eigen::VectorXd eta_seq() const { return solution.z.tail(solution.z.size() / 2); }
};

/// Full solve: builds the QP, solves it and returns the first move. Throws
/// ValidationError on infeasible problems; MaxIter results are returned as-is.
MpcResult mpc_solve(const Predictor& pred, const MpcParams& params, const AugmentedState& state,
                    double u_prev = 0.0, double tol = 1e-8);

/// u = MPC(x~): the first element of the optimal sequence, deviation mU/min.
double mpc_step(const AugmentedState& state, const LinearModel& model, const MpcParams& params,
                double u_prev = 0.0);

/// Cached controller for repeated calls with one model.
class Controller {
 public:
  Controller(const LinearModel& model, const MpcParams& params)
      : params_(params), pred_(model, params.horizon) {
    params_.validate();
  }
  MpcResult solve(const AugmentedState& state, double u_prev = 0.0) const {
    return mpc_solve(pred_, params_, state, u_prev);
  }
  double operator()(const AugmentedState& state, double u_prev = 0.0) const { return solve(state, u_prev).u; }
  const MpcParams& params() const { return params_; }
  const Predictor& predictor() const { return pred_; }

 private:
  MpcParams params_;
  Predictor pred_;
};

}  // namespace osd::mpc
