#pragma once

#include "osd/common.hpp"

#include <span>
#include <vector>

namespace osd::glucose {

/// Parameters of the nonlinear glucose-insulin model. Rates in 1/min.
struct SubjectParams {
  double S_g = 0.01;    // glucose effectiveness
  double G_b = 120.0;   // basal glucose, mg/dL
  double S_i = 5e-4;    // insulin sensitivity, 1/min per mU/L
  double p_2 = 0.02;    // remote-compartment rate
  double I_b = 12.0;    // basal plasma insulin, mU/L
  double k_a1 = 0.004;  // absorption from non-monomeric depot
  double k_d = 0.0164;  // dissociation
  double k_a2 = 0.0182; // absorption from monomeric depot
  double k_cl = 0.13;   // plasma clearance
  double V_I = 0.12;    // insulin distribution volume, L/kg
  double BW = 70.0;     // body weight, kg

  /// Basal delivery (mU/min) that holds I_p at I_b in steady state.
  double basal_rate() const { return I_b * V_I * BW * k_cl; }
  void validate() const;
};

/// Absolute (not deviation) plant state.
struct PlantState {
  double G = 120.0;   // mg/dL
  double chi = 0.0;   // mU/L
  double d = 0.0;     // mg/dL/min
  double I_sc1 = 0.0; // mU
  double I_sc2 = 0.0; // mU
  double I_p = 0.0;   // mU/L

  using Vector = Eigen::Matrix<double, 6, 1>;
  Vector to_vector() const { return (Vector() << G, chi, d, I_sc1, I_sc2, I_p).finished(); }
  static PlantState from_vector(const Vector& v) { return {v[0], v[1], v[2], v[3], v[4], v[5]}; }
};

/// Basal steady state of the subject under delivery u (mU/min), d = 0.
PlantState steady_state(const SubjectParams& p, double u);

inline constexpr double kGlucoseFloor = 1.0;

PlantState::Vector nonlinear_rhs(const PlantState& s, double u, const SubjectParams& p);

/// One RK4 step of length dt (min) with constant input. G is clamped at kGlucoseFloor.
PlantState integrate_step(const PlantState& s, double u, double dt, const SubjectParams& p);

struct ContinuousModel {
  Mat5 A;
  Vec5 B_u;
  Vec5 B_d;
};

/// Discrete model x+ = A x + B_u u + B_d d, y = C x, in deviation coordinates.
struct LinearModel {
  Mat5 A;
  Vec5 B_u;
  Vec5 B_d;
  Eigen::Matrix<double, 1, kModelDim> C = (Eigen::Matrix<double, 1, kModelDim>() << 1, 0, 0, 0, 0).finished();
  double T = 5.0;

  void validate() const;
};

/// Jacobian of the (G, chi, Isc1, Isc2, Ip) subsystem at the steady state for u_op, with G = G_op.
ContinuousModel linearize(const SubjectParams& p, double G_op, double u_op);

/// Zero-order-hold discretization via the exponential of the augmented matrix [[Ac, Bc], [0, 0]].
std::pair<Eigen::MatrixXd, Eigen::MatrixXd> discretize_zoh(const Eigen::MatrixXd& Ac,
                                                           const Eigen::MatrixXd& Bc, double T);
LinearModel discretize(const ContinuousModel& cm, double T);

/// Nominal controller model: linearized at (u_b, 120) and discretized at 5 min.
LinearModel nominal_model(const SubjectParams& p);

// ---------------------------------------------------------------------------
// Kalman estimator over the 6-state (x, d) model, d as a random walk.

struct KalmanNoise {
  Eigen::Matrix<double, 6, 6> Q_w;
  double R_v = 4.0;

  static KalmanNoise defaults();
};

struct EstimatorState {
  Vec5 x_hat = Vec5::Zero();
  double d_hat = 0.0;
  Eigen::Matrix<double, 6, 6> P = Eigen::Matrix<double, 6, 6>::Identity();
};

EstimatorState kalman_step(const EstimatorState& est, double y_meas, double u_applied,
                           const LinearModel& model, const KalmanNoise& noise);

// ---------------------------------------------------------------------------
// Insulin on board.

struct IobCurve {
  enum class Kind { Linear, Exponential };
  Kind kind = Kind::Linear;
  double duration = 240.0;  // min
  double time_constant = 60.0;  // Exponential only

  /// Fraction of a dose still active after tau minutes; 1 at 0, 0 beyond duration.
  double operator()(double tau) const;
};

/// Ring buffer of (timestamp, delivered rate) samples spaced T apart.
class InsulinHistory {
 public:
  struct Sample {
    double t;
    double delivered;  // mU/min
  };

  explicit InsulinHistory(double T = 5.0, std::size_t capacity = 97);

  void push(double t, double delivered);
  std::size_t size() const { return count_; }
  double period() const { return T_; }
  /// i = 0 is the oldest retained sample.
  const Sample& operator[](std::size_t i) const;
  /// Unchecked append used to build histories with deliberate gaps in tests.
  void push_unchecked(double t, double delivered);

 private:
  double T_;
  std::vector<Sample> buf_;
  std::size_t head_ = 0;
  std::size_t count_ = 0;
};

/// Insulin on board in U; throws ValidationError if the history has gaps.
double iob(const InsulinHistory& history, double u_b, double now, const IobCurve& curve = {});

/// Least-squares slope (mg/dL/min) over the last three samples.
double glucose_rate(std::span<const double> y_recent, double T);

}  // namespace osd::glucose
