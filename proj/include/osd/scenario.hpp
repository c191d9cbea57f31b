#pragma once

#include "osd/dataset.hpp"
#include "osd/glucose_model.hpp"
#include "osd/mpc.hpp"

#include <filesystem>
#include <random>
#include <vector>

namespace osd::scenario {

using glucose::LinearModel;
using glucose::SubjectParams;
using io::DataPair;
using mpc::MpcParams;

enum class Absorption { Fast, Slow };
enum class Mode { FullClosedLoop, Hybrid };

struct MealEvent {
  double time = 0.0;   // minute of day
  double carbs = 0.0;  // g
  Absorption absorption = Absorption::Fast;
  bool bolused = false;
  double bolus_size = 0.0;  // U
};

struct Scenario {
  std::vector<MealEvent> meals;  // sorted by time
  Mode mode = Mode::FullClosedLoop;
  bool rescue_carbs_enabled = true;
  double cgm_noise_sd = 2.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Biexponential meal disturbance, d(t) = carbs * k * (exp(-t/tau1) - exp(-t/tau2)),
/// with k chosen so that the peak equals peak_gain per gram.
struct MealModel {
  double fast_tau1 = 40.0, fast_tau2 = 20.0;
  double slow_tau1 = 90.0, slow_tau2 = 45.0;
  double peak_gain = 0.05;  // mg/dL/min per g

  /// Disturbance (mg/dL/min) of a meal of `carbs` grams, `tau` minutes after onset.
  double response(double carbs, Absorption a, double tau) const;
  void validate() const;
};

struct ScenarioDistribution {
  int meals_min = 2;
  int meals_max = 5;
  double carbs_min = 20.0;
  double carbs_max = 120.0;
  /// Nominal meal slots (minute of day); a day with k meals picks k of them.
  std::vector<double> meal_slots = {420.0, 720.0, 930.0, 1140.0, 1320.0};
  double time_jitter = 45.0;  // uniform +- minutes
  double fast_fraction = 0.5;
  double hybrid_probability = 0.5;
  double bolus_probability = 0.5;
  double carb_ratio = 10.0;  // g per U
  bool rescue_carbs_enabled = true;
  double cgm_noise_sd = 2.0;

  void validate() const;
};

/// Lognormal sigma per randomized subject parameter.
struct ParamSpread {
  double S_g = 0.1;
  double S_i = 0.25;
  double p_2 = 0.1;
  double k_a1 = 0.1;
  double k_d = 0.1;
  double k_a2 = 0.1;
  double k_cl = 0.1;
  double V_I = 0.1;
  double BW = 0.15;

  void validate() const;
};

struct SimOptions {
  MealModel meal_model;
  double rescue_carbs = 15.0;      // g
  double rescue_threshold = 70.0;  // mg/dL, measured
  double rescue_lockout = 30.0;    // min
  int substeps = 5;                // plant integration steps per 5-min cycle
  glucose::KalmanNoise kalman = glucose::KalmanNoise::defaults();
  glucose::IobCurve iob_curve;

  void validate() const;
};

struct CampaignConfig {
  int n_subjects = 20;
  int days_per_subject = 250;
  SubjectParams nominal;
  ParamSpread spread;
  ScenarioDistribution scenario;
  SimOptions sim;
  MpcParams mpc;
  std::filesystem::path output;
  std::uint64_t master_seed = 1;
  int threads = 1;

  void validate() const;
};

Scenario sample_scenario(std::mt19937_64& rng, const ScenarioDistribution& dist);

SubjectParams sample_subject(std::mt19937_64& rng, const SubjectParams& nominal, const ParamSpread& spread);

struct TraceRow {
  double t;          // min since start of day
  double G;          // true plant glucose, mg/dL
  double y;          // CGM reading, mg/dL
  double d;          // true meal disturbance, mg/dL/min
  double u;          // MPC deviation, mU/min
  double delivered;  // total delivery incl. bolus, mU/min
  double iob;        // U
  double d_hat;
  bool rescue;
};

struct DayResult {
  std::vector<TraceRow> trace;
  std::vector<DataPair> pairs;
  bool degenerate = false;  // glucose floor reached
  bool aborted = false;     // solver failure
  int rescues = 0;
};

/// Closed-loop plant, estimator and controller that persist across consecutive days.
class ClosedLoop {
 public:
  ClosedLoop(const SubjectParams& subject, const LinearModel& model, const MpcParams& mpc,
             const SimOptions& options = {});

  /// Simulates 288 five-minute cycles of the given day.
  DayResult run_day(const Scenario& scenario);
  /// Returns plant, estimator and histories to basal equilibrium.
  void reset();

  const glucose::PlantState& plant() const { return plant_; }

 private:
  struct ActiveMeal {
    double onset;
    double carbs;
    Absorption absorption;
  };
  double meal_disturbance(double t) const;

  SubjectParams subject_;
  LinearModel model_;
  MpcParams mpc_params_;
  SimOptions opt_;
  mpc::Controller controller_;
  double G_ref_;
  double u_b_;

  double now_ = 0.0;
  glucose::PlantState plant_;
  glucose::EstimatorState est_;
  glucose::InsulinHistory history_;
  std::array<double, 3> y_recent_{};
  std::vector<ActiveMeal> meals_;
  double last_rescue_ = -1e9;
  double u_applied_ = 0.0;  // last delivered deviation from u_b
};

/// Single day from basal equilibrium.
DayResult simulate_day(const SubjectParams& subject, const Scenario& scenario, const LinearModel& model,
                       const MpcParams& mpc, const SimOptions& options = {});

struct CampaignStats {
  std::uint64_t records = 0;
  int days = 0;
  int degenerate_days = 0;
  int aborted_days = 0;
  long rescues = 0;
  double wall_seconds = 0.0;
};

/// All records of one subject's days, in day order; excluded days contribute nothing.
std::vector<DataPair> simulate_subject(const CampaignConfig& config, int subject_index, CampaignStats& stats);

/// Runs the campaign and writes the dataset file to config.output.
CampaignStats run_campaign(const CampaignConfig& config);

/// Deterministic seed for (master, stream ids).
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b = 0);

}  // namespace osd::scenario
