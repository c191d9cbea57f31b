#include "osd/scenario.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <thread>

namespace osd::scenario {

namespace {

constexpr double kCycle = 5.0;
constexpr int kCyclesPerDay = 288;
constexpr double kDay = 1440.0;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b) {
  return splitmix64(splitmix64(splitmix64(master) ^ a) ^ (b * 0x632be59bd9b4e019ULL));
}

void Scenario::validate() const {
  for (std::size_t i = 0; i < meals.size(); ++i) {
    const auto& m = meals[i];
    require(m.time >= 0 && m.time < kDay, "Scenario: meal time outside [0, 1440)");
    require(m.carbs >= 0 && m.carbs <= 200, "Scenario: carbs outside [0, 200]");
    require(m.bolus_size >= 0 && std::isfinite(m.bolus_size), "Scenario: invalid bolus");
    if (i > 0) require(meals[i - 1].time <= m.time, "Scenario: meals must be sorted by time");
  }
  require(cgm_noise_sd >= 0, "Scenario: negative CGM noise");
}

double MealModel::response(double carbs, Absorption a, double tau) const {
  if (tau <= 0) return 0.0;
  const double t1 = a == Absorption::Fast ? fast_tau1 : slow_tau1;
  const double t2 = a == Absorption::Fast ? fast_tau2 : slow_tau2;
  const double t_peak = std::log(t1 / t2) * t1 * t2 / (t1 - t2);
  const double peak = std::exp(-t_peak / t1) - std::exp(-t_peak / t2);
  return carbs * peak_gain * (std::exp(-tau / t1) - std::exp(-tau / t2)) / peak;
}

void MealModel::validate() const {
  require(fast_tau1 > fast_tau2 && fast_tau2 > 0, "MealModel: need fast tau1 > tau2 > 0");
  require(slow_tau1 > slow_tau2 && slow_tau2 > 0, "MealModel: need slow tau1 > tau2 > 0");
  require(peak_gain >= 0, "MealModel: negative gain");
}

void ScenarioDistribution::validate() const {
  require(meals_min >= 0 && meals_min <= meals_max, "ScenarioDistribution: invalid meal-count range");
  require(static_cast<std::size_t>(meals_max) <= meal_slots.size(), "ScenarioDistribution: more meals than slots");
  require(carbs_min >= 0 && carbs_min <= carbs_max && carbs_max <= 200, "ScenarioDistribution: invalid carb range");
  for (double s : meal_slots) require(s >= 0 && s < kDay, "ScenarioDistribution: slot outside the day");
  require(std::is_sorted(meal_slots.begin(), meal_slots.end()), "ScenarioDistribution: slots must be sorted");
  require(time_jitter >= 0, "ScenarioDistribution: negative jitter");
  for (double p : {fast_fraction, hybrid_probability, bolus_probability}) {
    require(p >= 0 && p <= 1, "ScenarioDistribution: probability outside [0, 1]");
  }
  require(carb_ratio > 0, "ScenarioDistribution: carb ratio must be positive");
  require(cgm_noise_sd >= 0, "ScenarioDistribution: negative CGM noise");
}

void ParamSpread::validate() const {
  for (double s : {S_g, S_i, p_2, k_a1, k_d, k_a2, k_cl, V_I, BW}) {
    require(s >= 0 && std::isfinite(s), "ParamSpread: spreads must be finite and >= 0");
  }
}

void SimOptions::validate() const {
  meal_model.validate();
  require(rescue_carbs >= 0 && rescue_lockout >= 0, "SimOptions: invalid rescue settings");
  require(substeps >= 1, "SimOptions: substeps must be >= 1");
}

void CampaignConfig::validate() const {
  require(n_subjects >= 1 && days_per_subject >= 1, "CampaignConfig: counts must be >= 1");
  require(threads >= 1, "CampaignConfig: threads must be >= 1");
  nominal.validate();
  spread.validate();
  scenario.validate();
  sim.validate();
  mpc.validate();
}

Scenario sample_scenario(std::mt19937_64& rng, const ScenarioDistribution& dist) {
  dist.validate();
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  Scenario s;
  s.mode = u01(rng) < dist.hybrid_probability ? Mode::Hybrid : Mode::FullClosedLoop;
  s.rescue_carbs_enabled = dist.rescue_carbs_enabled;
  s.cgm_noise_sd = dist.cgm_noise_sd;
  s.seed = rng();

  const int k = std::uniform_int_distribution<int>(dist.meals_min, dist.meals_max)(rng);
  std::vector<std::size_t> slots(dist.meal_slots.size());
  std::iota(slots.begin(), slots.end(), 0);
  // Partial Fisher-Yates keeps the choice independent of library shuffle details.
  for (int i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::size_t>(rng() % (slots.size() - i));
    std::swap(slots[i], slots[j]);
  }
  slots.resize(k);
  std::sort(slots.begin(), slots.end());

  for (std::size_t idx : slots) {
    MealEvent m;
    const double jitter = dist.time_jitter > 0 ? (2.0 * u01(rng) - 1.0) * dist.time_jitter : 0.0;
    m.time = std::clamp(dist.meal_slots[idx] + jitter, 0.0, kDay - 1.0);
    m.carbs = dist.carbs_min + (dist.carbs_max - dist.carbs_min) * u01(rng);
    m.absorption = u01(rng) < dist.fast_fraction ? Absorption::Fast : Absorption::Slow;
    const bool bolus_draw = u01(rng) < dist.bolus_probability;
    if (s.mode == Mode::Hybrid && bolus_draw) {
      m.bolused = true;
      m.bolus_size = m.carbs / dist.carb_ratio;
    }
    s.meals.push_back(m);
  }
  std::stable_sort(s.meals.begin(), s.meals.end(),
                   [](const MealEvent& a, const MealEvent& b) { return a.time < b.time; });
  return s;
}

SubjectParams sample_subject(std::mt19937_64& rng, const SubjectParams& nominal, const ParamSpread& spread) {
  spread.validate();
  std::normal_distribution<double> g(0.0, 1.0);
  auto draw = [&](double nominal_value, double sigma) { return nominal_value * std::exp(sigma * g(rng)); };
  SubjectParams p = nominal;
  p.S_g = draw(nominal.S_g, spread.S_g);
  p.S_i = draw(nominal.S_i, spread.S_i);
  p.p_2 = draw(nominal.p_2, spread.p_2);
  p.k_a1 = draw(nominal.k_a1, spread.k_a1);
  p.k_d = draw(nominal.k_d, spread.k_d);
  p.k_a2 = draw(nominal.k_a2, spread.k_a2);
  p.k_cl = draw(nominal.k_cl, spread.k_cl);
  p.V_I = draw(nominal.V_I, spread.V_I);
  p.BW = draw(nominal.BW, spread.BW);
  p.validate();
  return p;
}

// ---------------------------------------------------------------------------

ClosedLoop::ClosedLoop(const SubjectParams& subject, const LinearModel& model, const MpcParams& mpc,
                       const SimOptions& options)
    : subject_(subject),
      model_(model),
      mpc_params_(mpc),
      opt_(options),
      controller_(model, mpc),
      G_ref_(120.0),
      u_b_(mpc.u_b),
      history_(kCycle, static_cast<std::size_t>(options.iob_curve.duration / kCycle) + 2) {
  subject_.validate();
  opt_.validate();
  reset();
}

void ClosedLoop::reset() {
  plant_ = glucose::steady_state(subject_, u_b_);
  est_ = glucose::EstimatorState{};
  history_ = glucose::InsulinHistory(kCycle, static_cast<std::size_t>(opt_.iob_curve.duration / kCycle) + 2);
  y_recent_.fill(plant_.G - G_ref_);
  est_.x_hat[0] = plant_.G - G_ref_;
  meals_.clear();
  last_rescue_ = -1e9;
  u_applied_ = 0.0;
  // Keep the day grid aligned with the absolute clock.
  now_ = std::ceil(now_ / kDay) * kDay;
}

double ClosedLoop::meal_disturbance(double t) const {
  double d = 0.0;
  for (const auto& m : meals_) d += opt_.meal_model.response(m.carbs, m.absorption, t - m.onset);
  return d;
}

DayResult ClosedLoop::run_day(const Scenario& scenario) {
  scenario.validate();
  DayResult out;
  out.trace.reserve(kCyclesPerDay);
  out.pairs.reserve(kCyclesPerDay);

  const double day_start = now_;
  std::mt19937_64 noise_rng(scenario.seed);
  std::normal_distribution<double> noise(0.0, 1.0);

  // Drop meals whose effect has died out.
  const double horizon = 10.0 * std::max(opt_.meal_model.fast_tau1, opt_.meal_model.slow_tau1);
  std::erase_if(meals_, [&](const ActiveMeal& m) { return day_start - m.onset > horizon; });
  for (const auto& m : scenario.meals) meals_.push_back({day_start + m.time, m.carbs, m.absorption});

  for (int k = 0; k < kCyclesPerDay; ++k) {
    const double t = day_start + k * kCycle;
    const double y = plant_.G + (scenario.cgm_noise_sd > 0 ? scenario.cgm_noise_sd * noise(noise_rng) : 0.0);

    bool rescue = false;
    if (scenario.rescue_carbs_enabled && y < opt_.rescue_threshold && t - last_rescue_ >= opt_.rescue_lockout) {
      meals_.push_back({t, opt_.rescue_carbs, Absorption::Fast});
      last_rescue_ = t;
      rescue = true;
      ++out.rescues;
    }

    const double y_dev = y - G_ref_;
    est_ = glucose::kalman_step(est_, y_dev, u_applied_, model_, opt_.kalman);
    y_recent_ = {y_recent_[1], y_recent_[2], y_dev};
    const double y_dot = glucose::glucose_rate(y_recent_, kCycle);
    const double iob = glucose::iob(history_, u_b_, t, opt_.iob_curve);

    mpc::AugmentedState s;
    s.x = est_.x_hat;
    s.d = est_.d_hat;
    s.y_dot = y_dot;
    s.iob = iob;

    double u = 0.0;
    try {
      const auto res = controller_.solve(s);
      if (res.solution.status != qp::QpStatus::Optimal) {
        throw InvariantViolation(std::string("MPC solve ended with status ") + qp::to_string(res.solution.status));
      }
      u = res.u;
    } catch (const std::exception& e) {
      spdlog::warn("day at t={} aborted at cycle {}: {}", day_start, k, e.what());
      out.aborted = true;
      break;
    }
    out.pairs.push_back({s.to_vector(), u});

    double bolus_rate = 0.0;
    for (const auto& m : scenario.meals) {
      const double mt = day_start + m.time;
      if (m.bolused && mt >= t && mt < t + kCycle) bolus_rate += m.bolus_size * 1000.0 / kCycle;
    }
    const double delivered = std::max(0.0, u_b_ + u + bolus_rate);
    history_.push(t, delivered);

    const double d_true = meal_disturbance(t);
    out.trace.push_back({t - day_start, plant_.G, y, d_true, u, delivered, iob, est_.d_hat, rescue});

    const double h = kCycle / opt_.substeps;
    for (int j = 0; j < opt_.substeps; ++j) {
      plant_.d = meal_disturbance(t + (j + 0.5) * h);
      plant_ = glucose::integrate_step(plant_, delivered, h, subject_);
      if (plant_.G <= glucose::kGlucoseFloor) out.degenerate = true;
    }
    u_applied_ = delivered - u_b_;
  }
  now_ = day_start + kDay;
  return out;
}

DayResult simulate_day(const SubjectParams& subject, const Scenario& scenario, const LinearModel& model,
                       const MpcParams& mpc, const SimOptions& options) {
  ClosedLoop loop(subject, model, mpc, options);
  return loop.run_day(scenario);
}

// ---------------------------------------------------------------------------

std::vector<DataPair> simulate_subject(const CampaignConfig& config, int subject_index, CampaignStats& stats) {
  std::mt19937_64 subject_rng(derive_seed(config.master_seed, 1, static_cast<std::uint64_t>(subject_index)));
  const SubjectParams subject = sample_subject(subject_rng, config.nominal, config.spread);
  // One nominal controller for the whole cohort so that u depends on the stored state only.
  const LinearModel model = glucose::nominal_model(config.nominal);
  ClosedLoop loop(subject, model, config.mpc, config.sim);

  std::vector<DataPair> records;
  records.reserve(static_cast<std::size_t>(config.days_per_subject) * kCyclesPerDay);
  for (int day = 0; day < config.days_per_subject; ++day) {
    std::mt19937_64 day_rng(derive_seed(config.master_seed, 2 + static_cast<std::uint64_t>(subject_index),
                                        static_cast<std::uint64_t>(day)));
    const Scenario sc = sample_scenario(day_rng, config.scenario);
    DayResult r = loop.run_day(sc);
    ++stats.days;
    stats.rescues += r.rescues;
    if (r.degenerate || r.aborted) {
      if (r.degenerate) ++stats.degenerate_days;
      if (r.aborted) ++stats.aborted_days;
      spdlog::info("subject {} day {} excluded ({})", subject_index, day, r.aborted ? "solver" : "glucose floor");
      loop.reset();
      continue;
    }
    records.insert(records.end(), r.pairs.begin(), r.pairs.end());
  }
  return records;
}

CampaignStats run_campaign(const CampaignConfig& config) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  CampaignStats total;
  io::DatasetWriter writer(config.output);

  // Workers fill per-subject buffers; the writer drains them in subject order.
  const int batch = config.threads;
  for (int first = 0; first < config.n_subjects; first += batch) {
    const int last = std::min(config.n_subjects, first + batch);
    std::vector<std::vector<DataPair>> buffers(last - first);
    std::vector<CampaignStats> stats(last - first);
    std::vector<std::exception_ptr> errors(last - first);
    auto work = [&](int i) {
      try {
        buffers[i - first] = simulate_subject(config, i, stats[i - first]);
      } catch (...) {
        errors[i - first] = std::current_exception();
      }
    };
    if (batch == 1) {
      work(first);
    } else {
      std::vector<std::thread> pool;
      for (int i = first; i < last; ++i) pool.emplace_back(work, i);
      for (auto& th : pool) th.join();
    }
    for (int i = first; i < last; ++i) {
      if (errors[i - first]) std::rethrow_exception(errors[i - first]);
      for (const auto& p : buffers[i - first]) writer.write(p);
      const auto& s = stats[i - first];
      total.days += s.days;
      total.degenerate_days += s.degenerate_days;
      total.aborted_days += s.aborted_days;
      total.rescues += s.rescues;
      spdlog::info("subject {}/{}: {} records, {} excluded days, {} rescues", i + 1, config.n_subjects,
                   buffers[i - first].size(), s.degenerate_days + s.aborted_days, s.rescues);
    }
  }
  total.records = writer.count();
  writer.close();
  total.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  spdlog::info("campaign done: {} records from {} days ({} degenerate, {} aborted) in {:.1f} s", total.records,
               total.days, total.degenerate_days, total.aborted_days, total.wall_seconds);
  return total;
}

}  // namespace osd::scenario
