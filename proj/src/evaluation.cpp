#include "osd/evaluation.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fmt/format.h>
#include <fstream>
#include <future>
#include <numeric>
#include <ostream>
#include <random>
#include <string_view>
#include <unordered_set>

namespace osd::eval {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string record_key(const Dataset& d, std::size_t i) {
  std::string k(sizeof(double) * (kStateDim + 1), '\0');
  for (int j = 0; j < kStateDim; ++j) {
    const double v = d.X(static_cast<Eigen::Index>(i), j);
    std::memcpy(k.data() + sizeof(double) * j, &v, sizeof(double));
  }
  const double u = d.u[static_cast<Eigen::Index>(i)];
  std::memcpy(k.data() + sizeof(double) * kStateDim, &u, sizeof(double));
  return k;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream o(path);
  if (!o) throw IoError("cannot open " + path.string() + " for writing");
  o.precision(17);
  return o;
}

const char* status_name(CellStatus s) {
  switch (s) {
    case CellStatus::Ok: return "ok";
    case CellStatus::Failed: return "failed";
    case CellStatus::Skipped: return "skipped";
  }
  return "?";
}

}  // namespace

Osd make_test_osd(const Dataset& raw, const std::vector<const Osd*>& training, double ratio,
                  const builder::BuildOptions& options) {
  require(!training.empty(), "make_test_osd: no training cells");
  require(ratio >= 1.0 && std::isfinite(ratio), "make_test_osd: ratio must be >= 1");
  OsdParams p = training.front()->params;
  for (const Osd* t : training) {
    require(t->params.s_x == p.s_x, "make_test_osd: training cells use different state metrics");
    p.j_star = std::min(p.j_star, t->params.j_star);
    p.s_u = std::max(p.s_u, t->params.s_u);
  }
  p.j_star /= ratio;
  p.s_u *= ratio;
  Osd full = builder::build_osd(raw, p, options);

  std::unordered_set<std::string> seen;
  for (const Osd* t : training)
    for (std::size_t i = 0; i < t->size(); ++i) seen.insert(record_key(t->records, i));

  Osd out;
  out.params = p;
  out.u_s = full.u_s;
  out.stats = full.stats;
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < full.size(); ++i)
    if (!seen.count(record_key(full.records, i))) keep.push_back(i);
  out.records.resize(keep.size());
  out.source_index.reserve(keep.size());
  for (std::size_t k = 0; k < keep.size(); ++k) {
    out.records.X.row(static_cast<Eigen::Index>(k)) = full.records.X.row(static_cast<Eigen::Index>(keep[k]));
    out.records.u[static_cast<Eigen::Index>(k)] = full.records.u[static_cast<Eigen::Index>(keep[k])];
    out.source_index.push_back(full.source_index[keep[k]]);
  }
  spdlog::info("make_test_osd: J*={} S_u={}: {} records, {} overlapping training centroids removed", p.j_star, p.s_u,
               out.size(), full.size() - out.size());
  return out;
}

Osd make_test_osd(const Dataset& raw, const Osd& training, double ratio, const builder::BuildOptions& options) {
  return make_test_osd(raw, std::vector<const Osd*>{&training}, ratio, options);
}

double percentile(std::vector<double> v, double q) {
  require(!v.empty(), "percentile: empty sample");
  require(q >= 0.0 && q <= 1.0, "percentile: q outside [0, 1]");
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
  const std::size_t k = rank == 0 ? 0 : rank - 1;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
  return v[k];
}

ErrorReport error_report(const Eigen::VectorXd& predicted, const Dataset& test, const ErrorReportOptions& opt) {
  require(test.size() > 0, "error_report: empty test set");
  require(static_cast<std::size_t>(predicted.size()) == test.size(), "error_report: prediction count mismatch");
  require(opt.bin_width > 0, "error_report: bin width must be positive");
  ErrorReport r;
  const std::size_t n = test.size();
  r.errors.resize(n);
  r.glucose.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    r.errors[i] = std::abs(test.u[k] - predicted[k]);
    r.glucose[i] = test.X(k, 0) + opt.glucose_offset;
  }
  r.mean = std::accumulate(r.errors.begin(), r.errors.end(), 0.0) / static_cast<double>(n);
  r.median = percentile(r.errors, 0.5);
  r.p95 = percentile(r.errors, 0.95);
  r.max = *std::max_element(r.errors.begin(), r.errors.end());

  const auto [gmin, gmax] = std::minmax_element(r.glucose.begin(), r.glucose.end());
  const double lo = std::floor(*gmin / opt.bin_width) * opt.bin_width;
  const auto n_bins = static_cast<std::size_t>(std::floor((*gmax - lo) / opt.bin_width)) + 1;
  r.bins.resize(n_bins);
  for (std::size_t b = 0; b < n_bins; ++b) {
    r.bins[b].lo = lo + opt.bin_width * static_cast<double>(b);
    r.bins[b].hi = r.bins[b].lo + opt.bin_width;
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto b = static_cast<std::size_t>(std::floor((r.glucose[i] - lo) / opt.bin_width));
    b = std::min(b, n_bins - 1);
    auto& bin = r.bins[b];
    ++bin.count;
    bin.mean += r.errors[i];
    bin.max = std::max(bin.max, r.errors[i]);
  }
  for (auto& bin : r.bins)
    if (bin.count) bin.mean /= static_cast<double>(bin.count);
  return r;
}

ErrorReport nn_error_report(const neural::NetSpec& spec, const neural::NetParams& params, const Dataset& test,
                            const ErrorReportOptions& opt) {
  require(test.size() > 0, "nn_error_report: empty test set");
  return error_report(neural::forward_batch(params, spec, test.X), test, opt);
}

AuditReport audit_actions(const Dataset& data, const mpc::Controller& controller, double fraction,
                          std::uint64_t seed) {
  require(fraction > 0.0 && fraction <= 1.0, "audit_actions: fraction outside (0, 1]");
  AuditReport r;
  if (data.size() == 0) return r;
  const auto n = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(data.size())));
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  for (std::size_t i : idx) {
    const auto k = static_cast<Eigen::Index>(i);
    const Vec8 x = data.X.row(k).transpose();
    const double u = controller(mpc::AugmentedState::from_vector(x));
    const double stored = data.u[k];
    ++r.checked;
    if (std::memcmp(&u, &stored, sizeof(double)) != 0) ++r.mismatches;
  }
  return r;
}

const CellResult* GridResult::find(double j_star, double s_u) const {
  for (const auto& c : cells)
    if (!c.raw && c.params.j_star == j_star && c.params.s_u == s_u) return &c;
  return nullptr;
}

const CellResult* GridResult::raw_cell() const {
  for (const auto& c : cells)
    if (c.raw) return &c;
  return nullptr;
}

GridResult compare_training_regimes(const Dataset& raw, const std::vector<OsdParams>& grid,
                                    const neural::NetSpec& spec, const neural::TrainConfig& train_config,
                                    const CompareOptions& options) {
  require(!grid.empty(), "compare_training_regimes: empty grid");
  require(options.threads >= 1, "compare_training_regimes: threads must be >= 1");
  for (const auto& p : grid) p.validate();
  train_config.validate();

  GridResult result;
  result.cells.resize(grid.size());
  std::vector<Osd> osds(grid.size());

  auto build_cell = [&](std::size_t i) {
    CellResult& c = result.cells[i];
    c.params = grid[i];
    c.label = fmt::format("J*={} S_u={}", grid[i].j_star, grid[i].s_u);
    try {
      const auto t0 = std::chrono::steady_clock::now();
      osds[i] = builder::build_osd(raw, grid[i], options.build);
      c.build_seconds = seconds_since(t0);
      c.n_d = osds[i].size();
      c.final_rejection_ratio = osds[i].stats.current_ratio();
      c.saturation = osds[i].stats.rejection_ratio_history;
      if (options.measure_resolution) c.resolution = builder::measure_resolution(osds[i], raw);
      c.status = CellStatus::Ok;
    } catch (const std::exception& e) {
      c.status = CellStatus::Failed;
      c.message = e.what();
      spdlog::error("cell {} failed during build: {}", c.label, e.what());
    }
  };

  auto run_pool = [&](std::size_t count, const auto& job) {
    for (std::size_t start = 0; start < count; start += static_cast<std::size_t>(options.threads)) {
      const std::size_t end = std::min(count, start + static_cast<std::size_t>(options.threads));
      std::vector<std::future<void>> jobs;
      for (std::size_t i = start + 1; i < end; ++i) jobs.push_back(std::async(std::launch::async, job, i));
      job(start);
      for (auto& j : jobs) j.get();
    }
  };

  run_pool(grid.size(), build_cell);

  std::vector<const Osd*> built;
  for (std::size_t i = 0; i < grid.size(); ++i)
    if (result.cells[i].status == CellStatus::Ok) built.push_back(&osds[i]);
  require(!built.empty(), "compare_training_regimes: every grid cell failed to build");
  const Osd test = make_test_osd(raw, built, options.test_ratio, options.build);
  require(test.size() > 0, "compare_training_regimes: test OSD is empty after overlap removal");
  result.test_size = test.size();
  result.test_params = test.params;

  if (options.include_raw) {
    CellResult rc;
    rc.raw = true;
    rc.label = "raw";
    rc.n_d = raw.size();
    rc.status = CellStatus::Ok;
    result.cells.push_back(std::move(rc));
  }

  auto train_cell = [&](std::size_t i) {
    CellResult& c = result.cells[i];
    if (c.status != CellStatus::Ok) return;
    try {
      const Dataset& data = c.raw ? raw : osds[i].records;
      const auto t0 = std::chrono::steady_clock::now();
      auto tr = neural::train(spec, data, train_config);
      c.train_seconds = seconds_since(t0);
      c.train_log = std::move(tr.log);
      c.spec = tr.spec;
      c.net = std::move(tr.params);
      c.errors = nn_error_report(c.spec, c.net, test.records, options.report);
      spdlog::info("cell {}: mean {:.4g} p95 {:.4g} max {:.4g}", c.label, c.errors.mean, c.errors.p95,
                   c.errors.max);
    } catch (const std::exception& e) {
      c.status = CellStatus::Failed;
      c.message = e.what();
      spdlog::error("cell {} failed during training: {}", c.label, e.what());
    }
  };
  run_pool(result.cells.size(), train_cell);

  long steps = -1;
  result.budget_parity = true;
  for (const auto& c : result.cells) {
    if (c.status != CellStatus::Ok) continue;
    if (steps < 0) steps = c.train_log.steps;
    result.budget_parity = result.budget_parity && c.train_log.steps == steps;
  }
  return result;
}

int kkt_dimension(int variables, int constraints) {
  require(variables >= 0 && constraints >= 0, "kkt_dimension: negative size");
  return variables + constraints;
}

std::size_t qp_ram_bytes(int variables, int constraints, int precision_bytes) {
  const auto k = static_cast<std::size_t>(kkt_dimension(variables, constraints));
  return k * k * static_cast<std::size_t>(precision_bytes);
}

FootprintReport footprint_comparison(const neural::NetSpec& spec, const neural::NetParams& params,
                                     const mpc::Controller& controller, const Dataset& states) {
  require(states.size() > 0, "footprint_comparison: no states to time");
  FootprintReport r;
  r.nn = neural::footprint(spec, params);
  r.qp_variables = 2 * controller.params().horizon;
  r.qp_constraints = mpc::constraint_rows(controller.params());
  r.kkt_dimension = kkt_dimension(r.qp_variables, r.qp_constraints);
  r.qp_ram_bytes = qp_ram_bytes(r.qp_variables, r.qp_constraints);
  r.states_timed = states.size();

  std::vector<mpc::AugmentedState> s;
  s.reserve(states.size());
  for (std::size_t i = 0; i < states.size(); ++i)
    s.push_back(mpc::AugmentedState::from_vector(states.X.row(static_cast<Eigen::Index>(i)).transpose()));

  volatile double sink = 0.0;
  auto t0 = std::chrono::steady_clock::now();
  for (const auto& st : s) sink = sink + controller(st);
  r.mpc_seconds_per_call = seconds_since(t0) / static_cast<double>(s.size());

  // The net is much faster, so repeat its pass until the timing is well above clock resolution.
  int reps = 0;
  t0 = std::chrono::steady_clock::now();
  do {
    for (std::size_t i = 0; i < states.size(); ++i)
      sink = sink + neural::forward(params, spec, states.X.row(static_cast<Eigen::Index>(i)).transpose());
    ++reps;
  } while (seconds_since(t0) < 0.2);
  r.nn_seconds_per_call = seconds_since(t0) / (static_cast<double>(s.size()) * reps);
  r.time_ratio = r.mpc_seconds_per_call / r.nn_seconds_per_call;
  return r;
}

void write_error_report(std::ostream& out, const ErrorReport& r) {
  out << fmt::format("samples {}\nmean {:.6g}\nmedian {:.6g}\np95 {:.6g}\nmax {:.6g}\n", r.size(), r.mean, r.median,
                     r.p95, r.max);
  out << "glucose_lo\tglucose_hi\tcount\tmean_error\tmax_error\n";
  for (const auto& b : r.bins)
    out << fmt::format("{:g}\t{:g}\t{}\t{:.6g}\t{:.6g}\n", b.lo, b.hi, b.count, b.mean, b.max);
}

void write_error_bins_tsv(const std::filesystem::path& path, const ErrorReport& r) {
  auto o = open_out(path);
  o << "glucose_center\tcount\tmean_error\tmax_error\n";
  for (const auto& b : r.bins) o << 0.5 * (b.lo + b.hi) << '\t' << b.count << '\t' << b.mean << '\t' << b.max << '\n';
  if (!o) throw IoError("write failed: " + path.string());
}

void write_grid_table(std::ostream& out, const GridResult& g) {
  out << fmt::format("test set: {} records (J*={:g}, S_u={:g}); equal step budgets: {}\n", g.test_size,
                     g.test_params.j_star, g.test_params.s_u, g.budget_parity ? "yes" : "no");
  out << fmt::format("{:<22} {:>8} {:>10} {:>10} {:>10} {:>8} {:>10} {:>10} {:>10}\n", "cell", "status", "N_d",
                     "mean_us", "max_us", "reject", "nn_mean", "nn_p95", "nn_max");
  for (const auto& c : g.cells) {
    out << fmt::format("{:<22} {:>8} {:>10} {:>10.4g} {:>10.4g} {:>8.4f} {:>10.4g} {:>10.4g} {:>10.4g}\n", c.label,
                       status_name(c.status), c.n_d, c.resolution.mean_us, c.resolution.max_us,
                       c.final_rejection_ratio, c.errors.mean, c.errors.p95, c.errors.max);
    if (!c.message.empty()) out << "  " << c.message << '\n';
  }
}

void write_grid_tsv(const std::filesystem::path& path, const GridResult& g) {
  auto o = open_out(path);
  o << "label\traw\tj_star\ts_u\tstatus\tn_d\tmean_us\tmax_us\trejection\tsteps\tnn_mean\tnn_median\tnn_p95\tnn_max\n";
  for (const auto& c : g.cells) {
    o << c.label << '\t' << c.raw << '\t' << c.params.j_star << '\t' << c.params.s_u << '\t' << status_name(c.status)
      << '\t' << c.n_d << '\t' << c.resolution.mean_us << '\t' << c.resolution.max_us << '\t'
      << c.final_rejection_ratio << '\t' << c.train_log.steps << '\t' << c.errors.mean << '\t' << c.errors.median
      << '\t' << c.errors.p95 << '\t' << c.errors.max << '\n';
  }
  if (!o) throw IoError("write failed: " + path.string());
}

void write_saturation_tsv(const std::filesystem::path& path, const GridResult& g) {
  auto o = open_out(path);
  o << "label\tprocessed\trejection_ratio\n";
  for (const auto& c : g.cells)
    for (const auto& [k, r] : c.saturation) o << c.label << '\t' << k << '\t' << r << '\n';
  if (!o) throw IoError("write failed: " + path.string());
}

void write_footprint(std::ostream& out, const FootprintReport& r) {
  out << fmt::format(
      "nn parameters {}\nnn parameter bytes {}\nnn weights file bytes {}\nnn peak ram bytes {}\nnn matmuls {}\n"
      "qp variables {}\nqp constraints {}\nkkt dimension {}\nqp ram bytes {}\n"
      "states timed {}\nmpc seconds per call {:.6g}\nnn seconds per call {:.6g}\nmpc/nn time ratio {:.4g}\n",
      r.nn.parameter_count, r.nn.param_bytes, r.nn.file_bytes, r.nn.peak_ram_bytes, r.nn.matmul_count, r.qp_variables,
      r.qp_constraints, r.kkt_dimension, r.qp_ram_bytes, r.states_timed, r.mpc_seconds_per_call,
      r.nn_seconds_per_call, r.time_ratio);
}

}  // namespace osd::eval
