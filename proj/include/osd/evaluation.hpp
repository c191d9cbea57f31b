#pragma once

#include "osd/glucose_model.hpp"
#include "osd/mpc.hpp"
#include "osd/neural.hpp"
#include "osd/osd_builder.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace osd::eval {

using builder::Osd;
using builder::OsdParams;
using io::Dataset;

/// Test set for nets trained on `training`: an OSD with J* = min J* / ratio and
/// S_u = max S_u * ratio over the training cells, built on the same stream, with
/// every record identical to a training centroid removed.
Osd make_test_osd(const Dataset& raw, const std::vector<const Osd*>& training, double ratio = 2.5,
                  const builder::BuildOptions& options = {});
Osd make_test_osd(const Dataset& raw, const Osd& training, double ratio = 2.5,
                  const builder::BuildOptions& options = {});

struct GlucoseBin {
  double lo = 0.0, hi = 0.0;  // mg/dL
  std::size_t count = 0;
  double mean = 0.0, max = 0.0;
};

struct ErrorReport {
  std::vector<double> errors;   // |u_true - u_pred| per test record
  std::vector<double> glucose;  // mg/dL per test record
  double mean = 0.0, median = 0.0, p95 = 0.0, max = 0.0;
  std::vector<GlucoseBin> bins;

  std::size_t size() const { return errors.size(); }
};

struct ErrorReportOptions {
  double bin_width = 10.0;         // mg/dL
  double glucose_offset = 120.0;   // the stored state holds glucose as a deviation from this value
};

/// Errors of `predicted` against the stored actions of `test`.
ErrorReport error_report(const Eigen::VectorXd& predicted, const Dataset& test, const ErrorReportOptions& opt = {});
ErrorReport nn_error_report(const neural::NetSpec& spec, const neural::NetParams& params, const Dataset& test,
                            const ErrorReportOptions& opt = {});

/// Nearest-rank percentile of a sample, q in [0, 1].
double percentile(std::vector<double> values, double q);

struct AuditReport {
  std::size_t checked = 0;
  std::size_t mismatches = 0;
  bool passed() const { return mismatches == 0; }
};

/// Re-runs the controller on a seeded random fraction of the records and counts
/// actions that differ from the stored ones in any bit.
AuditReport audit_actions(const Dataset& data, const mpc::Controller& controller, double fraction,
                          std::uint64_t seed);

enum class CellStatus { Ok, Failed, Skipped };

struct CellResult {
  std::string label;
  OsdParams params;
  bool raw = false;  // trained on the raw stream rather than an OSD
  CellStatus status = CellStatus::Skipped;
  std::string message;
  std::size_t n_d = 0;
  double build_seconds = 0.0;
  double train_seconds = 0.0;
  double final_rejection_ratio = 0.0;
  std::vector<std::pair<std::size_t, double>> saturation;
  builder::ResolutionReport resolution;
  neural::TrainLog train_log;
  ErrorReport errors;
  neural::NetSpec spec;
  neural::NetParams net;
};

struct GridResult {
  std::vector<CellResult> cells;  // OSD cells in grid order, then the raw cell
  std::size_t test_size = 0;
  OsdParams test_params;
  bool budget_parity = false;  // every trained cell took the same number of gradient steps

  const CellResult* find(double j_star, double s_u) const;
  const CellResult* raw_cell() const;
};

struct CompareOptions {
  double test_ratio = 2.5;
  builder::BuildOptions build;
  ErrorReportOptions report;
  bool measure_resolution = true;
  bool include_raw = true;
  int threads = 1;
};

/// Builds one OSD per grid cell, trains one net per cell and one on the raw stream
/// with identical budgets, and evaluates all of them on a common test OSD. A failing
/// cell is recorded and the run continues.
GridResult compare_training_regimes(const Dataset& raw, const std::vector<OsdParams>& grid,
                                    const neural::NetSpec& spec, const neural::TrainConfig& train_config,
                                    const CompareOptions& options = {});

struct FootprintReport {
  neural::Footprint nn;
  int qp_variables = 0;
  int qp_constraints = 0;
  int kkt_dimension = 0;
  std::size_t qp_ram_bytes = 0;  // dense KKT matrix at 4-byte precision
  std::size_t states_timed = 0;
  double mpc_seconds_per_call = 0.0;
  double nn_seconds_per_call = 0.0;
  double time_ratio = 0.0;  // MPC / NN
};

int kkt_dimension(int variables, int constraints);
std::size_t qp_ram_bytes(int variables, int constraints, int precision_bytes = 4);

/// Sizes the net against the controller's QP and times both on the given states.
FootprintReport footprint_comparison(const neural::NetSpec& spec, const neural::NetParams& params,
                                     const mpc::Controller& controller, const Dataset& states);

void write_error_report(std::ostream& out, const ErrorReport& report);
void write_error_bins_tsv(const std::filesystem::path& path, const ErrorReport& report);
void write_grid_table(std::ostream& out, const GridResult& grid);
void write_grid_tsv(const std::filesystem::path& path, const GridResult& grid);
void write_saturation_tsv(const std::filesystem::path& path, const GridResult& grid);
void write_footprint(std::ostream& out, const FootprintReport& report);

}  // namespace osd::eval
