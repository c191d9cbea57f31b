#pragma once

#include "osd/evaluation.hpp"
#include "osd/neural.hpp"
#include "osd/osd_builder.hpp"
#include "osd/scenario.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace osd::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kToolVersion = "0.3.0";

struct Seeds {
  std::uint64_t simulation = 1;
  std::uint64_t hnsw = 42;
  std::uint64_t train = 7;
  std::uint64_t audit = 11;
};

struct OsdSection {
  std::vector<double> j_star = {1.0, 0.5, 0.25, 0.1};
  std::vector<double> s_u = {0.0, 1e-4, 2.5e-3, 1e-2};
  std::size_t metric_min_records = 10000;
  builder::BuildOptions build;
};

struct EvaluationSection {
  std::vector<std::pair<double, double>> train_cells = {{0.5, 0.0}, {0.5, 0.1}, {0.25, 0.0}, {0.25, 0.1}};
  bool train_raw = true;
  double test_ratio = 2.5;
  double bin_width = 10.0;
  double audit_fraction = 0.01;
  std::size_t timing_states = 1000;
};

struct PipelineConfig {
  scenario::CampaignConfig campaign;
  OsdSection osd;
  neural::NetSpec net;
  neural::TrainConfig train;
  EvaluationSection evaluation;
  Seeds seeds;
  fs::path work_dir = "run";

  /// Throws ValidationError on unknown keys, wrong types, missing seeds or invalid values.
  static PipelineConfig from_json(const json& j);
  static PipelineConfig load(const fs::path& path);
  json to_json() const;
  /// SHA-256 of the canonical JSON form.
  std::string hash() const;
  /// Replaces every seed with one derived from `seed`.
  void override_seeds(std::uint64_t seed);
  void validate() const;
};

std::string sha256_file(const fs::path& path);
std::string sha256_string(const std::string& data);

/// Label used for file names and report rows, e.g. "osd_J0.5_S0.01".
std::string cell_label(double j_star, double s_u);

struct FileRecord {
  std::string path;
  std::string sha256;
};

struct RunManifest {
  std::string command;
  std::string config_hash;
  std::string tool_version = kToolVersion;
  std::vector<FileRecord> inputs, outputs;
  double wall_seconds = 0.0;
  json summary = json::object();

  json to_json() const;
  void write(const fs::path& path) const;
};

/// Writes `<file>.sha256` next to an output so later stages can check it.
FileRecord seal_output(const fs::path& file);
/// Checks an input against its `.sha256` sidecar when one exists; throws IoError on mismatch.
FileRecord check_input(const fs::path& file);

/// Standard locations inside the work directory.
struct Layout {
  fs::path work;
  fs::path raw() const { return work / "raw.osd"; }
  fs::path osd_dir() const { return work / "osd"; }
  fs::path osd_file(double j_star, double s_u) const { return osd_dir() / (cell_label(j_star, s_u) + ".osd"); }
  fs::path test_osd() const { return osd_dir() / "test.osd"; }
  fs::path net_dir() const { return work / "nets"; }
  fs::path report_dir() const { return work / "reports"; }
  fs::path manifest_dir() const { return work / "manifests"; }
};

/// OSD file plus its JSON sidecar (metric, u_s, saturation trace).
void save_osd(const fs::path& path, const builder::Osd& osd, const std::string& config_hash);
builder::Osd load_osd(const fs::path& path);

struct SimulateResult {
  fs::path output;
  scenario::CampaignStats stats;
};

struct BuildResult {
  std::vector<fs::path> outputs;
  std::vector<builder::Osd> cells;  // grid order
  std::optional<builder::Osd> test;
  std::vector<double> build_seconds;
};

struct VerifyEntry {
  std::string label;
  builder::OsdParams params;
  builder::VerificationReport verification;
  builder::ResolutionReport resolution;
  double final_rejection_ratio = 0.0;
};

struct VerifyResult {
  std::vector<VerifyEntry> entries;
  bool all_passed = false;
};

struct TrainEntry {
  std::string label;
  fs::path weights;
  neural::TrainLog log;
};

struct TrainResult {
  std::vector<TrainEntry> entries;
};

struct EvaluateEntry {
  std::string label;
  eval::ErrorReport errors;
  long steps = 0;
};

struct EvaluateResult {
  std::vector<EvaluateEntry> entries;
  std::size_t test_size = 0;
  eval::AuditReport audit;
  eval::FootprintReport footprint;
  bool budget_parity = false;
  std::vector<fs::path> reports;
};

/// Grid cells followed by any training cells outside the grid, optionally
/// restricted to one "J*,S_u" pair.
std::vector<std::pair<double, double>> select_cells(const PipelineConfig& config, const std::string& grid_cell);

SimulateResult cmd_simulate(const PipelineConfig& config, const std::optional<fs::path>& output = {});
BuildResult cmd_build_osd(const PipelineConfig& config, const std::optional<fs::path>& input = {},
                          const std::optional<fs::path>& output_dir = {}, const std::string& grid_cell = {});
/// Throws InvariantViolation after writing the reports if any OSD fails verification.
VerifyResult cmd_verify(const PipelineConfig& config, const std::vector<fs::path>& inputs = {},
                        const std::optional<fs::path>& output_dir = {}, bool exact = false);
TrainResult cmd_train(const PipelineConfig& config, const std::vector<fs::path>& inputs = {},
                      const std::optional<fs::path>& output_dir = {});
EvaluateResult cmd_evaluate(const PipelineConfig& config, const std::vector<fs::path>& inputs = {},
                            const std::optional<fs::path>& output_dir = {});

}  // namespace osd::pipeline
