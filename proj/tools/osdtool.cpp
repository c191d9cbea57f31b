#include "osd/pipeline.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <iostream>

namespace {

enum ExitCode { kOk = 0, kValidation = 2, kInvariant = 3, kIo = 4 };

}  // namespace

int main(int argc, char** argv) {
  using namespace osd;
  namespace fs = std::filesystem;

  CLI::App app{"Closed-loop dataset generation, optimal sampling and surrogate training"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> inputs;
  std::string output, grid_cell;
  bool verify_exact = false;
  std::uint64_t seed_override = 0;

  auto add_common = [&](CLI::App* c) {
    c->add_option("--config", config_path, "Pipeline configuration (JSON)")->required()->check(CLI::ExistingFile);
    c->add_option("--input", inputs, "Input files");
    c->add_option("--output", output, "Output file or directory");
    c->add_option("--seed-override", seed_override, "Derive every seed from this value");
  };
  auto* simulate = app.add_subcommand("simulate", "Run the closed-loop campaign and write the raw dataset");
  auto* build = app.add_subcommand("build-osd", "Build optimally sampled datasets for the configured grid");
  auto* verify = app.add_subcommand("verify", "Check both sampling conditions and measure resolution");
  auto* train = app.add_subcommand("train", "Train one network per input dataset");
  auto* evaluate = app.add_subcommand("evaluate", "Evaluate networks on the test set");
  for (auto* c : {simulate, build, verify, train, evaluate}) add_common(c);
  build->add_option("--grid-cell", grid_cell, "Restrict to one cell, given as J*,S_u");
  verify->add_flag("--verify-exact", verify_exact, "Use brute-force nearest neighbours");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kValidation;
  }

  auto single = [&](const char* what) -> std::optional<fs::path> {
    if (inputs.size() > 1) throw ValidationError(std::string(what) + " takes a single --input");
    if (inputs.empty()) return std::nullopt;
    return fs::path(inputs.front());
  };
  auto opt_output = [&]() -> std::optional<fs::path> {
    if (output.empty()) return std::nullopt;
    return fs::path(output);
  };
  const std::vector<fs::path> paths(inputs.begin(), inputs.end());

  try {
    auto config = pipeline::PipelineConfig::load(config_path);
    for (auto* c : {simulate, build, verify, train, evaluate})
      if (c->parsed() && c->count("--seed-override")) config.override_seeds(seed_override);

    if (simulate->parsed()) {
      if (!inputs.empty()) throw ValidationError("simulate takes no --input");
      const auto r = pipeline::cmd_simulate(config, opt_output());
      std::cout << "wrote " << r.stats.records << " records to " << r.output.string() << '\n';
    } else if (build->parsed()) {
      const auto r = pipeline::cmd_build_osd(config, single("build-osd"), opt_output(), grid_cell);
      for (std::size_t i = 0; i < r.cells.size(); ++i)
        std::cout << r.outputs[i].string() << ": " << r.cells[i].size() << " records\n";
      if (r.test) std::cout << "test set: " << r.test->size() << " records\n";
    } else if (verify->parsed()) {
      const auto r = pipeline::cmd_verify(config, paths, opt_output(), verify_exact);
      for (const auto& e : r.entries)
        std::cout << e.label << ": " << (e.verification.passed ? "pass" : "FAIL") << " (coverage "
                  << e.verification.coverage << ", violations " << e.verification.condition_ii_violations << ")\n";
    } else if (train->parsed()) {
      const auto r = pipeline::cmd_train(config, paths, opt_output());
      for (const auto& e : r.entries)
        std::cout << e.weights.string() << ": " << e.log.steps << " steps, best validation MSE "
                  << e.log.best_val_loss << '\n';
    } else if (evaluate->parsed()) {
      const auto r = pipeline::cmd_evaluate(config, paths, opt_output());
      for (const auto& e : r.entries)
        std::cout << e.label << ": p95 " << e.errors.p95 << ", max " << e.errors.max << '\n';
    }
  } catch (const ValidationError& e) {
    spdlog::error("validation: {}", e.what());
    return kValidation;
  } catch (const InvariantViolation& e) {
    spdlog::error("invariant: {}", e.what());
    return kInvariant;
  } catch (const IoError& e) {
    spdlog::error("i/o: {}", e.what());
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    spdlog::error("i/o: {}", e.what());
    return kIo;
  }
  return kOk;
}
