#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "transmed/core.hpp"
#include "transmed/estimate.hpp"

namespace transmed::cli {

enum class Command { Estimate, Simulate, Oracle };

struct RunConfig {
  Command command = Command::Estimate;
  std::string input_path;     // estimate
  std::string scenario_path;  // simulate
  std::string output_path;    // empty: standard output
  std::string format = "csv";
  std::optional<std::uint64_t> seed;
  int threads = 1;
  std::optional<estimate::Estimator> estimator;
  std::optional<int> folds;
  std::optional<bool> weighted_fluct;
  std::optional<bool> g_empirical;
  std::optional<int> reps;
  bool unweighted = false;
  std::string designs = "main";  // estimate: "main" or "dgm"
  std::string mis;               // estimate: components to fit intercept-only
  std::optional<double> y_min, y_max;
  EffectSpec pair;
  std::vector<std::pair<std::string, double>> overrides;  // oracle
};

enum ExitCode : int { kOk = 0, kInputError = 2, kEstimatorError = 3, kScenarioAbort = 4 };

/// Reads the observation table. Required columns: s, a, z, y, w1.., m1..;
/// optional: delta (default 1), pi. Empty cells are absent values. Throws
/// InvalidArgument naming the missing column or the offending row.
Dataset read_csv(std::istream& in, std::optional<OutcomeBounds> bounds = std::nullopt);

/// Thread count from the flag, then TM_THREADS, then the hardware.
int resolve_threads(std::optional<int> flag);

int cmd_estimate(const RunConfig& config, std::ostream& out, std::ostream& err);
int cmd_simulate(const RunConfig& config, std::ostream& out, std::ostream& err);
int cmd_oracle(const RunConfig& config, std::ostream& out, std::ostream& err);

/// Parses arguments and dispatches; returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace transmed::cli
