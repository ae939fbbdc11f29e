#include "transmed/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "transmed/sim.hpp"

namespace transmed::cli {

namespace {

using sim::format_double;

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

[[noreturn]] void row_error(std::size_t row, const std::string& what) {
  throw Error(ErrorCode::InvalidArgument, "row " + std::to_string(row) + ": " + what, row);
}

double parse_number(const std::string& text, std::size_t row, const std::string& column) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || text.empty()) {
    row_error(row, "column '" + column + "': '" + text + "' is not a number");
  }
  return v;
}

int parse_code(const std::string& text, std::size_t row, const std::string& column) {
  const double v = parse_number(text, row, column);
  if (v != 0.0 && v != 1.0) {
    throw Error(ErrorCode::NonBinaryCode,
                "row " + std::to_string(row) + ": column '" + column + "' must be 0 or 1", row);
  }
  return static_cast<int>(v);
}

// Columns named prefix1, prefix2, ... in numeric order.
std::vector<std::size_t> numbered(const std::map<std::string, std::size_t>& index,
                                  const std::string& prefix) {
  std::vector<std::size_t> out;
  for (int j = 1;; ++j) {
    auto it = index.find(prefix + std::to_string(j));
    if (it == index.end()) break;
    out.push_back(it->second);
  }
  return out;
}

void emit(const RunConfig& config, const std::string& text, std::ostream& out) {
  if (config.output_path.empty()) {
    out << text;
    return;
  }
  std::ofstream file(config.output_path, std::ios::binary);
  if (!file) throw Error(ErrorCode::InvalidArgument, "cannot write '" + config.output_path + "'");
  file << text;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::InvalidArgument, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void check_format(const std::string& format) {
  if (format != "csv" && format != "json") {
    throw Error(ErrorCode::InvalidArgument, "format must be csv or json");
  }
}

// Rows of (label, values) in a fixed column order.
std::string table_text(const std::string& format, const std::string& label_column,
                       const std::vector<std::string>& columns,
                       const std::vector<std::pair<std::string, std::vector<double>>>& rows) {
  std::ostringstream out;
  if (format == "csv") {
    out << label_column;
    for (const auto& c : columns) out << ',' << c;
    out << '\n';
    for (const auto& [label, values] : rows) {
      out << label;
      for (double v : values) out << ',' << format_double(v);
      out << '\n';
    }
    return out.str();
  }
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& [label, values] : rows) {
    nlohmann::ordered_json rec;
    rec[label_column] = label;
    for (std::size_t k = 0; k < columns.size(); ++k) rec[columns[k]] = values[k];
    arr.push_back(std::move(rec));
  }
  out << arr.dump(2) << '\n';
  return out.str();
}

}  // namespace

Dataset read_csv(std::istream& in, std::optional<OutcomeBounds> bounds) {
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::InvalidArgument, "empty input: no header");
  const auto header = split(line);
  std::map<std::string, std::size_t> index;
  for (std::size_t k = 0; k < header.size(); ++k) {
    if (!index.emplace(header[k], k).second) {
      throw Error(ErrorCode::InvalidArgument, "duplicate column '" + header[k] + "'");
    }
  }
  for (const char* required : {"s", "a", "z", "y", "w1", "m1"}) {
    if (!index.count(required)) {
      throw Error(ErrorCode::InvalidArgument, std::string("missing column '") + required + "'");
    }
  }
  const auto wcols = numbered(index, "w");
  const auto mcols = numbered(index, "m");
  auto col = [&](const char* name) -> std::optional<std::size_t> {
    auto it = index.find(name);
    return it == index.end() ? std::nullopt : std::optional<std::size_t>(it->second);
  };
  const auto c_delta = col("delta"), c_pi = col("pi");
  const std::size_t c_s = index["s"], c_a = index["a"], c_z = index["z"], c_y = index["y"];

  std::vector<Observation> rows;
  double y_lo = INFINITY, y_hi = -INFINITY;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const std::size_t row = rows.size();
    const auto cells = split(line);
    if (cells.size() != header.size()) {
      row_error(row, "expected " + std::to_string(header.size()) + " fields, found " +
                         std::to_string(cells.size()));
    }
    auto required = [&](std::size_t k) -> const std::string& {
      if (cells[k].empty()) row_error(row, "column '" + header[k] + "' is empty");
      return cells[k];
    };
    Observation o;
    o.delta = c_delta && !cells[*c_delta].empty() ? parse_code(cells[*c_delta], row, "delta") : 1;
    o.s = parse_code(required(c_s), row, "s");
    o.a = parse_code(required(c_a), row, "a");
    o.z = parse_code(required(c_z), row, "z");
    for (std::size_t k : wcols) o.w.push_back(parse_number(required(k), row, header[k]));
    for (std::size_t k : mcols) o.m.push_back(parse_number(required(k), row, header[k]));
    if (!cells[c_y].empty()) {
      o.y = parse_number(cells[c_y], row, "y");
      y_lo = std::min(y_lo, *o.y);
      y_hi = std::max(y_hi, *o.y);
    }
    if (c_pi && !cells[*c_pi].empty()) o.pi = parse_number(cells[*c_pi], row, "pi");
    rows.push_back(std::move(o));
  }
  if (rows.empty()) throw Error(ErrorCode::EmptyArm, "no data rows");
  OutcomeBounds b;
  if (bounds) {
    b = *bounds;
  } else if (std::isfinite(y_lo)) {
    b = {y_lo, y_hi};
  }
  return Dataset(std::move(rows), b);
}

int resolve_threads(std::optional<int> flag) {
  if (flag && *flag >= 1) return *flag;
  if (const char* env = std::getenv("TM_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) return v;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

int cmd_estimate(const RunConfig& config, std::ostream& out, std::ostream& err) {
  Dataset data;
  std::vector<double> gamma;
  nuisance::SuiteDesigns designs;
  nuisance::MisspecSet mis;
  try {
    check_format(config.format);
    std::ifstream in(config.input_path, std::ios::binary);
    if (!in) throw Error(ErrorCode::InvalidArgument, "cannot open '" + config.input_path + "'");
    std::optional<OutcomeBounds> bounds;
    if (config.y_min || config.y_max) {
      if (!config.y_min || !config.y_max) {
        throw Error(ErrorCode::InvalidArgument, "--y-min and --y-max go together");
      }
      bounds = OutcomeBounds{*config.y_min, *config.y_max};
    }
    data = read_csv(in, bounds);
    validate_effect(config.pair);
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (data[i].delta == 1) kept.push_back(i);
    }
    validate_dataset(data);  // row numbers refer to the file
    validate_dataset(data.subset(kept));
    scale_outcome(data);
    std::size_t with_pi = 0;
    for (const auto& o : data.rows()) with_pi += o.pi.has_value();
    if (config.unweighted || with_pi == 0) {
      gamma.assign(data.size(), 1.0);
    } else {
      // Weights are normalised over the analysed rows.
      const auto analysed = data.subset(kept);
      const auto g = estimate::survey_weights(analysed);
      gamma.assign(data.size(), 0.0);
      for (std::size_t k = 0; k < kept.size(); ++k) gamma[kept[k]] = g[k];
    }
    if (config.designs == "dgm") {
      designs = sim::correct_designs();
    } else if (config.designs == "main") {
      designs = nuisance::main_effects_designs(data.p(), data.q());
    } else {
      throw Error(ErrorCode::InvalidArgument, "designs must be main or dgm");
    }
    mis = nuisance::MisspecSet::parse(config.mis);
  } catch (const Error& e) {
    err << "input error: " << e.what() << '\n';
    return kInputError;
  }

  try {
    estimate::EstimatorOptions opts;
    opts.estimator = config.estimator.value_or(estimate::Estimator::Tmle);
    opts.folds = config.folds.value_or(1);
    opts.seed = config.seed.value_or(0);
    opts.tmle_weighted_fluctuation = config.weighted_fluct.value_or(true);
    opts.g_empirical = config.g_empirical.value_or(false);
    const auto eff = estimate::estimate_effects(data, designs, config.pair, opts, gamma, mis);
    auto values = [](const estimate::Estimate& e) {
      return std::vector<double>{e.theta, e.se, e.ci_lo, e.ci_hi};
    };
    const std::string text =
        table_text(config.format, "quantity", {"estimate", "se", "ci_lo", "ci_hi"},
                   {{"theta_ps", values(eff.theta_ps)},
                    {"theta_pp", values(eff.theta_pp)},
                    {"theta_ss", values(eff.theta_ss)},
                    {"sde", values(eff.sde)},
                    {"sie", values(eff.sie)}});
    if (opts.estimator == estimate::Estimator::Tmle) {
      const auto& d = eff.sde.diagnostics;
      if (!d.targeting_converged || !eff.sie.diagnostics.targeting_converged) {
        err << "warning: targeting stopped at the iteration cap\n";
      }
    }
    emit(config, text, out);
  } catch (const Error& e) {
    err << "estimator error: " << e.what() << '\n';
    return kEstimatorError;
  }
  return kOk;
}

int cmd_simulate(const RunConfig& config, std::ostream& out, std::ostream& err) {
  std::vector<sim::ScenarioSpec> scenarios;
  try {
    check_format(config.format);
    scenarios = sim::parse_scenarios(read_file(config.scenario_path));
    for (auto& s : scenarios) {
      if (config.seed) s.seed = *config.seed;
      if (config.estimator) s.estimators = {*config.estimator};
      if (config.folds) s.folds = *config.folds;
      if (config.weighted_fluct) s.tmle_weighted_fluctuation = *config.weighted_fluct;
      if (config.g_empirical) s.g_empirical = *config.g_empirical;
      if (config.reps) s.reps = *config.reps;
      if (config.unweighted) s.weighted = false;
      s.validate();
    }
  } catch (const Error& e) {
    err << "input error: " << e.what() << '\n';
    return kInputError;
  }

  std::vector<sim::MetricsRow> rows;
  try {
    for (const auto& s : scenarios) {
      auto progress = [&err](const std::string& name, int done, int total) {
        if (done == total || done % 50 == 0) {
          err << "[" << name << "] " << done << "/" << total << '\n';
        }
      };
      auto result = sim::run_scenario(s, config.threads, progress);
      rows.insert(rows.end(), result.rows.begin(), result.rows.end());
    }
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ScenarioAborted) {
      err << "scenario aborted: " << e.what() << '\n';
      return kScenarioAbort;
    }
    err << "estimator error: " << e.what() << '\n';
    return kEstimatorError;
  }

  std::ostringstream text;
  if (config.format == "csv") {
    sim::write_metrics_csv(text, rows);
  } else {
    sim::write_metrics_json(text, rows);
  }
  try {
    emit(config, text.str(), out);
  } catch (const Error& e) {
    err << "input error: " << e.what() << '\n';
    return kInputError;
  }
  return kOk;
}

int cmd_oracle(const RunConfig& config, std::ostream& out, std::ostream& err) {
  try {
    check_format(config.format);
    validate_effect(config.pair);
    sim::DgmParams params;
    for (const auto& [name, value] : config.overrides) params.set(name, value);
    const auto t = sim::oracle(params, !config.unweighted, config.pair);
    const std::string text = table_text(
        config.format, "quantity", {"value"},
        {{"theta_pp", {t.theta_pp}},
         {"theta_ps", {t.theta_ps}},
         {"theta_ss", {t.theta_ss}},
         {"sde", {t.sde}},
         {"sie", {t.sie}},
         {"sigma2_pp", {t.sigma2_pp}},
         {"sigma2_ps", {t.sigma2_ps}},
         {"sigma2_ss", {t.sigma2_ss}},
         {"sigma2_sde", {t.sigma2_sde}},
         {"sigma2_sie", {t.sigma2_sie}}});
    emit(config, text, out);
  } catch (const Error& e) {
    err << "input error: " << e.what() << '\n';
    return kInputError;
  }
  return kOk;
}

namespace {

std::optional<bool> on_off(const std::string& text) {
  if (text.empty()) return std::nullopt;
  if (text == "on") return true;
  if (text == "off") return false;
  throw Error(ErrorCode::InvalidArgument, "expected on or off, got '" + text + "'");
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Transported stochastic direct and indirect effects"};
  app.require_subcommand(1);

  RunConfig cfg;
  std::string format = "csv", estimator, weighted_fluct, g_empirical;
  std::uint64_t seed = 0;
  int threads = 0, folds = 0, reps = 0;
  double y_min = 0, y_max = 0;
  std::vector<std::string> sets;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--output", cfg.output_path, "Output file (default: standard output)");
    sub->add_option("--format", format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
  };
  auto estimation = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "Master seed");
    sub->add_option("--threads", threads, "Worker threads (fallback: TM_THREADS)");
    sub->add_option("--estimator", estimator, "os or tmle")->check(CLI::IsMember({"os", "tmle"}));
    sub->add_option("--folds", folds, "Cross-fitting folds")->check(CLI::PositiveNumber);
    sub->add_option("--weighted-fluct", weighted_fluct, "on or off")
        ->check(CLI::IsMember({"on", "off"}));
    sub->add_option("--g-empirical", g_empirical, "on or off")->check(CLI::IsMember({"on", "off"}));
    sub->add_flag("--unweighted", cfg.unweighted, "Ignore pi (survey weights equal to one)");
  };

  auto* est = app.add_subcommand("estimate", "Estimate effects from a CSV dataset");
  est->add_option("--input", cfg.input_path, "Observation CSV")->required();
  est->add_option("--designs", cfg.designs, "main or dgm")->check(CLI::IsMember({"main", "dgm"}));
  est->add_option("--mis", cfg.mis, "Components fit intercept-only, e.g. q or c,e,r");
  est->add_option("--y-min", y_min, "Lower outcome bound (default: observed minimum)");
  est->add_option("--y-max", y_max, "Upper outcome bound (default: observed maximum)");
  est->add_option("--a-prime", cfg.pair.a_prime, "a' (0 or 1)");
  est->add_option("--a-star", cfg.pair.a_star, "a* (0 or 1)");
  common(est);
  estimation(est);

  auto* simc = app.add_subcommand("simulate", "Run simulation scenarios");
  simc->add_option("--scenarios", cfg.scenario_path, "Scenario JSON file")->required();
  simc->add_option("--reps", reps, "Override the replicate count")->check(CLI::PositiveNumber);
  common(simc);
  estimation(simc);

  auto* orc = app.add_subcommand("oracle", "Exact truths of the simulation law");
  orc->add_option("--set", sets, "Parameter override name=value (repeatable)");
  orc->add_flag("--unweighted", cfg.unweighted, "Truths for the Delta = 1 population");
  orc->add_option("--a-prime", cfg.pair.a_prime, "a' (0 or 1)");
  orc->add_option("--a-star", cfg.pair.a_star, "a* (0 or 1)");
  common(orc);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "input error: " << e.what() << '\n';
    return kInputError;
  }
  // Subcommand help is delivered through the exception above; reaching here
  // means a command was chosen.
  try {
    cfg.format = format;
    if (estimator.size()) cfg.estimator = estimate::parse_estimator(estimator);
    cfg.weighted_fluct = on_off(weighted_fluct);
    cfg.g_empirical = on_off(g_empirical);
    auto given = [](CLI::App* sub, const char* flag) { return sub->count(flag) > 0; };
    CLI::App* chosen = app.get_subcommands().front();
    if (chosen != orc) {
      if (given(chosen, "--seed")) cfg.seed = seed;
      if (given(chosen, "--folds")) cfg.folds = folds;
    }
    cfg.threads = resolve_threads(threads > 0 ? std::optional<int>(threads) : std::nullopt);
    if (chosen == simc && given(simc, "--reps")) cfg.reps = reps;
    if (chosen == est) {
      if (given(est, "--y-min")) cfg.y_min = y_min;
      if (given(est, "--y-max")) cfg.y_max = y_max;
    }
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) {
        throw Error(ErrorCode::InvalidArgument, "override '" + s + "' is not name=value");
      }
      std::size_t used = 0;
      double v = 0.0;
      const std::string value = s.substr(eq + 1);
      try {
        v = std::stod(value, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (value.empty() || used != value.size()) {
        throw Error(ErrorCode::InvalidArgument, "override '" + s + "' has no numeric value");
      }
      cfg.overrides.emplace_back(s.substr(0, eq), v);
    }
    if (chosen == est) {
      cfg.command = Command::Estimate;
      return cmd_estimate(cfg, out, err);
    }
    if (chosen == simc) {
      cfg.command = Command::Simulate;
      return cmd_simulate(cfg, out, err);
    }
    cfg.command = Command::Oracle;
    return cmd_oracle(cfg, out, err);
  } catch (const Error& e) {
    err << "input error: " << e.what() << '\n';
    return kInputError;
  }
}

}  // namespace transmed::cli
