#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "transmed/core.hpp"
#include "transmed/estimate.hpp"
#include "transmed/nuisance.hpp"

namespace transmed::sim {

/// Coefficients of the binary simulation law. Log-odds constants are stored
/// as written (e.g. y_m = log 4); w1, w2_*, and a are plain probabilities.
struct DgmParams {
  double w1 = 0.5;             // P(W1 = 1)
  double w2_0 = 0.4;           // P(W2 = 1 | W1) = w2_0 + w2_w1 * W1
  double w2_w1 = 0.2;
  double delta_0 = -1.0;       // logit P(Delta = 1 | W)
  double delta_w1;
  double delta_w2;
  double s_0 = 0.0;            // logit P(S = 1 | W) = s_0 + s_w (W1 + W2 + W1 W2)
  double s_w;
  double a = 0.5;              // P(A = 1)
  double z_0, z_a, z_w2, z_s, z_as;
  double m_0, m_z, m_w2, m_s;
  double y_0, y_z, y_m, y_w2, y_w2z;

  DgmParams();

  /// Overrides one coefficient by name. Throws InvalidArgument for an unknown
  /// name or a non-finite value.
  void set(const std::string& name, double value);
  double get(const std::string& name) const;
  static const std::vector<std::string>& names();

  // Probabilities of the value 1.
  double p_w2(int w1v) const;
  double pi(int w1v, int w2v) const;  // P(Delta = 1 | W)
  double p_s(int w1v, int w2v) const;
  double p_z(int av, int sv, int w2v) const;
  double p_m(int zv, int sv, int w2v) const;
  double p_y(int zv, int mv, int w2v) const;
};

/// One simulated unit with every variable, before selection on Delta.
struct Unit {
  int w1 = 0, w2 = 0, delta = 0, s = 0, a = 0, z = 0, m = 0, y = 0;
  double pi = 0.0;
};

/// Draws n units from stream (seed, stream). Unit k always consumes the same
/// eight uniforms, so the draw is a pure function of its arguments.
std::vector<Unit> generate_units(const DgmParams& params, std::size_t n, std::uint64_t seed,
                                 std::uint64_t stream = 0);

/// The analysed sample: Delta = 1 units with pi attached and y blanked for
/// s = 0. Outcome bounds are [0, 1].
Dataset to_dataset(const std::vector<Unit>& units);

Dataset generate(const DgmParams& params, std::size_t n, std::uint64_t seed,
                 std::uint64_t stream = 0);

/// Designs that contain the true regression functions of the simulation law.
nuisance::SuiteDesigns correct_designs();

/// The true nuisance functions. Conditionals refer to the analysed (Delta = 1)
/// law, which agrees with the full law given W; t is P(S = 0 | Delta = 1).
class OracleNuisance final : public nuisance::NuisanceFunctions {
 public:
  OracleNuisance(DgmParams params, EffectSpec spec, double h_max = 50.0);

  const EffectSpec& spec() const override { return spec_; }
  double c(int a, int z, nuisance::Vec m, nuisance::Vec w) const override;
  double g(int a, nuisance::Vec w) const override;
  double e(int a, nuisance::Vec m, nuisance::Vec w) const override;
  double q(int z, int a, nuisance::Vec w) const override;
  double r(int z, int a, nuisance::Vec m, nuisance::Vec w) const override;
  double b(int a, int z, nuisance::Vec m, nuisance::Vec w) const override;
  double u(int z, int a, nuisance::Vec w) const override;
  double v(int a, nuisance::Vec w) const override;
  double t() const override { return t_; }

  /// P(M = m | Z = z, W, S = 0).
  double p_m_given_z(int m, int z, nuisance::Vec w) const;

 private:
  DgmParams p_;
  EffectSpec spec_;
  double h_max_;
  double t_;
};

/// One cell of the analysed law. Source cells carry y; target cells leave y
/// absent (it is summed out). prob sums to one over all cells.
struct Cell {
  Observation obs;
  double prob = 0.0;
  double gamma = 1.0;  // limit of the normalised survey weight
};

struct Population {
  std::vector<Cell> cells;
  double t = 0.0;  // P(S = 0 | Delta = 1)

  /// obs as a Dataset (bounds [0, 1]).
  Dataset dataset() const;
  /// prob * gamma per cell, or prob when unweighted.
  std::vector<double> weights(bool weighted) const;
};

/// When `weighted`, gamma is the limiting survey weight; otherwise 1.
Population enumerate_population(const DgmParams& params, bool weighted = true);

/// How the limits of u and v are formed when components are replaced by
/// intercept-only fits.
enum class UvLimit {
  /// u and v are the true functions (or intercept-only projections of the
  /// true pseudo-outcomes when misspecified).
  Truth,
  /// u and v are the regressions the estimator would converge to given the
  /// other, possibly misspecified, limits.
  Estimator,
};

/// Probability limits of the nuisance fits on the population, with the
/// components in `mis` replaced by their intercept-only projections.
class LimitingNuisance final : public nuisance::NuisanceFunctions {
 public:
  LimitingNuisance(const DgmParams& params, const Population& pop, EffectSpec spec,
                   const nuisance::MisspecSet& mis, UvLimit mode, bool weighted = true,
                   double h_max = 50.0);

  const EffectSpec& spec() const override { return truth_.spec(); }
  double c(int a, int z, nuisance::Vec m, nuisance::Vec w) const override;
  double g(int a, nuisance::Vec w) const override;
  double e(int a, nuisance::Vec m, nuisance::Vec w) const override;
  double q(int z, int a, nuisance::Vec w) const override;
  double r(int z, int a, nuisance::Vec m, nuisance::Vec w) const override;
  double b(int a, int z, nuisance::Vec m, nuisance::Vec w) const override;
  double u(int z, int a, nuisance::Vec w) const override;
  double v(int a, nuisance::Vec w) const override;
  double t() const override { return truth_.t(); }

 private:
  double u_conditional(int z, int a, nuisance::Vec w) const;
  double v_conditional(int a, nuisance::Vec w) const;

  OracleNuisance truth_;
  nuisance::MisspecSet mis_;
  UvLimit mode_;
  double h_max_;
  // Intercept-only projections.
  double c0_ = 0, g1_ = 0, e1_ = 0, q1_ = 0, r1_ = 0, b0_ = 0, u0_ = 0, v0_ = 0;
};

/// Population mean of gamma * D at `theta`.
double population_eif_mean(const Population& pop, const nuisance::NuisanceFunctions& eta,
                           double theta, bool weighted = true, double h_max = 50.0);

struct OracleTruths {
  bool weighted = true;
  double theta_pp = 0.0;  // theta(a', a')
  double theta_ps = 0.0;  // theta(a', a*)
  double theta_ss = 0.0;  // theta(a*, a*)
  double sde = 0.0;
  double sie = 0.0;
  double sigma2_pp = 0.0, sigma2_ps = 0.0, sigma2_ss = 0.0;
  double sigma2_sde = 0.0, sigma2_sie = 0.0;
};

/// Exact truths by enumeration. The estimand is the full-population target
/// mean when `weighted`, and the Delta = 1 target mean otherwise; sigma2 is
/// the variance of gamma * D under the analysed law.
OracleTruths oracle(const DgmParams& params, bool weighted = true, EffectSpec pair = {});

enum class Effect { Sde, Sie };
const char* name(Effect e);
Effect parse_effect(const std::string& text);

struct ScenarioSpec {
  std::string name = "none";
  std::size_t n = 10000;  // superpopulation draws per replicate
  int reps = 200;
  nuisance::MisspecSet mis;
  std::vector<estimate::Estimator> estimators{estimate::Estimator::OneStep,
                                              estimate::Estimator::Tmle};
  std::vector<Effect> effects{Effect::Sde, Effect::Sie};
  int folds = 1;
  std::uint64_t seed = 20240601;
  bool weighted = true;  // survey weights from pi; otherwise gamma = 1
  bool tmle_weighted_fluctuation = true;
  bool g_empirical = false;
  int max_targeting_iters = 20;
  DgmParams params;

  /// Throws InvalidArgument unless reps >= 1, n >= 100, folds >= 1 and at
  /// least one estimator and effect are requested.
  void validate() const;
};

/// One replicate's outcome for one (estimator, effect).
struct RepEstimate {
  double theta = 0.0;
  double se = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  estimate::Diagnostics diagnostics;
};

struct RepRecord {
  int index = 0;
  bool ok = false;
  std::string error;
  std::size_t n_eff = 0;
  /// [estimator][effect] in the order of the scenario's lists.
  std::vector<std::vector<RepEstimate>> estimates;
};

struct MetricsRow {
  std::string scenario;
  std::string mis;
  std::size_t n = 0;       // superpopulation draws
  double n_eff = 0.0;      // mean analysed sample size
  int reps = 0;
  int reps_ok = 0;
  int failures = 0;
  int diverged = 0;        // TMLE replicates that hit the iteration cap
  std::string estimator;
  std::string effect;
  double truth = 0.0;
  double sigma2 = 0.0;
  double bias = 0.0;
  double abs_bias = 0.0;
  double sqrt_n_abs_bias = 0.0;
  std::optional<double> relse;
  std::optional<double> relsd;
  std::optional<double> relrmse;
  double coverage = 0.0;
  double sd_mc = 0.0;      // Monte Carlo SD with denominator R
};

/// Six metrics from replicate estimates against the truth. n is the
/// analysed sample size in the root-n scalings. Ratios need at least two
/// replicates.
MetricsRow compute_metrics(std::span<const RepEstimate> reps, double truth, double sigma2,
                           double n);

struct ScenarioResult {
  ScenarioSpec spec;
  OracleTruths truths;
  std::vector<RepRecord> records;
  std::vector<MetricsRow> rows;
};

using Progress = std::function<void(const std::string& scenario, int done, int total)>;

/// Runs one replicate (deterministic in spec.seed and index).
RepRecord run_replicate(const ScenarioSpec& spec, int index);

/// Runs every replicate on `threads` workers and aggregates. Replicates that
/// throw are counted as failures; more than 1% failures raises
/// ScenarioAborted. Results do not depend on `threads`.
ScenarioResult run_scenario(const ScenarioSpec& spec, int threads = 1,
                            const Progress& progress = {});

/// The eleven misspecification sets of the published tables, in order.
std::vector<nuisance::MisspecSet> table_grid();

/// Parses a scenario file: {"defaults": {...}, "scenarios": [{...}, ...]}.
/// Throws InvalidArgument on malformed input.
std::vector<ScenarioSpec> parse_scenarios(const std::string& json_text);

/// Fixed column order used by both writers.
const std::vector<std::string>& metrics_columns();
void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows);
void write_metrics_json(std::ostream& out, const std::vector<MetricsRow>& rows);

/// Round-trippable text for a double ("%.17g").
std::string format_double(double x);

}  // namespace transmed::sim
