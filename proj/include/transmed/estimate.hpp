#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "transmed/core.hpp"
#include "transmed/eif.hpp"
#include "transmed/nuisance.hpp"

namespace transmed::estimate {

enum class Estimator { OneStep, Tmle };

const char* name(Estimator e);  // "os" / "tmle"
Estimator parse_estimator(const std::string& text);

struct EstimatorOptions {
  Estimator estimator = Estimator::OneStep;
  /// Move inverse-probability factors of the fluctuation covariates into weights.
  bool tmle_weighted_fluctuation = true;
  int max_targeting_iters = 20;
  int folds = 1;
  std::uint64_t seed = 0;
  bool g_empirical = false;
  nuisance::SuiteOptions suite;
};

struct Diagnostics {
  int tmle_iterations = 0;
  /// |mean gamma (D_Y + D_Z)| after targeting (one-step: at the initial fit).
  double final_score = 0.0;
  /// The stopping bound 1 / (sqrt(n) log n).
  double score_bound = 0.0;
  /// |mean gamma (D_M + D_W)|.
  double mw_score = 0.0;
  bool targeting_converged = true;
  int clamp_hits = 0;
};

struct Estimate {
  double theta = 0.0;        // original outcome scale (a difference for contrasts)
  double se = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  double unit_theta = 0.0;   // unit outcome scale
  double unit_se = 0.0;
  Diagnostics diagnostics;
  /// gamma_i * D_i on the unit scale, evaluated at unit_theta.
  std::vector<double> influence;
};

struct EffectEstimates {
  Estimate theta_pp;  // theta(a', a')
  Estimate theta_ps;  // theta(a', a*)
  Estimate theta_ss;  // theta(a*, a*)
  Estimate sde;       // theta(a', a*) - theta(a*, a*)
  Estimate sie;       // theta(a', a') - theta(a', a*)
};

inline constexpr double kWaldZ = 1.96;

/// Normalised inverse sampling-probability weights
/// Gamma_i = (1/Pi_i) * sum(1 - S) / sum((1 - S) / Pi). Throws MissingPi.
std::vector<double> survey_weights(const Dataset& data);

/// Per-row nuisance values for one (a', a*) corner, plus what targeting needs
/// to refit u and v fold by fold.
struct CornerTable {
  EffectSpec spec;
  std::vector<eif::EtaRow> rows;
};

/// Fold membership; folds == 1 means training and evaluation use all rows.
struct FoldPlan {
  int folds = 1;
  std::vector<int> fold_of;  // per row, in [0, folds)

  std::vector<std::size_t> training(int j) const;
  std::vector<std::size_t> validation(int j) const;
};

/// Seeded assignment stratified by s; reproducible for a fixed seed.
FoldPlan make_folds(const Dataset& data, int folds, std::uint64_t seed);

/// Checks that every training complement holds both s = 0 and s = 1 rows.
void check_folds(const Dataset& data, const FoldPlan& plan);

/// Nuisance tables for the requested corners. Each fold's models are fit on
/// its training rows and evaluated on its validation rows.
std::vector<CornerTable> build_tables(const Dataset& data, const nuisance::SuiteDesigns& designs,
                                      const nuisance::MisspecSet& mis,
                                      std::span<const EffectSpec> corners,
                                      std::span<const double> gamma, const FoldPlan& plan,
                                      const nuisance::SuiteOptions& suite);

/// What targeting needs to refit u and v.
struct RefitContext {
  const nuisance::SuiteDesigns* designs = nullptr;
  nuisance::MisspecSet mis;
  const FoldPlan* plan = nullptr;
  nuisance::SuiteOptions suite;
};

/// Solves the gamma-weighted EIF estimating equation in theta.
Estimate one_step(const Dataset& data, std::span<const eif::EtaRow> eta, const EffectSpec& spec,
                  std::span<const double> gamma);

/// Targeted substitution estimator; `data` must be on the unit outcome scale.
Estimate tmle(const Dataset& data, std::span<const eif::EtaRow> eta, const EffectSpec& spec,
              std::span<const double> gamma, const RefitContext& ctx,
              const EstimatorOptions& opts);

/// Contrast of two corner estimates; the SE comes from the per-row EIF
/// difference.
Estimate contrast(const Estimate& lhs, const Estimate& rhs);

/// Maps a unit-scale corner estimate to the original outcome scale.
void to_original_scale(Estimate& est, const OutcomeScale& scale, bool is_contrast);

/// theta(a', a*) for one pair, with cross-fitting when opts.folds >= 2.
/// `fold_ids` overrides the seeded fold assignment.
Estimate cross_fit(const Dataset& data, const nuisance::SuiteDesigns& designs,
                   const EffectSpec& spec, const EstimatorOptions& opts,
                   std::span<const double> gamma, const nuisance::MisspecSet& mis = {},
                   const std::optional<std::vector<int>>& fold_ids = std::nullopt);

/// The three corners and both contrasts for each requested estimator, sharing
/// one set of nuisance tables. Rows with delta = 0 are dropped first.
std::vector<EffectEstimates> estimate_effects_multi(
    const Dataset& data, const nuisance::SuiteDesigns& designs, const EffectSpec& pair,
    const EstimatorOptions& opts, std::span<const double> gamma,
    const nuisance::MisspecSet& mis, std::span<const Estimator> estimators);

EffectEstimates estimate_effects(const Dataset& data, const nuisance::SuiteDesigns& designs,
                                 const EffectSpec& pair, const EstimatorOptions& opts,
                                 std::span<const double> gamma,
                                 const nuisance::MisspecSet& mis = {});

}  // namespace transmed::estimate
