#include "transmed/estimate.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "transmed/rng.hpp"

namespace transmed::estimate {

using eif::EtaRow;
using nuisance::Component;
using regress::expit;
using regress::logit;

const char* name(Estimator e) { return e == Estimator::OneStep ? "os" : "tmle"; }

Estimator parse_estimator(const std::string& text) {
  if (text == "os" || text == "one_step" || text == "onestep") return Estimator::OneStep;
  if (text == "tmle") return Estimator::Tmle;
  throw Error(ErrorCode::InvalidArgument, "unknown estimator '" + text + "'");
}

std::vector<double> survey_weights(const Dataset& data) {
  double target = 0.0;
  double target_inv = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& o = data[i];
    if (!o.pi) throw Error(ErrorCode::MissingPi, "row " + std::to_string(i) + ": missing pi", i);
    if (o.s == 0) {
      target += 1.0;
      target_inv += 1.0 / *o.pi;
    }
  }
  if (target == 0.0) throw Error(ErrorCode::EmptyArm, "no target (s = 0) rows");
  const double norm = target / target_inv;
  std::vector<double> gamma(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) gamma[i] = norm / *data[i].pi;
  return gamma;
}

std::vector<std::size_t> FoldPlan::training(int j) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fold_of.size(); ++i) {
    if (folds == 1 || fold_of[i] != j) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> FoldPlan::validation(int j) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fold_of.size(); ++i) {
    if (folds == 1 || fold_of[i] == j) out.push_back(i);
  }
  return out;
}

FoldPlan make_folds(const Dataset& data, int folds, std::uint64_t seed) {
  if (folds < 1) throw Error(ErrorCode::InvalidArgument, "folds must be >= 1");
  FoldPlan plan;
  plan.folds = folds;
  plan.fold_of.assign(data.size(), 0);
  if (folds == 1) return plan;
  rng::Stream stream(seed, 0xF01DF01DULL);
  // Dealing each arm round-robin after a shuffle keeps both arms in every fold
  // whenever the arm has at least `folds` rows.
  int next = 0;
  for (int arm = 0; arm < 2; ++arm) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (data[i].s == arm) idx.push_back(i);
    }
    for (std::size_t k = idx.size(); k > 1; --k) {
      std::swap(idx[k - 1], idx[stream.below(k)]);
    }
    for (std::size_t i : idx) {
      plan.fold_of[i] = next;
      next = (next + 1) % folds;
    }
  }
  return plan;
}

void check_folds(const Dataset& data, const FoldPlan& plan) {
  if (plan.fold_of.size() != data.size()) {
    throw Error(ErrorCode::DimensionMismatch, "fold assignment must align with rows");
  }
  if (plan.folds == 1) return;
  std::vector<int> size(plan.folds, 0);
  std::vector<int> source(plan.folds, 0);
  int total_source = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const int j = plan.fold_of[i];
    if (j < 0 || j >= plan.folds) throw Error(ErrorCode::InvalidArgument, "fold id out of range");
    ++size[j];
    source[j] += data[i].s;
    total_source += data[i].s;
  }
  const int n = static_cast<int>(data.size());
  const int total_target = n - total_source;
  for (int j = 0; j < plan.folds; ++j) {
    if (size[j] == 0) {
      throw Error(ErrorCode::FoldTooSmall, "fold " + std::to_string(j) + " is empty");
    }
    const int train_source = total_source - source[j];
    const int train_target = total_target - (size[j] - source[j]);
    if (train_source == 0 || train_target == 0) {
      throw Error(ErrorCode::FoldTooSmall,
                  "training complement of fold " + std::to_string(j) + " lacks an s arm");
    }
  }
}

std::vector<CornerTable> build_tables(const Dataset& data, const nuisance::SuiteDesigns& designs,
                                      const nuisance::MisspecSet& mis,
                                      std::span<const EffectSpec> corners,
                                      std::span<const double> gamma, const FoldPlan& plan,
                                      const nuisance::SuiteOptions& suite) {
  std::vector<CornerTable> tables;
  for (const auto& spec : corners) tables.push_back({spec, std::vector<EtaRow>(data.size())});

  for (int j = 0; j < plan.folds; ++j) {
    const auto valid = plan.validation(j);
    Dataset subset;
    std::vector<double> sub_gamma;
    const Dataset* train = &data;
    std::span<const double> train_gamma = gamma;
    if (plan.folds > 1) {
      const auto idx = plan.training(j);
      subset = data.subset(idx);
      sub_gamma.reserve(idx.size());
      for (std::size_t i : idx) sub_gamma.push_back(gamma[i]);
      train = &subset;
      train_gamma = sub_gamma;
    }
    auto base = std::make_shared<const nuisance::BaseFits>(
        nuisance::fit_base(*train, designs, mis, train_gamma, suite));
    for (auto& table : tables) {
      const auto eta =
          nuisance::fit_corner(*train, base, table.spec, designs, mis, train_gamma, suite);
      for (std::size_t i : valid) table.rows[i] = eif::evaluate_row(eta, data[i], suite.h_max);
    }
  }
  return tables;
}

namespace {

void check_gamma(const Dataset& data, std::span<const double> gamma) {
  if (gamma.size() != data.size()) {
    throw Error(ErrorCode::DimensionMismatch, "gamma must align with rows");
  }
  for (double g : gamma) {
    if (!(g >= 0.0) || !std::isfinite(g)) {
      throw Error(ErrorCode::InvalidArgument, "gamma must be finite and non-negative");
    }
  }
}

double score_bound(std::size_t n) {
  const double nn = static_cast<double>(n);
  return 1.0 / (std::sqrt(nn) * std::log(nn));
}

struct Scores {
  double yz = 0.0;  // mean gamma (D_Y + D_Z)
  double mw = 0.0;  // mean gamma (D_M + D_W)
};

Scores scores(const Dataset& data, std::span<const EtaRow> eta, const EffectSpec& spec,
              std::span<const double> gamma, double theta) {
  Scores s;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto d = eif::eif_row(data[i], eta[i], spec, theta);
    s.yz += gamma[i] * (d.d_y + d.d_z);
    s.mw += gamma[i] * (d.d_m + d.d_w);
  }
  const double n = static_cast<double>(data.size());
  s.yz /= n;
  s.mw /= n;
  return s;
}

int count_clamps(const Dataset& data, std::span<const EtaRow> eta, const EffectSpec& spec) {
  int hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& o = data[i];
    if (o.s == 1 && o.a == spec.a_prime && eta[i].h_clamped(o.z)) ++hits;
  }
  return hits;
}

void finish(Estimate& est) {
  est.theta = est.unit_theta;
  est.se = est.unit_se;
  est.ci_lo = est.theta - kWaldZ * est.se;
  est.ci_hi = est.theta + kWaldZ * est.se;
}

// One-dimensional logistic fluctuation through the origin:
// logit p_i = offset_i + eps * cov_i.
double fluctuate(const std::vector<double>& cov, const std::vector<double>& y,
                 const std::vector<double>& w, const std::vector<double>& offset,
                 const nuisance::SuiteOptions& suite) {
  if (cov.empty()) return 0.0;
  const auto n = static_cast<Eigen::Index>(cov.size());
  Eigen::MatrixXd X(n, 1);
  Eigen::VectorXd yy(n), ww(n), oo(n);
  bool any_weight = false;
  for (Eigen::Index i = 0; i < n; ++i) {
    X(i, 0) = cov[i];
    yy[i] = std::clamp(y[i], 0.0, 1.0);
    ww[i] = w[i];
    oo[i] = offset[i];
    any_weight = any_weight || w[i] > 0.0;
  }
  if (!any_weight || X.cwiseAbs().maxCoeff() == 0.0) return 0.0;
  regress::DesignSpec one_column;
  one_column.intercept_only = true;
  regress::FitOptions fit = suite.fit;
  fit.allow_ridge = true;
  const auto model = regress::fit_binary(one_column, X, yy, ww, oo, fit);
  return model.coefficients[0];
}

double clamp_prob(double p, const nuisance::SuiteOptions& suite) {
  return std::clamp(p, suite.fit.p_clamp, 1.0 - suite.fit.p_clamp);
}

double shift(double p, double delta, const nuisance::SuiteOptions& suite) {
  return clamp_prob(expit(logit(clamp_prob(p, suite)) + delta), suite);
}

}  // namespace

Estimate one_step(const Dataset& data, std::span<const EtaRow> eta, const EffectSpec& spec,
                  std::span<const double> gamma) {
  check_gamma(data, gamma);
  if (eta.size() != data.size()) throw Error(ErrorCode::DimensionMismatch, "table size mismatch");
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    num += gamma[i] * eif::eif_row(data[i], eta[i], spec, 0.0).total();
    if (data[i].s == 0) den += gamma[i] / eta[i].t;
  }
  if (!(den > 0.0)) throw Error(ErrorCode::EmptyArm, "no weighted target rows");
  Estimate est;
  est.unit_theta = num / den;
  auto inf = eif::eif_sample(data, eta, spec, est.unit_theta, gamma);
  est.unit_se = inf.se();
  est.influence = std::move(inf.weighted);
  const auto sc = scores(data, eta, spec, gamma, est.unit_theta);
  est.diagnostics.final_score = std::abs(sc.yz);
  est.diagnostics.mw_score = std::abs(sc.mw);
  est.diagnostics.score_bound = score_bound(data.size());
  est.diagnostics.clamp_hits = count_clamps(data, eta, spec);
  finish(est);
  return est;
}

Estimate tmle(const Dataset& data, std::span<const EtaRow> eta0, const EffectSpec& spec,
              std::span<const double> gamma, const RefitContext& ctx,
              const EstimatorOptions& opts) {
  check_gamma(data, gamma);
  if (eta0.size() != data.size()) throw Error(ErrorCode::DimensionMismatch, "table size mismatch");
  if (ctx.designs == nullptr || ctx.plan == nullptr) {
    throw Error(ErrorCode::InvalidArgument, "targeting needs designs and a fold plan");
  }
  if (opts.max_targeting_iters < 1) {
    throw Error(ErrorCode::InvalidArgument, "max_targeting_iters must be >= 1");
  }
  const auto& suite = ctx.suite;
  const bool weighted = opts.tmle_weighted_fluctuation;
  const int ap = spec.a_prime;
  const std::size_t n = data.size();
  std::vector<EtaRow> eta(eta0.begin(), eta0.end());
  for (auto& row : eta) {
    for (int z = 0; z < 2; ++z) row.b_ap[z] = clamp_prob(row.b_ap[z], suite);
    row.q1_ap = clamp_prob(row.q1_ap, suite);
  }

  auto b_covariate = [&](const EtaRow& r, int z) {
    const double odds = (1.0 - r.c_ap[z]) / r.c_ap[z];
    return weighted ? odds * r.q_ap(z) / r.r_ap[z] : odds * r.h_ap(z) / (r.g_ap * r.t);
  };
  auto q_covariate = [&](const EtaRow& r) {
    const double diff = r.u_ap[1] - r.u_ap[0];
    return weighted ? diff : diff / (r.g_ap * r.t);
  };

  Estimate est;
  auto& diag = est.diagnostics;
  diag.score_bound = score_bound(n);
  diag.targeting_converged = false;

  std::vector<double> cov, y, w, off, pseudo(n);
  for (int iter = 1; iter <= opts.max_targeting_iters; ++iter) {
    diag.tmle_iterations = iter;

    // b among {a = a', s = 1}
    cov.clear(); y.clear(); w.clear(); off.clear();
    for (std::size_t i = 0; i < n; ++i) {
      const auto& o = data[i];
      if (o.s != 1 || o.a != ap || gamma[i] == 0.0) continue;
      const auto& r = eta[i];
      cov.push_back(b_covariate(r, o.z));
      y.push_back(*o.y);
      w.push_back(weighted ? gamma[i] * (r.e_as / r.e_ap) / (r.g_as * r.t) : gamma[i]);
      off.push_back(logit(r.b_ap[o.z]));
    }
    const double eps_b = fluctuate(cov, y, w, off, suite);
    for (auto& r : eta) {
      for (int z = 0; z < 2; ++z) r.b_ap[z] = shift(r.b_ap[z], eps_b * b_covariate(r, z), suite);
    }

    // u from the updated b, fold by fold
    for (std::size_t i = 0; i < n; ++i) {
      pseudo[i] = eta[i].b_at_own(data[i], spec) * eta[i].h_own(data[i], spec);
    }
    for (int j = 0; j < ctx.plan->folds; ++j) {
      const auto train = ctx.plan->training(j);
      std::vector<double> sub(train.size());
      for (std::size_t k = 0; k < train.size(); ++k) sub[k] = pseudo[train[k]];
      const auto u_model = nuisance::fit_u_model(data, train, sub, gamma, ctx.designs->u,
                                                 ctx.mis.contains(Component::u), suite);
      for (std::size_t i : ctx.plan->validation(j)) {
        for (int z = 0; z < 2; ++z) {
          eta[i].u_ap[z] = u_model.predict({0, ap, z, data[i].w, {}});
        }
      }
    }

    // q among {a = a', s = 0}
    cov.clear(); y.clear(); w.clear(); off.clear();
    for (std::size_t i = 0; i < n; ++i) {
      const auto& o = data[i];
      if (o.s != 0 || o.a != ap || gamma[i] == 0.0) continue;
      const auto& r = eta[i];
      cov.push_back(q_covariate(r));
      y.push_back(o.z);
      w.push_back(weighted ? gamma[i] / (r.g_ap * r.t) : gamma[i]);
      off.push_back(logit(r.q1_ap));
    }
    const double eps_q = fluctuate(cov, y, w, off, suite);
    for (auto& r : eta) r.q1_ap = shift(r.q1_ap, eps_q * q_covariate(r), suite);

    const auto sc = scores(data, eta, spec, gamma, 0.0);
    diag.final_score = std::abs(sc.yz);
    if (diag.final_score <= diag.score_bound) {
      diag.targeting_converged = true;
      break;
    }
  }

  // v: marginalise the targeted b over the targeted q, regress among s = 0,
  // then fluctuate among {a = a*, s = 0}.
  const int as = spec.a_star;
  for (int j = 0; j < ctx.plan->folds; ++j) {
    std::vector<std::size_t> train;
    std::vector<double> sub;
    for (std::size_t i : ctx.plan->training(j)) {
      if (data[i].s != 0) continue;
      train.push_back(i);
      sub.push_back(eta[i].marginal_b());
    }
    const auto v_model = nuisance::fit_v_model(data, train, sub, gamma, ctx.designs->v,
                                               ctx.mis.contains(Component::v), suite);
    for (std::size_t i : ctx.plan->validation(j)) {
      eta[i].v_as = clamp_prob(v_model.predict({0, as, 0, data[i].w, {}}), suite);
    }
  }
  cov.clear(); y.clear(); w.clear(); off.clear();
  auto v_covariate = [&](const EtaRow& r) { return weighted ? 1.0 : 1.0 / (r.g_as * r.t); };
  for (std::size_t i = 0; i < n; ++i) {
    const auto& o = data[i];
    if (o.s != 0 || o.a != as || gamma[i] == 0.0) continue;
    const auto& r = eta[i];
    cov.push_back(v_covariate(r));
    y.push_back(r.marginal_b());
    w.push_back(weighted ? gamma[i] / (r.g_as * r.t) : gamma[i]);
    off.push_back(logit(r.v_as));
  }
  const double eps_v = fluctuate(cov, y, w, off, suite);
  for (auto& r : eta) r.v_as = shift(r.v_as, eps_v * v_covariate(r), suite);

  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (data[i].s != 0) continue;
    num += gamma[i] * eta[i].v_as / eta[i].t;
    den += gamma[i] / eta[i].t;
  }
  if (!(den > 0.0)) throw Error(ErrorCode::EmptyArm, "no weighted target rows");
  est.unit_theta = num / den;

  auto inf = eif::eif_sample(data, eta, spec, est.unit_theta, gamma);
  est.unit_se = inf.se();
  est.influence = std::move(inf.weighted);
  const auto sc = scores(data, eta, spec, gamma, est.unit_theta);
  diag.final_score = std::abs(sc.yz);
  diag.mw_score = std::abs(sc.mw);
  diag.clamp_hits = count_clamps(data, eta, spec);
  finish(est);
  return est;
}

Estimate contrast(const Estimate& lhs, const Estimate& rhs) {
  if (lhs.influence.size() != rhs.influence.size()) {
    throw Error(ErrorCode::DimensionMismatch, "contrast of estimates from different samples");
  }
  Estimate out;
  out.unit_theta = lhs.unit_theta - rhs.unit_theta;
  std::vector<double> diff(lhs.influence.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = lhs.influence[i] - rhs.influence[i];
  auto inf = eif::summarize(std::move(diff));
  out.unit_se = inf.se();
  out.influence = std::move(inf.weighted);
  const auto& a = lhs.diagnostics;
  const auto& b = rhs.diagnostics;
  out.diagnostics.tmle_iterations = std::max(a.tmle_iterations, b.tmle_iterations);
  out.diagnostics.final_score = std::max(a.final_score, b.final_score);
  out.diagnostics.score_bound = a.score_bound;
  out.diagnostics.mw_score = std::max(a.mw_score, b.mw_score);
  out.diagnostics.targeting_converged = a.targeting_converged && b.targeting_converged;
  out.diagnostics.clamp_hits = std::max(a.clamp_hits, b.clamp_hits);
  finish(out);
  return out;
}

void to_original_scale(Estimate& est, const OutcomeScale& scale, bool is_contrast) {
  est.theta = is_contrast ? scale.scale_difference(est.unit_theta) : scale.from_unit(est.unit_theta);
  est.se = scale.scale_difference(est.unit_se);
  est.ci_lo = est.theta - kWaldZ * est.se;
  est.ci_hi = est.theta + kWaldZ * est.se;
}

namespace {

struct Prepared {
  Dataset data;
  std::vector<double> gamma;
  OutcomeScale scale;
};

Prepared prepare(const Dataset& data, std::span<const double> gamma) {
  if (gamma.size() != data.size()) {
    throw Error(ErrorCode::DimensionMismatch, "gamma must align with rows");
  }
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].delta == 1) keep.push_back(i);
  }
  Prepared out;
  Dataset selected = keep.size() == data.size() ? data : data.subset(keep);
  selected = validate_dataset(std::move(selected));
  auto scaled = scale_outcome(selected);
  out.data = std::move(scaled.data);
  out.scale = scaled.scale;
  out.gamma.reserve(keep.size());
  for (std::size_t i : keep) out.gamma.push_back(gamma[i]);
  check_gamma(out.data, out.gamma);
  return out;
}

Estimate run_estimator(Estimator which, const Dataset& data, const CornerTable& table,
                       std::span<const double> gamma, const RefitContext& ctx,
                       const EstimatorOptions& opts) {
  return which == Estimator::OneStep ? one_step(data, table.rows, table.spec, gamma)
                                     : tmle(data, table.rows, table.spec, gamma, ctx, opts);
}

nuisance::SuiteOptions suite_of(const EstimatorOptions& opts) {
  auto suite = opts.suite;
  suite.g_empirical = suite.g_empirical || opts.g_empirical;
  return suite;
}

FoldPlan plan_for(const Dataset& data, const EstimatorOptions& opts,
                  const std::optional<std::vector<int>>& fold_ids) {
  FoldPlan plan;
  if (fold_ids) {
    plan.folds = opts.folds;
    plan.fold_of = *fold_ids;
  } else {
    plan = make_folds(data, opts.folds, opts.seed);
  }
  check_folds(data, plan);
  return plan;
}

}  // namespace

Estimate cross_fit(const Dataset& data, const nuisance::SuiteDesigns& designs,
                   const EffectSpec& spec, const EstimatorOptions& opts,
                   std::span<const double> gamma, const nuisance::MisspecSet& mis,
                   const std::optional<std::vector<int>>& fold_ids) {
  validate_effect(spec);
  auto prep = prepare(data, gamma);
  if (fold_ids && fold_ids->size() != data.size()) {
    throw Error(ErrorCode::DimensionMismatch, "fold ids must align with rows");
  }
  std::optional<std::vector<int>> kept_ids;
  if (fold_ids) {
    kept_ids.emplace();
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (data[i].delta == 1) kept_ids->push_back((*fold_ids)[i]);
    }
  }
  const auto plan = plan_for(prep.data, opts, kept_ids);
  const auto suite = suite_of(opts);
  const EffectSpec corners[] = {spec};
  const auto tables = build_tables(prep.data, designs, mis, corners, prep.gamma, plan, suite);
  const RefitContext ctx{&designs, mis, &plan, suite};
  auto est = run_estimator(opts.estimator, prep.data, tables.front(), prep.gamma, ctx, opts);
  to_original_scale(est, prep.scale, false);
  return est;
}

std::vector<EffectEstimates> estimate_effects_multi(
    const Dataset& data, const nuisance::SuiteDesigns& designs, const EffectSpec& pair,
    const EstimatorOptions& opts, std::span<const double> gamma,
    const nuisance::MisspecSet& mis, std::span<const Estimator> estimators) {
  validate_effect(pair);
  auto prep = prepare(data, gamma);
  const auto plan = plan_for(prep.data, opts, std::nullopt);
  const auto suite = suite_of(opts);

  // Corners pp, ps, ss; identical pairs share one table.
  const EffectSpec wanted[] = {{pair.a_prime, pair.a_prime},
                               {pair.a_prime, pair.a_star},
                               {pair.a_star, pair.a_star}};
  std::vector<EffectSpec> unique;
  int slot[3];
  for (int k = 0; k < 3; ++k) {
    auto it = std::find_if(unique.begin(), unique.end(), [&](const EffectSpec& s) {
      return s.a_prime == wanted[k].a_prime && s.a_star == wanted[k].a_star;
    });
    slot[k] = static_cast<int>(it - unique.begin());
    if (it == unique.end()) unique.push_back(wanted[k]);
  }
  const auto tables = build_tables(prep.data, designs, mis, unique, prep.gamma, plan, suite);
  const RefitContext ctx{&designs, mis, &plan, suite};

  std::vector<EffectEstimates> out;
  for (Estimator which : estimators) {
    std::vector<Estimate> per_table;
    for (const auto& table : tables) {
      per_table.push_back(run_estimator(which, prep.data, table, prep.gamma, ctx, opts));
    }
    EffectEstimates eff;
    eff.theta_pp = per_table[slot[0]];
    eff.theta_ps = per_table[slot[1]];
    eff.theta_ss = per_table[slot[2]];
    eff.sde = contrast(eff.theta_ps, eff.theta_ss);
    eff.sie = contrast(eff.theta_pp, eff.theta_ps);
    to_original_scale(eff.theta_pp, prep.scale, false);
    to_original_scale(eff.theta_ps, prep.scale, false);
    to_original_scale(eff.theta_ss, prep.scale, false);
    to_original_scale(eff.sde, prep.scale, true);
    to_original_scale(eff.sie, prep.scale, true);
    out.push_back(std::move(eff));
  }
  return out;
}

EffectEstimates estimate_effects(const Dataset& data, const nuisance::SuiteDesigns& designs,
                                 const EffectSpec& pair, const EstimatorOptions& opts,
                                 std::span<const double> gamma, const nuisance::MisspecSet& mis) {
  const Estimator which[] = {opts.estimator};
  return std::move(estimate_effects_multi(data, designs, pair, opts, gamma, mis, which).front());
}

}  // namespace transmed::estimate
