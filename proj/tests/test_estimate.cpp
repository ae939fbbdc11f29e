#include <doctest.h>

#include <cmath>
#include <set>

#include "transmed/estimate.hpp"
#include "transmed/sim.hpp"

using namespace transmed;
using namespace transmed::estimate;

namespace {

Observation obs(int s, double pi, int a = 0) {
  Observation o;
  o.s = s;
  o.a = a;
  o.w = {0.0};
  o.m = {0.0};
  if (s == 1) o.y = 0.5;
  o.pi = pi;
  return o;
}

std::vector<double> ones(std::size_t n) { return std::vector<double>(n, 1.0); }

// Cell probabilities rescaled to average one per row, times the limiting
// survey weight: estimating equations over the cells are population means.
std::vector<double> population_gamma(const sim::Population& pop) {
  std::vector<double> g;
  for (const auto& c : pop.cells) g.push_back(c.prob * c.gamma * double(pop.cells.size()));
  return g;
}

std::vector<eif::EtaRow> oracle_rows(const Dataset& data, EffectSpec sp) {
  const sim::OracleNuisance eta(sim::DgmParams{}, sp);
  std::vector<eif::EtaRow> rows;
  for (const auto& o : data.rows()) rows.push_back(eif::evaluate_row(eta, o));
  return rows;
}

}  // namespace

TEST_CASE("survey weights normalise over the target rows") {
  const Dataset d({obs(0, 0.5), obs(0, 0.25), obs(1, 1.0), obs(1, 0.5)}, {});
  const auto g = survey_weights(d);
  // sum(1 - s) = 2 and sum((1 - s) / pi) = 6.
  CHECK(g[0] == doctest::Approx(2.0 / 6.0 / 0.5));
  CHECK(g[1] == doctest::Approx(2.0 / 6.0 / 0.25));
  CHECK(g[2] == doctest::Approx(2.0 / 6.0));
  CHECK(g[3] == doctest::Approx(2.0 / 6.0 / 0.5));
  CHECK(g[0] + g[1] == doctest::Approx(2.0));

  Dataset missing = d;
  missing.rows()[3].pi.reset();
  try {
    survey_weights(missing);
    FAIL("expected MissingPi");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MissingPi);
    CHECK(e.row() == std::optional<std::size_t>(3));
  }
  const Dataset source_only({obs(1, 0.5), obs(1, 0.2)}, {});
  CHECK_THROWS_AS(survey_weights(source_only), Error);
}

TEST_CASE("uniform sampling probabilities give unit weights") {
  const Dataset d({obs(0, 0.3), obs(1, 0.3), obs(0, 0.3)}, {});
  for (double g : survey_weights(d)) CHECK(g == doctest::Approx(1.0));
}

TEST_CASE("folds are stratified, balanced and seeded") {
  const auto data = sim::generate(sim::DgmParams{}, 3000, 4);
  const auto plan = make_folds(data, 5, 77);
  CHECK(plan.fold_of == make_folds(data, 5, 77).fold_of);
  CHECK(plan.fold_of != make_folds(data, 5, 78).fold_of);
  int size[5] = {}, source[5] = {}, total_source = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    ++size[plan.fold_of[i]];
    source[plan.fold_of[i]] += data[i].s;
    total_source += data[i].s;
  }
  for (int j = 0; j < 5; ++j) {
    CHECK(std::abs(size[j] - int(data.size()) / 5) <= 1);
    CHECK(std::abs(source[j] - total_source / 5) <= 1);
  }
  CHECK_NOTHROW(check_folds(data, plan));
  std::set<std::size_t> seen;
  for (int j = 0; j < 5; ++j) {
    const auto v = plan.validation(j);
    const auto t = plan.training(j);
    CHECK(v.size() + t.size() == data.size());
    seen.insert(v.begin(), v.end());
  }
  CHECK(seen.size() == data.size());

  const auto single = make_folds(data, 1, 0);
  CHECK(single.training(0).size() == data.size());
  CHECK(single.validation(0).size() == data.size());
  CHECK_THROWS_AS(make_folds(data, 0, 0), Error);
}

TEST_CASE("folds that starve an arm are rejected") {
  // Twenty rows with a single source row: leave-one-out removes it from one
  // training complement.
  std::vector<Observation> rows;
  for (int i = 0; i < 20; ++i) rows.push_back(obs(i == 0 ? 1 : 0, 0.5, i % 2));
  const Dataset d(rows, {});
  auto code = [&](int folds) {
    try {
      check_folds(d, make_folds(d, folds, 1));
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::InvalidArgument;
  };
  CHECK(code(20) == ErrorCode::FoldTooSmall);
  CHECK(code(25) == ErrorCode::FoldTooSmall);
  FoldPlan bad;
  bad.folds = 2;
  bad.fold_of.assign(20, 3);
  CHECK_THROWS_AS(check_folds(d, bad), Error);
}

TEST_CASE("one-step and TMLE recover the truth on the enumerated law") {
  const auto pop = sim::enumerate_population(sim::DgmParams{});
  const auto data = pop.dataset();
  const auto gamma = population_gamma(pop);
  const auto truth = sim::oracle(sim::DgmParams{});
  const auto designs = sim::correct_designs();
  const auto plan = make_folds(data, 1, 0);
  const RefitContext ctx{&designs, {}, &plan, {}};
  const EffectSpec corners[] = {{1, 1}, {1, 0}, {0, 0}};
  const double theta[] = {truth.theta_pp, truth.theta_ps, truth.theta_ss};
  for (int k = 0; k < 3; ++k) {
    const auto rows = oracle_rows(data, corners[k]);
    const auto os = one_step(data, rows, corners[k], gamma);
    CHECK(std::abs(os.unit_theta - theta[k]) < 1e-10);
    EstimatorOptions opts;
    opts.estimator = Estimator::Tmle;
    const auto tm = tmle(data, rows, corners[k], gamma, ctx, opts);
    CHECK(std::abs(tm.unit_theta - theta[k]) < 1e-8);
    CHECK(tm.diagnostics.targeting_converged);
    CHECK(tm.diagnostics.final_score <= tm.diagnostics.score_bound);
  }
}

TEST_CASE("estimated nuisances on the enumerated law reproduce the truth") {
  const auto pop = sim::enumerate_population(sim::DgmParams{});
  auto data = pop.dataset();
  const auto gamma = population_gamma(pop);
  const auto truth = sim::oracle(sim::DgmParams{});
  for (auto which : {Estimator::OneStep, Estimator::Tmle}) {
    EstimatorOptions opts;
    opts.estimator = which;
    const auto eff = estimate_effects(data, sim::correct_designs(), {1, 0}, opts, gamma);
    CHECK(std::abs(eff.sde.theta - truth.sde) < 1e-7);
    CHECK(std::abs(eff.sie.theta - truth.sie) < 1e-7);
    CHECK(std::abs(eff.theta_pp.theta - truth.theta_pp) < 1e-7);
  }
}

TEST_CASE("identical treatment levels give exactly zero effects") {
  const auto data = sim::generate(sim::DgmParams{}, 2000, 12);
  for (auto which : {Estimator::OneStep, Estimator::Tmle}) {
    EstimatorOptions opts;
    opts.estimator = which;
    const auto eff = estimate_effects(data, sim::correct_designs(), {1, 1}, opts, ones(data.size()));
    CHECK(eff.sde.theta == 0.0);
    CHECK(eff.sie.theta == 0.0);
    CHECK(eff.sde.se == 0.0);
  }
}

TEST_CASE("cross-fitting a duplicated sample equals fitting once") {
  const auto base = sim::generate(sim::DgmParams{}, 1500, 21);
  std::vector<Observation> rows = base.rows();
  rows.insert(rows.end(), base.rows().begin(), base.rows().end());
  const Dataset doubled(rows, base.bounds());
  std::vector<int> ids(doubled.size(), 0);
  for (std::size_t i = base.size(); i < doubled.size(); ++i) ids[i] = 1;

  for (auto which : {Estimator::OneStep, Estimator::Tmle}) {
    CAPTURE(std::string(name(which)));
    EstimatorOptions once;
    once.estimator = which;
    EstimatorOptions split = once;
    split.folds = 2;
    const auto designs = sim::correct_designs();
    const auto a = cross_fit(base, designs, {1, 0}, once, survey_weights(base));
    const auto b = cross_fit(doubled, designs, {1, 0}, split, survey_weights(doubled), {}, ids);
    CHECK(std::abs(a.theta - b.theta) < 1e-10);
    // Same squared deviations over twice the rows.
    const double n = double(base.size());
    CHECK(b.se == doctest::Approx(a.se * std::sqrt((n - 1) / (2 * n - 1))).epsilon(1e-9));
  }
}

TEST_CASE("contrast standard errors use the per-row difference") {
  const auto data = sim::generate(sim::DgmParams{}, 3000, 5);
  EstimatorOptions opts;
  const auto eff = estimate_effects(data, sim::correct_designs(), {1, 0}, opts, survey_weights(data));
  const auto& x = eff.theta_ps.influence;
  const auto& y = eff.theta_ss.influence;
  const double n = double(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i] / n;
    my += y[i] / n;
  }
  double vx = 0, vy = 0, cxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    vx += (x[i] - mx) * (x[i] - mx) / (n - 1);
    vy += (y[i] - my) * (y[i] - my) / (n - 1);
    cxy += (x[i] - mx) * (y[i] - my) / (n - 1);
  }
  CHECK(eff.sde.unit_se == doctest::Approx(std::sqrt((vx + vy - 2 * cxy) / n)).epsilon(1e-10));
  CHECK(eff.sde.theta == doctest::Approx(eff.theta_ps.theta - eff.theta_ss.theta).epsilon(1e-14));
  CHECK(eff.sie.theta == doctest::Approx(eff.theta_pp.theta - eff.theta_ps.theta).epsilon(1e-14));
  CHECK(eff.sde.ci_hi - eff.sde.ci_lo == doctest::Approx(2 * kWaldZ * eff.sde.se));
}

TEST_CASE("outcome rescaling is undone on output") {
  auto data = sim::generate(sim::DgmParams{}, 2000, 31);
  auto shifted = data;
  for (auto& o : shifted.rows()) {
    if (o.y) o.y = 10.0 + 4.0 * *o.y;
  }
  shifted.set_bounds({10.0, 14.0});
  EstimatorOptions opts;
  const auto g = survey_weights(data);
  const auto a = estimate_effects(data, sim::correct_designs(), {1, 0}, opts, g);
  const auto b = estimate_effects(shifted, sim::correct_designs(), {1, 0}, opts, g);
  CHECK(b.theta_ps.theta == doctest::Approx(10.0 + 4.0 * a.theta_ps.theta).epsilon(1e-10));
  CHECK(b.theta_ps.se == doctest::Approx(4.0 * a.theta_ps.se).epsilon(1e-10));
  CHECK(b.sde.theta == doctest::Approx(4.0 * a.sde.theta).epsilon(1e-10));
  CHECK(b.sde.se == doctest::Approx(4.0 * a.sde.se).epsilon(1e-10));
}

TEST_CASE("rows outside the analysed sample are ignored") {
  const auto units = sim::generate_units(sim::DgmParams{}, 3000, 41);
  std::vector<Observation> all;
  for (const auto& u : units) {
    Observation o{u.delta, u.s, {double(u.w1), double(u.w2)}, u.a, u.z, {double(u.m)}, {}, u.pi};
    if (u.s == 1 && u.delta == 1) o.y = u.y;
    all.push_back(o);
  }
  const Dataset full(all, {0.0, 1.0});
  const auto analysed = sim::to_dataset(units);
  EstimatorOptions opts;
  std::vector<double> g_full(full.size(), 1.0);
  const auto a = estimate_effects(full, sim::correct_designs(), {1, 0}, opts, g_full);
  const auto b = estimate_effects(analysed, sim::correct_designs(), {1, 0}, opts, ones(analysed.size()));
  CHECK(a.sde.theta == b.sde.theta);
  CHECK(a.sie.se == b.sie.se);
}

TEST_CASE("a moderate sample lands near the truth") {
  const auto data = sim::generate(sim::DgmParams{}, 20000, 2024);
  const auto truth = sim::oracle(sim::DgmParams{});
  for (int folds : {1, 2}) {
    EstimatorOptions opts;
    opts.folds = folds;
    opts.seed = 3;
    const Estimator both[] = {Estimator::OneStep, Estimator::Tmle};
    const auto out = estimate_effects_multi(data, sim::correct_designs(), {1, 0}, opts,
                                            survey_weights(data), {}, both);
    for (const auto& eff : out) {
      CHECK(std::abs(eff.sde.theta - truth.sde) < 4 * eff.sde.se);
      CHECK(std::abs(eff.sie.theta - truth.sie) < 4 * eff.sie.se);
      // The standard error tracks the oracle variance.
      CHECK(eff.sde.se * std::sqrt(double(data.size())) ==
            doctest::Approx(std::sqrt(truth.sigma2_sde)).epsilon(0.2));
    }
  }
}

TEST_CASE("estimator names") {
  CHECK(parse_estimator("os") == Estimator::OneStep);
  CHECK(parse_estimator("one_step") == Estimator::OneStep);
  CHECK(parse_estimator("tmle") == Estimator::Tmle);
  CHECK(std::string(name(Estimator::Tmle)) == "tmle");
  CHECK_THROWS_AS(parse_estimator("ipw"), Error);
}
