#include "transmed/sim.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <map>
#include <mutex>
#include <ostream>
#include <thread>

#include <json.hpp>

#include "transmed/eif.hpp"
#include "transmed/rng.hpp"

namespace transmed::sim {

using nuisance::Component;
using nuisance::Vec;
using regress::expit;

namespace {

double bern(double p1, int x) { return x == 1 ? p1 : 1.0 - p1; }

int w1_of(Vec w) { return static_cast<int>(w[0]); }
int w2_of(Vec w) { return static_cast<int>(w[1]); }
int m_of(Vec m) { return static_cast<int>(m[0]); }

using Member = double DgmParams::*;

const std::vector<std::pair<std::string, Member>>& members() {
  static const std::vector<std::pair<std::string, Member>> table = {
      {"w1", &DgmParams::w1},           {"w2_0", &DgmParams::w2_0},
      {"w2_w1", &DgmParams::w2_w1},     {"delta_0", &DgmParams::delta_0},
      {"delta_w1", &DgmParams::delta_w1}, {"delta_w2", &DgmParams::delta_w2},
      {"s_0", &DgmParams::s_0},         {"s_w", &DgmParams::s_w},
      {"a", &DgmParams::a},             {"z_0", &DgmParams::z_0},
      {"z_a", &DgmParams::z_a},         {"z_w2", &DgmParams::z_w2},
      {"z_s", &DgmParams::z_s},         {"z_as", &DgmParams::z_as},
      {"m_0", &DgmParams::m_0},         {"m_z", &DgmParams::m_z},
      {"m_w2", &DgmParams::m_w2},       {"m_s", &DgmParams::m_s},
      {"y_0", &DgmParams::y_0},         {"y_z", &DgmParams::y_z},
      {"y_m", &DgmParams::y_m},         {"y_w2", &DgmParams::y_w2},
      {"y_w2z", &DgmParams::y_w2z},
  };
  return table;
}

Member find_member(const std::string& name) {
  for (const auto& [key, member] : members()) {
    if (key == name) return member;
  }
  throw Error(ErrorCode::InvalidArgument, "unknown simulation parameter '" + name + "'");
}

}  // namespace

DgmParams::DgmParams()
    : delta_w1(std::log(4.0)),
      delta_w2(std::log(4.0)),
      s_w(std::log(1.2)),
      z_0(-std::log(2.0)),
      z_a(std::log(4.0)),
      z_w2(-std::log(2.0)),
      z_s(std::log(1.4)),
      z_as(std::log(1.43)),
      m_0(-std::log(2.0)),
      m_z(std::log(4.0)),
      m_w2(-std::log(1.4)),
      m_s(std::log(1.4)),
      y_0(-std::log(5.0)),
      y_z(std::log(8.0)),
      y_m(std::log(4.0)),
      y_w2(-std::log(1.2)),
      y_w2z(std::log(1.2)) {}

void DgmParams::set(const std::string& name, double value) {
  if (!std::isfinite(value)) {
    throw Error(ErrorCode::InvalidArgument, "parameter '" + name + "' must be finite");
  }
  this->*find_member(name) = value;
}

double DgmParams::get(const std::string& name) const { return this->*find_member(name); }

const std::vector<std::string>& DgmParams::names() {
  static const std::vector<std::string> out = [] {
    std::vector<std::string> v;
    for (const auto& entry : members()) v.push_back(entry.first);
    return v;
  }();
  return out;
}

double DgmParams::p_w2(int w1v) const { return w2_0 + w2_w1 * w1v; }
double DgmParams::pi(int w1v, int w2v) const {
  return expit(delta_0 + delta_w1 * w1v + delta_w2 * w2v);
}
double DgmParams::p_s(int w1v, int w2v) const {
  return expit(s_0 + s_w * (w1v + w2v + w1v * w2v));
}
double DgmParams::p_z(int av, int sv, int w2v) const {
  return expit(z_0 + z_a * av + z_w2 * w2v + z_s * sv + z_as * av * sv);
}
double DgmParams::p_m(int zv, int sv, int w2v) const {
  return expit(m_0 + m_z * zv + m_w2 * w2v + m_s * sv);
}
double DgmParams::p_y(int zv, int mv, int w2v) const {
  return expit(y_0 + y_z * zv + y_m * mv + y_w2 * w2v + y_w2z * w2v * zv);
}

std::vector<Unit> generate_units(const DgmParams& p, std::size_t n, std::uint64_t seed,
                                 std::uint64_t stream) {
  rng::Stream draws(seed, stream);
  std::vector<Unit> out(n);
  for (auto& u : out) {
    double x[8];
    for (double& xi : x) xi = draws.uniform();
    u.w1 = x[0] < p.w1;
    u.w2 = x[1] < p.p_w2(u.w1);
    u.pi = p.pi(u.w1, u.w2);
    u.delta = x[2] < u.pi;
    u.s = x[3] < p.p_s(u.w1, u.w2);
    u.a = x[4] < p.a;
    u.z = x[5] < p.p_z(u.a, u.s, u.w2);
    u.m = x[6] < p.p_m(u.z, u.s, u.w2);
    u.y = x[7] < p.p_y(u.z, u.m, u.w2);
  }
  return out;
}

Dataset to_dataset(const std::vector<Unit>& units) {
  std::vector<Observation> rows;
  rows.reserve(units.size());
  for (const auto& u : units) {
    if (u.delta != 1) continue;
    Observation o;
    o.delta = 1;
    o.s = u.s;
    o.w = {static_cast<double>(u.w1), static_cast<double>(u.w2)};
    o.a = u.a;
    o.z = u.z;
    o.m = {static_cast<double>(u.m)};
    if (u.s == 1) o.y = u.y;
    o.pi = u.pi;
    rows.push_back(std::move(o));
  }
  return Dataset(std::move(rows), {0.0, 1.0});
}

Dataset generate(const DgmParams& params, std::size_t n, std::uint64_t seed,
                 std::uint64_t stream) {
  return to_dataset(generate_units(params, n, seed, stream));
}

nuisance::SuiteDesigns correct_designs() {
  using namespace regress;
  using Terms = std::vector<Selector>;
  using Products = std::vector<std::vector<Selector>>;
  auto design = [](Terms terms, Products products) {
    DesignSpec d;
    d.terms = std::move(terms);
    d.interactions = std::move(products);
    return d;
  };
  const auto W1 = w(0), W2 = w(1), M = m(0), A = a(), Z = z(), S = s();
  nuisance::SuiteDesigns d;
  // logit c adds logit P(S|W) to log ratios of the Z and M laws across S.
  d.c = design({W1, W2, A, Z, M},
               {{W1, W2}, {A, Z}, {A, W2}, {Z, W2}, {M, Z}, {M, W2}, {A, Z, W2}, {M, Z, W2}});
  d.g = design({S, W1, W2}, {});
  d.e = design({S, M, W1, W2}, {{M, S}, {M, W2}, {S, W2}, {M, S, W2}});
  d.q = design({S, A, W1, W2}, {{A, S}});
  d.r = design({S, A, M, W1, W2}, {{A, S}, {S, W2}, {M, S}, {M, W2}, {M, S, W2}});
  d.b = design({W1, W2, A, Z, M}, {{W2, Z}});
  d.u = design({S, A, Z, W1, W2}, {{S, A}, {S, Z}, {S, W2}, {A, Z}, {A, W2}, {Z, W2},
                                   {S, A, Z}, {S, A, W2}, {S, Z, W2}, {A, Z, W2},
                                   {S, A, Z, W2}});
  d.v = design({A, W1, W2}, {{A, W2}});
  return d;
}

// ---------------------------------------------------------------------------
// Oracle

OracleNuisance::OracleNuisance(DgmParams params, EffectSpec spec, double h_max)
    : p_(params), spec_(spec), h_max_(h_max) {
  double mass = 0.0;
  double target = 0.0;
  for (int w1 = 0; w1 < 2; ++w1) {
    for (int w2 = 0; w2 < 2; ++w2) {
      const double pw = bern(p_.w1, w1) * bern(p_.p_w2(w1), w2) * p_.pi(w1, w2);
      mass += pw;
      target += pw * (1.0 - p_.p_s(w1, w2));
    }
  }
  t_ = target / mass;
}

double OracleNuisance::p_m_given_z(int m, int z, Vec w) const {
  return bern(p_.p_m(z, 0, w2_of(w)), m);
}

double OracleNuisance::c(int a, int z, Vec m, Vec w) const {
  const int w2 = w2_of(w);
  const int mv = m_of(m);
  const double ps = p_.p_s(w1_of(w), w2);
  const double src = ps * bern(p_.p_z(a, 1, w2), z) * bern(p_.p_m(z, 1, w2), mv);
  const double tgt = (1.0 - ps) * bern(p_.p_z(a, 0, w2), z) * bern(p_.p_m(z, 0, w2), mv);
  return src / (src + tgt);
}

double OracleNuisance::g(int a, Vec) const { return bern(p_.a, a); }

double OracleNuisance::q(int z, int a, Vec w) const { return bern(p_.p_z(a, 0, w2_of(w)), z); }

double OracleNuisance::r(int z, int a, Vec m, Vec w) const {
  double joint[2];
  for (int k = 0; k < 2; ++k) joint[k] = q(k, a, w) * p_m_given_z(m_of(m), k, w);
  return joint[z] / (joint[0] + joint[1]);
}

double OracleNuisance::e(int a, Vec m, Vec w) const {
  double joint[2];
  for (int k = 0; k < 2; ++k) {
    joint[k] = g(k, w) * (q(0, k, w) * p_m_given_z(m_of(m), 0, w) +
                          q(1, k, w) * p_m_given_z(m_of(m), 1, w));
  }
  return joint[a] / (joint[0] + joint[1]);
}

double OracleNuisance::b(int, int z, Vec m, Vec w) const {
  return p_.p_y(z, m_of(m), w2_of(w));
}

double OracleNuisance::u(int z, int a, Vec w) const {
  double out = 0.0;
  for (int mv = 0; mv < 2; ++mv) {
    const double m[] = {static_cast<double>(mv)};
    out += b(a, z, m, w) * nuisance::compute_h(*this, a, z, m, w, h_max_) *
           p_m_given_z(mv, z, w);
  }
  return out;
}

double OracleNuisance::v(int a, Vec w) const {
  const int ap = spec_.a_prime;
  double out = 0.0;
  for (int mv = 0; mv < 2; ++mv) {
    const double m[] = {static_cast<double>(mv)};
    const double inner = b(ap, 0, m, w) * q(0, ap, w) + b(ap, 1, m, w) * q(1, ap, w);
    const double pm = q(0, a, w) * p_m_given_z(mv, 0, w) + q(1, a, w) * p_m_given_z(mv, 1, w);
    out += inner * pm;
  }
  return out;
}

Dataset Population::dataset() const {
  std::vector<Observation> rows;
  rows.reserve(cells.size());
  for (const auto& c : cells) rows.push_back(c.obs);
  return Dataset(std::move(rows), {0.0, 1.0});
}

std::vector<double> Population::weights(bool weighted) const {
  std::vector<double> out(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) {
    out[i] = cells[i].prob * (weighted ? cells[i].gamma : 1.0);
  }
  return out;
}

Population enumerate_population(const DgmParams& p, bool weighted) {
  Population pop;
  double mass = 0.0;
  double target = 0.0;
  double target_over_pi = 0.0;
  for (int w1 = 0; w1 < 2; ++w1) {
    for (int w2 = 0; w2 < 2; ++w2) {
      const double pw = bern(p.w1, w1) * bern(p.p_w2(w1), w2) * p.pi(w1, w2);
      mass += pw;
      target += pw * (1.0 - p.p_s(w1, w2));
      target_over_pi += pw * (1.0 - p.p_s(w1, w2)) / p.pi(w1, w2);
    }
  }
  pop.t = target / mass;
  const double norm = target / target_over_pi;

  for (int w1 = 0; w1 < 2; ++w1) {
    for (int w2 = 0; w2 < 2; ++w2) {
      const double pi = p.pi(w1, w2);
      const double pw = bern(p.w1, w1) * bern(p.p_w2(w1), w2) * pi / mass;
      for (int s = 0; s < 2; ++s) {
        const double ps = bern(p.p_s(w1, w2), s);
        for (int a = 0; a < 2; ++a) {
          for (int z = 0; z < 2; ++z) {
            for (int m = 0; m < 2; ++m) {
              const double base = pw * ps * bern(p.a, a) * bern(p.p_z(a, s, w2), z) *
                                  bern(p.p_m(z, s, w2), m);
              Cell cell;
              cell.obs.delta = 1;
              cell.obs.s = s;
              cell.obs.w = {static_cast<double>(w1), static_cast<double>(w2)};
              cell.obs.a = a;
              cell.obs.z = z;
              cell.obs.m = {static_cast<double>(m)};
              cell.obs.pi = pi;
              cell.gamma = weighted ? norm / pi : 1.0;
              if (s == 0) {
                cell.prob = base;
                pop.cells.push_back(cell);
                continue;
              }
              for (int y = 0; y < 2; ++y) {
                cell.obs.y = y;
                cell.prob = base * bern(p.p_y(z, m, w2), y);
                pop.cells.push_back(cell);
              }
            }
          }
        }
      }
    }
  }
  return pop;
}

// ---------------------------------------------------------------------------
// Limits under misspecification

namespace {

// Weighted mean of f over the cells that pass `keep`.
template <class Keep, class F>
double cell_mean(const Population& pop, bool weighted, Keep keep, F f) {
  double num = 0.0;
  double den = 0.0;
  for (const auto& c : pop.cells) {
    if (!keep(c.obs)) continue;
    const double wt = c.prob * (weighted ? c.gamma : 1.0);
    num += wt * f(c.obs);
    den += wt;
  }
  return num / den;
}

}  // namespace

LimitingNuisance::LimitingNuisance(const DgmParams& params, const Population& pop,
                                   EffectSpec spec, const nuisance::MisspecSet& mis,
                                   UvLimit mode, bool weighted, double h_max)
    : truth_(params, spec, h_max), mis_(mis), mode_(mode), h_max_(h_max) {
  auto all = [](const Observation&) { return true; };
  auto source = [](const Observation& o) { return o.s == 1; };
  auto target = [](const Observation& o) { return o.s == 0; };
  c0_ = cell_mean(pop, weighted, all, [](const Observation& o) { return double(o.s); });
  g1_ = cell_mean(pop, weighted, all, [](const Observation& o) { return double(o.a); });
  e1_ = g1_;
  q1_ = cell_mean(pop, weighted, all, [](const Observation& o) { return double(o.z); });
  r1_ = q1_;
  b0_ = cell_mean(pop, weighted, source, [](const Observation& o) { return *o.y; });

  // Pseudo-outcomes use the limits above in estimator mode, the truth otherwise.
  const nuisance::NuisanceFunctions& basis =
      mode_ == UvLimit::Estimator ? static_cast<const nuisance::NuisanceFunctions&>(*this)
                                  : truth_;
  u0_ = cell_mean(pop, weighted, all, [&](const Observation& o) {
    return nuisance::u_pseudo_outcome(basis, o, h_max_);
  });
  v0_ = cell_mean(pop, weighted, target,
                  [&](const Observation& o) { return nuisance::v_pseudo_outcome(basis, o); });
}

double LimitingNuisance::c(int a, int z, Vec m, Vec w) const {
  return mis_.contains(Component::c) ? c0_ : truth_.c(a, z, m, w);
}
double LimitingNuisance::g(int a, Vec w) const {
  return mis_.contains(Component::g) ? bern(g1_, a) : truth_.g(a, w);
}
double LimitingNuisance::e(int a, Vec m, Vec w) const {
  return mis_.contains(Component::e) ? bern(e1_, a) : truth_.e(a, m, w);
}
double LimitingNuisance::q(int z, int a, Vec w) const {
  return mis_.contains(Component::q) ? bern(q1_, z) : truth_.q(z, a, w);
}
double LimitingNuisance::r(int z, int a, Vec m, Vec w) const {
  return mis_.contains(Component::r) ? bern(r1_, z) : truth_.r(z, a, m, w);
}
double LimitingNuisance::b(int a, int z, Vec m, Vec w) const {
  return mis_.contains(Component::b) ? b0_ : truth_.b(a, z, m, w);
}

double LimitingNuisance::u_conditional(int z, int a, Vec w) const {
  if (mode_ == UvLimit::Truth) return truth_.u(z, a, w);
  double out = 0.0;
  for (int mv = 0; mv < 2; ++mv) {
    const double m[] = {static_cast<double>(mv)};
    out += b(a, z, m, w) * nuisance::compute_h(*this, a, z, m, w, h_max_) *
           truth_.p_m_given_z(mv, z, w);
  }
  return out;
}

double LimitingNuisance::v_conditional(int a, Vec w) const {
  if (mode_ == UvLimit::Truth) return truth_.v(a, w);
  const int ap = spec().a_prime;
  double out = 0.0;
  for (int mv = 0; mv < 2; ++mv) {
    const double m[] = {static_cast<double>(mv)};
    const double inner = b(ap, 0, m, w) * q(0, ap, w) + b(ap, 1, m, w) * q(1, ap, w);
    const double pm = truth_.q(0, a, w) * truth_.p_m_given_z(mv, 0, w) +
                      truth_.q(1, a, w) * truth_.p_m_given_z(mv, 1, w);
    out += inner * pm;
  }
  return out;
}

double LimitingNuisance::u(int z, int a, Vec w) const {
  return mis_.contains(Component::u) ? u0_ : u_conditional(z, a, w);
}
double LimitingNuisance::v(int a, Vec w) const {
  return mis_.contains(Component::v) ? v0_ : v_conditional(a, w);
}

double population_eif_mean(const Population& pop, const nuisance::NuisanceFunctions& eta,
                           double theta, bool weighted, double h_max) {
  double out = 0.0;
  for (const auto& c : pop.cells) {
    const double wt = c.prob * (weighted ? c.gamma : 1.0);
    out += wt * eif::eif_row(c.obs, eta, theta, h_max).total();
  }
  return out;
}

OracleTruths oracle(const DgmParams& params, bool weighted, EffectSpec pair) {
  validate_effect(pair);
  const auto pop = enumerate_population(params, weighted);
  const EffectSpec corners[3] = {{pair.a_prime, pair.a_prime},
                                 {pair.a_prime, pair.a_star},
                                 {pair.a_star, pair.a_star}};
  double theta[3];
  std::vector<double> d[3];
  for (int k = 0; k < 3; ++k) {
    const OracleNuisance eta(params, corners[k]);
    double num = 0.0;
    double den = 0.0;
    for (const auto& c : pop.cells) {
      if (c.obs.s != 0) continue;
      num += c.prob * c.gamma * eta.v(corners[k].a_star, c.obs.w);
      den += c.prob * c.gamma;
    }
    theta[k] = num / den;
    d[k].reserve(pop.cells.size());
    for (const auto& c : pop.cells) {
      d[k].push_back(c.gamma * eif::eif_row(c.obs, eta, theta[k], 50.0).total());
    }
  }
  auto second_moment = [&](auto f) {
    double s = 0.0;
    for (std::size_t i = 0; i < pop.cells.size(); ++i) {
      const double x = f(i);
      s += pop.cells[i].prob * x * x;
    }
    return s;
  };
  OracleTruths out;
  out.weighted = weighted;
  out.theta_pp = theta[0];
  out.theta_ps = theta[1];
  out.theta_ss = theta[2];
  out.sde = theta[1] - theta[2];
  out.sie = theta[0] - theta[1];
  out.sigma2_pp = second_moment([&](std::size_t i) { return d[0][i]; });
  out.sigma2_ps = second_moment([&](std::size_t i) { return d[1][i]; });
  out.sigma2_ss = second_moment([&](std::size_t i) { return d[2][i]; });
  out.sigma2_sde = second_moment([&](std::size_t i) { return d[1][i] - d[2][i]; });
  out.sigma2_sie = second_moment([&](std::size_t i) { return d[0][i] - d[1][i]; });
  return out;
}

// ---------------------------------------------------------------------------
// Scenarios

const char* name(Effect e) { return e == Effect::Sde ? "sde" : "sie"; }

Effect parse_effect(const std::string& text) {
  if (text == "sde") return Effect::Sde;
  if (text == "sie") return Effect::Sie;
  throw Error(ErrorCode::InvalidArgument, "unknown effect '" + text + "'");
}

void ScenarioSpec::validate() const {
  auto fail = [this](const std::string& what) {
    throw Error(ErrorCode::InvalidArgument, "scenario '" + name + "': " + what);
  };
  if (reps < 1) fail("reps must be >= 1");
  if (n < 100) fail("n must be >= 100");
  if (folds < 1) fail("folds must be >= 1");
  if (max_targeting_iters < 1) fail("max_targeting_iters must be >= 1");
  if (estimators.empty()) fail("no estimators requested");
  if (effects.empty()) fail("no effects requested");
}

MetricsRow compute_metrics(std::span<const RepEstimate> reps, double truth, double sigma2,
                           double n) {
  MetricsRow row;
  row.truth = truth;
  row.sigma2 = sigma2;
  row.reps_ok = static_cast<int>(reps.size());
  if (reps.empty()) return row;
  const double r = static_cast<double>(reps.size());
  double mean = 0.0, mean_se = 0.0, covered = 0.0;
  for (const auto& e : reps) {
    mean += e.theta;
    mean_se += e.se;
    covered += (e.ci_lo <= truth && truth <= e.ci_hi) ? 1.0 : 0.0;
  }
  mean /= r;
  mean_se /= r;
  double ss = 0.0, mse = 0.0;
  for (const auto& e : reps) {
    ss += (e.theta - mean) * (e.theta - mean);
    mse += (e.theta - truth) * (e.theta - truth);
  }
  row.sd_mc = std::sqrt(ss / r);
  mse /= r;
  row.bias = mean - truth;
  row.abs_bias = std::abs(row.bias);
  row.sqrt_n_abs_bias = std::sqrt(n) * row.abs_bias;
  row.coverage = covered / r;
  if (reps.size() >= 2 && row.sd_mc > 0.0) {
    row.relse = mean_se / row.sd_mc;
    row.relsd = std::sqrt(n) * row.sd_mc / std::sqrt(sigma2);
    row.relrmse = n * mse / sigma2;
  }
  return row;
}

RepRecord run_replicate(const ScenarioSpec& spec, int index) {
  RepRecord rec;
  rec.index = index;
  try {
    const auto data = generate(spec.params, spec.n, spec.seed, static_cast<std::uint64_t>(index));
    rec.n_eff = data.size();
    const auto gamma = spec.weighted ? estimate::survey_weights(data)
                                     : std::vector<double>(data.size(), 1.0);
    estimate::EstimatorOptions opts;
    opts.folds = spec.folds;
    opts.seed = rng::philox4x64({static_cast<std::uint64_t>(index), 0, 0, 0},
                                {spec.seed, 0x5EEDF01DULL})[0];
    opts.g_empirical = spec.g_empirical;
    opts.tmle_weighted_fluctuation = spec.tmle_weighted_fluctuation;
    opts.max_targeting_iters = spec.max_targeting_iters;
    static const auto designs = correct_designs();
    const auto all = estimate::estimate_effects_multi(data, designs, EffectSpec{1, 0}, opts,
                                                      gamma, spec.mis, spec.estimators);
    for (const auto& eff : all) {
      std::vector<RepEstimate> per_effect;
      for (Effect e : spec.effects) {
        const auto& est = e == Effect::Sde ? eff.sde : eff.sie;
        per_effect.push_back({est.theta, est.se, est.ci_lo, est.ci_hi, est.diagnostics});
      }
      rec.estimates.push_back(std::move(per_effect));
    }
    rec.ok = true;
  } catch (const Error& err) {
    rec.ok = false;
    rec.error = err.what();
    rec.estimates.clear();
  }
  return rec;
}

ScenarioResult run_scenario(const ScenarioSpec& spec, int threads, const Progress& progress) {
  spec.validate();
  ScenarioResult result;
  result.spec = spec;
  result.truths = oracle(spec.params, spec.weighted);
  result.records.resize(static_cast<std::size_t>(spec.reps));

  std::atomic<int> next{0};
  std::atomic<int> done{0};
  std::mutex report;
  std::exception_ptr fatal;
  auto worker = [&] {
    for (int i = next++; i < spec.reps; i = next++) {
      try {
        result.records[static_cast<std::size_t>(i)] = run_replicate(spec, i);
      } catch (...) {
        std::lock_guard lock(report);
        if (!fatal) fatal = std::current_exception();
        next = spec.reps;
        return;
      }
      const int finished = ++done;
      if (progress) {
        std::lock_guard lock(report);
        progress(spec.name, finished, spec.reps);
      }
    }
  };
  const int workers = std::max(1, std::min(threads, spec.reps));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int k = 0; k < workers; ++k) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (fatal) std::rethrow_exception(fatal);

  int failures = 0;
  double n_eff = 0.0;
  for (const auto& rec : result.records) {
    if (!rec.ok) {
      ++failures;
      continue;
    }
    n_eff += static_cast<double>(rec.n_eff);
  }
  if (failures * 100 > spec.reps) {
    std::string first;
    for (const auto& rec : result.records) {
      if (!rec.ok) {
        first = rec.error;
        break;
      }
    }
    throw Error(ErrorCode::ScenarioAborted,
                "scenario '" + spec.name + "': " + std::to_string(failures) + " of " +
                    std::to_string(spec.reps) + " replicates failed (first: " + first + ")");
  }
  const int ok = spec.reps - failures;
  n_eff = ok > 0 ? n_eff / ok : 0.0;

  const auto& t = result.truths;
  for (std::size_t k = 0; k < spec.estimators.size(); ++k) {
    for (std::size_t e = 0; e < spec.effects.size(); ++e) {
      std::vector<RepEstimate> ests;
      int diverged = 0;
      for (const auto& rec : result.records) {
        if (!rec.ok) continue;
        const auto& est = rec.estimates[k][e];
        ests.push_back(est);
        if (!est.diagnostics.targeting_converged) ++diverged;
      }
      const bool sde = spec.effects[e] == Effect::Sde;
      auto row = compute_metrics(ests, sde ? t.sde : t.sie, sde ? t.sigma2_sde : t.sigma2_sie,
                                 n_eff);
      row.scenario = spec.name;
      row.mis = spec.mis.label();
      row.n = spec.n;
      row.n_eff = n_eff;
      row.reps = spec.reps;
      row.failures = failures;
      row.diverged = diverged;
      row.estimator = estimate::name(spec.estimators[k]);
      row.effect = name(spec.effects[e]);
      result.rows.push_back(std::move(row));
    }
  }
  return result;
}

std::vector<nuisance::MisspecSet> table_grid() {
  using C = Component;
  return {{},     {C::c}, {C::g}, {C::e}, {C::q}, {C::r}, {C::b}, {C::u}, {C::v},
          {C::c, C::e, C::r, C::u, C::v},
          {C::c, C::g, C::e, C::r, C::u}};
}

// ---------------------------------------------------------------------------
// Scenario files

namespace {

using nlohmann::json;

[[noreturn]] void bad_file(const std::string& what) {
  throw Error(ErrorCode::InvalidArgument, "scenario file: " + what);
}

std::vector<std::string> string_list(const json& v, const char* key) {
  std::vector<std::string> out;
  if (v.is_string()) {
    out.push_back(v.get<std::string>());
  } else if (v.is_array()) {
    for (const auto& item : v) {
      if (!item.is_string()) bad_file(std::string("'") + key + "' entries must be strings");
      out.push_back(item.get<std::string>());
    }
  } else {
    bad_file(std::string("'") + key + "' must be a string or a list of strings");
  }
  return out;
}

template <class T>
T integer(const json& v, const char* key) {
  if (!v.is_number_integer()) bad_file(std::string("'") + key + "' must be an integer");
  return v.get<T>();
}

bool boolean(const json& v, const char* key) {
  if (v.is_boolean()) return v.get<bool>();
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "on") return true;
    if (s == "off") return false;
  }
  bad_file(std::string("'") + key + "' must be true/false or \"on\"/\"off\"");
}

void apply_fields(ScenarioSpec& spec, const json& obj) {
  if (!obj.is_object()) bad_file("scenario entries must be objects");
  for (const auto& item : obj.items()) {
    const std::string& key = item.key();
    const json& v = item.value();
    if (key == "name") {
      if (!v.is_string()) bad_file("'name' must be a string");
      spec.name = v.get<std::string>();
    } else if (key == "n") {
      const auto n = integer<long long>(v, "n");
      if (n < 0) bad_file("'n' must be non-negative");
      spec.n = static_cast<std::size_t>(n);
    } else if (key == "reps") {
      spec.reps = integer<int>(v, "reps");
    } else if (key == "mis") {
      if (v.is_array()) {
        std::string joined;
        for (const auto& s : string_list(v, "mis")) joined += s + ",";
        spec.mis = nuisance::MisspecSet::parse(joined);
      } else if (v.is_string()) {
        spec.mis = nuisance::MisspecSet::parse(v.get<std::string>());
      } else {
        bad_file("'mis' must be a string or a list");
      }
    } else if (key == "estimators" || key == "estimator") {
      spec.estimators.clear();
      for (const auto& s : string_list(v, "estimators")) {
        spec.estimators.push_back(estimate::parse_estimator(s));
      }
    } else if (key == "effects" || key == "effect") {
      spec.effects.clear();
      for (const auto& s : string_list(v, "effects")) spec.effects.push_back(parse_effect(s));
    } else if (key == "folds") {
      spec.folds = integer<int>(v, "folds");
    } else if (key == "seed") {
      spec.seed = integer<std::uint64_t>(v, "seed");
    } else if (key == "weighted") {
      spec.weighted = boolean(v, "weighted");
    } else if (key == "weighted_fluct") {
      spec.tmle_weighted_fluctuation = boolean(v, "weighted_fluct");
    } else if (key == "g_empirical") {
      spec.g_empirical = boolean(v, "g_empirical");
    } else if (key == "max_targeting_iters") {
      spec.max_targeting_iters = integer<int>(v, "max_targeting_iters");
    } else if (key == "params") {
      if (!v.is_object()) bad_file("'params' must be an object");
      for (const auto& param : v.items()) {
        const std::string& pname = param.key();
        const json& pv = param.value();
        if (!pv.is_number()) bad_file("parameter '" + pname + "' must be a number");
        spec.params.set(pname, pv.get<double>());
      }
    } else {
      bad_file("unknown key '" + key + "'");
    }
  }
}

}  // namespace

std::vector<ScenarioSpec> parse_scenarios(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& err) {
    bad_file(std::string("not valid JSON: ") + err.what());
  }
  if (!doc.is_object()) bad_file("top level must be an object");
  ScenarioSpec defaults;
  if (doc.contains("defaults")) apply_fields(defaults, doc["defaults"]);
  if (!doc.contains("scenarios") || !doc["scenarios"].is_array()) {
    bad_file("'scenarios' must be a list");
  }
  for (const auto& item : doc.items()) {
    if (item.key() != "defaults" && item.key() != "scenarios") {
      bad_file("unknown key '" + item.key() + "'");
    }
  }
  std::vector<ScenarioSpec> out;
  for (const auto& entry : doc["scenarios"]) {
    ScenarioSpec spec = defaults;
    apply_fields(spec, entry);
    if (!entry.contains("name")) spec.name = spec.mis.label();
    spec.validate();
    out.push_back(std::move(spec));
  }
  if (out.empty()) bad_file("no scenarios");
  return out;
}

// ---------------------------------------------------------------------------
// Writers

std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols = {
      "scenario", "mis",      "n",       "n_eff",     "reps",   "reps_ok",
      "failures", "diverged", "estimator", "effect",  "truth",  "sigma2",
      "bias",     "abs_bias", "sqrt_n_abs_bias", "relse", "relsd", "relrmse",
      "coverage", "sd_mc"};
  return cols;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

std::string opt(const std::optional<double>& x) { return x ? format_double(*x) : ""; }

}  // namespace

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows) {
  const auto& cols = metrics_columns();
  for (std::size_t k = 0; k < cols.size(); ++k) out << (k ? "," : "") << cols[k];
  out << '\n';
  for (const auto& r : rows) {
    out << csv_field(r.scenario) << ',' << csv_field(r.mis) << ',' << r.n << ','
        << format_double(r.n_eff) << ',' << r.reps << ',' << r.reps_ok << ',' << r.failures
        << ',' << r.diverged << ',' << r.estimator << ',' << r.effect << ','
        << format_double(r.truth) << ',' << format_double(r.sigma2) << ','
        << format_double(r.bias) << ',' << format_double(r.abs_bias) << ','
        << format_double(r.sqrt_n_abs_bias) << ',' << opt(r.relse) << ',' << opt(r.relsd)
        << ',' << opt(r.relrmse) << ',' << format_double(r.coverage) << ','
        << format_double(r.sd_mc) << '\n';
  }
}

void write_metrics_json(std::ostream& out, const std::vector<MetricsRow>& rows) {
  using ordered = nlohmann::ordered_json;
  ordered arr = ordered::array();
  auto opt_json = [](const std::optional<double>& x) {
    return x ? ordered(*x) : ordered(nullptr);
  };
  for (const auto& r : rows) {
    ordered rec;
    rec["scenario"] = r.scenario;
    rec["mis"] = r.mis;
    rec["n"] = r.n;
    rec["n_eff"] = r.n_eff;
    rec["reps"] = r.reps;
    rec["reps_ok"] = r.reps_ok;
    rec["failures"] = r.failures;
    rec["diverged"] = r.diverged;
    rec["estimator"] = r.estimator;
    rec["effect"] = r.effect;
    rec["truth"] = r.truth;
    rec["sigma2"] = r.sigma2;
    rec["bias"] = r.bias;
    rec["abs_bias"] = r.abs_bias;
    rec["sqrt_n_abs_bias"] = r.sqrt_n_abs_bias;
    rec["relse"] = opt_json(r.relse);
    rec["relsd"] = opt_json(r.relsd);
    rec["relrmse"] = opt_json(r.relrmse);
    rec["coverage"] = r.coverage;
    rec["sd_mc"] = r.sd_mc;
    arr.push_back(std::move(rec));
  }
  out << arr.dump(2) << '\n';
}

}  // namespace transmed::sim
