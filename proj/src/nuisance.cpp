#include "transmed/nuisance.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

namespace transmed::nuisance {

using regress::DesignPoint;
using regress::DesignSpec;
using regress::FittedModel;

const char* name(Component c) {
  switch (c) {
    case Component::c: return "c";
    case Component::g: return "g";
    case Component::e: return "e";
    case Component::q: return "q";
    case Component::r: return "r";
    case Component::b: return "b";
    case Component::u: return "u";
    case Component::v: return "v";
  }
  return "?";
}

std::string MisspecSet::label() const {
  std::string out;
  for (auto c : kAllComponents) {
    if (!contains(c)) continue;
    if (!out.empty()) out += ",";
    out += name(c);
  }
  return out.empty() ? "none" : out;
}

MisspecSet MisspecSet::parse(const std::string& text) {
  MisspecSet set;
  std::string cleaned;
  for (char ch : text) cleaned += (ch == ',' || ch == ';') ? ' ' : ch;
  std::istringstream in(cleaned);
  std::string tok;
  while (in >> tok) {
    std::transform(tok.begin(), tok.end(), tok.begin(),
                   [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    if (tok == "none") continue;
    bool found = false;
    for (auto c : kAllComponents) {
      if (tok == name(c)) {
        set.insert(c);
        found = true;
      }
    }
    if (!found) throw Error(ErrorCode::InvalidArgument, "unknown nuisance component '" + tok + "'");
  }
  return set;
}

const DesignSpec& SuiteDesigns::operator[](Component comp) const {
  switch (comp) {
    case Component::c: return c;
    case Component::g: return g;
    case Component::e: return e;
    case Component::q: return q;
    case Component::r: return r;
    case Component::b: return b;
    case Component::u: return u;
    case Component::v: return v;
  }
  return c;
}

SuiteDesigns main_effects_designs(std::size_t p, std::size_t q) {
  using namespace regress;
  auto ws = [p] {
    std::vector<Selector> out;
    for (std::size_t j = 0; j < p; ++j) out.push_back(w(j));
    return out;
  };
  auto ms = [q] {
    std::vector<Selector> out;
    for (std::size_t j = 0; j < q; ++j) out.push_back(m(j));
    return out;
  };
  auto join = [](std::initializer_list<std::vector<Selector>> parts) {
    DesignSpec d;
    for (const auto& part : parts) d.terms.insert(d.terms.end(), part.begin(), part.end());
    return d;
  };
  SuiteDesigns d;
  d.c = join({ws(), {a(), z()}, ms()});
  d.g = join({{s()}, ws()});
  d.e = join({{s()}, ms(), ws()});
  d.q = join({{s(), a()}, ws()});
  d.r = join({{s(), a()}, ms(), ws()});
  d.b = join({ws(), {a(), z()}, ms()});
  d.u = join({{s(), a(), z()}, ws()});
  d.v = join({{a()}, ws()});
  return d;
}

double compute_h(const NuisanceFunctions& eta, int a, int z, Vec m, Vec w, double h_max) {
  const int as = eta.spec().a_star;
  const double h = (eta.g(a, w) / eta.g(as, w)) * (eta.q(z, a, w) / eta.r(z, a, m, w)) *
                   (eta.e(as, m, w) / eta.e(a, m, w));
  return std::clamp(h, 0.0, h_max);
}

namespace {

DesignPoint pt(int s, int a, int z, Vec w, Vec m) { return DesignPoint{s, a, z, w, m}; }

double prob_of(double p1, int level) { return level == 1 ? p1 : 1.0 - p1; }

struct Problem {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  Eigen::VectorXd wts;
};

template <class Response, class Point>
Problem build(const Dataset& data, std::span<const std::size_t> rows, const DesignSpec& design,
              std::span<const double> weights, Response response, Point point) {
  std::vector<DesignPoint> pts;
  pts.reserve(rows.size());
  Problem pb;
  pb.y.resize(static_cast<Eigen::Index>(rows.size()));
  pb.wts.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const Observation& o = data[rows[k]];
    pts.push_back(point(o));
    pb.y[static_cast<Eigen::Index>(k)] = response(k, o);
    pb.wts[static_cast<Eigen::Index>(k)] = weights[rows[k]];
  }
  pb.X = regress::design_matrix(design, pts);
  return pb;
}

FittedModel fit_component(Component comp, const DesignSpec& design, const Problem& pb,
                          bool logit, const SuiteOptions& opt) {
  try {
    return logit ? regress::fit_binary(design, pb.X, pb.y, pb.wts, std::nullopt, opt.fit)
                 : regress::fit_linear(design, pb.X, pb.y, pb.wts, opt.fit);
  } catch (const Error& err) {
    throw Error(err.code(), std::string("component ") + name(comp) + ": " + err.what(), err.row());
  }
}

std::vector<std::size_t> all_rows(const Dataset& data) {
  std::vector<std::size_t> idx(data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

void check_weights(const Dataset& data, std::span<const double> weights) {
  if (weights.size() != data.size()) {
    throw Error(ErrorCode::DimensionMismatch, "fit weights must align with rows");
  }
}

}  // namespace

double NuisanceEstimates::c(int a, int z, Vec m, Vec w) const {
  return base_->c.predict(pt(0, a, z, w, m));
}

double NuisanceEstimates::g(int a, Vec w) const {
  const double p1 = base_->g_empirical ? base_->g_empirical_p1 : base_->g.predict(pt(0, 0, 0, w, {}));
  return prob_of(p1, a);
}

double NuisanceEstimates::e(int a, Vec m, Vec w) const {
  return prob_of(base_->e.predict(pt(0, 0, 0, w, m)), a);
}

double NuisanceEstimates::q(int z, int a, Vec w) const {
  return prob_of(base_->q.predict(pt(0, a, 0, w, {})), z);
}

double NuisanceEstimates::r(int z, int a, Vec m, Vec w) const {
  return prob_of(base_->r.predict(pt(0, a, 0, w, m)), z);
}

double NuisanceEstimates::b(int a, int z, Vec m, Vec w) const {
  return base_->b.predict(pt(1, a, z, w, m));
}

double NuisanceEstimates::u(int z, int a, Vec w) const { return u_.predict(pt(0, a, z, w, {})); }

double NuisanceEstimates::v(int a, Vec w) const { return v_.predict(pt(0, a, 0, w, {})); }

double estimate_t(const Dataset& data, std::span<const double> weights) {
  check_weights(data, weights);
  double num = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) num += weights[i] * (1 - data[i].s);
  const double t = num / static_cast<double>(data.size());
  if (!(t > 0.0)) throw Error(ErrorCode::EmptyArm, "no weighted target (s = 0) rows");
  return t;
}

BaseFits fit_base(const Dataset& data, const SuiteDesigns& designs, const MisspecSet& mis,
                  std::span<const double> fit_weights, const SuiteOptions& opt) {
  check_weights(data, fit_weights);
  const std::size_t p = data.p();
  const std::size_t q = data.q();
  designs.c.check(p, q);
  designs.g.check(p, 0);
  designs.e.check(p, q);
  designs.q.check(p, 0);
  designs.r.check(p, q);
  designs.b.check(p, q);

  auto pick = [&](Component comp) {
    const DesignSpec& d = designs[comp];
    return mis.contains(comp) ? d.as_intercept_only() : d;
  };

  BaseFits out;
  out.misspecified = mis;
  out.weights_used.assign(fit_weights.begin(), fit_weights.end());
  out.t = estimate_t(data, fit_weights);

  const auto rows = all_rows(data);
  std::vector<std::size_t> source;
  for (std::size_t i : rows) {
    if (data[i].s == 1) source.push_back(i);
  }
  auto with_m = [](const Observation& o) { return regress::point_of(o); };
  auto no_m = [](const Observation& o) { return DesignPoint{o.s, o.a, o.z, o.w, {}}; };

  {
    const DesignSpec d = pick(Component::c);
    out.c = fit_component(Component::c, d,
                          build(data, rows, d, fit_weights,
                                [](std::size_t, const Observation& o) { return double(o.s); }, with_m),
                          true, opt);
  }
  {
    const DesignSpec d = pick(Component::g);
    out.g = fit_component(Component::g, d,
                          build(data, rows, d, fit_weights,
                                [](std::size_t, const Observation& o) { return double(o.a); }, no_m),
                          true, opt);
    if (opt.g_empirical && !mis.contains(Component::g)) {
      double num = 0.0;
      double den = 0.0;
      for (std::size_t i : rows) {
        if (data[i].s != 0) continue;
        num += fit_weights[i] * data[i].a;
        den += fit_weights[i];
      }
      out.g_empirical = true;
      out.g_empirical_p1 = std::clamp(num / den, opt.fit.p_clamp, 1.0 - opt.fit.p_clamp);
    }
  }
  {
    const DesignSpec d = pick(Component::e);
    out.e = fit_component(Component::e, d,
                          build(data, rows, d, fit_weights,
                                [](std::size_t, const Observation& o) { return double(o.a); }, with_m),
                          true, opt);
  }
  {
    const DesignSpec d = pick(Component::q);
    out.q = fit_component(Component::q, d,
                          build(data, rows, d, fit_weights,
                                [](std::size_t, const Observation& o) { return double(o.z); }, no_m),
                          true, opt);
  }
  {
    const DesignSpec d = pick(Component::r);
    out.r = fit_component(Component::r, d,
                          build(data, rows, d, fit_weights,
                                [](std::size_t, const Observation& o) { return double(o.z); }, with_m),
                          true, opt);
  }
  {
    const DesignSpec d = pick(Component::b);
    if (source.empty()) throw Error(ErrorCode::EmptyArm, "component b: no source (s = 1) rows");
    out.b = fit_component(Component::b, d,
                          build(data, source, d, fit_weights,
                                [](std::size_t, const Observation& o) { return *o.y; }, with_m),
                          true, opt);
  }
  return out;
}

double u_pseudo_outcome(const NuisanceFunctions& eta, const Observation& o, double h_max) {
  return eta.b(o.a, o.z, o.m, o.w) * compute_h(eta, o.a, o.z, o.m, o.w, h_max);
}

double v_pseudo_outcome(const NuisanceFunctions& eta, const Observation& o) {
  const int ap = eta.spec().a_prime;
  return eta.b(ap, 0, o.m, o.w) * eta.q(0, ap, o.w) + eta.b(ap, 1, o.m, o.w) * eta.q(1, ap, o.w);
}

FittedModel fit_u_model(const Dataset& data, std::span<const std::size_t> rows,
                        std::span<const double> pseudo, std::span<const double> weights,
                        const DesignSpec& design, bool misspecified, const SuiteOptions& opt) {
  design.check(data.p(), 0);
  const DesignSpec d = misspecified ? design.as_intercept_only() : design;
  auto pb = build(data, rows, d, weights,
                  [&](std::size_t k, const Observation&) { return pseudo[k]; },
                  [](const Observation& o) { return DesignPoint{o.s, o.a, o.z, o.w, {}}; });
  const bool logit = opt.uv_logit && (pb.y.array() >= 0.0).all() && (pb.y.array() <= 1.0).all();
  return fit_component(Component::u, d, pb, logit, opt);
}

FittedModel fit_v_model(const Dataset& data, std::span<const std::size_t> rows,
                        std::span<const double> pseudo, std::span<const double> weights,
                        const DesignSpec& design, bool misspecified, const SuiteOptions& opt) {
  design.check(data.p(), 0);
  if (rows.empty()) throw Error(ErrorCode::EmptyArm, "component v: no target (s = 0) rows");
  const DesignSpec d = misspecified ? design.as_intercept_only() : design;
  auto pb = build(data, rows, d, weights,
                  [&](std::size_t k, const Observation&) { return pseudo[k]; },
                  [](const Observation& o) { return DesignPoint{o.s, o.a, o.z, o.w, {}}; });
  const bool logit = opt.uv_logit && (pb.y.array() >= 0.0).all() && (pb.y.array() <= 1.0).all();
  return fit_component(Component::v, d, pb, logit, opt);
}

NuisanceEstimates fit_u(const Dataset& data, std::shared_ptr<const BaseFits> base,
                        const EffectSpec& spec, const SuiteDesigns& designs,
                        const MisspecSet& mis, std::span<const double> fit_weights,
                        const SuiteOptions& opt) {
  validate_effect(spec);
  check_weights(data, fit_weights);
  // u is not yet available; a placeholder model lets b and h be evaluated.
  NuisanceEstimates partial(base, spec, FittedModel{}, FittedModel{});
  const auto rows = all_rows(data);
  std::vector<double> pseudo(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    pseudo[k] = u_pseudo_outcome(partial, data[rows[k]], opt.h_max);
  }
  auto u = fit_u_model(data, rows, pseudo, fit_weights, designs.u, mis.contains(Component::u), opt);
  return NuisanceEstimates(std::move(base), spec, std::move(u), FittedModel{});
}

NuisanceEstimates fit_v(const Dataset& data, const NuisanceEstimates& eta,
                        const SuiteDesigns& designs, const MisspecSet& mis,
                        std::span<const double> fit_weights, const SuiteOptions& opt) {
  check_weights(data, fit_weights);
  std::vector<std::size_t> target;
  std::vector<double> pseudo;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].s != 0) continue;
    target.push_back(i);
    pseudo.push_back(v_pseudo_outcome(eta, data[i]));
  }
  auto v = fit_v_model(data, target, pseudo, fit_weights, designs.v, mis.contains(Component::v), opt);
  return NuisanceEstimates(eta.base_ptr(), eta.spec(), eta.u_model(), std::move(v));
}

NuisanceEstimates fit_corner(const Dataset& data, std::shared_ptr<const BaseFits> base,
                             const EffectSpec& spec, const SuiteDesigns& designs,
                             const MisspecSet& mis, std::span<const double> fit_weights,
                             const SuiteOptions& opt) {
  auto with_u = fit_u(data, std::move(base), spec, designs, mis, fit_weights, opt);
  return fit_v(data, with_u, designs, mis, fit_weights, opt);
}

NuisanceEstimates fit_suite(const Dataset& data, const EffectSpec& spec,
                            const SuiteDesigns& designs, const MisspecSet& mis,
                            std::span<const double> fit_weights, const SuiteOptions& opt) {
  auto base = std::make_shared<const BaseFits>(fit_base(data, designs, mis, fit_weights, opt));
  return fit_corner(data, std::move(base), spec, designs, mis, fit_weights, opt);
}

}  // namespace transmed::nuisance
