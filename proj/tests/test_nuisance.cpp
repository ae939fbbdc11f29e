#include <doctest.h>

#include <cmath>
#include <memory>

#include "support/brute_force.hpp"
#include "transmed/nuisance.hpp"
#include "transmed/sim.hpp"

using namespace transmed;
using namespace transmed::nuisance;

namespace {

// Fits on the enumerated law with cell probabilities as weights recover the
// population regressions, so saturated designs must reproduce the brute-force
// conditionals.
struct PopulationFit {
  sim::Population pop = sim::enumerate_population(sim::DgmParams{});
  Dataset data = pop.dataset();
  std::vector<double> weights = scaled(pop.weights(true));

  // Sample weights average one per row; t relies on that scale.
  static std::vector<double> scaled(std::vector<double> w) {
    for (auto& x : w) x *= static_cast<double>(w.size());
    return w;
  }
};

// Fixed nuisance values for exercising compute_h.
class Constant final : public NuisanceFunctions {
 public:
  Constant(double g1, double q1, double r1, double e1) : g1_(g1), q1_(q1), r1_(r1), e1_(e1) {}
  const EffectSpec& spec() const override { return spec_; }
  double c(int, int, Vec, Vec) const override { return 0.5; }
  double g(int a, Vec) const override { return a ? g1_ : 1 - g1_; }
  double e(int a, Vec, Vec) const override { return a ? e1_ : 1 - e1_; }
  double q(int z, int, Vec) const override { return z ? q1_ : 1 - q1_; }
  double r(int z, int, Vec, Vec) const override { return z ? r1_ : 1 - r1_; }
  double b(int, int, Vec, Vec) const override { return 0.5; }
  double u(int, int, Vec) const override { return 0.5; }
  double v(int, Vec) const override { return 0.5; }
  double t() const override { return 0.5; }

 private:
  EffectSpec spec_{1, 0};
  double g1_, q1_, r1_, e1_;
};

}  // namespace

TEST_CASE("population fits with the correct designs reproduce every conditional") {
  const PopulationFit pf;
  const brute::Law law;
  const auto designs = sim::correct_designs();
  for (const EffectSpec spec : {EffectSpec{1, 0}, EffectSpec{0, 1}, EffectSpec{1, 1}}) {
    const auto eta = fit_suite(pf.data, spec, designs, {}, pf.weights);
    CHECK(std::abs(eta.t() - law.t()) < 1e-12);
    for (int w1 = 0; w1 < 2; ++w1) {
      for (int w2 = 0; w2 < 2; ++w2) {
        const double w[] = {double(w1), double(w2)};
        for (int a = 0; a < 2; ++a) {
          CAPTURE(a);
          CHECK(std::abs(eta.g(a, w) - law.g(a, w1, w2)) < 1e-7);
          CHECK(std::abs(eta.v(a, w) - law.v(a, w1, w2, spec.a_prime)) < 1e-7);
          for (int z = 0; z < 2; ++z) {
            CHECK(std::abs(eta.q(z, a, w) - law.q(z, a, w1, w2)) < 1e-7);
            CHECK(std::abs(eta.u(z, a, w) - law.u(z, a, w1, w2, spec.a_star)) < 1e-7);
            for (int m = 0; m < 2; ++m) {
              const double mm[] = {double(m)};
              CHECK(std::abs(eta.c(a, z, mm, w) - law.c(a, z, m, w1, w2)) < 1e-7);
              CHECK(std::abs(eta.b(a, z, mm, w) - law.b(a, z, m, w1, w2)) < 1e-7);
              // Bayes form of h against the direct density ratio.
              CHECK(std::abs(compute_h(eta, a, z, mm, w, 50.0) -
                             law.h(a, z, m, w1, w2, spec.a_star)) < 1e-6);
            }
          }
        }
      }
    }
  }
}

TEST_CASE("misspecified components are weighted intercepts") {
  const PopulationFit pf;
  using C = Component;
  const auto eta = fit_suite(pf.data, {1, 0}, sim::correct_designs(), {C::q, C::g, C::v}, pf.weights);
  // Intercept-only logits return the weighted mean of the response.
  double zs = 0, as = 0, all = 0, qsum = 0, target = 0;
  for (std::size_t i = 0; i < pf.data.size(); ++i) {
    zs += pf.weights[i] * pf.data[i].z;
    as += pf.weights[i] * pf.data[i].a;
    all += pf.weights[i];
    if (pf.data[i].s == 0) {
      qsum += pf.weights[i] * v_pseudo_outcome(eta, pf.data[i]);
      target += pf.weights[i];
    }
  }
  const double w00[] = {0, 0}, w11[] = {1, 1};
  CHECK(eta.q(1, 0, w00) == doctest::Approx(zs / all).epsilon(1e-9));
  CHECK(eta.q(1, 1, w11) == doctest::Approx(zs / all).epsilon(1e-9));
  CHECK(eta.g(1, w11) == doctest::Approx(as / all).epsilon(1e-9));
  CHECK(eta.v(0, w00) == doctest::Approx(qsum / target).epsilon(1e-9));
  CHECK(eta.v(1, w11) == eta.v(0, w00));
  CHECK(eta.misspecified().contains(C::q));
  CHECK_FALSE(eta.misspecified().contains(C::b));
}

TEST_CASE("sample fits approach the truth") {
  const auto data = sim::generate(sim::DgmParams{}, 100000, 3);
  const std::vector<double> ones(data.size(), 1.0);
  const auto eta = fit_suite(data, {1, 0}, sim::correct_designs(), {}, ones);
  const sim::OracleNuisance truth(sim::DgmParams{}, {1, 0});
  const double w[] = {1.0, 0.0};
  CHECK(std::abs(eta.g(1, w) - 0.5) < 0.02);
  CHECK(std::abs(eta.q(1, 1, w) - 2.0 / 3.0) < 0.02);
  CHECK(std::abs(eta.q(1, 1, w) - truth.q(1, 1, w)) < 0.02);
  CHECK(std::abs(eta.v(1, w) - truth.v(1, w)) < 0.02);
  CHECK(std::abs(eta.u(1, 1, w) - truth.u(1, 1, w)) < 0.03);
}

TEST_CASE("empirical arm proportions for g") {
  const auto data = sim::generate(sim::DgmParams{}, 4000, 8);
  const std::vector<double> ones(data.size(), 1.0);
  SuiteOptions opt;
  opt.g_empirical = true;
  const auto base = fit_base(data, main_effects_designs(2, 1), {}, ones, opt);
  double treated = 0, target = 0;
  for (const auto& o : data.rows()) {
    if (o.s == 0) {
      treated += o.a;
      ++target;
    }
  }
  CHECK(base.g_empirical);
  CHECK(base.g_empirical_p1 == doctest::Approx(treated / target));
}

TEST_CASE("h follows the Bayes identity and is clamped") {
  const double w[] = {0.0}, m[] = {0.0};
  const Constant eta(0.4, 0.7, 0.2, 0.3);
  // g(1)/g(0) * q(1|1)/r(1|1,m) * e(0|m)/e(1|m).
  const double expect = (0.4 / 0.6) * (0.7 / 0.2) * (0.7 / 0.3);
  CHECK(compute_h(eta, 1, 1, m, w, 50.0) == doctest::Approx(expect));
  CHECK(compute_h(eta, 1, 1, m, w, 2.0) == 2.0);
  // At a = a* the treatment ratios cancel.
  CHECK(compute_h(eta, 0, 0, m, w, 50.0) == doctest::Approx(0.3 / 0.8));
}

TEST_CASE("t is the weighted target share") {
  Dataset d({Observation{1, 0, {0.0}, 0, 0, {0.0}, {}, {}},
             Observation{1, 1, {0.0}, 0, 0, {0.0}, 1.0, {}},
             Observation{1, 0, {0.0}, 1, 0, {0.0}, {}, {}}},
            {});
  const double wts[] = {1.0, 5.0, 2.0};
  CHECK(estimate_t(d, wts) == doctest::Approx(1.0));
  const double none[] = {0.0, 1.0, 0.0};
  CHECK_THROWS_AS(estimate_t(d, none), Error);
}

TEST_CASE("misspecification labels") {
  CHECK(MisspecSet::parse("").label() == "none");
  CHECK(MisspecSet::parse("none").empty());
  CHECK(MisspecSet::parse("v u r e c").label() == "c,e,r,u,v");
  CHECK(MisspecSet::parse("q") == MisspecSet{Component::q});
  CHECK_THROWS_AS(MisspecSet::parse("c,x"), Error);
}

TEST_CASE("main-effects designs") {
  const auto d = main_effects_designs(3, 2);
  CHECK(d.c.columns() == 1 + 3 + 2 + 2);
  CHECK(d.g.columns() == 1 + 1 + 3);
  CHECK(d.u.columns() == 1 + 3 + 3);
  CHECK(d.v.columns() == 1 + 1 + 3);
  CHECK(d[Component::r].columns() == 1 + 2 + 2 + 3);
}
