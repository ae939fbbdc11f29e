#pragma once

#include <array>
#include <bitset>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "transmed/core.hpp"
#include "transmed/regress.hpp"

namespace transmed::nuisance {

using Vec = std::span<const double>;

enum class Component { c, g, e, q, r, b, u, v };

inline constexpr std::array<Component, 8> kAllComponents = {
    Component::c, Component::g, Component::e, Component::q,
    Component::r, Component::b, Component::u, Component::v};

const char* name(Component c);

/// Subset of the eight nuisance components to replace by intercept-only fits.
class MisspecSet {
 public:
  MisspecSet() = default;
  MisspecSet(std::initializer_list<Component> cs) {
    for (auto c : cs) insert(c);
  }

  void insert(Component c) { bits_.set(static_cast<std::size_t>(c)); }
  bool contains(Component c) const { return bits_.test(static_cast<std::size_t>(c)); }
  bool empty() const { return bits_.none(); }

  /// Comma-separated names in canonical order, "none" when empty.
  std::string label() const;
  /// Accepts "", "none", or comma/space separated names such as "c,e,r,u,v".
  static MisspecSet parse(const std::string& text);

  friend bool operator==(const MisspecSet&, const MisspecSet&) = default;

 private:
  std::bitset<8> bits_;
};

/// One regression design per component.
struct SuiteDesigns {
  regress::DesignSpec c, g, e, q, r, b, u, v;

  const regress::DesignSpec& operator[](Component comp) const;
};

/// Main-effects designs following the regressions' stated predictor sets;
/// the default for data whose generating law is unknown.
SuiteDesigns main_effects_designs(std::size_t p, std::size_t q);

struct SuiteOptions {
  regress::FitOptions fit;
  /// Estimate g by the empirical arm proportions among S = 0.
  bool g_empirical = false;
  /// Use a logit link for u and v (pseudo-outcomes must then lie in [0, 1]).
  bool uv_logit = false;
  double h_max = 50.0;
};

/// Read access to a nuisance suite at arbitrary evaluation points. All
/// treatment, intermediate and mediator probabilities refer to S = 0; b refers
/// to S = 1. u and v are tied to the (a', a*) pair reported by spec().
class NuisanceFunctions {
 public:
  virtual ~NuisanceFunctions() = default;

  virtual const EffectSpec& spec() const = 0;
  virtual double c(int a, int z, Vec m, Vec w) const = 0;  // P(S=1 | a,z,m,w)
  virtual double g(int a, Vec w) const = 0;                // P(A=a | w, S=0)
  virtual double e(int a, Vec m, Vec w) const = 0;         // P(A=a | m,w, S=0)
  virtual double q(int z, int a, Vec w) const = 0;         // P(Z=z | a,w, S=0)
  virtual double r(int z, int a, Vec m, Vec w) const = 0;  // P(Z=z | a,m,w, S=0)
  virtual double b(int a, int z, Vec m, Vec w) const = 0;  // E(Y | a,z,m,w, S=1)
  virtual double u(int z, int a, Vec w) const = 0;
  virtual double v(int a, Vec w) const = 0;
  virtual double t() const = 0;                            // P(S=0)
};

/// h(a,z,m,w) = g(a|w)/g(a*|w) * q(z|a,w)/r(z|a,m,w) * e(a*|m,w)/e(a|m,w),
/// clamped to [0, h_max].
double compute_h(const NuisanceFunctions& eta, int a, int z, Vec m, Vec w, double h_max);

/// Fitted treatment, intermediate, selection and outcome models. They do not
/// depend on (a', a*), so one fit serves every effect corner.
struct BaseFits {
  regress::FittedModel c, g, e, q, r, b;
  double t = 0.5;
  bool g_empirical = false;
  double g_empirical_p1 = 0.5;  // P(A=1 | S=0) when g_empirical
  MisspecSet misspecified;
  std::vector<double> weights_used;
};

class NuisanceEstimates final : public NuisanceFunctions {
 public:
  NuisanceEstimates(std::shared_ptr<const BaseFits> base, EffectSpec spec,
                    regress::FittedModel u, regress::FittedModel v)
      : base_(std::move(base)), spec_(spec), u_(std::move(u)), v_(std::move(v)) {}

  const EffectSpec& spec() const override { return spec_; }
  double c(int a, int z, Vec m, Vec w) const override;
  double g(int a, Vec w) const override;
  double e(int a, Vec m, Vec w) const override;
  double q(int z, int a, Vec w) const override;
  double r(int z, int a, Vec m, Vec w) const override;
  double b(int a, int z, Vec m, Vec w) const override;
  double u(int z, int a, Vec w) const override;
  double v(int a, Vec w) const override;
  double t() const override { return base_->t; }

  const BaseFits& base() const { return *base_; }
  std::shared_ptr<const BaseFits> base_ptr() const { return base_; }
  const MisspecSet& misspecified() const { return base_->misspecified; }
  const regress::FittedModel& u_model() const { return u_; }
  const regress::FittedModel& v_model() const { return v_; }

 private:
  std::shared_ptr<const BaseFits> base_;
  EffectSpec spec_;
  regress::FittedModel u_, v_;
};

/// t = n^-1 * sum_i w_i (1 - s_i). With survey weights normalised over the
/// target rows this is the plain target proportion.
double estimate_t(const Dataset& data, std::span<const double> weights);

/// Fits c, g, e, q, r, b and t. Components in `mis` use intercept-only fits of
/// the same regressions.
BaseFits fit_base(const Dataset& data, const SuiteDesigns& designs, const MisspecSet& mis,
                  std::span<const double> fit_weights, const SuiteOptions& options = {});

/// u: regress b(A,Z,M,W) h(A,Z,M,W) on (S,A,Z,W) over all rows.
/// `pseudo` overrides the pseudo-outcome (one value per entry of `rows`).
regress::FittedModel fit_u_model(const Dataset& data, std::span<const std::size_t> rows,
                                 std::span<const double> pseudo, std::span<const double> weights,
                                 const regress::DesignSpec& design, bool misspecified,
                                 const SuiteOptions& options);

/// v: regress Q = sum_z b(a',z,M,W) q(z|a',W) on (A,W) among S = 0 rows.
regress::FittedModel fit_v_model(const Dataset& data, std::span<const std::size_t> rows,
                                 std::span<const double> pseudo, std::span<const double> weights,
                                 const regress::DesignSpec& design, bool misspecified,
                                 const SuiteOptions& options);

/// Pseudo-outcome b(A_i,Z_i,M_i,W_i) * h(A_i,Z_i,M_i,W_i) for one row.
double u_pseudo_outcome(const NuisanceFunctions& eta, const Observation& o, double h_max);
/// Q_i = sum_z b(a',z,M_i,W_i) q(z|a',W_i).
double v_pseudo_outcome(const NuisanceFunctions& eta, const Observation& o);

/// Adds u to a base fit.
NuisanceEstimates fit_u(const Dataset& data, std::shared_ptr<const BaseFits> base,
                        const EffectSpec& spec, const SuiteDesigns& designs,
                        const MisspecSet& mis, std::span<const double> fit_weights,
                        const SuiteOptions& options = {});

/// Adds v to an estimate that already carries u.
NuisanceEstimates fit_v(const Dataset& data, const NuisanceEstimates& eta,
                        const SuiteDesigns& designs, const MisspecSet& mis,
                        std::span<const double> fit_weights, const SuiteOptions& options = {});

/// fit_base, then u, then v.
NuisanceEstimates fit_suite(const Dataset& data, const EffectSpec& spec,
                            const SuiteDesigns& designs, const MisspecSet& mis,
                            std::span<const double> fit_weights, const SuiteOptions& options = {});

/// Same, reusing an existing base fit.
NuisanceEstimates fit_corner(const Dataset& data, std::shared_ptr<const BaseFits> base,
                             const EffectSpec& spec, const SuiteDesigns& designs,
                             const MisspecSet& mis, std::span<const double> fit_weights,
                             const SuiteOptions& options = {});

}  // namespace transmed::nuisance
