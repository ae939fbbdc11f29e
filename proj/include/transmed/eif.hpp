#pragma once

#include <array>
#include <span>
#include <vector>

#include "transmed/core.hpp"
#include "transmed/nuisance.hpp"

namespace transmed::eif {

/// Nuisance values at the evaluation points one observation needs. Targeting
/// updates these values in place, so the EIF never has to re-query a model.
///
/// Suffix `_ap` means "evaluated at A = a'", `_as` "at A = a*", `_own` "at the
/// observation's own treatment". Arrays are indexed by z.
struct EtaRow {
  double t = 0.5;
  double g_ap = 0.5, g_as = 0.5;
  double q1_ap = 0.5;                  // q(1 | a', w)
  std::array<double, 2> r_ap{};        // r(z | a', m, w)
  double e_ap = 0.5, e_as = 0.5;
  std::array<double, 2> c_ap{};        // c(a', z, m, w)
  std::array<double, 2> b_ap{};        // b(a', z, m, w)
  std::array<double, 2> u_ap{};        // u(z, a', w)
  double v_as = 0.0;                   // v(a*, w)
  double g_own = 0.5, q_own = 0.5, r_own = 0.5, e_own = 0.5, b_own = 0.0;
  double h_max = 50.0;

  double q_ap(int z) const { return z == 1 ? q1_ap : 1.0 - q1_ap; }
  /// h(a', z, m, w).
  double h_ap(int z) const;
  /// True when the unclamped h(a', z, m, w) exceeds h_max.
  bool h_clamped(int z) const;
  /// h at the observation's own treatment; equals h_ap(o.z) when o.a == a'.
  double h_own(const Observation& o, const EffectSpec& spec) const;
  double b_at_own(const Observation& o, const EffectSpec& spec) const;
  /// sum_z b(a',z,m,w) q(z|a',w).
  double marginal_b() const { return b_ap[0] * q_ap(0) + b_ap[1] * q_ap(1); }
};

EtaRow evaluate_row(const nuisance::NuisanceFunctions& eta, const Observation& o,
                    double h_max = 50.0);

struct EifComponents {
  double d_y = 0.0;
  double d_z = 0.0;
  double d_m = 0.0;
  double d_w = 0.0;

  double total() const { return d_y + d_z + d_m + d_w; }
};

/// The four EIF terms on the unit outcome scale, with the binary-Z form of D_Z.
/// Throws MissingOutcome for a source row without y.
EifComponents eif_row(const Observation& o, const EtaRow& eta, const EffectSpec& spec,
                      double theta);

EifComponents eif_row(const Observation& o, const nuisance::NuisanceFunctions& eta,
                      double theta, double h_max = 50.0);

/// D_Z in its integral form, u(z,a',w) - sum_z' u(z',a',w) q(z'|a',w), for any
/// discrete Z support; reduces to the binary form when Z is {0, 1}.
double d_z_integral(const Observation& o, const nuisance::NuisanceFunctions& eta);

struct EifSample {
  std::vector<double> weighted;  // gamma_i * D_i
  double mean = 0.0;
  double variance = 0.0;         // sample variance of weighted (n - 1 denominator)

  double se() const;
};

/// Per-row gamma-weighted EIF totals and their summary.
EifSample eif_sample(const Dataset& data, std::span<const EtaRow> eta, const EffectSpec& spec,
                     double theta, std::span<const double> gamma);

/// Summary of an arbitrary per-row influence vector.
EifSample summarize(std::vector<double> values);

}  // namespace transmed::eif
