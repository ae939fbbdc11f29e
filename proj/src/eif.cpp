#include "transmed/eif.hpp"

#include <algorithm>
#include <cmath>

namespace transmed::eif {

double EtaRow::h_ap(int z) const {
  const double r = r_ap[z];
  const double h = (g_ap / g_as) * (q_ap(z) / r) * (e_as / e_ap);
  return std::clamp(h, 0.0, h_max);
}

bool EtaRow::h_clamped(int z) const {
  return (g_ap / g_as) * (q_ap(z) / r_ap[z]) * (e_as / e_ap) > h_max;
}

double EtaRow::h_own(const Observation& o, const EffectSpec& spec) const {
  if (o.a == spec.a_prime) return h_ap(o.z);
  const double h = (g_own / g_as) * (q_own / r_own) * (e_as / e_own);
  return std::clamp(h, 0.0, h_max);
}

double EtaRow::b_at_own(const Observation& o, const EffectSpec& spec) const {
  return o.a == spec.a_prime ? b_ap[o.z] : b_own;
}

EtaRow evaluate_row(const nuisance::NuisanceFunctions& eta, const Observation& o, double h_max) {
  const int ap = eta.spec().a_prime;
  const int as = eta.spec().a_star;
  const auto w = std::span<const double>(o.w);
  const auto m = std::span<const double>(o.m);
  EtaRow row;
  row.h_max = h_max;
  row.t = eta.t();
  row.g_ap = eta.g(ap, w);
  row.g_as = eta.g(as, w);
  row.q1_ap = eta.q(1, ap, w);
  row.e_ap = eta.e(ap, m, w);
  row.e_as = eta.e(as, m, w);
  for (int z = 0; z < 2; ++z) {
    row.r_ap[z] = eta.r(z, ap, m, w);
    row.c_ap[z] = eta.c(ap, z, m, w);
    row.b_ap[z] = eta.b(ap, z, m, w);
    row.u_ap[z] = eta.u(z, ap, w);
  }
  row.v_as = eta.v(as, w);
  row.g_own = eta.g(o.a, w);
  row.q_own = eta.q(o.z, o.a, w);
  row.r_own = eta.r(o.z, o.a, m, w);
  row.e_own = eta.e(o.a, m, w);
  row.b_own = eta.b(o.a, o.z, m, w);
  return row;
}

EifComponents eif_row(const Observation& o, const EtaRow& eta, const EffectSpec& spec,
                      double theta) {
  EifComponents d;
  if (o.s == 1) {
    if (o.a == spec.a_prime) {
      if (!o.y) throw Error(ErrorCode::MissingOutcome, "source row without outcome");
      const double c = eta.c_ap[o.z];
      d.d_y = (1.0 - c) / c * eta.h_ap(o.z) * (*o.y - eta.b_ap[o.z]) / (eta.t * eta.g_ap);
    }
    return d;
  }
  if (o.a == spec.a_prime) {
    d.d_z = (eta.u_ap[1] - eta.u_ap[0]) * (o.z - eta.q1_ap) / (eta.t * eta.g_ap);
  }
  if (o.a == spec.a_star) {
    d.d_m = (eta.marginal_b() - eta.v_as) / (eta.t * eta.g_as);
  }
  d.d_w = (eta.v_as - theta) / eta.t;
  return d;
}

EifComponents eif_row(const Observation& o, const nuisance::NuisanceFunctions& eta,
                      double theta, double h_max) {
  return eif_row(o, evaluate_row(eta, o, h_max), eta.spec(), theta);
}

double d_z_integral(const Observation& o, const nuisance::NuisanceFunctions& eta) {
  const int ap = eta.spec().a_prime;
  if (o.s != 0 || o.a != ap) return 0.0;
  const auto w = std::span<const double>(o.w);
  double mean_u = 0.0;
  for (int z = 0; z < 2; ++z) mean_u += eta.u(z, ap, w) * eta.q(z, ap, w);
  return (eta.u(o.z, ap, w) - mean_u) / (eta.t() * eta.g(ap, w));
}

double EifSample::se() const {
  const double n = static_cast<double>(weighted.size());
  return n > 0 ? std::sqrt(variance / n) : 0.0;
}

EifSample summarize(std::vector<double> values) {
  EifSample out;
  out.weighted = std::move(values);
  const double n = static_cast<double>(out.weighted.size());
  if (n == 0) return out;
  double sum = 0.0;
  for (double x : out.weighted) sum += x;
  out.mean = sum / n;
  if (n > 1) {
    double ss = 0.0;
    for (double x : out.weighted) ss += (x - out.mean) * (x - out.mean);
    out.variance = ss / (n - 1);
  }
  return out;
}

EifSample eif_sample(const Dataset& data, std::span<const EtaRow> eta, const EffectSpec& spec,
                     double theta, std::span<const double> gamma) {
  if (eta.size() != data.size() || gamma.size() != data.size()) {
    throw Error(ErrorCode::DimensionMismatch, "nuisance table and weights must align with rows");
  }
  std::vector<double> vals(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    vals[i] = gamma[i] * eif_row(data[i], eta[i], spec, theta).total();
  }
  return summarize(std::move(vals));
}

}  // namespace transmed::eif
