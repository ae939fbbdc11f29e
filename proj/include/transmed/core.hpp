#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "transmed/error.hpp"

namespace transmed {

/// One unit of the observed data (delta, S, W, A, Z, M, Y, Pi).
///
/// `s = 1` marks the source population, where the outcome is observed;
/// `s = 0` marks the target population, where `y` may be absent.
struct Observation {
  int delta = 1;
  int s = 0;
  std::vector<double> w;
  int a = 0;
  int z = 0;
  std::vector<double> m;
  std::optional<double> y;
  std::optional<double> pi;
};

struct OutcomeBounds {
  double lo = 0.0;
  double hi = 1.0;
};

class Dataset {
 public:
  Dataset() = default;
  Dataset(std::vector<Observation> rows, OutcomeBounds bounds)
      : rows_(std::move(rows)), bounds_(bounds) {}

  const std::vector<Observation>& rows() const noexcept { return rows_; }
  std::vector<Observation>& rows() noexcept { return rows_; }
  const Observation& operator[](std::size_t i) const { return rows_[i]; }
  std::size_t size() const noexcept { return rows_.size(); }
  bool empty() const noexcept { return rows_.empty(); }

  const OutcomeBounds& bounds() const noexcept { return bounds_; }
  void set_bounds(OutcomeBounds b) noexcept { bounds_ = b; }

  /// Covariate dimension p (0 for an empty dataset).
  std::size_t p() const noexcept { return rows_.empty() ? 0 : rows_.front().w.size(); }
  /// Mediator dimension q (0 for an empty dataset).
  std::size_t q() const noexcept { return rows_.empty() ? 0 : rows_.front().m.size(); }

  /// Subset by row indices, preserving order.
  Dataset subset(std::span<const std::size_t> idx) const;

 private:
  std::vector<Observation> rows_;
  OutcomeBounds bounds_;
};

/// The (a', a*) pair that indexes theta = E(Y_{a', G_{a*}} | S = 0).
struct EffectSpec {
  int a_prime = 1;
  int a_star = 0;
};

void validate_effect(const EffectSpec& spec);

/// Checks every observation invariant; returns the dataset unchanged.
/// Throws Error with MissingOutcome, NonBinaryCode, DimensionMismatch or
/// EmptyArm, carrying the first offending row where one exists.
Dataset validate_dataset(Dataset data);

/// Affine map of the outcome onto [0, 1] together with its inverse.
struct OutcomeScale {
  double lo = 0.0;
  double hi = 1.0;

  double width() const noexcept { return hi - lo; }
  double to_unit(double y) const noexcept { return (y - lo) / width(); }
  double from_unit(double y) const noexcept { return lo + width() * y; }
  /// Differences (effect contrasts) and standard errors carry no offset.
  double scale_difference(double d) const noexcept { return width() * d; }
};

struct ScaledDataset {
  Dataset data;
  OutcomeScale scale;
};

/// Throws DegenerateBounds unless lo < hi and both are finite.
ScaledDataset scale_outcome(const Dataset& data);

}  // namespace transmed
