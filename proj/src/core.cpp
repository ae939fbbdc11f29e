#include "transmed/core.hpp"

#include <cmath>
#include <string>

namespace transmed {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingOutcome: return "MissingOutcome";
    case ErrorCode::NonBinaryCode: return "NonBinaryCode";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::EmptyArm: return "EmptyArm";
    case ErrorCode::DegenerateBounds: return "DegenerateBounds";
    case ErrorCode::MissingPi: return "MissingPi";
    case ErrorCode::AllZeroWeights: return "AllZeroWeights";
    case ErrorCode::SingularDesign: return "SingularDesign";
    case ErrorCode::FoldTooSmall: return "FoldTooSmall";
    case ErrorCode::ReplicationFailed: return "ReplicationFailed";
    case ErrorCode::ScenarioAborted: return "ScenarioAborted";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

Dataset Dataset::subset(std::span<const std::size_t> idx) const {
  std::vector<Observation> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(rows_.at(i));
  return Dataset(std::move(out), bounds_);
}

void validate_effect(const EffectSpec& spec) {
  auto binary = [](int v) { return v == 0 || v == 1; };
  if (!binary(spec.a_prime) || !binary(spec.a_star)) {
    throw Error(ErrorCode::NonBinaryCode, "effect levels a' and a* must be 0 or 1");
  }
}

namespace {

bool is_binary(int v) { return v == 0 || v == 1; }

std::string row_msg(std::size_t i, const std::string& what) {
  return "row " + std::to_string(i) + ": " + what;
}

}  // namespace

Dataset validate_dataset(Dataset data) {
  const auto& rows = data.rows();
  if (rows.empty()) throw Error(ErrorCode::EmptyArm, "dataset has no rows");
  const std::size_t p = rows.front().w.size();
  const std::size_t q = rows.front().m.size();
  if (p == 0) throw Error(ErrorCode::DimensionMismatch, row_msg(0, "no covariates"), 0);
  if (q == 0) throw Error(ErrorCode::DimensionMismatch, row_msg(0, "no mediators"), 0);

  const auto& b = data.bounds();
  bool has_source = false;
  bool has_target = false;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Observation& o = rows[i];
    if (!is_binary(o.delta) || !is_binary(o.s) || !is_binary(o.a) || !is_binary(o.z)) {
      throw Error(ErrorCode::NonBinaryCode, row_msg(i, "delta, s, a and z must be 0 or 1"), i);
    }
    if (o.w.size() != p || o.m.size() != q) {
      throw Error(ErrorCode::DimensionMismatch,
                  row_msg(i, "covariate/mediator lengths differ from row 0"), i);
    }
    for (double x : o.w) {
      if (!std::isfinite(x)) throw Error(ErrorCode::InvalidArgument, row_msg(i, "non-finite w"), i);
    }
    for (double x : o.m) {
      if (!std::isfinite(x)) throw Error(ErrorCode::InvalidArgument, row_msg(i, "non-finite m"), i);
    }
    if (o.s == 1 && o.delta == 1 && !o.y) {
      throw Error(ErrorCode::MissingOutcome, row_msg(i, "source row without outcome"), i);
    }
    if (o.y && (!std::isfinite(*o.y) || *o.y < b.lo || *o.y > b.hi)) {
      throw Error(ErrorCode::InvalidArgument, row_msg(i, "outcome outside bounds"), i);
    }
    if (o.pi && !(*o.pi > 0.0 && *o.pi <= 1.0)) {
      throw Error(ErrorCode::InvalidArgument, row_msg(i, "pi must lie in (0, 1]"), i);
    }
    (o.s == 1 ? has_source : has_target) = true;
  }
  if (!has_source || !has_target) {
    throw Error(ErrorCode::EmptyArm, "dataset needs rows with s = 0 and with s = 1");
  }
  return data;
}

ScaledDataset scale_outcome(const Dataset& data) {
  const auto& b = data.bounds();
  if (!std::isfinite(b.lo) || !std::isfinite(b.hi) || !(b.lo < b.hi)) {
    throw Error(ErrorCode::DegenerateBounds, "outcome bounds must satisfy y_min < y_max");
  }
  OutcomeScale scale{b.lo, b.hi};
  Dataset out = data;
  for (auto& o : out.rows()) {
    if (o.y) o.y = scale.to_unit(*o.y);
  }
  out.set_bounds({0.0, 1.0});
  return {std::move(out), scale};
}

}  // namespace transmed
