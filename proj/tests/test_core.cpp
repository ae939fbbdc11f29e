#include <doctest.h>

#include <cmath>

#include "transmed/core.hpp"

using namespace transmed;

namespace {

Observation row(int s, int a, int z, double m, std::optional<double> y, double w = 0.3) {
  Observation o;
  o.s = s;
  o.a = a;
  o.z = z;
  o.w = {w};
  o.m = {m};
  o.y = y;
  return o;
}

Dataset two_arm(OutcomeBounds b = {0.0, 1.0}) {
  return Dataset({row(1, 1, 0, 0.2, 0.4), row(0, 0, 1, 1.5, std::nullopt),
                  row(1, 0, 1, -1.0, 1.0), row(0, 1, 0, 0.0, 0.25)},
                 b);
}

ErrorCode code_of(Dataset d) {
  try {
    validate_dataset(std::move(d));
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("validation accepted bad data");
  return ErrorCode::InvalidArgument;
}

std::optional<std::size_t> row_of(Dataset d) {
  try {
    validate_dataset(std::move(d));
  } catch (const Error& e) {
    return e.row();
  }
  return std::nullopt;
}

}  // namespace

TEST_CASE("a well-formed dataset passes unchanged") {
  const auto d = validate_dataset(two_arm());
  CHECK(d.size() == 4);
  CHECK(d.p() == 1);
  CHECK(d.q() == 1);
  CHECK(*d[0].y == 0.4);
}

TEST_CASE("source rows need an outcome") {
  auto d = two_arm();
  d.rows()[2].y.reset();
  CHECK(code_of(d) == ErrorCode::MissingOutcome);
  CHECK(row_of(d) == std::optional<std::size_t>(2));
  // Outside the analysed sample a missing outcome is allowed.
  d.rows()[2].delta = 0;
  CHECK_NOTHROW(validate_dataset(d));
}

TEST_CASE("codes must be binary") {
  for (int field = 0; field < 4; ++field) {
    auto d = two_arm();
    auto& o = d.rows()[1];
    (field == 0 ? o.s : field == 1 ? o.a : field == 2 ? o.z : o.delta) = 2;
    CHECK(code_of(d) == ErrorCode::NonBinaryCode);
    CHECK(row_of(d) == std::optional<std::size_t>(1));
  }
}

TEST_CASE("dimensions must agree across rows") {
  auto d = two_arm();
  d.rows()[3].w = {0.1, 0.2};
  CHECK(code_of(d) == ErrorCode::DimensionMismatch);
  auto e = two_arm();
  e.rows()[1].m.clear();
  CHECK(code_of(e) == ErrorCode::DimensionMismatch);
}

TEST_CASE("both populations must be present") {
  Dataset only_source({row(1, 1, 0, 0.0, 0.1), row(1, 0, 1, 0.0, 0.2)}, {});
  CHECK(code_of(only_source) == ErrorCode::EmptyArm);
  CHECK(code_of(Dataset()) == ErrorCode::EmptyArm);
}

TEST_CASE("outcomes and sampling probabilities are range-checked") {
  auto d = two_arm();
  d.rows()[0].y = 1.5;
  CHECK(code_of(d) == ErrorCode::InvalidArgument);
  auto e = two_arm();
  e.rows()[0].pi = 0.0;
  CHECK(code_of(e) == ErrorCode::InvalidArgument);
  e.rows()[0].pi = 1.0;
  CHECK_NOTHROW(validate_dataset(e));
}

TEST_CASE("outcome scaling maps onto the unit interval and back") {
  const auto scaled = scale_outcome(two_arm({-2.0, 6.0}));
  CHECK(scaled.scale.width() == 8.0);
  CHECK(*scaled.data[0].y == doctest::Approx((0.4 + 2.0) / 8.0));
  CHECK_FALSE(scaled.data[1].y.has_value());
  CHECK(scaled.data.bounds().lo == 0.0);
  CHECK(scaled.data.bounds().hi == 1.0);
  for (double y : {-2.0, 0.0, 0.4, 6.0}) {
    CHECK(scaled.scale.from_unit(scaled.scale.to_unit(y)) == doctest::Approx(y));
  }
  CHECK(scaled.scale.scale_difference(0.25) == 2.0);
}

TEST_CASE("degenerate bounds are rejected") {
  CHECK_THROWS_AS(scale_outcome(two_arm({1.0, 1.0})), Error);
  try {
    scale_outcome(two_arm({2.0, 1.0}));
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DegenerateBounds);
  }
  CHECK_THROWS_AS(scale_outcome(two_arm({0.0, INFINITY})), Error);
}

TEST_CASE("subsets keep order and bounds") {
  const auto d = two_arm({0.0, 2.0});
  const std::size_t idx[] = {3, 0};
  const auto sub = d.subset(idx);
  REQUIRE(sub.size() == 2);
  CHECK(sub[0].a == 1);
  CHECK(*sub[0].y == 0.25);
  CHECK(*sub[1].y == 0.4);
  CHECK(sub.bounds().hi == 2.0);
}

TEST_CASE("effect levels are binary") {
  CHECK_NOTHROW(validate_effect({1, 0}));
  CHECK_NOTHROW(validate_effect({0, 0}));
  CHECK_THROWS_AS(validate_effect({2, 0}), Error);
}
