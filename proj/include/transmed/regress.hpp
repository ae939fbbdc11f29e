#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "transmed/core.hpp"

namespace transmed::regress {

/// Variables a regression term can draw on.
enum class Var { W, M, A, Z, S };

struct Selector {
  Var var = Var::A;
  std::size_t index = 0;  // used for W and M only

  friend bool operator==(const Selector&, const Selector&) = default;
};

inline Selector w(std::size_t j) { return {Var::W, j}; }
inline Selector m(std::size_t j) { return {Var::M, j}; }
inline Selector a() { return {Var::A, 0}; }
inline Selector z() { return {Var::Z, 0}; }
inline Selector s() { return {Var::S, 0}; }

/// Values the design is evaluated at. Predictions typically override a and s
/// (e.g. "setting A = a', S = 0") while keeping the row's w and m.
struct DesignPoint {
  int s = 0;
  int a = 0;
  int z = 0;
  std::span<const double> w;
  std::span<const double> m;
};

DesignPoint point_of(const Observation& o);

/// Column layout: intercept, then main-effect terms, then product terms.
struct DesignSpec {
  std::vector<Selector> terms;
  std::vector<std::vector<Selector>> interactions;
  bool intercept_only = false;

  std::size_t columns() const noexcept {
    return intercept_only ? 1 : 1 + terms.size() + interactions.size();
  }

  /// Throws DimensionMismatch if a W/M selector is out of range.
  void check(std::size_t p, std::size_t q) const;

  void fill_row(const DesignPoint& pt, std::span<double> out) const;

  DesignSpec as_intercept_only() const {
    DesignSpec d = *this;
    d.intercept_only = true;
    return d;
  }
};

Eigen::MatrixXd design_matrix(const DesignSpec& design, std::span<const DesignPoint> points);

enum class Link { Logit, Identity };

struct FitOptions {
  double tol = 1e-8;        // max absolute coefficient change
  int max_iterations = 100;
  double p_clamp = 1e-4;    // logit-link predictions live in [p_clamp, 1 - p_clamp]
  bool allow_ridge = true;
  double ridge = 1e-8;
};

struct FittedModel {
  Eigen::VectorXd coefficients;
  Link link = Link::Identity;
  DesignSpec design;
  bool converged = false;
  int iterations = 0;
  bool ridge_used = false;
  double p_clamp = 1e-4;
  /// Negative log-likelihood after each accepted IRLS step (logit link only).
  std::vector<double> nll_trace;

  /// Linear predictor at one point (without offset).
  double linear_predictor(const DesignPoint& pt) const;
  /// Link-inverse at one point; logit predictions are clamped.
  double predict(const DesignPoint& pt, double offset = 0.0) const;
};

/// Weighted logistic (quasi-binomial) regression by IRLS with step halving.
/// Responses may be fractional in [0, 1].
FittedModel fit_binary(const DesignSpec& design, const Eigen::MatrixXd& X,
                       const Eigen::VectorXd& y, const Eigen::VectorXd& weights,
                       const std::optional<Eigen::VectorXd>& offset = std::nullopt,
                       const FitOptions& options = {});

/// Weighted least squares.
FittedModel fit_linear(const DesignSpec& design, const Eigen::MatrixXd& X,
                       const Eigen::VectorXd& y, const Eigen::VectorXd& weights,
                       const FitOptions& options = {});

Eigen::VectorXd predict(const FittedModel& model, const Eigen::MatrixXd& X,
                        const std::optional<Eigen::VectorXd>& offset = std::nullopt);

/// Weighted negative log-likelihood of a logistic model with linear predictor eta.
double binary_nll(const Eigen::VectorXd& eta, const Eigen::VectorXd& y,
                  const Eigen::VectorXd& weights);

double expit(double x) noexcept;
double logit(double p) noexcept;

}  // namespace transmed::regress
