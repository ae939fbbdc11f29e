#include "transmed/regress.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace transmed::regress {

double expit(double x) noexcept {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double logit(double p) noexcept { return std::log(p / (1.0 - p)); }

namespace {

double softplus(double x) noexcept {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double selector_value(const Selector& sel, const DesignPoint& pt) {
  switch (sel.var) {
    case Var::W: return pt.w[sel.index];
    case Var::M: return pt.m[sel.index];
    case Var::A: return pt.a;
    case Var::Z: return pt.z;
    case Var::S: return pt.s;
  }
  return 0.0;
}

void check_selector(const Selector& sel, std::size_t p, std::size_t q) {
  if ((sel.var == Var::W && sel.index >= p) || (sel.var == Var::M && sel.index >= q)) {
    throw Error(ErrorCode::DimensionMismatch,
                "design selector out of range (p=" + std::to_string(p) +
                    ", q=" + std::to_string(q) + ")");
  }
}

void check_inputs(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                  const Eigen::VectorXd& weights, const DesignSpec& design) {
  if (y.size() != X.rows() || weights.size() != X.rows() ||
      X.cols() != static_cast<Eigen::Index>(design.columns())) {
    throw Error(ErrorCode::DimensionMismatch, "design matrix, response and weights disagree");
  }
  bool any_positive = false;
  for (Eigen::Index i = 0; i < weights.size(); ++i) {
    if (!(weights[i] >= 0.0) || !std::isfinite(weights[i])) {
      throw Error(ErrorCode::InvalidArgument, "weights must be finite and non-negative");
    }
    any_positive = any_positive || weights[i] > 0.0;
  }
  if (!any_positive) throw Error(ErrorCode::AllZeroWeights, "all regression weights are zero");
}

// Solves H x = g, falling back to a ridge-stabilised system when H is
// numerically singular.
Eigen::VectorXd solve_normal(const Eigen::MatrixXd& H, const Eigen::VectorXd& g,
                             const FitOptions& opt, bool& ridge_used) {
  auto singular = [](const Eigen::LDLT<Eigen::MatrixXd>& f) {
    if (f.info() != Eigen::Success || !f.isPositive()) return true;
    const Eigen::VectorXd d = f.vectorD().cwiseAbs();
    const double hi = d.maxCoeff();
    return !(hi > 0.0) || d.minCoeff() <= 1e-13 * hi;
  };
  Eigen::LDLT<Eigen::MatrixXd> f(H);
  if (!singular(f)) return f.solve(g);
  if (!opt.allow_ridge) {
    throw Error(ErrorCode::SingularDesign, "weighted normal equations are singular");
  }
  ridge_used = true;
  Eigen::MatrixXd Hr = H;
  Hr.diagonal().array() += opt.ridge;
  Eigen::LDLT<Eigen::MatrixXd> fr(Hr);
  if (fr.info() != Eigen::Success) {
    throw Error(ErrorCode::SingularDesign, "ridge fallback failed");
  }
  Eigen::VectorXd x = fr.solve(g);
  if (!x.allFinite()) throw Error(ErrorCode::SingularDesign, "ridge fallback failed");
  return x;
}

}  // namespace

DesignPoint point_of(const Observation& o) {
  return {o.s, o.a, o.z, std::span<const double>(o.w), std::span<const double>(o.m)};
}

void DesignSpec::check(std::size_t p, std::size_t q) const {
  for (const auto& t : terms) check_selector(t, p, q);
  for (const auto& inter : interactions) {
    for (const auto& t : inter) check_selector(t, p, q);
  }
}

void DesignSpec::fill_row(const DesignPoint& pt, std::span<double> out) const {
  out[0] = 1.0;
  if (intercept_only) return;
  std::size_t k = 1;
  for (const auto& t : terms) out[k++] = selector_value(t, pt);
  for (const auto& inter : interactions) {
    double v = 1.0;
    for (const auto& t : inter) v *= selector_value(t, pt);
    out[k++] = v;
  }
}

Eigen::MatrixXd design_matrix(const DesignSpec& design, std::span<const DesignPoint> points) {
  const auto cols = static_cast<Eigen::Index>(design.columns());
  Eigen::MatrixXd X(static_cast<Eigen::Index>(points.size()), cols);
  std::vector<double> row(design.columns());
  for (std::size_t i = 0; i < points.size(); ++i) {
    design.fill_row(points[i], row);
    for (Eigen::Index j = 0; j < cols; ++j) X(static_cast<Eigen::Index>(i), j) = row[j];
  }
  return X;
}

double FittedModel::linear_predictor(const DesignPoint& pt) const {
  double buf[64];
  std::vector<double> heap;
  std::span<double> row;
  const std::size_t k = design.columns();
  if (k <= 64) {
    row = std::span<double>(buf, k);
  } else {
    heap.resize(k);
    row = heap;
  }
  design.fill_row(pt, row);
  double eta = 0.0;
  for (std::size_t j = 0; j < k; ++j) eta += row[j] * coefficients[static_cast<Eigen::Index>(j)];
  return eta;
}

double FittedModel::predict(const DesignPoint& pt, double offset) const {
  const double eta = linear_predictor(pt) + offset;
  if (link == Link::Identity) return eta;
  return std::clamp(expit(eta), p_clamp, 1.0 - p_clamp);
}

double binary_nll(const Eigen::VectorXd& eta, const Eigen::VectorXd& y,
                  const Eigen::VectorXd& weights) {
  double nll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    if (weights[i] == 0.0) continue;
    nll += weights[i] * (softplus(eta[i]) - y[i] * eta[i]);
  }
  return nll;
}

FittedModel fit_binary(const DesignSpec& design, const Eigen::MatrixXd& X,
                       const Eigen::VectorXd& y, const Eigen::VectorXd& weights,
                       const std::optional<Eigen::VectorXd>& offset, const FitOptions& opt) {
  check_inputs(X, y, weights, design);
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (!(y[i] >= 0.0 && y[i] <= 1.0)) {
      throw Error(ErrorCode::InvalidArgument, "binary responses must lie in [0, 1]");
    }
  }
  const Eigen::Index n = X.rows();
  const Eigen::VectorXd off = offset ? *offset : Eigen::VectorXd::Zero(n);
  if (off.size() != n) throw Error(ErrorCode::DimensionMismatch, "offset length mismatch");

  FittedModel model;
  model.link = Link::Logit;
  model.design = design;
  model.p_clamp = opt.p_clamp;
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(X.cols());
  Eigen::VectorXd eta = off;
  double nll = binary_nll(eta, y, weights);

  Eigen::VectorXd mu(n), work(n);
  for (int it = 1; it <= opt.max_iterations; ++it) {
    model.iterations = it;
    for (Eigen::Index i = 0; i < n; ++i) {
      mu[i] = expit(eta[i]);
      work[i] = weights[i] * std::max(mu[i] * (1.0 - mu[i]), 1e-12);
    }
    const Eigen::VectorXd grad = X.transpose() * (weights.array() * (y - mu).array()).matrix();
    const Eigen::MatrixXd H = X.transpose() * work.asDiagonal() * X;
    const Eigen::VectorXd step = solve_normal(H, grad, opt, model.ridge_used);

    double scale = 1.0;
    Eigen::VectorXd trial_beta;
    Eigen::VectorXd trial_eta;
    double trial_nll = 0.0;
    for (int halving = 0; halving < 40; ++halving) {
      trial_beta = beta + scale * step;
      trial_eta = X * trial_beta + off;
      trial_nll = binary_nll(trial_eta, y, weights);
      if (std::isfinite(trial_nll) && trial_nll <= nll + 1e-12 * std::abs(nll)) break;
      scale *= 0.5;
    }
    if (!(std::isfinite(trial_nll) && trial_nll <= nll + 1e-12 * std::abs(nll))) break;
    const double change = (scale * step).cwiseAbs().maxCoeff();
    beta = trial_beta;
    eta = trial_eta;
    nll = std::min(trial_nll, nll);
    model.nll_trace.push_back(nll);
    if (change < opt.tol) {
      model.converged = true;
      break;
    }
  }
  model.coefficients = beta;
  return model;
}

FittedModel fit_linear(const DesignSpec& design, const Eigen::MatrixXd& X,
                       const Eigen::VectorXd& y, const Eigen::VectorXd& weights,
                       const FitOptions& opt) {
  check_inputs(X, y, weights, design);
  FittedModel model;
  model.link = Link::Identity;
  model.design = design;
  model.p_clamp = opt.p_clamp;
  const Eigen::MatrixXd H = X.transpose() * weights.asDiagonal() * X;
  const Eigen::VectorXd g = X.transpose() * (weights.array() * y.array()).matrix();
  model.coefficients = solve_normal(H, g, opt, model.ridge_used);
  model.converged = true;
  model.iterations = 1;
  return model;
}

Eigen::VectorXd predict(const FittedModel& model, const Eigen::MatrixXd& X,
                        const std::optional<Eigen::VectorXd>& offset) {
  if (X.cols() != model.coefficients.size()) {
    throw Error(ErrorCode::DimensionMismatch, "design matrix does not conform to model");
  }
  Eigen::VectorXd eta = X * model.coefficients;
  if (offset) {
    if (offset->size() != eta.size()) throw Error(ErrorCode::DimensionMismatch, "offset length mismatch");
    eta += *offset;
  }
  if (model.link == Link::Identity) return eta;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    eta[i] = std::clamp(expit(eta[i]), model.p_clamp, 1.0 - model.p_clamp);
  }
  return eta;
}

}  // namespace transmed::regress
