#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>

#include "sai/errors.hpp"

namespace sai {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using IntVector = Eigen::VectorXi;
using Index = Eigen::Index;

enum class Family { gaussian, binomial };

// Imputed responses for the binomial family are clipped to
// [kBinomialClip, 1 - kBinomialClip] so the deviance stays finite.
inline constexpr double kBinomialClip = 1e-6;

// Cumulant function b and its derivatives for the supported families.
// gaussian: b(t) = t^2/2 (identity link, deviance = least squares);
// binomial: b(t) = log(1 + e^t) (logit link).
struct GlmFamily {
  Family kind = Family::gaussian;

  double b(double t) const {
    if (kind == Family::gaussian) return 0.5 * t * t;
    // stable branch: log(1+e^t) = t + log(1+e^-t) for t > 0
    return t > 0.0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t));
  }

  double b_prime(double t) const {
    if (kind == Family::gaussian) return t;
    if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
    const double e = std::exp(t);
    return e / (1.0 + e);
  }

  double b_double_prime(double t) const {
    if (kind == Family::gaussian) return 1.0;
    const double p = b_prime(t);
    return p * (1.0 - p);
  }
};

inline GlmFamily gaussian_family() { return GlmFamily{Family::gaussian}; }
inline GlmFamily binomial_family() { return GlmFamily{Family::binomial}; }

inline GlmFamily family_from_string(const std::string& s) {
  if (s == "gaussian") return gaussian_family();
  if (s == "binomial") return binomial_family();
  throw ConfigError("unknown family: " + s);
}

// Per-observation deviance contribution b(x'beta) - y * x'beta.
inline double deviance_loss(const Eigen::Ref<const Vector>& x_row, double y,
                            const Eigen::Ref<const Vector>& beta,
                            const GlmFamily& family) {
  const double eta = x_row.dot(beta);
  return family.b(eta) - y * eta;
}

inline double mean_deviance(const Matrix& x, const Vector& y,
                            const Vector& beta, const GlmFamily& family) {
  const Vector eta = x * beta;
  double acc = 0.0;
  for (Index i = 0; i < x.rows(); ++i) acc += family.b(eta(i)) - y(i) * eta(i);
  return acc / static_cast<double>(x.rows());
}

struct GlmFit {
  Vector beta;
  bool converged = false;
  int iterations = 0;
  double final_gradient_norm = std::numeric_limits<double>::infinity();
};

namespace detail {

// rank check via the Gram matrix: smallest eigenvalue of x'x relative to
// the largest must clear kRankTol (equivalent to a singular-value gate)
inline constexpr double kRankTol = 1e-14;

inline void check_full_column_rank(const Matrix& x, const char* where) {
  const Matrix gram = x.transpose() * x;
  Eigen::SelfAdjointEigenSolver<Matrix> es(gram);
  const double lmax = es.eigenvalues().maxCoeff();
  const double lmin = es.eigenvalues().minCoeff();
  if (!(lmax > 0.0) || !(lmin > lmax * kRankTol))
    throw SingularDesignError(std::string(where) + ": design is rank deficient");
}

}  // namespace detail

// Minimizes the empirical mean of b(x'beta) - y * x'beta by Newton steps
// with step halving; falls back to a plain gradient step when the Hessian
// is numerically singular. Non-convergence is reported through the flag,
// not an exception.
inline GlmFit fit_glm(const Matrix& x, const Vector& y, const GlmFamily& family,
                      double tol = 1e-8, int max_iter = 100) {
  const Index n = x.rows();
  const Index p = x.cols();
  if (y.size() != n) throw DimensionError("fit_glm: x rows != y length");
  if (n <= p) throw InsufficientDataError("fit_glm: need n > p");
  detail::check_full_column_rank(x, "fit_glm");

  const double dn = static_cast<double>(n);
  GlmFit fit;
  Vector beta = Vector::Zero(p);
  double obj = mean_deviance(x, y, beta, family);

  int it = 0;
  for (; it < max_iter; ++it) {
    const Vector eta = x * beta;
    Vector mu(n), w(n);
    for (Index i = 0; i < n; ++i) {
      mu(i) = family.b_prime(eta(i));
      w(i) = family.b_double_prime(eta(i));
    }
    const Vector grad = x.transpose() * (mu - y) / dn;
    fit.final_gradient_norm = grad.lpNorm<Eigen::Infinity>();
    if (fit.final_gradient_norm <= tol) {
      fit.converged = true;
      break;
    }

    Vector step;
    const Matrix hess = x.transpose() * w.asDiagonal() * x / dn;
    Eigen::LDLT<Matrix> ldlt(hess);
    bool have_newton = ldlt.info() == Eigen::Success;
    if (have_newton) {
      step = ldlt.solve(grad);
      have_newton = step.allFinite();
    }
    if (!have_newton) step = grad;

    double s = 1.0;
    bool accepted = false;
    for (int half = 0; half < 60; ++half) {
      const Vector cand = beta - s * step;
      const double cobj = mean_deviance(x, y, cand, family);
      if (std::isfinite(cobj) && cobj <= obj) {
        beta = cand;
        obj = cobj;
        accepted = true;
        break;
      }
      s *= 0.5;
    }
    if (!accepted) break;  // no descent possible at double precision
  }

  if (!fit.converged) {
    const Vector eta = x * beta;
    Vector mu(n);
    for (Index i = 0; i < n; ++i) mu(i) = family.b_prime(eta(i));
    fit.final_gradient_norm =
        (x.transpose() * (mu - y) / dn).lpNorm<Eigen::Infinity>();
    fit.converged = fit.final_gradient_norm <= tol;
  }
  fit.iterations = it;
  fit.beta = std::move(beta);
  return fit;
}

// Same solver with the response replaced by imputed values q_hat
// (minimizes the empirical mean of b(x'beta) - q_hat * x'beta).
inline GlmFit fit_glm_imputed(const Matrix& x, const Vector& q_hat,
                              const GlmFamily& family, double tol = 1e-8,
                              int max_iter = 100) {
  if (!q_hat.allFinite())
    throw DimensionError("fit_glm_imputed: q_hat has non-finite entries");
  if (family.kind == Family::binomial) {
    const Vector q =
        q_hat.cwiseMax(kBinomialClip).cwiseMin(1.0 - kBinomialClip);
    return fit_glm(x, q, family, tol, max_iter);
  }
  return fit_glm(x, q_hat, family, tol, max_iter);
}

}  // namespace sai
