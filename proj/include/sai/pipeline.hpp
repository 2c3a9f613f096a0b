#pragma once

#include <Eigen/Dense>
#include <cassert>
#include <optional>
#include <vector>

#include "sai/errors.hpp"
#include "sai/glm.hpp"
#include "sai/kernel.hpp"
#include "sai/sdr.hpp"

namespace sai {

// Observed tuple (X, Z, R, RY). Outcome entries where r == 0 are treated
// as missing: estimator code reads them only through y_obs(), which
// asserts the mask in debug builds.
struct Dataset {
  Matrix x;                 // n x p covariates
  std::optional<Vector> z;  // surrogate; absent in the ablation
  IntVector r;              // 1 = outcome observed
  Vector y;                 // meaningful where r == 1

  Index n() const { return x.rows(); }
  Index p() const { return x.cols(); }

  double y_obs(Index i) const {
    assert(r(i) == 1 && "reading a masked outcome");
    return y(i);
  }

  Index observed_count() const {
    Index c = 0;
    for (Index i = 0; i < r.size(); ++i) c += r(i);
    return c;
  }

  std::vector<Index> observed_rows() const {
    std::vector<Index> rows;
    rows.reserve(static_cast<std::size_t>(r.size()));
    for (Index i = 0; i < r.size(); ++i)
      if (r(i) == 1) rows.push_back(i);
    return rows;
  }

  Matrix augmented() const { return augment(x, z); }

  void validate() const {
    if (y.size() != n() || r.size() != n())
      throw DimensionError("Dataset: column lengths differ");
    if (z && z->size() != n()) throw DimensionError("Dataset: z length differs");
    for (Index i = 0; i < r.size(); ++i)
      if (r(i) != 0 && r(i) != 1)
        throw DimensionError("Dataset: r must be 0/1");
    if (observed_count() < p() + 2)
      throw InsufficientDataError("Dataset: fewer than p+2 observed outcomes");
  }

  Dataset subset(const std::vector<Index>& rows) const {
    Dataset out;
    const Index m = static_cast<Index>(rows.size());
    out.x.resize(m, p());
    out.y.resize(m);
    out.r.resize(m);
    if (z) out.z = Vector(m);
    for (Index k = 0; k < m; ++k) {
      out.x.row(k) = x.row(rows[static_cast<std::size_t>(k)]);
      out.y(k) = y(rows[static_cast<std::size_t>(k)]);
      out.r(k) = r(rows[static_cast<std::size_t>(k)]);
      if (z) (*out.z)(k) = (*z)(rows[static_cast<std::size_t>(k)]);
    }
    return out;
  }

  Dataset without_surrogate() const {
    Dataset out = *this;
    out.z.reset();
    return out;
  }
};

// ridge jitter on the weighted normal equations for w_hat
inline constexpr double kProjectionRidge = 1e-10;

// Direction v with v[target] = 1 and -w on the remaining coordinates,
// where w minimizes the b''-weighted least squares of X_target on the
// other covariates. This is the projection the one-step correction acts
// along.
inline Vector debias_direction(const Matrix& x, const Vector& beta,
                               const GlmFamily& family, Index target) {
  const Index n = x.rows();
  const Index p = x.cols();
  if (target < 0 || target >= p)
    throw DimensionError("debias_direction: target index out of range");

  const Vector eta = x * beta;
  Vector wts(n);
  for (Index i = 0; i < n; ++i) wts(i) = family.b_double_prime(eta(i));

  Matrix a = Matrix::Zero(p - 1, p - 1);
  Vector b = Vector::Zero(p - 1);
  // indices excluding the target, in original order
  std::vector<Index> rest;
  rest.reserve(static_cast<std::size_t>(p - 1));
  for (Index j = 0; j < p; ++j)
    if (j != target) rest.push_back(j);

  for (Index i = 0; i < n; ++i) {
    const double w = wts(i);
    if (w == 0.0) continue;
    for (Index a_idx = 0; a_idx < p - 1; ++a_idx) {
      const double xa = x(i, rest[static_cast<std::size_t>(a_idx)]);
      b(a_idx) += w * xa * x(i, target);
      for (Index b_idx = a_idx; b_idx < p - 1; ++b_idx)
        a(a_idx, b_idx) += w * xa * x(i, rest[static_cast<std::size_t>(b_idx)]);
    }
  }
  a /= static_cast<double>(n);
  b /= static_cast<double>(n);
  a = a.selfadjointView<Eigen::Upper>();
  a.diagonal().array() += kProjectionRidge;

  const Vector w_hat = Eigen::LDLT<Matrix>(a).solve(b);
  if (!w_hat.allFinite())
    throw SingularDesignError("debias_direction: singular weighted design");

  Vector v = Vector::Zero(p);
  v(target) = 1.0;
  for (Index a_idx = 0; a_idx < p - 1; ++a_idx)
    v(rest[static_cast<std::size_t>(a_idx)]) = -w_hat(a_idx);
  return v;
}

struct FirstStageOptions {
  std::optional<Index> d;           // reduced dimension; CV-selected if absent
  Index d_max = 3;                  // CV search cap
  int n_slices = 10;                // SIR slices for continuous responses
  int cv_folds = 5;
  std::optional<double> bandwidth_g;       // override for the g-hat smoother
  const Vector* imputation_override = nullptr;  // test hook: q_hat := this
};

// Coordinate-free part of the first stage: basis, link estimate, imputed
// values, and the initial coefficient fit.
struct FirstStageBase {
  ReducedBasis basis;
  SmootherFit g_hat;
  Vector q_hat;  // imputations at all n rows
  GlmFit init_fit;
  std::int64_t nw_fallbacks = 0;
};

struct FirstStageFit {
  ReducedBasis basis;
  SmootherFit g_hat;
  Vector q_hat;
  Vector beta_init;   // p-vector
  Vector v_hat;       // p-vector, v_hat[target_index] == 1
  Index target_index = 0;
  GlmFit init_fit;
  std::int64_t nw_fallbacks = 0;
};

inline FirstStageBase fit_first_stage_base(const Dataset& data,
                                           const GlmFamily& family,
                                           const FirstStageOptions& opt = {}) {
  data.validate();
  const Matrix xt = data.augmented();
  const auto obs = data.observed_rows();
  const Index m = static_cast<Index>(obs.size());
  Matrix xt_obs(m, xt.cols());
  Vector y_obs(m);
  for (Index k = 0; k < m; ++k) {
    xt_obs.row(k) = xt.row(obs[static_cast<std::size_t>(k)]);
    y_obs(k) = data.y_obs(obs[static_cast<std::size_t>(k)]);
  }

  FirstStageBase base;
  Index d;
  if (opt.d) {
    d = *opt.d;
  } else {
    const Index cap = std::min<Index>(opt.d_max, xt.cols());
    d = select_dimension(xt_obs, y_obs, cap, opt.cv_folds);
  }
  base.basis = estimate_subspace(xt_obs, y_obs, d, opt.n_slices);

  const Matrix red_obs = base.basis.reduce(xt_obs);
  const double h = opt.bandwidth_g.value_or(default_bandwidth(red_obs));
  base.g_hat = nw_fit(red_obs, y_obs, h, 2);

  PredictDiagnostics diag;
  base.q_hat = nw_predict(base.g_hat, base.basis.reduce(xt), &diag);
  base.nw_fallbacks = diag.fallback_count;
  if (opt.imputation_override) {
    if (opt.imputation_override->size() != data.n())
      throw DimensionError("first stage: imputation override length mismatch");
    base.q_hat = *opt.imputation_override;
  }
  if (family.kind == Family::binomial)
    base.q_hat =
        base.q_hat.cwiseMax(kBinomialClip).cwiseMin(1.0 - kBinomialClip);

  base.init_fit = fit_glm_imputed(data.x, base.q_hat, family);
  return base;
}

inline FirstStageFit attach_target(const FirstStageBase& base,
                                   const Dataset& data,
                                   const GlmFamily& family, Index target) {
  FirstStageFit fit;
  fit.basis = base.basis;
  fit.g_hat = base.g_hat;
  fit.q_hat = base.q_hat;
  fit.init_fit = base.init_fit;
  fit.beta_init = base.init_fit.beta;
  fit.nw_fallbacks = base.nw_fallbacks;
  fit.target_index = target;
  fit.v_hat = debias_direction(data.x, fit.beta_init, family, target);
  return fit;
}

// First step of the procedure: basis and link from the observed subsample,
// imputations for every row, initial coefficients from the imputed
// deviance, and the projection direction for the target coordinate.
inline FirstStageFit fit_first_stage(const Dataset& data,
                                     const GlmFamily& family, Index target,
                                     std::optional<Index> d = {},
                                     const FirstStageOptions& extra = {}) {
  FirstStageOptions opt = extra;
  if (d) opt.d = d;
  return attach_target(fit_first_stage_base(data, family, opt), data, family,
                       target);
}

// Refit of g-hat excluding the given fold. The basis is not re-estimated;
// only observed rows outside the fold train the smoother.
inline SmootherFit refit_g_excluding(const Dataset& data,
                                     const ReducedBasis& basis,
                                     const std::vector<Index>& fold,
                                     std::optional<double> bandwidth = {}) {
  std::vector<char> in_fold(static_cast<std::size_t>(data.n()), 0);
  for (Index i : fold) {
    if (i < 0 || i >= data.n())
      throw DimensionError("refit_g_excluding: fold index out of range");
    in_fold[static_cast<std::size_t>(i)] = 1;
  }
  const Matrix xt = data.augmented();
  std::vector<Index> rows;
  for (Index i = 0; i < data.n(); ++i)
    if (data.r(i) == 1 && !in_fold[static_cast<std::size_t>(i)])
      rows.push_back(i);
  if (rows.empty())
    throw InsufficientDataError("refit_g_excluding: no training rows left");

  Matrix inputs(static_cast<Index>(rows.size()), basis.d);
  Vector resp(static_cast<Index>(rows.size()));
  const Matrix red = basis.reduce(xt);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    inputs.row(static_cast<Index>(k)) = red.row(rows[k]);
    resp(static_cast<Index>(k)) = data.y_obs(rows[k]);
  }
  const double h = bandwidth.value_or(default_bandwidth(inputs));
  return nw_fit(inputs, resp, h, 2);
}

}  // namespace sai
