#pragma once

#include <Eigen/Dense>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "sai/debias.hpp"
#include "sai/errors.hpp"
#include "sai/glm.hpp"
#include "sai/kernel.hpp"
#include "sai/parallel.hpp"
#include "sai/pipeline.hpp"
#include "sai/rng.hpp"
#include "sai/sdr.hpp"

namespace sai {

inline constexpr double kPropensityClip = 0.001;

enum class BaselineMethod { dml_kernel, dml_logistic, proposed_no_z };

inline const char* baseline_name(BaselineMethod m) {
  switch (m) {
    case BaselineMethod::dml_kernel: return "dml_kernel";
    case BaselineMethod::dml_logistic: return "dml_logistic";
    case BaselineMethod::proposed_no_z: return "proposed_no_z";
  }
  return "?";
}

struct BaselineEstimate {
  BaselineMethod method = BaselineMethod::dml_kernel;
  Vector beta;
  Matrix per_coordinate_ci;  // p x 2, NaN rows where no interval was formed
  double clip_fraction = 0.0;
  bool solver_converged = true;
  double score_norm = 0.0;
  Index selected_d_q = 0;
  Index selected_d_pi = 0;
  int bootstrap_redraws = 0;
  bool unstable_bootstrap = false;
};

namespace detail {

struct DmlPoint {
  GlmFit fit;
  double clip_fraction = 0.0;
};

// One cross-fitted AIPW solve. Nuisance bases are fixed by the caller;
// the smoothers themselves are refit per fold on fold-excluded rows.
// Solving E_n[S(beta; pi, Q)] = 0 is a GLM fit against the pseudo-response
// inv_pi*R*Y - (inv_pi*R - 1)*Q, since dS/dbeta is the GLM Hessian.
inline DmlPoint dml_point(const Dataset& data, const GlmFamily& family,
                          BaselineMethod kind, int k_folds,
                          std::uint64_t fold_seed, const ReducedBasis& basis_q,
                          const ReducedBasis* basis_pi) {
  const Index n = data.n();
  const Matrix xt = data.augmented();
  const Matrix red_q = basis_q.reduce(xt);
  const bool all_observed = data.observed_count() == n;

  Vector q_hat(n), pi_hat(n);
  const auto folds = make_folds(n, k_folds, fold_seed);
  std::int64_t clipped = 0;

  for (const auto& fold : folds) {
    std::vector<char> in_fold(static_cast<std::size_t>(n), 0);
    for (Index i : fold) in_fold[static_cast<std::size_t>(i)] = 1;
    std::vector<Index> ex_obs, ex_all;
    for (Index i = 0; i < n; ++i) {
      if (in_fold[static_cast<std::size_t>(i)]) continue;
      ex_all.push_back(i);
      if (data.r(i) == 1) ex_obs.push_back(i);
    }
    if (ex_obs.size() < 2)
      throw InsufficientDataError("dml: too few observed rows off-fold");

    // imputation model
    Matrix in_q(static_cast<Index>(ex_obs.size()), basis_q.d);
    Vector y_q(static_cast<Index>(ex_obs.size()));
    for (std::size_t k = 0; k < ex_obs.size(); ++k) {
      in_q.row(static_cast<Index>(k)) = red_q.row(ex_obs[k]);
      y_q(static_cast<Index>(k)) = data.y_obs(ex_obs[k]);
    }
    const SmootherFit fit_q = nw_fit(in_q, y_q, default_bandwidth(in_q), 2);
    Matrix query_q(static_cast<Index>(fold.size()), basis_q.d);
    for (std::size_t k = 0; k < fold.size(); ++k)
      query_q.row(static_cast<Index>(k)) = red_q.row(fold[k]);
    const Vector q_fold = nw_predict(fit_q, query_q);

    // propensity model
    Vector pi_fold;
    if (all_observed) {
      pi_fold = Vector::Ones(static_cast<Index>(fold.size()));
    } else if (kind == BaselineMethod::dml_kernel) {
      const Matrix red_pi = basis_pi->reduce(xt);
      Matrix in_pi(static_cast<Index>(ex_all.size()), basis_pi->d);
      Vector r_pi(static_cast<Index>(ex_all.size()));
      for (std::size_t k = 0; k < ex_all.size(); ++k) {
        in_pi.row(static_cast<Index>(k)) = red_pi.row(ex_all[k]);
        r_pi(static_cast<Index>(k)) = data.r(ex_all[k]);
      }
      const SmootherFit fit_pi =
          nw_fit(in_pi, r_pi, default_bandwidth(in_pi), 2);
      Matrix query_pi(static_cast<Index>(fold.size()), basis_pi->d);
      for (std::size_t k = 0; k < fold.size(); ++k)
        query_pi.row(static_cast<Index>(k)) = red_pi.row(fold[k]);
      pi_fold = nw_predict(fit_pi, query_pi);
    } else {
      // logistic regression of R on (1, Xt) over fold-excluded rows
      Matrix design(static_cast<Index>(ex_all.size()), xt.cols() + 1);
      Vector r_resp(static_cast<Index>(ex_all.size()));
      for (std::size_t k = 0; k < ex_all.size(); ++k) {
        design(static_cast<Index>(k), 0) = 1.0;
        design.row(static_cast<Index>(k)).tail(xt.cols()) = xt.row(ex_all[k]);
        r_resp(static_cast<Index>(k)) = data.r(ex_all[k]);
      }
      const GlmFit logit = fit_glm(design, r_resp, binomial_family());
      pi_fold.resize(static_cast<Index>(fold.size()));
      GlmFamily fam_b = binomial_family();
      for (std::size_t k = 0; k < fold.size(); ++k) {
        double eta = logit.beta(0);
        eta += xt.row(fold[k]).dot(logit.beta.tail(xt.cols()));
        pi_fold(static_cast<Index>(k)) = fam_b.b_prime(eta);
      }
    }

    for (std::size_t k = 0; k < fold.size(); ++k) {
      double q = q_fold(static_cast<Index>(k));
      if (family.kind == Family::binomial)
        q = std::min(std::max(q, kBinomialClip), 1.0 - kBinomialClip);
      double pi = pi_fold(static_cast<Index>(k));
      if (pi < kPropensityClip || pi > 1.0) ++clipped;
      pi = std::min(std::max(pi, kPropensityClip), 1.0);
      q_hat(fold[k]) = q;
      pi_hat(fold[k]) = pi;
    }
  }

  // pseudo-response form of the cross-fitted AIPW score
  Vector pseudo(n);
  for (Index i = 0; i < n; ++i) {
    const double inv_pi = 1.0 / pi_hat(i);
    const double ry = data.r(i) == 1 ? data.y_obs(i) : 0.0;
    pseudo(i) = inv_pi * data.r(i) * ry -
                (inv_pi * data.r(i) - 1.0) * q_hat(i);
  }

  DmlPoint point;
  point.fit = fit_glm(data.x, pseudo, family);
  point.clip_fraction =
      static_cast<double>(clipped) / static_cast<double>(n);
  return point;
}

}  // namespace detail

struct DmlOptions {
  Index d_max = 3;
  int cv_folds = 5;
  std::optional<Index> d_q;   // outcome reduction; CV-selected if absent
  unsigned threads = 1;
};

// Double machine learning baseline: cross-fitted AIPW for the full
// coefficient vector, kernel or logistic propensity, propensities clipped
// to [0.001, 1], bootstrap per-coordinate intervals.
inline BaselineEstimate fit_dml(const Dataset& data, const GlmFamily& family,
                                BaselineMethod propensity_kind, int k_folds,
                                int b_reps, std::uint64_t rng_seed,
                                const DmlOptions& opt = {}) {
  if (propensity_kind == BaselineMethod::proposed_no_z)
    throw DimensionError("fit_dml: propensity kind must be a dml variant");
  data.validate();
  const Index n = data.n();
  const Matrix xt = data.augmented();

  const auto obs = data.observed_rows();
  Matrix xt_obs(static_cast<Index>(obs.size()), xt.cols());
  Vector y_obs(static_cast<Index>(obs.size()));
  for (std::size_t k = 0; k < obs.size(); ++k) {
    xt_obs.row(static_cast<Index>(k)) = xt.row(obs[k]);
    y_obs(static_cast<Index>(k)) = data.y_obs(obs[k]);
  }
  const Index d_q =
      opt.d_q ? *opt.d_q
              : select_dimension(xt_obs, y_obs,
                                 std::min<Index>(opt.d_max, xt.cols()),
                                 opt.cv_folds);
  const ReducedBasis basis_q = estimate_subspace(xt_obs, y_obs, d_q);

  // binary-response SIR spans a single direction, so the propensity
  // reduction is one-dimensional by construction
  std::optional<ReducedBasis> basis_pi;
  const bool all_observed = data.observed_count() == n;
  if (propensity_kind == BaselineMethod::dml_kernel && !all_observed) {
    Vector r_d(n);
    for (Index i = 0; i < n; ++i) r_d(i) = data.r(i);
    basis_pi = estimate_subspace(xt, r_d, 1, 2);
  }

  const auto point = detail::dml_point(data, family, propensity_kind, k_folds,
                                       derive_seed(rng_seed, 0), basis_q,
                                       basis_pi ? &*basis_pi : nullptr);

  BaselineEstimate est;
  est.method = propensity_kind;
  est.beta = point.fit.beta;
  est.clip_fraction = point.clip_fraction;
  est.solver_converged = point.fit.converged;
  est.score_norm = point.fit.final_gradient_norm;
  est.selected_d_q = d_q;
  est.selected_d_pi = basis_pi ? basis_pi->d : 0;
  est.per_coordinate_ci = Matrix::Constant(
      data.p(), 2, std::numeric_limits<double>::quiet_NaN());
  if (b_reps <= 0) return est;
  if (b_reps == 1) throw DimensionError("fit_dml: b_reps must be 0 or >= 2");

  Matrix boot(b_reps, data.p());
  std::vector<int> redraws(static_cast<std::size_t>(b_reps), 0);
  parallel_for(static_cast<std::size_t>(b_reps), opt.threads, [&](std::size_t b) {
    for (int attempt = 0;; ++attempt) {
      if (attempt >= 64)
        throw InsufficientDataError("dml bootstrap: replicate kept degenerating");
      const std::uint64_t sb =
          derive_seed(rng_seed, ((b + 1) << 8) | static_cast<unsigned>(attempt));
      Rng rng(sb);
      std::vector<Index> rows(static_cast<std::size_t>(n));
      for (auto& idx : rows)
        idx = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
      const Dataset resampled = data.subset(rows);
      try {
        resampled.validate();
        const Matrix xt_b = resampled.augmented();
        const auto obs_b = resampled.observed_rows();
        Matrix xt_obs_b(static_cast<Index>(obs_b.size()), xt_b.cols());
        Vector y_obs_b(static_cast<Index>(obs_b.size()));
        for (std::size_t k = 0; k < obs_b.size(); ++k) {
          xt_obs_b.row(static_cast<Index>(k)) = xt_b.row(obs_b[k]);
          y_obs_b(static_cast<Index>(k)) = resampled.y_obs(obs_b[k]);
        }
        const ReducedBasis basis_q_b = estimate_subspace(xt_obs_b, y_obs_b, d_q);
        std::optional<ReducedBasis> basis_pi_b;
        if (propensity_kind == BaselineMethod::dml_kernel &&
            resampled.observed_count() != n) {
          Vector r_d(n);
          for (Index i = 0; i < n; ++i) r_d(i) = resampled.r(i);
          basis_pi_b = estimate_subspace(xt_b, r_d, 1, 2);
        }
        const auto pb = detail::dml_point(resampled, family, propensity_kind,
                                          k_folds, derive_seed(sb, 1),
                                          basis_q_b,
                                          basis_pi_b ? &*basis_pi_b : nullptr);
        boot.row(static_cast<Index>(b)) = pb.fit.beta.transpose();
        redraws[b] = attempt;
        return;
      } catch (const InsufficientDataError&) {
      } catch (const SingularDesignError&) {
      } catch (const DegenerateScaleError&) {
      } catch (const DegenerateInformationError&) {
      }
    }
  });

  int total_redraws = 0;
  for (int r : redraws) total_redraws += r;
  est.bootstrap_redraws = total_redraws;
  est.unstable_bootstrap = total_redraws > b_reps / 10;
  for (Index j = 0; j < data.p(); ++j) {
    const Vector col = boot.col(j);
    const double mean = col.mean();
    const double se = std::sqrt((col.array() - mean).square().sum() /
                                static_cast<double>(b_reps - 1));
    est.per_coordinate_ci(j, 0) = est.beta(j) - kNormalQuantile975 * se;
    est.per_coordinate_ci(j, 1) = est.beta(j) + kNormalQuantile975 * se;
  }
  return est;
}

// Proposed pipeline without the surrogate: identical machinery with the
// augmented matrix replaced by X itself. Reports the initial coefficient
// vector with the target coordinate replaced by its one-step value.
inline BaselineEstimate fit_proposed_no_z(const Dataset& data,
                                          const GlmFamily& family,
                                          Index target_index, int k_folds,
                                          int b_reps, std::uint64_t rng_seed,
                                          const InferenceOptions& opt = {}) {
  const Dataset stripped = data.without_surrogate();
  const DebiasedEstimate one = bootstrap_inference(
      stripped, family, target_index, k_folds, b_reps, rng_seed, opt);

  BaselineEstimate est;
  est.method = BaselineMethod::proposed_no_z;
  est.beta = one.beta_init;
  est.beta(target_index) = one.beta_tilde;
  est.per_coordinate_ci = Matrix::Constant(
      data.p(), 2, std::numeric_limits<double>::quiet_NaN());
  est.per_coordinate_ci(target_index, 0) = one.ci_low;
  est.per_coordinate_ci(target_index, 1) = one.ci_high;
  est.selected_d_q = one.selected_d;
  est.bootstrap_redraws = one.bootstrap_redraws;
  est.unstable_bootstrap = one.unstable_bootstrap;
  return est;
}

}  // namespace sai
