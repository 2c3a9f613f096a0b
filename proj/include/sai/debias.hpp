#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "sai/errors.hpp"
#include "sai/glm.hpp"
#include "sai/kernel.hpp"
#include "sai/parallel.hpp"
#include "sai/pipeline.hpp"
#include "sai/rng.hpp"

namespace sai {

inline constexpr double kNormalQuantile975 = 1.96;
inline constexpr double kInformationTol = 1e-10;

// Doubly robust score S(beta; pi, Q) for one observation, evaluated through
// the two exact branches. y is read only when r == 1.
inline Vector score_row(const Eigen::Ref<const Vector>& x_row, double y, int r,
                        const Eigen::Ref<const Vector>& beta, double q,
                        double inv_pi, const GlmFamily& family) {
  const double bp = family.b_prime(x_row.dot(beta));
  if (r == 0) return (bp - q) * x_row;
  return (inv_pi * (bp - y) - (inv_pi - 1.0) * (bp - q)) * x_row;
}

// Trimming threshold c_n = delta_n^(2/(2+gamma_m)) with
// delta_n = (n h^d / log n)^(-1/2) + h^nu + n^(-gamma_d).
inline double trimming_threshold(Index n, double bandwidth, Index d, int nu,
                                 double gamma_m, double gamma_d) {
  const double dn = static_cast<double>(n);
  const double hd = std::pow(bandwidth, static_cast<double>(d));
  const double delta = std::pow(dn * hd / std::log(dn), -0.5) +
                       std::pow(bandwidth, static_cast<double>(nu)) +
                       std::pow(dn, -gamma_d);
  return std::pow(delta, 2.0 / (2.0 + gamma_m));
}

// Branch logic of the trimmed weighting function. The trimmed branch
// returns rho_inv itself (bitwise), never a recomputed quotient.
inline double inv_pi_from(double j1, double j0, double rho_hat, double rho_inv,
                          double c_n, bool* trimmed = nullptr) {
  if (std::abs(j1) <= c_n) {
    if (trimmed) *trimmed = true;
    return rho_inv;
  }
  if (trimmed) *trimmed = false;
  return 1.0 + j0 * (1.0 - rho_hat) / (j1 * rho_hat);
}

// Fold-excluded kernel evaluators for J_1 and J_0 plus the trimming state.
struct WeightModel {
  Matrix j1_inputs;   // reduced coordinates of fold-excluded R=1 rows
  Vector j1_weights;  // X'v over those rows
  Matrix j0_inputs;   // reduced coordinates of fold-excluded R=0 rows
  Vector j0_weights;
  double bandwidth = 0.0;
  int kernel_order = 2;
  double rho_hat = 1.0;
  double rho_inv = 1.0;
  double c_n = 0.0;
  bool no_unobserved = false;  // J_0 training set empty; augmentation inert
  mutable std::int64_t trim_count = 0;
  mutable std::int64_t eval_count = 0;
  mutable std::int64_t negative_count = 0;
};

inline WeightModel fit_weight_model(const Dataset& data,
                                    const ReducedBasis& basis,
                                    const Vector& v_hat,
                                    const std::vector<Index>& fold,
                                    double bandwidth, double gamma_m = 1.0,
                                    double gamma_d = 0.4) {
  std::vector<char> in_fold(static_cast<std::size_t>(data.n()), 0);
  for (Index i : fold) in_fold[static_cast<std::size_t>(i)] = 1;

  std::vector<Index> r1, r0;
  for (Index i = 0; i < data.n(); ++i) {
    if (in_fold[static_cast<std::size_t>(i)]) continue;
    (data.r(i) == 1 ? r1 : r0).push_back(i);
  }
  if (r1.empty())
    throw InsufficientDataError("fit_weight_model: no observed rows left");

  const Matrix red = basis.reduce(data.augmented());
  const Vector xv = data.x * v_hat;

  WeightModel wm;
  wm.bandwidth = bandwidth;
  auto gather = [&](const std::vector<Index>& rows, Matrix& inputs,
                    Vector& weights) {
    inputs.resize(static_cast<Index>(rows.size()), basis.d);
    weights.resize(static_cast<Index>(rows.size()));
    for (std::size_t k = 0; k < rows.size(); ++k) {
      inputs.row(static_cast<Index>(k)) = red.row(rows[k]);
      weights(static_cast<Index>(k)) = xv(rows[k]);
    }
  };
  gather(r1, wm.j1_inputs, wm.j1_weights);
  gather(r0, wm.j0_inputs, wm.j0_weights);
  wm.no_unobserved = r0.empty();

  double rsum = 0.0;
  for (Index i = 0; i < data.n(); ++i) rsum += data.r(i);
  wm.rho_hat = rsum / static_cast<double>(data.n());  // full sample, not fold-excluded
  wm.rho_inv = 1.0 / wm.rho_hat;
  wm.c_n = trimming_threshold(data.n(), bandwidth, basis.d, wm.kernel_order,
                              gamma_m, gamma_d);
  return wm;
}

inline WeightModel fit_weight_model(const Dataset& data,
                                    const FirstStageFit& first,
                                    const std::vector<Index>& fold,
                                    double bandwidth, double gamma_m = 1.0,
                                    double gamma_d = 0.4) {
  return fit_weight_model(data, first.basis, first.v_hat, fold, bandwidth,
                          gamma_m, gamma_d);
}

inline double evaluate_inv_pi(const WeightModel& model,
                              const Eigen::Ref<const Vector>& reduced_point) {
  ++model.eval_count;
  const double j1 =
      kernel_weighted_mean_point(model.j1_inputs, model.j1_weights,
                                 model.bandwidth, reduced_point,
                                 model.kernel_order);
  if (std::abs(j1) <= model.c_n) {
    ++model.trim_count;
    return model.rho_inv;
  }
  const double j0 =
      model.no_unobserved
          ? 0.0
          : kernel_weighted_mean_point(model.j0_inputs, model.j0_weights,
                                       model.bandwidth, reduced_point,
                                       model.kernel_order);
  const double value = 1.0 + j0 * (1.0 - model.rho_hat) / (j1 * model.rho_hat);
  if (value < 0.0) ++model.negative_count;
  return value;
}

// Seeded partition of {0..n-1} into k blocks whose sizes differ by at most
// one (the remainder is spread one row per fold).
inline std::vector<std::vector<Index>> make_folds(Index n, int k_folds,
                                                  std::uint64_t seed) {
  if (k_folds < 2) throw DimensionError("make_folds: need k >= 2");
  if (n < k_folds) throw InsufficientDataError("make_folds: n < k");
  Rng rng(seed);
  const auto perm = rng.permutation(static_cast<std::size_t>(n));
  std::vector<std::vector<Index>> folds(static_cast<std::size_t>(k_folds));
  const Index base = n / k_folds;
  const Index rem = n % k_folds;
  std::size_t pos = 0;
  for (int k = 0; k < k_folds; ++k) {
    const Index size = base + (k < rem ? 1 : 0);
    for (Index j = 0; j < size; ++j)
      folds[static_cast<std::size_t>(k)].push_back(
          static_cast<Index>(perm[pos++]));
  }
  return folds;
}

struct DebiasedEstimate {
  Vector beta_init;
  double beta_tilde = std::numeric_limits<double>::quiet_NaN();
  double i_bar = std::numeric_limits<double>::quiet_NaN();
  double s_bar = std::numeric_limits<double>::quiet_NaN();
  double se = std::numeric_limits<double>::quiet_NaN();
  double ci_low = std::numeric_limits<double>::quiet_NaN();
  double ci_high = std::numeric_limits<double>::quiet_NaN();
  double trim_fraction = 0.0;
  double neg_weight_fraction = 0.0;
  Vector fold_scores;
  Index target_index = 0;
  Index selected_d = 0;
  std::int64_t nw_fallbacks = 0;
  int bootstrap_reps = 0;
  int bootstrap_redraws = 0;
  bool unstable_bootstrap = false;
};

// Numerical knobs and test hooks shared by the one-step evaluators.
struct CoreOptions {
  std::optional<double> bandwidth_g;  // g-hat refits (default rule per fold)
  std::optional<double> bandwidth_j;  // J kernels (default rule on all rows)
  double gamma_m = 1.0;
  double gamma_d = 0.4;
  const Vector* imputation_override = nullptr;  // q_hat(-k) := override values
  std::optional<double> score_override;         // force S-bar
};

namespace detail {

struct TargetSpec {
  Index target = 0;
  Vector v_hat;
};

struct CoreResult {
  double beta_tilde = 0.0;
  double i_bar = 0.0;
  double s_bar = 0.0;
  Vector fold_scores;
  std::int64_t trim_count = 0;
  std::int64_t eval_count = 0;
  std::int64_t negative_count = 0;
  std::int64_t nw_fallbacks = 0;
};

// Cross-fitted one-step evaluation for several target coordinates at once.
// Kernel distances are computed once per (fold row, training row) pair and
// shared across targets; all reductions run in fixed index order.
inline std::vector<CoreResult> one_step_core(
    const Dataset& data, const ReducedBasis& basis, const Vector& beta_init,
    const GlmFamily& family, const std::vector<TargetSpec>& targets,
    int k_folds, std::uint64_t fold_seed, const CoreOptions& opt) {
  const Index n = data.n();
  const Index d = basis.d;
  const std::size_t nt = targets.size();
  const Matrix xt = data.augmented();
  const Matrix red = basis.reduce(xt);

  const double h_j = opt.bandwidth_j.value_or(default_bandwidth(red));
  const double c_n = trimming_threshold(n, h_j, d, 2, opt.gamma_m, opt.gamma_d);
  double rho_hat = 0.0;
  for (Index i = 0; i < n; ++i) rho_hat += data.r(i);
  rho_hat /= static_cast<double>(n);
  const double rho_inv = 1.0 / rho_hat;

  const Vector eta = data.x * beta_init;
  Vector bp(n), bpp(n);
  for (Index i = 0; i < n; ++i) {
    bp(i) = family.b_prime(eta(i));
    bpp(i) = family.b_double_prime(eta(i));
  }

  std::vector<CoreResult> results(nt);
  std::vector<Vector> xv(nt);
  for (std::size_t t = 0; t < nt; ++t) {
    xv[t] = data.x * targets[t].v_hat;
    double ib = 0.0;
    for (Index i = 0; i < n; ++i)
      ib += bpp(i) * data.x(i, targets[t].target) * xv[t](i);
    results[t].i_bar = ib / static_cast<double>(n);
    if (std::abs(results[t].i_bar) < kInformationTol)
      throw DegenerateInformationError("one_step: |I_bar| below tolerance");
    results[t].fold_scores.resize(k_folds);
  }

  const auto folds = make_folds(n, k_folds, fold_seed);
  const double nc = gauss_norm_const(d);
  const double inv_hj = 1.0 / h_j;
  const double hjd = std::pow(h_j, static_cast<double>(d));

  for (int k = 0; k < k_folds; ++k) {
    const auto& fold = folds[static_cast<std::size_t>(k)];
    std::vector<char> in_fold(static_cast<std::size_t>(n), 0);
    for (Index i : fold) in_fold[static_cast<std::size_t>(i)] = 1;
    std::vector<Index> obs_ex, mis_ex;
    for (Index i = 0; i < n; ++i) {
      if (in_fold[static_cast<std::size_t>(i)]) continue;
      (data.r(i) == 1 ? obs_ex : mis_ex).push_back(i);
    }
    if (obs_ex.size() < 2)
      throw InsufficientDataError("one_step: too few observed rows off-fold");
    const Index mo = static_cast<Index>(obs_ex.size());
    const Index mm = static_cast<Index>(mis_ex.size());

    using RowMajor =
        Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    RowMajor ro(mo, d), rm(mm, d);
    Vector y_o(mo);
    for (Index l = 0; l < mo; ++l) {
      ro.row(l) = red.row(obs_ex[static_cast<std::size_t>(l)]);
      y_o(l) = data.y_obs(obs_ex[static_cast<std::size_t>(l)]);
    }
    for (Index l = 0; l < mm; ++l)
      rm.row(l) = red.row(mis_ex[static_cast<std::size_t>(l)]);
    std::vector<Vector> xv_o(nt), xv_m(nt);
    for (std::size_t t = 0; t < nt; ++t) {
      xv_o[t].resize(mo);
      for (Index l = 0; l < mo; ++l)
        xv_o[t](l) = xv[t](obs_ex[static_cast<std::size_t>(l)]);
      xv_m[t].resize(mm);
      for (Index l = 0; l < mm; ++l)
        xv_m[t](l) = xv[t](mis_ex[static_cast<std::size_t>(l)]);
    }

    const double h_g = opt.bandwidth_g.value_or(
        default_bandwidth(Matrix(ro)));
    const double inv_hg = 1.0 / h_g;
    const double y_o_mean = y_o.mean();

    Vector kj1(mo), kj0(mm);
    std::vector<double> score_sum(nt, 0.0);
    std::vector<double> row_j1(nt, 0.0);
    std::vector<char> row_trim(nt, 0);
    std::vector<double> u(static_cast<std::size_t>(d));

    for (Index fi : fold) {
      for (Index j = 0; j < d; ++j) u[static_cast<std::size_t>(j)] = red(fi, j);

      // one squared-distance pass over off-fold observed rows feeds both
      // the g-hat smoother (bandwidth h_g) and J_1 (bandwidth h_j)
      double s0 = 0.0, s1 = 0.0;
      for (Index l = 0; l < mo; ++l) {
        const double* rp = ro.data() + l * d;
        double q2 = 0.0;
        for (Index j = 0; j < d; ++j) {
          const double dlt = rp[j] - u[static_cast<std::size_t>(j)];
          q2 += dlt * dlt;
        }
        const double eg = nc * std::exp(-0.5 * q2 * inv_hg * inv_hg);
        s0 += eg;
        s1 += eg * y_o(l);
        kj1(l) = nc * std::exp(-0.5 * q2 * inv_hj * inv_hj);
      }

      double q_i;
      if (s0 < 1e-300) {
        q_i = y_o_mean;
        for (std::size_t t = 0; t < nt; ++t) ++results[t].nw_fallbacks;
      } else {
        q_i = s1 / s0;
      }
      if (opt.imputation_override) q_i = (*opt.imputation_override)(fi);
      if (family.kind == Family::binomial)
        q_i = std::min(std::max(q_i, kBinomialClip), 1.0 - kBinomialClip);

      bool need_j0 = false;
      for (std::size_t t = 0; t < nt; ++t) {
        const double j1 = kj1.dot(xv_o[t]) / (static_cast<double>(mo) * hjd);
        ++results[t].eval_count;
        if (std::abs(j1) <= c_n) {
          ++results[t].trim_count;
          row_trim[t] = 1;
        } else {
          row_trim[t] = 0;
          row_j1[t] = j1;
          need_j0 = true;
        }
      }
      if (need_j0 && mm > 0) {
        for (Index l = 0; l < mm; ++l) {
          const double* rp = rm.data() + l * d;
          double q2 = 0.0;
          for (Index j = 0; j < d; ++j) {
            const double dlt = rp[j] - u[static_cast<std::size_t>(j)];
            q2 += dlt * dlt;
          }
          kj0(l) = nc * std::exp(-0.5 * q2 * inv_hj * inv_hj);
        }
      }
      for (std::size_t t = 0; t < nt; ++t) {
        double inv_pi;
        if (row_trim[t]) {
          inv_pi = rho_inv;
        } else {
          const double j0 =
              mm > 0 ? kj0.dot(xv_m[t]) / (static_cast<double>(mm) * hjd)
                     : 0.0;
          inv_pi = 1.0 + j0 * (1.0 - rho_hat) / (row_j1[t] * rho_hat);
          if (inv_pi < 0.0) ++results[t].negative_count;
        }
        const double resid =
            data.r(fi) == 0
                ? bp(fi) - q_i
                : inv_pi * (bp(fi) - data.y_obs(fi)) -
                      (inv_pi - 1.0) * (bp(fi) - q_i);
        score_sum[t] += resid * xv[t](fi);
      }
    }

    for (std::size_t t = 0; t < nt; ++t)
      results[t].fold_scores(k) =
          score_sum[t] / static_cast<double>(fold.size());
  }

  for (std::size_t t = 0; t < nt; ++t) {
    double sbar = 0.0;
    for (int k = 0; k < k_folds; ++k) sbar += results[t].fold_scores(k);
    sbar /= static_cast<double>(k_folds);
    if (opt.score_override) sbar = *opt.score_override;
    results[t].s_bar = sbar;
    results[t].beta_tilde =
        beta_init(targets[t].target) - sbar / results[t].i_bar;
  }
  return results;
}

}  // namespace detail

// One-step debiased estimate for the target coordinate carried by `first`:
// beta_tilde = beta_init[target] - S_bar / I_bar with cross-fitted
// nuisances. The standard error is left unset; bootstrap_inference fills it.
inline DebiasedEstimate one_step_estimate(const Dataset& data,
                                          const FirstStageFit& first,
                                          const GlmFamily& family, int k_folds,
                                          std::uint64_t rng_seed,
                                          const CoreOptions& opt = {}) {
  data.validate();
  std::vector<detail::TargetSpec> specs{{first.target_index, first.v_hat}};
  const auto core = detail::one_step_core(data, first.basis, first.beta_init,
                                          family, specs, k_folds, rng_seed,
                                          opt);
  DebiasedEstimate est;
  est.beta_init = first.beta_init;
  est.target_index = first.target_index;
  est.selected_d = first.basis.d;
  est.beta_tilde = core[0].beta_tilde;
  est.i_bar = core[0].i_bar;
  est.s_bar = core[0].s_bar;
  est.fold_scores = core[0].fold_scores;
  est.trim_fraction = core[0].eval_count == 0
                          ? 0.0
                          : static_cast<double>(core[0].trim_count) /
                                static_cast<double>(core[0].eval_count);
  est.neg_weight_fraction = core[0].eval_count == 0
                                ? 0.0
                                : static_cast<double>(core[0].negative_count) /
                                      static_cast<double>(core[0].eval_count);
  est.nw_fallbacks = core[0].nw_fallbacks + first.nw_fallbacks;
  return est;
}

struct InferenceOptions {
  FirstStageOptions first_stage;
  CoreOptions core;
  unsigned threads = 1;
  // test hook: explicit per-replicate seeds for the bootstrap
  std::optional<std::vector<std::uint64_t>> replicate_seeds;
};

// Full two-step procedure with bootstrap interval estimation for several
// target coordinates sharing one first stage. Each resample re-estimates
// the basis, link, initial fit, and directions; the reduced dimension d is
// reused from the original fit.
inline std::vector<DebiasedEstimate> multi_target_inference(
    const Dataset& data, const GlmFamily& family,
    const std::vector<Index>& targets, int k_folds, int b_reps,
    std::uint64_t rng_seed, const InferenceOptions& opt = {}) {
  data.validate();
  if (targets.empty()) throw DimensionError("multi_target_inference: no targets");
  if (b_reps == 1)
    throw DimensionError("multi_target_inference: b_reps must be 0 or >= 2");

  const FirstStageBase base = fit_first_stage_base(data, family, opt.first_stage);
  std::vector<detail::TargetSpec> specs;
  specs.reserve(targets.size());
  for (Index t : targets)
    specs.push_back({t, debias_direction(data.x, base.init_fit.beta, family, t)});

  const auto core =
      detail::one_step_core(data, base.basis, base.init_fit.beta, family,
                            specs, k_folds, derive_seed(rng_seed, 0), opt.core);

  std::vector<DebiasedEstimate> out(targets.size());
  for (std::size_t t = 0; t < targets.size(); ++t) {
    out[t].beta_init = base.init_fit.beta;
    out[t].target_index = targets[t];
    out[t].selected_d = base.basis.d;
    out[t].beta_tilde = core[t].beta_tilde;
    out[t].i_bar = core[t].i_bar;
    out[t].s_bar = core[t].s_bar;
    out[t].fold_scores = core[t].fold_scores;
    out[t].trim_fraction = static_cast<double>(core[t].trim_count) /
                           static_cast<double>(core[t].eval_count);
    out[t].neg_weight_fraction = static_cast<double>(core[t].negative_count) /
                                 static_cast<double>(core[t].eval_count);
    out[t].nw_fallbacks = core[t].nw_fallbacks + base.nw_fallbacks;
  }
  if (b_reps <= 0) return out;

  // bootstrap: d fixed at the original selection, everything else refit
  FirstStageOptions fs_b = opt.first_stage;
  fs_b.d = base.basis.d;
  const Index n = data.n();

  Matrix boot(b_reps, static_cast<Index>(targets.size()));
  std::vector<int> redraws(static_cast<std::size_t>(b_reps), 0);

  parallel_for(static_cast<std::size_t>(b_reps), opt.threads, [&](std::size_t b) {
    for (int attempt = 0;; ++attempt) {
      if (attempt >= 64)
        throw InsufficientDataError("bootstrap: replicate kept degenerating");
      const std::uint64_t sb =
          opt.replicate_seeds
              ? (*opt.replicate_seeds)[b]
              : derive_seed(rng_seed, ((b + 1) << 8) | static_cast<unsigned>(attempt));
      Rng rng(sb);
      std::vector<Index> rows(static_cast<std::size_t>(n));
      for (auto& idx : rows)
        idx = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
      const Dataset resampled = data.subset(rows);
      try {
        resampled.validate();
        const FirstStageBase base_b =
            fit_first_stage_base(resampled, family, fs_b);
        std::vector<detail::TargetSpec> specs_b;
        specs_b.reserve(targets.size());
        for (Index t : targets)
          specs_b.push_back(
              {t, debias_direction(resampled.x, base_b.init_fit.beta, family, t)});
        const auto core_b = detail::one_step_core(
            resampled, base_b.basis, base_b.init_fit.beta, family, specs_b,
            k_folds, derive_seed(sb, 1), opt.core);
        for (std::size_t t = 0; t < targets.size(); ++t)
          boot(static_cast<Index>(b), static_cast<Index>(t)) =
              core_b[t].beta_tilde;
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
  const bool unstable = total_redraws > b_reps / 10;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const Vector col = boot.col(static_cast<Index>(t));
    const double mean = col.mean();
    const double var = (col.array() - mean).square().sum() /
                       static_cast<double>(b_reps - 1);
    out[t].se = std::sqrt(var);
    out[t].ci_low = out[t].beta_tilde - kNormalQuantile975 * out[t].se;
    out[t].ci_high = out[t].beta_tilde + kNormalQuantile975 * out[t].se;
    out[t].bootstrap_reps = b_reps;
    out[t].bootstrap_redraws = total_redraws;
    out[t].unstable_bootstrap = unstable;
  }
  return out;
}

// Single-coordinate convenience wrapper: the spec surface for the
// bootstrap-backed interval estimate.
inline DebiasedEstimate bootstrap_inference(const Dataset& data,
                                            const GlmFamily& family,
                                            Index target_index, int k_folds,
                                            int b_reps, std::uint64_t rng_seed,
                                            const InferenceOptions& opt = {}) {
  if (b_reps < 2) throw DimensionError("bootstrap_inference: need b_reps >= 2");
  return multi_target_inference(data, family, {target_index}, k_folds, b_reps,
                                rng_seed, opt)[0];
}

}  // namespace sai
