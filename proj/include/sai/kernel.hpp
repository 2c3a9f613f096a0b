#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <optional>

#include "sai/errors.hpp"
#include "sai/glm.hpp"

namespace sai {

namespace detail {

inline constexpr double kInvSqrt2Pi = 0.39894228040143267794;

// (2*pi)^(-d/2)
inline double gauss_norm_const(Index d) {
  double c = 1.0;
  for (Index j = 0; j < d; ++j) c *= kInvSqrt2Pi;
  return c;
}

// Product kernel at scaled offsets t = (a - b)/h. Order 2 is the gaussian
// product kernel; order 4 multiplies in the (3/2 - t^2/2) factor per
// coordinate (gaussian-based fourth-order kernel).
inline double product_kernel(const double* a, const double* b, Index d,
                             double inv_h, int order, double norm_const) {
  double q = 0.0;
  double poly = 1.0;
  for (Index j = 0; j < d; ++j) {
    const double t = (a[j] - b[j]) * inv_h;
    q += t * t;
    if (order == 4) poly *= 1.5 - 0.5 * t * t;
  }
  return poly * norm_const * std::exp(-0.5 * q);
}

}  // namespace detail

// Rule-of-thumb bandwidth sigma_bar * m^(-1/(d+4)) where sigma_bar is the
// mean coordinate-wise sample standard deviation. exponent_override
// replaces the -1/(d+4) rate exponent when supplied.
inline double default_bandwidth(const Matrix& inputs,
                                std::optional<double> exponent_override = {}) {
  const Index m = inputs.rows();
  const Index d = inputs.cols();
  if (m < 2) throw InsufficientDataError("default_bandwidth: need m >= 2");
  double sigma_bar = 0.0;
  for (Index j = 0; j < d; ++j) {
    const double mean = inputs.col(j).mean();
    const double ss = (inputs.col(j).array() - mean).square().sum();
    sigma_bar += std::sqrt(ss / static_cast<double>(m - 1));
  }
  sigma_bar /= static_cast<double>(d);
  if (!(sigma_bar > 0.0))
    throw DegenerateScaleError("default_bandwidth: inputs have zero variance");
  const double exponent =
      exponent_override.value_or(-1.0 / static_cast<double>(d + 4));
  return sigma_bar * std::pow(static_cast<double>(m), exponent);
}

struct SmootherFit {
  Matrix train_inputs;    // m x d, row major access pattern
  Vector train_responses;
  double bandwidth = 0.0;
  int kernel_order = 2;
};

struct PredictDiagnostics {
  std::int64_t fallback_count = 0;  // queries answered by the global mean
};

inline SmootherFit nw_fit(const Matrix& inputs, const Vector& responses,
                          double bandwidth, int kernel_order = 2) {
  if (inputs.rows() != responses.size())
    throw DimensionError("nw_fit: inputs rows != responses length");
  if (inputs.rows() < 1) throw InsufficientDataError("nw_fit: empty training set");
  if (!(bandwidth > 0.0)) throw DimensionError("nw_fit: bandwidth must be > 0");
  if (kernel_order != 2 && kernel_order != 4)
    throw DimensionError("nw_fit: kernel order must be 2 or 4");
  return SmootherFit{inputs, responses, bandwidth, kernel_order};
}

// Nadaraya-Watson prediction. A query whose kernel mass underflows below
// 1e-300 falls back to the global response mean and bumps the diagnostic
// counter.
inline Vector nw_predict(const SmootherFit& fit, const Matrix& query,
                         PredictDiagnostics* diag = nullptr) {
  const Index m = fit.train_inputs.rows();
  const Index d = fit.train_inputs.cols();
  if (query.cols() != d)
    throw DimensionError("nw_predict: query width != training width");
  const double inv_h = 1.0 / fit.bandwidth;
  const double nc = detail::gauss_norm_const(d);
  const double global_mean = fit.train_responses.mean();

  // row-major copies so the inner loop walks contiguous memory
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>
      train = fit.train_inputs;
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>
      qr = query;

  Vector out(query.rows());
  for (Index k = 0; k < qr.rows(); ++k) {
    double s0 = 0.0, s1 = 0.0;
    const double* qp = qr.data() + k * d;
    for (Index i = 0; i < m; ++i) {
      const double kv = detail::product_kernel(train.data() + i * d, qp, d,
                                               inv_h, fit.kernel_order, nc);
      s0 += kv;
      s1 += kv * fit.train_responses(i);
    }
    if (s0 < 1e-300) {
      out(k) = global_mean;
      if (diag) ++diag->fallback_count;
    } else {
      out(k) = s1 / s0;
    }
  }
  return out;
}

// Unnormalized kernel average at a single query point:
// (1/m) * sum_i w_i * K((u_i - u)/h) / h^d. An empty training set gives 0.
inline double kernel_weighted_mean_point(const Matrix& inputs,
                                         const Vector& weights,
                                         double bandwidth,
                                         const Eigen::Ref<const Vector>& query,
                                         int kernel_order = 2) {
  const Index m = inputs.rows();
  if (m == 0) return 0.0;
  const Index d = inputs.cols();
  if (query.size() != d)
    throw DimensionError("kernel_weighted_mean: query width mismatch");
  const double inv_h = 1.0 / bandwidth;
  const double nc = detail::gauss_norm_const(d);
  double acc = 0.0;
  for (Index i = 0; i < m; ++i) {
    double q = 0.0;
    double poly = 1.0;
    for (Index j = 0; j < d; ++j) {
      const double t = (inputs(i, j) - query(j)) * inv_h;
      q += t * t;
      if (kernel_order == 4) poly *= 1.5 - 0.5 * t * t;
    }
    acc += weights(i) * poly * nc * std::exp(-0.5 * q);
  }
  const double hd = std::pow(bandwidth, static_cast<double>(d));
  return acc / (static_cast<double>(m) * hd);
}

inline Vector kernel_weighted_mean(const Matrix& inputs, const Vector& weights,
                                   double bandwidth, const Matrix& query,
                                   int kernel_order = 2) {
  if (inputs.rows() != weights.size())
    throw DimensionError("kernel_weighted_mean: inputs rows != weights length");
  if (inputs.rows() > 0 && query.cols() != inputs.cols())
    throw DimensionError("kernel_weighted_mean: query width mismatch");
  if (!(bandwidth > 0.0))
    throw DimensionError("kernel_weighted_mean: bandwidth must be > 0");
  Vector out(query.rows());
  for (Index k = 0; k < query.rows(); ++k)
    out(k) = kernel_weighted_mean_point(inputs, weights, bandwidth,
                                        query.row(k).transpose(), kernel_order);
  return out;
}

}  // namespace sai
