#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <optional>
#include <vector>

#include "sai/errors.hpp"
#include "sai/kernel.hpp"

namespace sai {

// Column-appends the surrogate: column 0 is z, columns 1..p are x.
inline Matrix augment(const Matrix& x, const Vector& z) {
  if (z.size() != x.rows())
    throw DimensionError("augment: x rows != z length");
  Matrix xt(x.rows(), x.cols() + 1);
  xt.col(0) = z;
  xt.rightCols(x.cols()) = x;
  return xt;
}

// Surrogate-free ablation: the augmented matrix is x itself.
inline Matrix augment(const Matrix& x) { return x; }

inline Matrix augment(const Matrix& x, const std::optional<Vector>& z) {
  return z.has_value() ? augment(x, *z) : x;
}

// Centering/whitening transform estimated alongside the basis. The
// whitener is the symmetric pseudo-inverse square root of the sample
// covariance; directions with relative eigenvalue below kDropTol are
// dropped, which makes constant columns harmless.
struct Standardizer {
  Vector mean;
  Matrix whitener;
  Index rank = 0;
};

struct ReducedBasis {
  Matrix gamma;        // q x d, orthonormal columns
  Index d = 0;
  Vector eigenvalues;  // top-d slice-mean eigenvalues, descending
  Standardizer standardizer;

  Matrix reduce(const Matrix& xt) const { return xt * gamma; }
};

namespace detail {

inline constexpr double kDropTol = 1e-10;

inline Standardizer fit_standardizer(const Matrix& xt) {
  const Index n = xt.rows();
  const Index q = xt.cols();
  Standardizer s;
  s.mean = xt.colwise().mean();
  const Matrix centered = xt.rowwise() - s.mean.transpose();
  const Matrix cov = centered.transpose() * centered / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  if (es.info() != Eigen::Success)
    throw SingularDesignError("standardizer: eigensolver failed");
  const double lmax = es.eigenvalues().maxCoeff();
  if (!(lmax > 0.0))
    throw SingularDesignError("standardizer: degenerate covariance");
  s.whitener = Matrix::Zero(q, q);
  for (Index j = 0; j < q; ++j) {
    const double lam = es.eigenvalues()(j);
    if (lam > lmax * kDropTol) {
      s.whitener +=
          es.eigenvectors().col(j) * es.eigenvectors().col(j).transpose() /
          std::sqrt(lam);
      ++s.rank;
    }
  }
  return s;
}

// Slice assignment: two distinct response values slice by class, otherwise
// contiguous blocks of the (response, index)-sorted order.
inline std::vector<std::vector<Index>> make_slices(const Vector& y,
                                                   int n_slices) {
  const Index n = y.size();
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](Index a, Index b) {
    return y(a) != y(b) ? y(a) < y(b) : a < b;
  });

  // binary (or single-valued) responses: one slice per class
  Index distinct = 1;
  for (Index k = 1; k < n; ++k)
    if (y(order[static_cast<std::size_t>(k)]) !=
        y(order[static_cast<std::size_t>(k - 1)]))
      ++distinct;
  std::vector<std::vector<Index>> slices;
  if (distinct <= 2) {
    slices.emplace_back();
    for (Index k = 0; k < n; ++k) {
      if (k > 0 && y(order[static_cast<std::size_t>(k)]) !=
                       y(order[static_cast<std::size_t>(k - 1)]))
        slices.emplace_back();
      slices.back().push_back(order[static_cast<std::size_t>(k)]);
    }
    return slices;
  }

  const Index s = std::min<Index>(n_slices, n);
  for (Index b = 0; b < s; ++b) {
    const Index lo = b * n / s;
    const Index hi = (b + 1) * n / s;
    std::vector<Index> slice(order.begin() + lo, order.begin() + hi);
    slices.push_back(std::move(slice));
  }
  return slices;
}

}  // namespace detail

// Sliced inverse regression on the fully observed subsample: standardize,
// slice by response, eigen-decompose the weighted slice-mean outer product
// in whitened coordinates, back-transform the leading d directions and
// re-orthonormalize. Column signs are fixed so the largest-magnitude entry
// is positive.
inline ReducedBasis estimate_subspace(const Matrix& xt, const Vector& y,
                                      Index d, int n_slices = 10) {
  const Index n = xt.rows();
  const Index q = xt.cols();
  if (y.size() != n) throw DimensionError("estimate_subspace: xt rows != y length");
  if (n < q + 1)
    throw InsufficientDataError("estimate_subspace: need at least q+1 rows");
  if (d < 1 || d > q)
    throw DimensionError("estimate_subspace: d out of range");
  if (n_slices < 2)
    throw DimensionError("estimate_subspace: need at least 2 slices");

  ReducedBasis basis;
  basis.standardizer = detail::fit_standardizer(xt);
  if (basis.standardizer.rank < d)
    throw SingularDesignError(
        "estimate_subspace: covariance rank below requested dimension");
  const Matrix centered = xt.rowwise() - basis.standardizer.mean.transpose();
  const Matrix whitened = centered * basis.standardizer.whitener;

  const auto slices = detail::make_slices(y, n_slices);
  Matrix m = Matrix::Zero(q, q);
  for (const auto& slice : slices) {
    if (slice.empty()) continue;
    Vector mean = Vector::Zero(q);
    for (Index i : slice) mean += whitened.row(i).transpose();
    mean /= static_cast<double>(slice.size());
    m += (static_cast<double>(slice.size()) / static_cast<double>(n)) * mean *
         mean.transpose();
  }

  Eigen::SelfAdjointEigenSolver<Matrix> es(m);
  if (es.info() != Eigen::Success)
    throw SingularDesignError("estimate_subspace: eigensolver failed");

  Matrix raw(q, d);
  basis.eigenvalues.resize(d);
  for (Index k = 0; k < d; ++k) {
    raw.col(k) = basis.standardizer.whitener * es.eigenvectors().col(q - 1 - k);
    basis.eigenvalues(k) = es.eigenvalues()(q - 1 - k);
  }

  Eigen::HouseholderQR<Matrix> qr(raw);
  Matrix gamma = qr.householderQ() * Matrix::Identity(q, d);
  for (Index k = 0; k < d; ++k) {
    Index argmax = 0;
    gamma.col(k).cwiseAbs().maxCoeff(&argmax);
    if (gamma(argmax, k) < 0.0) gamma.col(k) = -gamma.col(k);
  }
  basis.gamma = std::move(gamma);
  basis.d = d;
  return basis;
}

// Cross-validated choice of the reduced dimension: for each candidate d,
// kernel-regress y on the reduced coordinates over training folds and score
// squared prediction error on held-out folds. Ties break toward smaller d.
// Folds are assigned round-robin by row index, so the choice is
// deterministic in the input order.
inline Index select_dimension(const Matrix& xt, const Vector& y, Index d_max,
                              int n_folds = 5) {
  const Index n = xt.rows();
  const Index q = xt.cols();
  if (d_max < 1 || d_max > q)
    throw DimensionError("select_dimension: d_max out of range");
  if (n_folds < 2) throw DimensionError("select_dimension: need >= 2 folds");
  if (d_max == 1) return 1;

  double best_err = std::numeric_limits<double>::infinity();
  Index best_d = 1;
  for (Index d = 1; d <= d_max; ++d) {
    double err = 0.0;
    Index count = 0;
    for (int f = 0; f < n_folds; ++f) {
      std::vector<Index> train, test;
      for (Index i = 0; i < n; ++i)
        (static_cast<int>(i % n_folds) == f ? test : train).push_back(i);
      if (train.size() < static_cast<std::size_t>(q + 1) || test.empty())
        continue;
      Matrix xt_tr(static_cast<Index>(train.size()), q);
      Vector y_tr(static_cast<Index>(train.size()));
      for (std::size_t k = 0; k < train.size(); ++k) {
        xt_tr.row(static_cast<Index>(k)) = xt.row(train[k]);
        y_tr(static_cast<Index>(k)) = y(train[k]);
      }
      Matrix xt_te(static_cast<Index>(test.size()), q);
      Vector y_te(static_cast<Index>(test.size()));
      for (std::size_t k = 0; k < test.size(); ++k) {
        xt_te.row(static_cast<Index>(k)) = xt.row(test[k]);
        y_te(static_cast<Index>(k)) = y(test[k]);
      }
      const ReducedBasis basis = estimate_subspace(xt_tr, y_tr, d);
      const Matrix red_tr = basis.reduce(xt_tr);
      const SmootherFit fit =
          nw_fit(red_tr, y_tr, default_bandwidth(red_tr), 2);
      const Vector pred = nw_predict(fit, basis.reduce(xt_te));
      err += (pred - y_te).squaredNorm();
      count += static_cast<Index>(test.size());
    }
    if (count == 0)
      throw InsufficientDataError("select_dimension: no usable folds");
    const double cv = err / static_cast<double>(count);
    if (cv < best_err) {
      best_err = cv;
      best_d = d;
    }
  }
  return best_d;
}

}  // namespace sai
