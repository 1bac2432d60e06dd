#pragma once

// PCA whitening of global descriptors with eigenvalue shrinkage.

#include <Eigen/Dense>

#include "d2r/layers.hpp"

namespace d2r {

struct WhitenTransform {
  Tensor mean;        // (d)
  Tensor projection;  // (d, d): Lambda^{-1/2} E^T
};

/// Fits on an (n, d) matrix of descriptors. Requires n >= d + 1. Eigenvalues
/// are shrunk by 1e-6 * trace / d so rank-deficient data stays invertible.
inline WhitenTransform whiten_fit(const Tensor& descriptors) {
  if (descriptors.rank() != 2) throw ShapeError("whiten_fit: descriptors must be an (n, d) matrix");
  const std::size_t n = descriptors.extent(0), d = descriptors.extent(1);
  if (n < d + 1)
    throw DataError("whiten_fit: need at least d+1 = " + std::to_string(d + 1) + " samples, got " + std::to_string(n));
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> X(
      descriptors.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  const Eigen::VectorXd mu = X.colwise().mean();
  const Eigen::MatrixXd centered = X.rowwise() - mu.transpose();
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / double(n);
  const double lambda = 1e-6 * cov.trace() / double(d);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::VectorXd values = eig.eigenvalues().array().max(0.0) + lambda;
  const Eigen::MatrixXd P = values.array().rsqrt().matrix().asDiagonal() * eig.eigenvectors().transpose();

  WhitenTransform t{Tensor({d}), Tensor({d, d})};
  for (std::size_t i = 0; i < d; ++i) {
    t.mean[i] = mu[static_cast<Eigen::Index>(i)];
    for (std::size_t j = 0; j < d; ++j) t.projection(i, j) = P(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
  return t;
}

/// y = P (u - mu), L2-normalized unless `normalize` is false.
inline Tensor whiten_apply(const Tensor& u, const WhitenTransform& t, bool normalize = true) {
  if (u.size() != t.mean.size())
    throw ShapeError("whiten_apply: descriptor dim " + std::to_string(u.size()) + " vs transform " +
                     std::to_string(t.mean.size()));
  Tensor centered(u.shape());
  for (std::size_t i = 0; i < u.size(); ++i) centered[i] = u[i] - t.mean[i];
  Tensor y = linear(t.projection, nullptr, centered.values());
  return normalize ? l2_normalize(y) : y;
}

}  // namespace d2r
