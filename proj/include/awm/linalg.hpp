#pragma once

// Symmetric eigendecomposition, PCA and Fisher LDA on dense Eigen matrices.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace awm {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Eigenpairs sorted by descending eigenvalue; eigenvectors are columns.
template <typename Scalar>
struct SymmetricEigen {
  VectorX<Scalar> values;
  MatrixX<Scalar> vectors;
  int sweeps = 0;
};

/// Cyclic Jacobi rotations. Converges quadratically; each sweep costs O(n^3).
template <typename Derived>
SymmetricEigen<typename Derived::Scalar> jacobi_eigen(const Eigen::MatrixBase<Derived>& input, int max_sweeps = 100) {
  using Scalar = typename Derived::Scalar;
  const Eigen::Index n = input.rows();
  if (input.cols() != n) throw std::invalid_argument("jacobi_eigen: matrix must be square");
  MatrixX<Scalar> a = (input + input.transpose()) / Scalar(2);
  MatrixX<Scalar> v = MatrixX<Scalar>::Identity(n, n);
  const Scalar tiny = std::numeric_limits<Scalar>::epsilon() * std::max(a.norm(), std::numeric_limits<Scalar>::min());
  SymmetricEigen<Scalar> out;
  for (; out.sweeps < max_sweeps; ++out.sweeps) {
    Scalar off = 0;
    for (Eigen::Index q = 1; q < n; ++q) off += a.col(q).head(q).squaredNorm();
    if (std::sqrt(off) <= tiny) break;
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const Scalar apq = a(p, q);
        if (std::abs(apq) <= std::numeric_limits<Scalar>::min()) continue;
        const Scalar theta = (a(q, q) - a(p, p)) / (Scalar(2) * apq);
        const Scalar t = (theta >= 0 ? Scalar(1) : Scalar(-1)) / (std::abs(theta) + std::sqrt(theta * theta + Scalar(1)));
        const Scalar c = Scalar(1) / std::sqrt(t * t + Scalar(1));
        const Scalar s = t * c;
        // A <- J^T A J with J = [[c, s], [-s, c]] on the (p, q) plane.
        VectorX<Scalar> cp = a.col(p);
        a.col(p) = c * cp - s * a.col(q);
        a.col(q) = s * cp + c * a.col(q);
        Eigen::Matrix<Scalar, 1, Eigen::Dynamic> rp = a.row(p);
        a.row(p) = c * rp - s * a.row(q);
        a.row(q) = s * rp + c * a.row(q);
        a(p, q) = a(q, p) = Scalar(0);
        VectorX<Scalar> vp = v.col(p);
        v.col(p) = c * vp - s * v.col(q);
        v.col(q) = s * vp + c * v.col(q);
      }
    }
  }
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index i, Eigen::Index j) { return a(i, i) > a(j, j); });
  out.values.resize(n);
  out.vectors.resize(n, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    out.values(k) = a(order[static_cast<std::size_t>(k)], order[static_cast<std::size_t>(k)]);
    out.vectors.col(k) = v.col(order[static_cast<std::size_t>(k)]);
  }
  return out;
}

/// Jacobi for matrices up to kJacobiLimit rows; Householder tridiagonalization + QR above it.
inline constexpr Eigen::Index kJacobiLimit = 400;

template <typename Derived>
SymmetricEigen<typename Derived::Scalar> symmetric_eigen(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  if (m.rows() <= kJacobiLimit) return jacobi_eigen(m);
  Eigen::SelfAdjointEigenSolver<MatrixX<Scalar>> solver(MatrixX<Scalar>((m + m.transpose()) / Scalar(2)));
  SymmetricEigen<Scalar> out;
  out.values = solver.eigenvalues().reverse();
  out.vectors = solver.eigenvectors().rowwise().reverse();
  return out;
}

/// Flips each column so its largest-magnitude component is positive.
template <typename Scalar>
void canonicalize_signs(MatrixX<Scalar>& basis) {
  for (Eigen::Index j = 0; j < basis.cols(); ++j) {
    Eigen::Index idx = 0;
    basis.col(j).cwiseAbs().maxCoeff(&idx);
    if (basis(idx, j) < Scalar(0)) basis.col(j) *= Scalar(-1);
  }
}

template <typename Scalar>
struct PcaModel {
  VectorX<Scalar> mean;      // D
  MatrixX<Scalar> basis;     // D x p, orthonormal columns
  VectorX<Scalar> variances; // p, descending
  /// Components beyond the data rank; they span zero-variance directions.
  Eigen::Index zero_variance_components = 0;

  MatrixX<Scalar> project(const MatrixX<Scalar>& x) const {
    return (x.rowwise() - mean.transpose()) * basis;
  }
};

/// Top-p principal directions of the rows of x (n x D). Uses the n x n Gram matrix when n < D.
template <typename Scalar>
PcaModel<Scalar> fit_pca(const MatrixX<Scalar>& x, Eigen::Index p) {
  const Eigen::Index n = x.rows(), d = x.cols();
  if (p < 1 || n <= p) throw std::invalid_argument("fit_pca: need n > p >= 1 (n=" + std::to_string(n) + ", p=" + std::to_string(p) + ")");
  if (p > d) throw std::invalid_argument("fit_pca: p exceeds feature dimension");
  PcaModel<Scalar> model;
  model.mean = x.colwise().mean().transpose();
  const MatrixX<Scalar> centered = x.rowwise() - model.mean.transpose();
  model.basis.resize(d, p);
  model.variances.resize(p);
  const Scalar denom = Scalar(n - 1);
  if (n >= d) {
    auto eig = symmetric_eigen(MatrixX<Scalar>(centered.transpose() * centered / denom));
    model.basis = eig.vectors.leftCols(p);
    model.variances = eig.values.head(p).cwiseMax(Scalar(0));
  } else {
    auto eig = symmetric_eigen(MatrixX<Scalar>(centered * centered.transpose() / denom));
    const Scalar floor = std::numeric_limits<Scalar>::epsilon() * std::max(eig.values(0), Scalar(1)) * Scalar(n);
    Eigen::Index k = 0;
    for (; k < p && eig.values(k) > floor; ++k) {
      VectorX<Scalar> dir = centered.transpose() * eig.vectors.col(k);
      model.basis.col(k) = dir.normalized();
      model.variances(k) = eig.values(k);
    }
    // Complete with unit directions orthogonalized against the span found so far.
    for (Eigen::Index e = 0; k < p && e < d; ++e) {
      VectorX<Scalar> dir = VectorX<Scalar>::Unit(d, e);
      for (int pass = 0; pass < 2; ++pass) dir -= model.basis.leftCols(k) * (model.basis.leftCols(k).transpose() * dir);
      if (dir.norm() < Scalar(1e-6)) continue;
      model.basis.col(k) = dir.normalized();
      model.variances(k) = Scalar(0);
      ++k;
    }
  }
  for (Eigen::Index k = 0; k < p; ++k)
    if (model.variances(k) <= std::numeric_limits<Scalar>::epsilon() * std::max(model.variances(0), Scalar(1)))
      ++model.zero_variance_components;
  canonicalize_signs(model.basis);
  return model;
}

template <typename Scalar>
struct LdaProjection {
  MatrixX<Scalar> basis;        // p x d
  VectorX<Scalar> eigenvalues;  // d generalized eigenvalues, descending
  Scalar regularization = 0;    // epsilon added to the within-class scatter diagonal
};

template <typename Scalar>
struct ScatterMatrices {
  MatrixX<Scalar> within;
  MatrixX<Scalar> between;
};

template <typename Scalar>
ScatterMatrices<Scalar> scatter_matrices(const MatrixX<Scalar>& x, std::span<const int> labels) {
  const Eigen::Index p = x.cols();
  std::map<int, std::vector<Eigen::Index>> groups;
  for (Eigen::Index i = 0; i < x.rows(); ++i) groups[labels[static_cast<std::size_t>(i)]].push_back(i);
  const VectorX<Scalar> mu = x.colwise().mean().transpose();
  ScatterMatrices<Scalar> s{MatrixX<Scalar>::Zero(p, p), MatrixX<Scalar>::Zero(p, p)};
  for (const auto& [label, rows] : groups) {
    VectorX<Scalar> mc = VectorX<Scalar>::Zero(p);
    for (auto r : rows) mc += x.row(r).transpose();
    mc /= Scalar(rows.size());
    for (auto r : rows) {
      const VectorX<Scalar> dv = x.row(r).transpose() - mc;
      s.within.noalias() += dv * dv.transpose();
    }
    s.between.noalias() += Scalar(rows.size()) * (mc - mu) * (mc - mu).transpose();
  }
  return s;
}

/// Fisher discriminant directions: whiten the regularized within-class scatter, then take the
/// top-d eigenvectors of the whitened between-class scatter.
template <typename Scalar>
LdaProjection<Scalar> fit_lda(const MatrixX<Scalar>& x, std::span<const int> labels, Eigen::Index d) {
  if (static_cast<Eigen::Index>(labels.size()) != x.rows()) throw std::invalid_argument("fit_lda: label count mismatch");
  std::map<int, int> counts;
  for (int l : labels) ++counts[l];
  if (counts.size() < 2) throw std::invalid_argument("fit_lda: need at least 2 classes");
  for (const auto& [label, c] : counts) {
    if (c < 2) throw std::invalid_argument("fit_lda: class " + std::to_string(label) + " has fewer than 2 samples");
  }
  const Eigen::Index p = x.cols();
  if (d < 1 || d > p || d > static_cast<Eigen::Index>(counts.size()) - 1) {
    throw std::invalid_argument("fit_lda: target dimension " + std::to_string(d) + " must be in [1, min(p, classes-1)]");
  }
  auto s = scatter_matrices(x, labels);
  LdaProjection<Scalar> out;
  out.regularization = Scalar(1e-6) * s.within.trace() / Scalar(p);
  if (!(out.regularization > Scalar(0))) out.regularization = std::numeric_limits<Scalar>::epsilon();
  s.within.diagonal().array() += out.regularization;
  auto w_eig = symmetric_eigen(s.within);
  const MatrixX<Scalar> whiten = w_eig.vectors * w_eig.values.cwiseMax(out.regularization).cwiseSqrt().cwiseInverse().asDiagonal();
  auto b_eig = symmetric_eigen(MatrixX<Scalar>(whiten.transpose() * s.between * whiten));
  out.basis = whiten * b_eig.vectors.leftCols(d);
  out.eigenvalues = b_eig.values.head(d);
  canonicalize_signs(out.basis);
  return out;
}

}  // namespace awm
