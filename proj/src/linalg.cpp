// SPDX-License-Identifier: Apache-2.0
#include "nsid/linalg.hpp"

#include <algorithm>
#include <cmath>

#include "nsid/errors.hpp"

namespace nsid {

namespace {

double norm1(const Matrix& a) {
  if (a.size() == 0) return 0.0;
  return a.cwiseAbs().colwise().sum().maxCoeff();
}

void require_square(const Matrix& a, const char* what) {
  if (a.rows() != a.cols()) {
    throw ConfigError(std::string(what) + ": matrix must be square, got " + std::to_string(a.rows()) +
                      "x" + std::to_string(a.cols()));
  }
}

}  // namespace

bool all_finite(const Matrix& a) { return a.allFinite(); }
bool all_finite(const Vector& v) { return v.allFinite(); }

LuFactorization::LuFactorization(const Matrix& a) {
  require_square(a, "LuFactorization");
  if (a.rows() == 0) {
    rcond_ = 1.0;
    return;
  }
  if (!a.allFinite()) {
    rcond_ = 0.0;
    return;
  }
  lu_.compute(a);
  const auto& packed = lu_.matrixLU();
  for (Eigen::Index i = 0; i < packed.rows(); ++i) {
    if (packed(i, i) == 0.0) {
      rcond_ = 0.0;
      return;
    }
  }
  const Matrix inv = lu_.inverse();
  if (!inv.allFinite()) {
    rcond_ = 0.0;
    return;
  }
  const double denom = norm1(a) * norm1(inv);
  rcond_ = (denom > 0.0 && std::isfinite(denom)) ? 1.0 / denom : 0.0;
}

void LuFactorization::check(double rcond_tol) const {
  if (rcond_ == 0.0 || rcond_ < rcond_tol) throw SingularMatrix(rcond_, rcond_tol);
}

Matrix LuFactorization::solve(const Matrix& b, double rcond_tol) const {
  if (b.rows() != size()) throw ConfigError("lu_solve: right-hand side row count mismatch");
  check(rcond_tol);
  if (size() == 0) return b;
  return lu_.solve(b);
}

Matrix LuFactorization::solve_transpose(const Matrix& b, double rcond_tol) const {
  if (b.rows() != size()) throw ConfigError("lu_solve: right-hand side row count mismatch");
  check(rcond_tol);
  if (size() == 0) return b;
  return lu_.transpose().solve(b);
}

Matrix LuFactorization::reconstruct() const {
  if (size() == 0) return Matrix(0, 0);
  return lu_.reconstructedMatrix();
}

Matrix lu_solve(const Matrix& a, const Matrix& b, double rcond_tol) {
  return LuFactorization(a).solve(b, rcond_tol);
}

double rcond_estimate(const Matrix& a) { return LuFactorization(a).rcond(); }

double symmetric_eig_min(const Matrix& a, double sym_tol) {
  require_square(a, "symmetric_eig_min");
  if (a.rows() == 0) throw ConfigError("symmetric_eig_min: empty matrix");
  const double asym = (a - a.transpose()).cwiseAbs().maxCoeff();
  if (!(asym <= sym_tol)) {
    throw NotSymmetric("symmetric_eig_min: max |A - A^T| = " + std::to_string(asym));
  }
  const Matrix sym = 0.5 * (a + a.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym, Eigen::EigenvaluesOnly);
  return eig.eigenvalues().minCoeff();
}

double spectral_norm(const Matrix& a) {
  if (a.size() == 0) return 0.0;
  Eigen::JacobiSVD<Matrix> svd(a);
  return svd.singularValues()(0);
}

std::size_t affine_dimension(std::span<const Matrix> points, double tol) {
  if (points.empty()) throw ConfigError("affine_dimension: need at least one point");
  const Matrix& base = points.front();
  const Eigen::Index len = base.size();
  if (points.size() == 1 || len == 0) return 0;
  Matrix diffs(len, static_cast<Eigen::Index>(points.size() - 1));
  for (std::size_t k = 1; k < points.size(); ++k) {
    const Matrix& p = points[k];
    if (p.rows() != base.rows() || p.cols() != base.cols()) {
      throw ConfigError("affine_dimension: points must share a shape");
    }
    const Matrix d = p - base;
    diffs.col(static_cast<Eigen::Index>(k - 1)) = d.reshaped();
  }
  Eigen::JacobiSVD<Matrix> svd(diffs);
  const Vector& sv = svd.singularValues();
  if (sv.size() == 0 || sv(0) == 0.0) return 0;
  const double cutoff = tol * sv(0);
  return static_cast<std::size_t>((sv.array() > cutoff).count());
}

Matrix pseudo_inverse_solve(const Matrix& a, const Matrix& b, double rel_cutoff, double abs_cutoff) {
  if (a.rows() != b.rows()) throw ConfigError("pseudo_inverse_solve: row count mismatch");
  Matrix out = Matrix::Zero(a.cols(), b.cols());
  if (a.size() == 0) return out;
  Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& sv = svd.singularValues();
  if (sv.size() == 0) return out;
  const double cutoff = std::max(rel_cutoff * sv(0), abs_cutoff);
  const Matrix utb = svd.matrixU().transpose() * b;
  Matrix scaled = Matrix::Zero(sv.size(), b.cols());
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    if (sv(i) > cutoff && sv(i) > 0.0) scaled.row(i) = utb.row(i) / sv(i);
  }
  out = svd.matrixV() * scaled;
  return out;
}

}  // namespace nsid
