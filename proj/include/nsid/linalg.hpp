// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <span>
#include <vector>

namespace nsid {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr double kDefaultRcondTol = 1e-12;

/// True when every entry is finite.
bool all_finite(const Matrix& a);
bool all_finite(const Vector& v);

/// LU factorization with partial pivoting of a square matrix.
///
/// The reciprocal condition number is computed in the 1-norm from the
/// explicit inverse, which is affordable at the sizes this library targets.
/// An exactly singular input (a zero pivot) has rcond() == 0.
class LuFactorization {
 public:
  explicit LuFactorization(const Matrix& a);

  Eigen::Index size() const noexcept { return lu_.rows(); }
  double rcond() const noexcept { return rcond_; }
  bool singular() const noexcept { return rcond_ == 0.0; }

  /// Solves A X = B. Throws SingularMatrix when rcond() < rcond_tol.
  Matrix solve(const Matrix& b, double rcond_tol = kDefaultRcondTol) const;
  /// Solves A^T X = B.
  Matrix solve_transpose(const Matrix& b, double rcond_tol = kDefaultRcondTol) const;

  /// P^T L U, for checking the factorization.
  Matrix reconstruct() const;

 private:
  void check(double rcond_tol) const;

  Eigen::PartialPivLU<Matrix> lu_;
  double rcond_ = 0.0;
};

/// Solves A X = B with partial-pivoted LU.
Matrix lu_solve(const Matrix& a, const Matrix& b, double rcond_tol = kDefaultRcondTol);

/// Estimate of 1 / (||A||_1 ||A^-1||_1); zero for exactly singular A.
double rcond_estimate(const Matrix& a);

/// Smallest eigenvalue of a symmetric matrix. Throws NotSymmetric when
/// max |A - A^T| exceeds sym_tol.
double symmetric_eig_min(const Matrix& a, double sym_tol = 1e-10);

/// Largest singular value.
double spectral_norm(const Matrix& a);

/// Dimension of the affine hull of a set of equally shaped matrices.
/// Singular values below tol * sigma_max are treated as zero.
std::size_t affine_dimension(std::span<const Matrix> points, double tol = 1e-10);

/// Minimum-norm least-squares solution of A X = B through a truncated SVD.
/// Singular values below max(rel_cutoff * sigma_max, abs_cutoff) are dropped.
Matrix pseudo_inverse_solve(const Matrix& a, const Matrix& b, double rel_cutoff = kDefaultRcondTol,
                            double abs_cutoff = 0.0);

}  // namespace nsid
