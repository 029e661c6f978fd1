// SPDX-License-Identifier: Apache-2.0
//
// Implicitly defined functions: solve F(x, z) = 0 for z and differentiate
// z(x) through selections -B^-1 A, where [A B] is a Jacobian selection of F
// split at the parameter/variable boundary.
#pragma once

#include <cstddef>
#include <functional>
#include <string>

#include "nsid/linalg.hpp"
#include "nsid/tape.hpp"

namespace nsid {

struct FixedPointConfig {
  enum class Acceleration { none, anderson };

  std::size_t max_iterations = 10000;
  double tolerance = 1e-10;  // sup-norm of z - f(z)
  double damping = 1.0;      // (0, 1]
  Acceleration acceleration = Acceleration::none;
  std::size_t anderson_depth = 5;

  /// Throws ConfigError.
  void validate() const;
};

struct FixedPointResult {
  Vector z;
  std::size_t iterations = 0;
  double residual = 0.0;
};

using UpdateMap = std::function<Vector(const Vector&)>;

/// Damped Picard iteration z <- z + damping (f(z) - z), optionally with
/// Anderson mixing. Stops once ||z - f(z)||_inf <= tolerance; throws
/// NoConvergence after max_iterations or on a non-finite iterate.
FixedPointResult solve_fixed_point(const UpdateMap& f, const Vector& z0, const FixedPointConfig& cfg = {});

/// Same, for a tape with inputs [x; z] and output f(z, x).
FixedPointResult solve_fixed_point(const Tape& update_map, const Vector& x, const Vector& z0,
                                   const FixedPointConfig& cfg = {}, const SelectionPolicy& policy = {});

/// F : R^n x R^m -> R^m as a tape with inputs [x; z].
struct ImplicitProblem {
  ImplicitProblem(Tape residual, std::size_t n, std::size_t m);

  Tape residual;
  std::size_t n;
  std::size_t m;
  SelectionPolicy policy;
  double rcond_tol = kDefaultRcondTol;
  /// Skips the invertibility gate. Meant for reproducing what happens when
  /// the hypothesis is ignored, never for ordinary use.
  bool force_mode = false;
  /// In force mode, an exactly singular B is handled with a pseudo-inverse
  /// truncated at rcond_tol instead of raising SingularMatrix.
  bool pinv_fallback = false;
  /// In force mode, when positive, B is always inverted through a
  /// pseudo-inverse dropping singular values below this absolute cutoff.
  double pinv_abs_cutoff = 0.0;
  /// ||F(x, z)||_inf above this at the query point raises DomainError.
  /// Non-positive disables the check.
  double residual_tolerance = 1e-6;
};

struct ImplicitSelection {
  Matrix jacobian;  // m x n
  Matrix a;         // m x n block of [A B]
  Matrix b;         // m x m block
  double rcond = 0.0;
  bool gate_passed = false;
  bool pseudo_inverse = false;
  std::string policy;
};

/// -B^-1 A with the solve metadata. Throws InvertibilityFailure when the gate
/// is on and rcond(B) < rcond_tol, and SingularMatrix when B is exactly
/// singular in force mode without a pseudo-inverse fallback.
ImplicitSelection implicit_selection(const ImplicitProblem& problem, const Vector& x, const Vector& z);
Matrix implicit_jacobian_selection(const ImplicitProblem& problem, const Vector& x, const Vector& z);

/// A^-1 for A a Jacobian selection of phi at psi_y, where phi(psi_y) = y.
/// Throws DomainError when ||phi(psi_y) - y||_inf > tolerance.
Matrix inverse_jacobian_selection(const Tape& phi, const Vector& y, const Vector& psi_y,
                                  const SelectionPolicy& policy = {},
                                  double rcond_tol = kDefaultRcondTol, double tolerance = 1e-8);

struct BranchReport {
  std::size_t kinks = 0;
  std::size_t branches = 0;
  std::size_t invertible = 0;
  double min_rcond = 0.0;
  /// False when there were more kinks than the enumeration budget allows.
  bool enumerated = false;
  bool all_invertible() const { return enumerated && invertible == branches; }
};

/// Checks invertibility of B for every branch Jacobian at (x, z): each scalar
/// kink of the residual tape (relu, abs, max/min ties, clamp and
/// soft-threshold boundaries) is set to either end of its Clarke interval.
/// Points with a norm at zero are not enumerated. Intermediate selections
/// are not covered, so this is a vertex check.
BranchReport all_branch_invertibility(const ImplicitProblem& problem, const Vector& x, const Vector& z,
                                      std::size_t max_kinks = 16);

}  // namespace nsid
