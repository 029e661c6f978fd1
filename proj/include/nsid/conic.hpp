// SPDX-License-Identifier: Apache-2.0
//
// Conic programs
//   (P) min c^T x  s.t.  A x + s = b, s in K
//   (D) min b^T y  s.t.  A^T y + c = 0, y in K*
// solved and differentiated through the residual map
//   N(z) = (Q - I) Pi z + V + z,   z = (u, v) in R^n x R^m,
// where Pi projects onto R^n x K*, Q = [[0, A^T], [-A, 0]] and V = (c, b).
// The solution is recovered as phi(z) = (u, P_K*(v), P_K*(v) - v).
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "json.hpp"
#include "nsid/linalg.hpp"
#include "nsid/tape.hpp"

namespace nsid {

enum class ConeKind { zero, free, nonneg, soc };

std::string_view cone_kind_name(ConeKind kind);

struct ConeFactor {
  ConeKind kind;
  std::size_t dim;
};

/// Cartesian product of cone factors. Second-order cone blocks are laid out
/// as (t, u) with the scalar first: {(t, u) : ||u|| <= t}.
class Cone {
 public:
  Cone() = default;
  explicit Cone(std::vector<ConeFactor> factors);

  static Cone nonneg(std::size_t d) { return Cone({{ConeKind::nonneg, d}}); }
  static Cone soc(std::size_t d) { return Cone({{ConeKind::soc, d}}); }

  const std::vector<ConeFactor>& factors() const noexcept { return factors_; }
  std::size_t dim() const noexcept { return dim_; }
  /// Zero and Free swap; the orthant and second-order cones are self-dual.
  Cone dual() const;

 private:
  std::vector<ConeFactor> factors_;
  std::size_t dim_ = 0;
};

/// Euclidean projection onto K.
Vector project_cone(const Cone& k, const Vector& v);
/// Projection onto the polar cone, computed as -P_K*(-v).
Vector project_polar(const Cone& k, const Vector& v);

/// Block-diagonal selection in the Clarke Jacobian of P_K at v.
/// Orthant kinks use policy.relu_at_zero, or policy.kink_positions in
/// coordinate order when given (second-order apexes count as one kink). On a second-order cone the
/// selection is I on the cone boundary (the limit from the interior), 0 on
/// the polar boundary, and relu_at_zero * I at the apex.
Matrix cone_projection_jacobian_selection(const Cone& k, const Vector& v, const SelectionPolicy& policy = {});

bool in_cone(const Cone& k, const Vector& v, double tol = 1e-10);

struct MoreauReport {
  double reconstruction_error = 0.0;  // ||v - P_K(v) - P_K°(v)||_inf
  double inner_product = 0.0;         // |P_K(v)^T P_K°(v)|
  bool ok = false;
};

MoreauReport moreau_check(const Cone& k, const Vector& v, double tol = 1e-10);

struct ConicProblem {
  ConicProblem(Matrix a, Vector b, Vector c, Cone k);

  Matrix a;
  Vector b;
  Vector c;
  Cone cone;

  std::size_t n() const { return static_cast<std::size_t>(a.cols()); }
  std::size_t m() const { return static_cast<std::size_t>(a.rows()); }
  /// Size of the flattened parameter vector (A column-major, then b, then c).
  std::size_t num_params() const { return m() * n() + m() + n(); }
  Vector params() const;
  static ConicProblem from_params(const Vector& p, std::size_t m, std::size_t n, const Cone& k);
};

ConicProblem conic_problem_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const ConicProblem& problem);

Vector residual_map(const Vector& z, const ConicProblem& problem);

struct ResidualJacobians {
  Matrix u;  // dN/dz, N x N
  Matrix v;  // dN/d(A, b, c), N x (mn + m + n)
};

ResidualJacobians residual_map_jacobians(const Vector& z, const ConicProblem& problem,
                                         const SelectionPolicy& policy = {});

struct PrimalDual {
  Vector x;
  Vector y;
  Vector s;
};

PrimalDual phi(const Vector& z, const Cone& k);
/// [[I, 0], [0, D], [0, D - I]] with D a selection of J_{P_K*}(v).
Matrix phi_jacobian_selection(const Vector& z, const Cone& k, const SelectionPolicy& policy = {});

struct ConicSolverConfig {
  std::size_t max_iterations = 5000;
  double tolerance = 1e-10;
  double armijo = 1e-4;
  double fallback_step = 0.5;
  SelectionPolicy policy;
};

struct ConicSolution {
  Vector z;
  PrimalDual sol;
  std::size_t iterations = 0;
  double residual = 0.0;
  std::size_t fallback_steps = 0;
};

/// Semismooth Newton on N with an Armijo line search on ||N||^2. Where the
/// selection is singular or the line search stalls, a damped step
/// z <- z - tau (I + Q)^-1 N(z) is taken instead; this is relaxed
/// Douglas-Rachford on the monotone inclusion behind N, so it makes progress
/// from anywhere on a solvable problem.
/// Throws NoConvergence; infeasible or unbounded problems end up there.
ConicSolution solve_residual(const ConicProblem& problem, const Vector& z0 = Vector(),
                             const ConicSolverConfig& cfg = {});

struct KktReport {
  double dual_residual = 0.0;     // ||A^T y + c||_inf
  double primal_residual = 0.0;   // ||A x + s - b||_inf
  double slack_violation = 0.0;   // ||s - P_K(s)||_inf
  double dual_violation = 0.0;    // ||y - P_K*(y)||_inf
  double complementarity = 0.0;   // |s^T y|
  double max() const;
};

KktReport kkt_report(const ConicProblem& problem, const PrimalDual& sol);

struct SolSelection {
  Matrix jacobian;  // (n + 2m) x (mn + m + n), rows ordered x, y, s
  double rcond = 0.0;
};

/// J_phi(z) * (-U^-1 V) for [U V] a selection of J_N at z. Throws
/// InvertibilityFailure when rcond(U) < rcond_tol and DomainError when
/// ||N(z)||_inf > residual_tol.
SolSelection sol_jacobian_selection(const ConicProblem& problem, const Vector& z, const SelectionPolicy& policy = {},
                                    double rcond_tol = kDefaultRcondTol, double residual_tol = 1e-6);

struct ConicBranchReport {
  std::size_t kinks = 0;
  std::size_t branches = 0;
  std::size_t invertible = 0;
  bool enumerated = false;
};

/// Enumerates both ends of every exact-zero orthant coordinate of v and
/// checks invertibility of U. Cones with a second-order factor are not
/// enumerated.
ConicBranchReport all_branch_invertibility(const ConicProblem& problem, const Vector& z,
                                           double rcond_tol = kDefaultRcondTol, std::size_t max_kinks = 16);

}  // namespace nsid
