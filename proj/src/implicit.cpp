// SPDX-License-Identifier: Apache-2.0
#include "nsid/implicit.hpp"

#include <algorithm>
#include <deque>
#include <limits>

#include "nsid/errors.hpp"

namespace nsid {

void FixedPointConfig::validate() const {
  if (!(tolerance > 0.0)) throw ConfigError("fixed point: tolerance must be positive");
  if (!(damping > 0.0 && damping <= 1.0)) throw ConfigError("fixed point: damping must lie in (0, 1]");
  if (max_iterations == 0) throw ConfigError("fixed point: max_iterations must be positive");
  if (acceleration == Acceleration::anderson && anderson_depth == 0) {
    throw ConfigError("fixed point: Anderson depth must be positive");
  }
}

FixedPointResult solve_fixed_point(const UpdateMap& f, const Vector& z0, const FixedPointConfig& cfg) {
  cfg.validate();
  const double inf = std::numeric_limits<double>::infinity();
  const bool anderson = cfg.acceleration == FixedPointConfig::Acceleration::anderson;
  const double beta = cfg.damping;

  Vector z = z0;
  std::deque<Vector> zs, gs;
  double r = inf;
  for (std::size_t k = 0; k <= cfg.max_iterations; ++k) {
    if (!z.allFinite()) throw NoConvergence(k, inf, "solve_fixed_point");
    const Vector fz = f(z);
    if (fz.size() != z.size()) throw ConfigError("solve_fixed_point: update map changes dimension");
    if (!fz.allFinite()) throw NoConvergence(k, inf, "solve_fixed_point");
    const Vector g = fz - z;
    r = g.lpNorm<Eigen::Infinity>();
    if (r <= cfg.tolerance) return {z, k, r};
    if (k == cfg.max_iterations) break;

    Vector next = z + beta * g;
    if (anderson && !zs.empty()) {
      const auto h = static_cast<Eigen::Index>(zs.size());
      Matrix dz(z.size(), h), dg(z.size(), h);
      for (Eigen::Index j = 0; j < h; ++j) {
        const std::size_t i = static_cast<std::size_t>(j);
        const Vector& zn = (i + 1 < zs.size()) ? zs[i + 1] : z;
        const Vector& gn = (i + 1 < gs.size()) ? gs[i + 1] : g;
        dz.col(j) = zn - zs[i];
        dg.col(j) = gn - gs[i];
      }
      const Vector gamma = dg.completeOrthogonalDecomposition().solve(g);
      Vector mixed = z + beta * g - (dz + beta * dg) * gamma;
      if (mixed.allFinite()) next = std::move(mixed);
    }
    if (anderson) {
      zs.push_back(z);
      gs.push_back(g);
      while (zs.size() > cfg.anderson_depth) {
        zs.pop_front();
        gs.pop_front();
      }
    }
    z = std::move(next);
  }
  throw NoConvergence(cfg.max_iterations, r, "solve_fixed_point");
}

FixedPointResult solve_fixed_point(const Tape& update_map, const Vector& x, const Vector& z0,
                                   const FixedPointConfig& cfg, const SelectionPolicy& policy) {
  const auto n = x.size();
  const auto m = z0.size();
  if (update_map.num_inputs() != static_cast<std::size_t>(n + m) ||
      update_map.num_outputs() != static_cast<std::size_t>(m)) {
    throw ConfigError("solve_fixed_point: update tape must map [x; z] to a vector of z's size");
  }
  Vector xz(n + m);
  xz.head(n) = x;
  return solve_fixed_point(
      [&](const Vector& z) {
        xz.tail(m) = z;
        return evaluate(update_map, xz, policy);
      },
      z0, cfg);
}

ImplicitProblem::ImplicitProblem(Tape residual_tape, std::size_t n_, std::size_t m_)
    : residual(std::move(residual_tape)), n(n_), m(m_) {
  if (n == 0 || m == 0) throw ConfigError("ImplicitProblem: n and m must be positive");
  if (residual.num_inputs() != n + m) throw ConfigError("ImplicitProblem: residual must take n + m inputs");
  if (residual.num_outputs() != m) throw ConfigError("ImplicitProblem: residual must have m outputs");
}

namespace {

Vector join(const Vector& x, const Vector& z) {
  Vector xz(x.size() + z.size());
  xz << x, z;
  return xz;
}

void check_point(const ImplicitProblem& p, const Vector& x, const Vector& z) {
  if (static_cast<std::size_t>(x.size()) != p.n || static_cast<std::size_t>(z.size()) != p.m) {
    throw ConfigError("implicit: point does not match the (n, m) split");
  }
}

}  // namespace

ImplicitSelection implicit_selection(const ImplicitProblem& p, const Vector& x, const Vector& z) {
  check_point(p, x, z);
  validate(p.policy);
  const Vector xz = join(x, z);
  const ForwardResult fwd = forward(p.residual, xz, p.policy);
  if (p.residual_tolerance > 0.0) {
    const double res = fwd.y.lpNorm<Eigen::Infinity>();
    if (!(res <= p.residual_tolerance)) {
      throw DomainError("implicit_jacobian_selection: ||F(x, z)|| = " + std::to_string(res) +
                        " exceeds the residual tolerance");
    }
  }
  const Matrix jac = jacobian_selection(p.residual, fwd, p.policy).matrix;
  const auto n = static_cast<Eigen::Index>(p.n);
  const auto m = static_cast<Eigen::Index>(p.m);

  ImplicitSelection out;
  out.a = jac.leftCols(n);
  out.b = jac.rightCols(m);
  out.policy = p.policy.name;
  const LuFactorization lu(out.b);
  out.rcond = lu.rcond();
  out.gate_passed = out.rcond >= p.rcond_tol && out.rcond > 0.0;

  if (!p.force_mode) {
    if (!out.gate_passed) throw InvertibilityFailure(out.rcond, p.rcond_tol, "implicit_jacobian_selection", out.b);
    out.jacobian = lu.solve(-out.a, p.rcond_tol);
    return out;
  }
  if (p.pinv_abs_cutoff > 0.0) {
    out.jacobian = pseudo_inverse_solve(out.b, -out.a, p.rcond_tol, p.pinv_abs_cutoff);
    out.pseudo_inverse = true;
  } else if (lu.singular()) {
    if (!p.pinv_fallback) throw SingularMatrix(out.rcond, p.rcond_tol);
    out.jacobian = pseudo_inverse_solve(out.b, -out.a, p.rcond_tol);
    out.pseudo_inverse = true;
  } else {
    out.jacobian = lu.solve(-out.a, 0.0);
  }
  return out;
}

Matrix implicit_jacobian_selection(const ImplicitProblem& problem, const Vector& x, const Vector& z) {
  return implicit_selection(problem, x, z).jacobian;
}

Matrix inverse_jacobian_selection(const Tape& phi, const Vector& y, const Vector& psi_y,
                                  const SelectionPolicy& policy, double rcond_tol, double tolerance) {
  if (phi.num_inputs() != phi.num_outputs()) {
    throw ConfigError("inverse_jacobian_selection: phi must be square");
  }
  validate(policy);
  const ForwardResult fwd = forward(phi, psi_y, policy);
  if (fwd.y.size() != y.size()) throw ConfigError("inverse_jacobian_selection: y has the wrong size");
  const double res = (fwd.y - y).lpNorm<Eigen::Infinity>();
  if (!(res <= tolerance)) {
    throw DomainError("inverse_jacobian_selection: phi(psi_y) differs from y by " + std::to_string(res));
  }
  const Matrix a = jacobian_selection(phi, fwd, policy).matrix;
  const LuFactorization lu(a);
  if (lu.rcond() < rcond_tol || lu.singular()) {
    throw InvertibilityFailure(lu.rcond(), rcond_tol, "inverse_jacobian_selection", a);
  }
  return lu.solve(Matrix::Identity(a.rows(), a.cols()), rcond_tol);
}

BranchReport all_branch_invertibility(const ImplicitProblem& p, const Vector& x, const Vector& z,
                                      std::size_t max_kinks) {
  check_point(p, x, z);
  const Vector xz = join(x, z);
  SelectionPolicy policy = p.policy;
  policy.random_seed.reset();
  policy.kink_positions.clear();
  const ForwardResult fwd = forward(p.residual, xz, policy);

  BranchReport rep;
  rep.kinks = jacobian_selection(p.residual, fwd, policy).kinks;
  if (rep.kinks > max_kinks || rep.kinks >= 63) return rep;
  rep.enumerated = true;
  rep.branches = std::size_t{1} << rep.kinks;
  rep.min_rcond = std::numeric_limits<double>::infinity();
  const auto m = static_cast<Eigen::Index>(p.m);
  policy.kink_positions.assign(rep.kinks, 0.0);
  for (std::size_t mask = 0; mask < rep.branches; ++mask) {
    for (std::size_t k = 0; k < rep.kinks; ++k) policy.kink_positions[k] = ((mask >> k) & 1U) ? 1.0 : 0.0;
    const Matrix b = jacobian_selection(p.residual, fwd, policy).matrix.rightCols(m);
    const double rc = rcond_estimate(b);
    rep.min_rcond = std::min(rep.min_rcond, rc);
    if (rc >= p.rcond_tol && rc > 0.0) ++rep.invertible;
  }
  return rep;
}

}  // namespace nsid
