// SPDX-License-Identifier: Apache-2.0
#include "nsid/conic.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "nsid/errors.hpp"
#include "nsid/tape_json.hpp"

namespace nsid {

namespace {

using Index = Eigen::Index;

// Hands out kink values in coordinate order, honoring kink_positions.
class KinkCursor {
 public:
  explicit KinkCursor(const SelectionPolicy& p) : p_(p) {}
  double next() {
    const std::size_t k = count_++;
    if (k < p_.kink_positions.size()) return p_.kink_positions[k];
    return p_.relu_at_zero;
  }
  std::size_t count() const { return count_; }

 private:
  const SelectionPolicy& p_;
  std::size_t count_ = 0;
};

Vector project_soc(const Vector& v) {
  const double t = v(0);
  const Vector u = v.tail(v.size() - 1);
  const double r = u.norm();
  if (r <= t) return v;
  if (r <= -t) return Vector::Zero(v.size());
  Vector out(v.size());
  const double a = 0.5 * (t + r);
  out(0) = a;
  out.tail(v.size() - 1) = (a / r) * u;
  return out;
}

Matrix soc_jacobian(const Vector& v, KinkCursor& kinks) {
  const Index d = v.size();
  const double t = v(0);
  const Vector u = v.tail(d - 1);
  const double r = u.norm();
  if (r == 0.0 && t == 0.0) return kinks.next() * Matrix::Identity(d, d);
  if (r <= t) return Matrix::Identity(d, d);
  if (r <= -t) return Matrix::Zero(d, d);
  const Vector w = u / r;
  Matrix j(d, d);
  j(0, 0) = 1.0;
  j.block(0, 1, 1, d - 1) = w.transpose();
  j.block(1, 0, d - 1, 1) = w;
  j.block(1, 1, d - 1, d - 1) =
      (1.0 + t / r) * Matrix::Identity(d - 1, d - 1) - (t / r) * w * w.transpose();
  return 0.5 * j;
}

void check_dim(const Cone& k, const Vector& v, const char* what) {
  if (static_cast<std::size_t>(v.size()) != k.dim()) {
    throw ConfigError(std::string(what) + ": vector has size " + std::to_string(v.size()) + ", cone has dimension " +
                      std::to_string(k.dim()));
  }
}

Matrix projection_jacobian(const Cone& k, const Vector& v, KinkCursor& kinks) {
  const auto dim = static_cast<Index>(k.dim());
  Matrix j = Matrix::Zero(dim, dim);
  Index off = 0;
  for (const ConeFactor& f : k.factors()) {
    const auto d = static_cast<Index>(f.dim);
    switch (f.kind) {
      case ConeKind::zero:
        break;
      case ConeKind::free:
        j.block(off, off, d, d).setIdentity();
        break;
      case ConeKind::nonneg:
        for (Index i = 0; i < d; ++i) {
          const double x = v(off + i);
          j(off + i, off + i) = x > 0.0 ? 1.0 : (x < 0.0 ? 0.0 : kinks.next());
        }
        break;
      case ConeKind::soc:
        j.block(off, off, d, d) = soc_jacobian(v.segment(off, d), kinks);
        break;
    }
    off += d;
  }
  return j;
}

}  // namespace

std::string_view cone_kind_name(ConeKind kind) {
  switch (kind) {
    case ConeKind::zero: return "zero";
    case ConeKind::free: return "free";
    case ConeKind::nonneg: return "nonneg";
    case ConeKind::soc: return "soc";
  }
  return "?";
}

Cone::Cone(std::vector<ConeFactor> factors) : factors_(std::move(factors)) {
  for (const ConeFactor& f : factors_) {
    if (f.dim == 0) throw ConfigError("cone factors must have positive dimension");
    dim_ += f.dim;
  }
}

Cone Cone::dual() const {
  std::vector<ConeFactor> out = factors_;
  for (ConeFactor& f : out) {
    if (f.kind == ConeKind::zero) {
      f.kind = ConeKind::free;
    } else if (f.kind == ConeKind::free) {
      f.kind = ConeKind::zero;
    }
  }
  return Cone(std::move(out));
}

Vector project_cone(const Cone& k, const Vector& v) {
  check_dim(k, v, "project_cone");
  Vector out(v.size());
  Index off = 0;
  for (const ConeFactor& f : k.factors()) {
    const auto d = static_cast<Index>(f.dim);
    switch (f.kind) {
      case ConeKind::zero: out.segment(off, d).setZero(); break;
      case ConeKind::free: out.segment(off, d) = v.segment(off, d); break;
      case ConeKind::nonneg: out.segment(off, d) = v.segment(off, d).cwiseMax(0.0); break;
      case ConeKind::soc: out.segment(off, d) = project_soc(v.segment(off, d)); break;
    }
    off += d;
  }
  return out;
}

Vector project_polar(const Cone& k, const Vector& v) { return -project_cone(k.dual(), Vector(-v)); }

Matrix cone_projection_jacobian_selection(const Cone& k, const Vector& v, const SelectionPolicy& policy) {
  check_dim(k, v, "cone_projection_jacobian_selection");
  KinkCursor kinks(policy);
  return projection_jacobian(k, v, kinks);
}

bool in_cone(const Cone& k, const Vector& v, double tol) {
  return (v - project_cone(k, v)).lpNorm<Eigen::Infinity>() <= tol;
}

MoreauReport moreau_check(const Cone& k, const Vector& v, double tol) {
  const Vector pk = project_cone(k, v);
  const Vector pp = project_polar(k, v);
  MoreauReport rep;
  rep.reconstruction_error = v.size() == 0 ? 0.0 : (v - pk - pp).lpNorm<Eigen::Infinity>();
  rep.inner_product = std::abs(pk.dot(pp));
  const double scale = std::max(1.0, v.squaredNorm());
  rep.ok = rep.reconstruction_error <= tol * std::max(1.0, v.lpNorm<Eigen::Infinity>()) &&
           rep.inner_product <= tol * scale;
  return rep;
}

ConicProblem::ConicProblem(Matrix a_, Vector b_, Vector c_, Cone k)
    : a(std::move(a_)), b(std::move(b_)), c(std::move(c_)), cone(std::move(k)) {
  if (a.rows() == 0 || a.cols() == 0) throw ConfigError("ConicProblem: A must be nonempty");
  if (b.size() != a.rows() || c.size() != a.cols()) throw ConfigError("ConicProblem: shapes of A, b, c disagree");
  if (cone.dim() != static_cast<std::size_t>(a.rows())) throw ConfigError("ConicProblem: cone dimension must equal m");
  if (!a.allFinite() || !b.allFinite() || !c.allFinite()) throw ConfigError("ConicProblem: non-finite data");
}

Vector ConicProblem::params() const {
  const auto mn = a.size();
  Vector p(static_cast<Index>(num_params()));
  p.head(mn) = a.reshaped();
  p.segment(mn, b.size()) = b;
  p.tail(c.size()) = c;
  return p;
}

ConicProblem ConicProblem::from_params(const Vector& p, std::size_t m, std::size_t n, const Cone& k) {
  const auto mi = static_cast<Index>(m), ni = static_cast<Index>(n);
  if (p.size() != mi * ni + mi + ni) throw ConfigError("ConicProblem::from_params: wrong parameter count");
  Matrix a = p.head(mi * ni).reshaped(mi, ni);
  return ConicProblem(std::move(a), p.segment(mi * ni, mi), p.tail(ni), k);
}

ConicProblem conic_problem_from_json(const nlohmann::json& doc) {
  try {
    std::vector<ConeFactor> factors;
    for (const auto& f : doc.at("cone")) {
      const auto type = f.at("type").get<std::string>();
      const auto dim = f.at("dim").get<std::size_t>();
      ConeKind kind;
      if (type == "zero") {
        kind = ConeKind::zero;
      } else if (type == "free") {
        kind = ConeKind::free;
      } else if (type == "nonneg") {
        kind = ConeKind::nonneg;
      } else if (type == "soc") {
        kind = ConeKind::soc;
      } else {
        throw ConfigError("unknown cone type '" + type + "'");
      }
      factors.push_back({kind, dim});
    }
    return ConicProblem(matrix_from_json(doc.at("A")), vector_from_json(doc.at("b")), vector_from_json(doc.at("c")),
                        Cone(std::move(factors)));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed conic problem: ") + e.what());
  }
}

nlohmann::json to_json(const ConicProblem& p) {
  nlohmann::json cone = nlohmann::json::array();
  for (const ConeFactor& f : p.cone.factors()) {
    cone.push_back({{"type", std::string(cone_kind_name(f.kind))}, {"dim", f.dim}});
  }
  return {{"A", matrix_to_json(p.a)}, {"b", vector_to_json(p.b)}, {"c", vector_to_json(p.c)}, {"cone", cone}};
}

namespace {

void check_z(const ConicProblem& p, const Vector& z) {
  if (static_cast<std::size_t>(z.size()) != p.n() + p.m()) {
    throw ConfigError("conic: z must have size n + m = " + std::to_string(p.n() + p.m()));
  }
}

ResidualJacobians jacobians(const Vector& z, const ConicProblem& p, KinkCursor& kinks) {
  check_z(p, z);
  const auto n = static_cast<Index>(p.n()), m = static_cast<Index>(p.m());
  const Vector u = z.head(n), v = z.tail(m);
  const Cone dual = p.cone.dual();
  const Vector pv = project_cone(dual, v);
  const Matrix d = projection_jacobian(dual, v, kinks);

  ResidualJacobians out;
  out.u = Matrix::Zero(n + m, n + m);
  out.u.topRightCorner(n, m) = p.a.transpose() * d;
  out.u.bottomLeftCorner(m, n) = -p.a;
  out.u.bottomRightCorner(m, m) = Matrix::Identity(m, m) - d;

  out.v = Matrix::Zero(n + m, static_cast<Index>(p.num_params()));
  // N1 = A^T P(v) + c, N2 = -A u + b + v - P(v).
  for (Index j = 0; j < n; ++j) {
    for (Index i = 0; i < m; ++i) {
      const Index col = i + j * m;
      out.v(j, col) = pv(i);
      out.v(n + i, col) = -u(j);
    }
  }
  out.v.block(n, m * n, m, m).setIdentity();
  out.v.block(0, m * n + m, n, n).setIdentity();
  return out;
}

}  // namespace

Vector residual_map(const Vector& z, const ConicProblem& p) {
  check_z(p, z);
  const auto n = static_cast<Index>(p.n()), m = static_cast<Index>(p.m());
  const Vector u = z.head(n), v = z.tail(m);
  const Vector pv = project_cone(p.cone.dual(), v);
  Vector out(n + m);
  out.head(n) = p.a.transpose() * pv + p.c;
  out.tail(m) = -p.a * u + p.b + v - pv;
  return out;
}

ResidualJacobians residual_map_jacobians(const Vector& z, const ConicProblem& p, const SelectionPolicy& policy) {
  KinkCursor kinks(policy);
  return jacobians(z, p, kinks);
}

PrimalDual phi(const Vector& z, const Cone& k) {
  const auto m = static_cast<Index>(k.dim());
  if (z.size() < m) throw ConfigError("phi: z shorter than the cone dimension");
  const Vector v = z.tail(m);
  PrimalDual out;
  out.x = z.head(z.size() - m);
  out.y = project_cone(k.dual(), v);
  out.s = out.y - v;
  return out;
}

Matrix phi_jacobian_selection(const Vector& z, const Cone& k, const SelectionPolicy& policy) {
  const auto m = static_cast<Index>(k.dim());
  if (z.size() < m) throw ConfigError("phi: z shorter than the cone dimension");
  const Index n = z.size() - m;
  const Matrix d = cone_projection_jacobian_selection(k.dual(), z.tail(m), policy);
  Matrix j = Matrix::Zero(n + 2 * m, n + m);
  j.topLeftCorner(n, n).setIdentity();
  j.block(n, n, m, m) = d;
  j.block(n + m, n, m, m) = d - Matrix::Identity(m, m);
  return j;
}

ConicSolution solve_residual(const ConicProblem& p, const Vector& z0, const ConicSolverConfig& cfg) {
  if (!(cfg.tolerance > 0.0) || !(cfg.fallback_step > 0.0 && cfg.fallback_step < 2.0)) {
    throw ConfigError("solve_residual: invalid configuration");
  }
  const auto n = static_cast<Index>(p.n()), m = static_cast<Index>(p.m());
  const Index big_n = n + m;
  Vector z = z0.size() == 0 ? Vector(Vector::Zero(big_n)) : z0;
  check_z(p, z);

  // I + Q, the preconditioner of the fallback step.
  Matrix iq = Matrix::Identity(big_n, big_n);
  iq.topRightCorner(n, m) = p.a.transpose();
  iq.bottomLeftCorner(m, n) = -p.a;
  const Eigen::PartialPivLU<Matrix> iq_lu(iq);

  ConicSolution out;
  Vector r = residual_map(z, p);
  double f = 0.5 * r.squaredNorm();
  for (std::size_t k = 0; k < cfg.max_iterations; ++k) {
    const double nr = r.lpNorm<Eigen::Infinity>();
    if (!std::isfinite(nr)) break;
    if (nr <= cfg.tolerance) {
      out.z = z;
      out.sol = phi(z, p.cone);
      out.iterations = k;
      out.residual = nr;
      return out;
    }
    bool accepted = false;
    const Matrix u = residual_map_jacobians(z, p, cfg.policy).u;
    const LuFactorization lu(u);
    if (!lu.singular() && lu.rcond() >= kDefaultRcondTol) {
      const Vector dir = lu.solve(-r);
      // Along a Newton direction the slope of ||N||^2 / 2 is -||N||^2.
      const double slope = -2.0 * f;
      for (double t = 1.0; t >= 1e-8 && dir.allFinite(); t *= 0.5) {
        const Vector zt = z + t * dir;
        const Vector rt = residual_map(zt, p);
        const double ft = 0.5 * rt.squaredNorm();
        if (ft <= f + cfg.armijo * t * slope) {
          z = zt;
          r = rt;
          f = ft;
          accepted = true;
          break;
        }
      }
    }
    if (!accepted) {
      // Relaxed Douglas-Rachford step: converges for any solvable problem
      // and moves the iterate off the kinks that stalled Newton.
      z -= cfg.fallback_step * Vector(iq_lu.solve(r));
      r = residual_map(z, p);
      f = 0.5 * r.squaredNorm();
      ++out.fallback_steps;
    }
  }
  throw NoConvergence(cfg.max_iterations, r.lpNorm<Eigen::Infinity>(), "solve_residual");
}

double KktReport::max() const {
  return std::max({dual_residual, primal_residual, slack_violation, dual_violation, complementarity});
}

KktReport kkt_report(const ConicProblem& p, const PrimalDual& sol) {
  KktReport rep;
  rep.dual_residual = (p.a.transpose() * sol.y + p.c).lpNorm<Eigen::Infinity>();
  rep.primal_residual = (p.a * sol.x + sol.s - p.b).lpNorm<Eigen::Infinity>();
  rep.slack_violation = (sol.s - project_cone(p.cone, sol.s)).lpNorm<Eigen::Infinity>();
  rep.dual_violation = (sol.y - project_cone(p.cone.dual(), sol.y)).lpNorm<Eigen::Infinity>();
  rep.complementarity = std::abs(sol.s.dot(sol.y));
  return rep;
}

SolSelection sol_jacobian_selection(const ConicProblem& p, const Vector& z, const SelectionPolicy& policy,
                                    double rcond_tol, double residual_tol) {
  check_z(p, z);
  validate(policy);
  const double res = residual_map(z, p).lpNorm<Eigen::Infinity>();
  if (!(res <= residual_tol)) {
    throw DomainError("sol_jacobian_selection: ||N(z)|| = " + std::to_string(res) + " exceeds the tolerance");
  }
  const ResidualJacobians jn = residual_map_jacobians(z, p, policy);
  const LuFactorization lu(jn.u);
  if (lu.singular() || lu.rcond() < rcond_tol) {
    throw InvertibilityFailure(lu.rcond(), rcond_tol, "sol_jacobian_selection", jn.u);
  }
  SolSelection out;
  out.rcond = lu.rcond();
  const Matrix jnu = lu.solve(-jn.v, rcond_tol);
  out.jacobian = phi_jacobian_selection(z, p.cone, policy) * jnu;
  return out;
}

ConicBranchReport all_branch_invertibility(const ConicProblem& p, const Vector& z, double rcond_tol,
                                           std::size_t max_kinks) {
  check_z(p, z);
  ConicBranchReport rep;
  for (const ConeFactor& f : p.cone.factors()) {
    if (f.kind == ConeKind::soc) return rep;
  }
  SelectionPolicy policy;
  KinkCursor counter(policy);
  jacobians(z, p, counter);
  rep.kinks = counter.count();
  if (rep.kinks > max_kinks || rep.kinks >= 63) return rep;
  rep.enumerated = true;
  rep.branches = std::size_t{1} << rep.kinks;
  policy.kink_positions.assign(rep.kinks, 0.0);
  for (std::size_t mask = 0; mask < rep.branches; ++mask) {
    for (std::size_t k = 0; k < rep.kinks; ++k) policy.kink_positions[k] = ((mask >> k) & 1U) ? 1.0 : 0.0;
    KinkCursor cursor(policy);
    const double rc = rcond_estimate(jacobians(z, p, cursor).u);
    if (rc > 0.0 && rc >= rcond_tol) ++rep.invertible;
  }
  return rep;
}

}  // namespace nsid
