// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "doctest.h"
#include "fd_oracle.hpp"
#include "nsid/conic.hpp"
#include "nsid/errors.hpp"

using namespace nsid;
using nsid::testing::max_abs;
using nsid::testing::random_vector;

namespace {

Vector vec(std::initializer_list<double> xs) {
  Vector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

// x in [0, 3] x [0, 5] written as A x + s = b, s >= 0.
ConicProblem box_lp(const Vector& c) {
  Matrix a(4, 2);
  a << 1, 0, 0, 1, -1, 0, 0, -1;
  return ConicProblem(a, vec({3, 5, 0, 0}), c, Cone::nonneg(4));
}

Vector random_in_soc(std::mt19937_64& rng, Eigen::Index d, double margin) {
  Vector v = random_vector(rng, d);
  v(0) = v.tail(d - 1).norm() + margin;
  return v;
}

// LP with a known unique, strictly complementary solution: the first n of m
// orthant constraints are active with duals at least `margin`, the rest have
// slack at least `margin`.
ConicProblem planted_lp(std::mt19937_64& rng, Eigen::Index m, Eigen::Index n, double margin) {
  const Matrix a = nsid::testing::random_matrix(rng, m, n);
  const Vector x = random_vector(rng, n);
  Vector s = Vector::Zero(m), y = Vector::Zero(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    if (i < n) {
      y(i) = margin + std::abs(random_vector(rng, 1)(0));
    } else {
      s(i) = margin + std::abs(random_vector(rng, 1)(0));
    }
  }
  return ConicProblem(a, a * x + s, -a.transpose() * y, Cone::nonneg(static_cast<std::size_t>(m)));
}

}  // namespace

TEST_SUITE("conic") {
  TEST_CASE("projection examples") {
    CHECK(project_cone(Cone::nonneg(2), vec({1, -1})) == vec({1, 0}));
    CHECK(project_cone(Cone::soc(3), vec({-1, 0, 0})) == Vector::Zero(3));
    CHECK(project_cone(Cone::soc(3), vec({1, 0, 0})) == vec({1, 0, 0}));
    // Outside both: ((t + r) / 2) (1, u / r).
    const Vector p = project_cone(Cone::soc(3), vec({0, 3, 4}));
    CHECK(max_abs(p - vec({2.5, 1.5, 2.0})) <= 1e-15);
    const Cone mixed({{ConeKind::zero, 1}, {ConeKind::free, 1}, {ConeKind::nonneg, 1}});
    CHECK(project_cone(mixed, vec({2, -3, -1})) == vec({0, -3, 0}));
    CHECK(mixed.dual().factors()[0].kind == ConeKind::free);
    CHECK(mixed.dual().factors()[1].kind == ConeKind::zero);
    CHECK_THROWS_AS(project_cone(mixed, vec({1, 2})), ConfigError);
  }

  TEST_CASE("projection Jacobian examples") {
    CHECK(cone_projection_jacobian_selection(Cone::nonneg(2), vec({2, -3})) == Matrix(vec({1, 0}).asDiagonal()));
    CHECK(cone_projection_jacobian_selection(Cone::nonneg(2), vec({0, 1})) == Matrix(vec({0, 1}).asDiagonal()));
    CHECK(cone_projection_jacobian_selection(Cone::nonneg(2), vec({0, 1}), SelectionPolicy::upper()) ==
          Matrix::Identity(2, 2));

    std::mt19937_64 rng(3);
    for (int k = 0; k < 200; ++k) {
      const Eigen::Index d = 2 + k % 3;
      const Vector v = random_vector(rng, d, -2.0, 2.0);
      const double r = v.tail(d - 1).norm();
      if (std::abs(std::abs(v(0)) - r) < 1e-3) continue;
      const Cone soc = Cone::soc(static_cast<std::size_t>(d));
      const Matrix fd = nsid::testing::fd_jacobian([&](const Vector& x) { return project_cone(soc, x); }, v);
      CHECK(max_abs(cone_projection_jacobian_selection(soc, v) - fd) <= 1e-6);
    }
    // Boundary conventions.
    const Cone soc = Cone::soc(3);
    CHECK(cone_projection_jacobian_selection(soc, vec({5, 3, 4})) == Matrix::Identity(3, 3));
    CHECK(cone_projection_jacobian_selection(soc, vec({-5, 3, 4})) == Matrix::Zero(3, 3));
    CHECK(cone_projection_jacobian_selection(soc, Vector::Zero(3)) == Matrix::Zero(3, 3));
    CHECK(cone_projection_jacobian_selection(soc, Vector::Zero(3), SelectionPolicy::upper()) ==
          Matrix::Identity(3, 3));
  }

  TEST_CASE("Moreau decomposition") {
    const MoreauReport r = moreau_check(Cone::nonneg(2), vec({1, -1}));
    CHECK(r.ok);
    CHECK(project_cone(Cone::nonneg(2), vec({1, -1})) == vec({1, 0}));
    CHECK(project_polar(Cone::nonneg(2), vec({1, -1})) == vec({0, -1}));
    CHECK(project_polar(Cone::soc(3), vec({2, 1, 0})) == Vector::Zero(3));

    std::mt19937_64 rng(10);
    const std::vector<Cone> cones{Cone::nonneg(4), Cone::soc(4), Cone({{ConeKind::zero, 2}}),
                                  Cone({{ConeKind::free, 2}}),
                                  Cone({{ConeKind::zero, 1}, {ConeKind::nonneg, 2}, {ConeKind::soc, 3}})};
    for (const Cone& k : cones) {
      int ok = 0;
      for (int i = 0; i < 10000; ++i) {
        const Vector v = random_vector(rng, static_cast<Eigen::Index>(k.dim()), -3.0, 3.0);
        ok += moreau_check(k, v).ok ? 1 : 0;
      }
      CHECK(ok == 10000);
    }
  }

  TEST_CASE("projections are nonexpansive") {
    std::mt19937_64 rng(12);
    const Cone k({{ConeKind::nonneg, 2}, {ConeKind::soc, 4}, {ConeKind::zero, 1}});
    for (int i = 0; i < 2000; ++i) {
      const Vector u = random_vector(rng, 7, -3.0, 3.0);
      const Vector v = random_vector(rng, 7, -3.0, 3.0);
      CHECK((project_cone(k, u) - project_cone(k, v)).norm() <= (u - v).norm() + 1e-12);
    }
  }

  TEST_CASE("phi examples") {
    const Cone k = Cone::nonneg(2);
    const PrimalDual in = phi(vec({7, -1, 2, 3}), k);
    CHECK(in.x == vec({7, -1}));
    CHECK(in.y == vec({2, 3}));
    CHECK(in.s == Vector::Zero(2));
    const PrimalDual polar = phi(vec({7, -1, -2, -3}), k);
    CHECK(polar.y == Vector::Zero(2));
    CHECK(polar.s == vec({2, 3}));
    const Matrix j = phi_jacobian_selection(vec({7, -1, 2, -3}), k);
    CHECK(j.rows() == 6);
    CHECK(j.topLeftCorner(2, 2) == Matrix::Identity(2, 2));
    CHECK(j(2, 2) == 1.0);
    CHECK(j(3, 3) == 0.0);
    CHECK(j(4, 2) == 0.0);
    CHECK(j(5, 3) == -1.0);
  }

  TEST_CASE("residual map on the box LP") {
    const ConicProblem flat = box_lp(vec({0, 0}));
    std::mt19937_64 rng(1);
    for (int i = 0; i < 50; ++i) {
      Vector z = Vector::Zero(6);
      z(0) = 3.0 * std::abs(random_vector(rng, 1)(0));
      z(1) = 5.0 * std::abs(random_vector(rng, 1)(0));
      // v = y - s = -(b - A x).
      z.tail(4) = -(flat.b - flat.a * z.head(2));
      CHECK(max_abs(residual_map(z, flat)) <= 1e-15);
    }
    const Vector r = residual_map(random_vector(rng, 6), box_lp(vec({1, 2})));
    CHECK(r.norm() > 0.0);
  }

  TEST_CASE("solver on the box LP") {
    const ConicSolution up = solve_residual(box_lp(vec({-1, -1})));
    CHECK(max_abs(up.sol.x - vec({3, 5})) <= 1e-8);
    CHECK(max_abs(residual_map(up.z, box_lp(vec({-1, -1})))) <= 1e-8);
    const ConicSolution down = solve_residual(box_lp(vec({1, 1})));
    CHECK(max_abs(down.sol.x) <= 1e-8);

    // Brute force over the four vertices agrees for random costs.
    std::mt19937_64 rng(2);
    for (int i = 0; i < 20; ++i) {
      const Vector c = random_vector(rng, 2);
      double best = std::numeric_limits<double>::infinity();
      Vector arg;
      for (double x1 : {0.0, 3.0}) {
        for (double x2 : {0.0, 5.0}) {
          const double val = c(0) * x1 + c(1) * x2;
          if (val < best) {
            best = val;
            arg = vec({x1, x2});
          }
        }
      }
      CHECK(max_abs(solve_residual(box_lp(c)).sol.x - arg) <= 1e-8);
    }

    const ConicSolution degenerate = solve_residual(box_lp(vec({0, 0})));
    CHECK(max_abs(residual_map(degenerate.z, box_lp(vec({0, 0})))) <= 1e-10);
    CHECK_THROWS_AS(sol_jacobian_selection(box_lp(vec({0, 0})), degenerate.z), InvertibilityFailure);
  }

  TEST_CASE("KKT equivalence on planted problems") {
    std::mt19937_64 rng(8);
    for (int t = 0; t < 40; ++t) {
      ConicProblem p = planted_lp(rng, 6, 3, 0.1);
      if (t % 2 == 1) {
        // Second-order cone block: s* on the boundary, y* on the opposite ray.
        const Matrix a = nsid::testing::random_matrix(rng, 4, 2);
        const Vector x = random_vector(rng, 2);
        Vector u = random_vector(rng, 3);
        u.normalize();
        Vector s(4), y(4);
        s << 1.0, u;
        y << 0.5, -0.5 * u;
        p = ConicProblem(a, a * x + s, -a.transpose() * y, Cone::soc(4));
      }
      const ConicSolution sol = solve_residual(p);
      CHECK(sol.residual <= 1e-10);
      const KktReport rep = kkt_report(p, sol.sol);
      CHECK(rep.dual_residual <= 1e-8);
      CHECK(rep.primal_residual <= 1e-8);
      CHECK(rep.slack_violation <= 1e-8);
      CHECK(rep.dual_violation <= 1e-8);
      CHECK(rep.complementarity <= 1e-8);
    }
  }

  TEST_CASE("solution Jacobian on the box LP") {
    const ConicProblem p = box_lp(vec({-1, -1}));
    const ConicSolution sol = solve_residual(p);
    const SolSelection j = sol_jacobian_selection(p, sol.z);
    // Columns: A (8, column-major), b (4), c (2). Rows: x (2), y (4), s (4).
    const Matrix dxdb = j.jacobian.block(0, 8, 2, 4);
    Matrix expected = Matrix::Zero(2, 4);
    expected(0, 0) = 1.0;
    expected(1, 1) = 1.0;
    CHECK(max_abs(dxdb - expected) <= 1e-12);
    CHECK(max_abs(j.jacobian.block(0, 12, 2, 2)) <= 1e-12);

    const Vector p0 = p.params();
    auto sol_of = [&](const Vector& params) {
      const ConicProblem q = ConicProblem::from_params(params, 4, 2, p.cone);
      const PrimalDual s = solve_residual(q, sol.z).sol;
      Vector out(10);
      out << s.x, s.y, s.s;
      return out;
    };
    const Matrix fd = nsid::testing::fd_jacobian(sol_of, p0, 1e-6);
    CHECK(max_abs(fd - j.jacobian) <= 1e-4);
  }

  TEST_CASE("solution Jacobian matches finite differences on nondegenerate problems") {
    std::mt19937_64 rng(31);
    double worst = 0.0;
    for (int t = 0; t < 20; ++t) {
      const ConicProblem p = planted_lp(rng, 5, 2, 0.05);
      const ConicSolution sol = solve_residual(p);
      const Matrix j = sol_jacobian_selection(p, sol.z).jacobian;
      auto sol_of = [&](const Vector& params) {
        const ConicProblem q = ConicProblem::from_params(params, p.m(), p.n(), p.cone);
        const PrimalDual s = solve_residual(q, sol.z).sol;
        Vector out(static_cast<Eigen::Index>(p.n() + 2 * p.m()));
        out << s.x, s.y, s.s;
        return out;
      };
      const Matrix fd = nsid::testing::fd_jacobian(sol_of, p.params(), 1e-6);
      worst = std::max(worst, max_abs(fd - j) / std::max(1.0, max_abs(fd)));
    }
    CHECK(worst <= 1e-4);
  }

  TEST_CASE("branch enumeration at orthant kinks") {
    const ConicProblem p = box_lp(vec({-1, -1}));
    const ConicSolution sol = solve_residual(p);
    const ConicBranchReport strict = all_branch_invertibility(p, sol.z);
    CHECK(strict.enumerated);
    CHECK(strict.kinks == 0);
    CHECK(strict.invertible == 1);

    // c = (-1, 0): at x = (3, 0) the bound x2 >= 0 is active with a zero
    // multiplier, so v = y - s has an exact zero.
    Vector z(6);
    z << 3, 0, 1, -5, -3, 0;
    const ConicProblem weak = box_lp(vec({-1, 0}));
    CHECK(max_abs(residual_map(z, weak)) == 0.0);
    const ConicBranchReport rep = all_branch_invertibility(weak, z);
    CHECK(rep.enumerated);
    CHECK(rep.kinks == 1);
    CHECK(rep.branches == 2);
    CHECK(rep.invertible == 1);
  }

  TEST_CASE("JSON round trip") {
    const ConicProblem p = box_lp(vec({-1, 2}));
    const ConicProblem q = conic_problem_from_json(to_json(p));
    CHECK(q.a == p.a);
    CHECK(q.b == p.b);
    CHECK(q.c == p.c);
    CHECK(q.cone.dim() == 4);
    CHECK_THROWS_AS(conic_problem_from_json(nlohmann::json::parse(R"({"A": [[1]], "b": [1], "c": [1],
                    "cone": [{"type": "psd", "dim": 1}]})")),
                    ConfigError);
    CHECK(ConicProblem::from_params(p.params(), 4, 2, p.cone).a == p.a);
  }
}
