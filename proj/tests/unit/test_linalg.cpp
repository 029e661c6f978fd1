// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <random>
#include <vector>

#include "doctest.h"
#include "fd_oracle.hpp"
#include "nsid/errors.hpp"
#include "nsid/linalg.hpp"

using namespace nsid;
using nsid::testing::random_matrix;

namespace {
Matrix m2(double a, double b, double c, double d) {
  Matrix m(2, 2);
  m << a, b, c, d;
  return m;
}
}  // namespace

TEST_SUITE("linalg") {
  TEST_CASE("lu_solve examples") {
    std::mt19937_64 rng(1);
    const Matrix b = random_matrix(rng, 3, 2);
    CHECK((lu_solve(Matrix::Identity(3, 3), b) - b).norm() == doctest::Approx(0.0));

    Matrix d = Matrix::Zero(2, 2);
    d.diagonal() << 2.0, 4.0;
    const Matrix x = lu_solve(d, Matrix::Identity(2, 2));
    CHECK(x(0, 0) == doctest::Approx(0.5));
    CHECK(x(1, 1) == doctest::Approx(0.25));
    CHECK(x(0, 1) == 0.0);

    CHECK_THROWS_AS(lu_solve(m2(0, 1, 0, 0), Matrix::Identity(2, 2)), SingularMatrix);
  }

  TEST_CASE("lu_solve rejects shape mismatches") {
    CHECK_THROWS_AS(lu_solve(Matrix::Identity(2, 3), Matrix::Identity(2, 2)), ConfigError);
    CHECK_THROWS_AS(lu_solve(Matrix::Identity(2, 2), Matrix::Identity(3, 1)), ConfigError);
  }

  TEST_CASE("rcond examples") {
    CHECK(rcond_estimate(Matrix::Identity(4, 4)) == doctest::Approx(1.0));
    Matrix d = Matrix::Zero(2, 2);
    d.diagonal() << 1.0, 1e-8;
    CHECK(rcond_estimate(d) == doctest::Approx(1e-8).epsilon(1e-6));
    CHECK(rcond_estimate(m2(1, 1, 1, 1)) == 0.0);
    Matrix nan = Matrix::Identity(2, 2);
    nan(0, 1) = std::numeric_limits<double>::quiet_NaN();
    CHECK(rcond_estimate(nan) == 0.0);
  }

  TEST_CASE("solve residual on random well-conditioned systems") {
    std::mt19937_64 rng(7);
    int tested = 0;
    for (int trial = 0; trial < 200; ++trial) {
      const Eigen::Index n = 1 + trial % 8;
      const Matrix a = random_matrix(rng, n, n);
      const Matrix b = random_matrix(rng, n, 3);
      if (rcond_estimate(a) <= 1e-6) continue;
      ++tested;
      const Matrix x = lu_solve(a, b);
      CHECK((a * x - b).norm() <= 1e-8 * b.norm());
      const LuFactorization lu(a);
      CHECK((lu.reconstruct() - a).norm() <= 1e-12 * a.norm());
      CHECK((a.transpose() * lu.solve_transpose(b) - b).norm() <= 1e-8 * b.norm());
    }
    CHECK(tested > 150);
  }

  TEST_CASE("symmetric_eig_min examples") {
    Matrix d = Matrix::Zero(2, 2);
    d.diagonal() << 3.0, -1.0;
    CHECK(symmetric_eig_min(d) == doctest::Approx(-1.0));
    CHECK(symmetric_eig_min(Matrix::Identity(2, 2)) == doctest::Approx(1.0));
    CHECK(symmetric_eig_min(m2(0, 1, 1, 0)) == doctest::Approx(-1.0));
    CHECK_THROWS_AS(symmetric_eig_min(m2(0, 1, 0, 0)), NotSymmetric);
  }

  TEST_CASE("symmetric_eig_min bounds Rayleigh quotients") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 50; ++trial) {
      const Matrix r = random_matrix(rng, 5, 5);
      const Matrix a = r + r.transpose();
      const double lam = symmetric_eig_min(a);
      for (int probe = 0; probe < 20; ++probe) {
        Vector u = nsid::testing::random_vector(rng, 5);
        u.normalize();
        CHECK(lam <= u.dot(a * u) + 1e-12);
      }
    }
  }

  TEST_CASE("affine_dimension examples") {
    std::vector<Matrix> one{m2(1, 2, 3, 4)};
    CHECK(affine_dimension(one) == 0);

    const std::vector<Matrix> phi{m2(1, 1, 2, 1), m2(1, 1, 2, -1), m2(-1, 1, 2, -1), m2(-1, 1, 2, 1)};
    CHECK(affine_dimension(phi) == 2);
    const std::vector<Matrix> psi{m2(1, 1, 2, 1), m2(-1, 1, 2, -1), m2(-1, 1, 2, 1) / 3.0,
                                  m2(1, 1, 2, -1) / 3.0};
    CHECK(affine_dimension(psi) == 3);
  }

  TEST_CASE("affine_dimension is permutation and duplicate invariant") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 30; ++trial) {
      std::vector<Matrix> pts;
      const int k = 2 + trial % 5;
      for (int i = 0; i < k; ++i) pts.push_back(random_matrix(rng, 2, 3));
      const auto d = affine_dimension(pts);
      CHECK(d == static_cast<std::size_t>(k - 1));
      auto shuffled = pts;
      std::shuffle(shuffled.begin(), shuffled.end(), rng);
      CHECK(affine_dimension(shuffled) == d);
      shuffled.push_back(shuffled[static_cast<std::size_t>(trial) % shuffled.size()]);
      CHECK(affine_dimension(shuffled) == d);
    }
  }

  TEST_CASE("pseudo_inverse_solve") {
    const Matrix a = m2(1, 1, 1, 1);
    const Matrix x = pseudo_inverse_solve(a, Matrix::Identity(2, 2));
    CHECK((x - a / 4.0).norm() == doctest::Approx(0.0).epsilon(1e-12));
    Matrix d = Matrix::Zero(2, 2);
    d.diagonal() << 1.0, 1e-5;
    const Matrix cut = pseudo_inverse_solve(d, Matrix::Identity(2, 2), 1e-12, 1e-4);
    CHECK(cut(0, 0) == doctest::Approx(1.0));
    CHECK(cut(1, 1) == 0.0);
  }

  TEST_CASE("spectral_norm") {
    Matrix d = Matrix::Zero(2, 2);
    d.diagonal() << 3.0, -5.0;
    CHECK(spectral_norm(d) == doctest::Approx(5.0));
  }
}
