// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "doctest.h"
#include "fd_oracle.hpp"
#include "nsid/deq.hpp"
#include "nsid/errors.hpp"

using namespace nsid;
using nsid::testing::max_abs;

namespace {
Matrix s1(double a) { return Matrix::Constant(1, 1, a); }
Vector v1(double a) { return Vector::Constant(1, a); }
}  // namespace

TEST_SUITE("deq") {
  TEST_CASE("forward examples") {
    const MonotoneLayer active(s1(0.5), v1(1.0), activation_tape("relu", 1), 0.25);
    CHECK(deq_forward(active).z(0) == doctest::Approx(2.0));
    const MonotoneLayer clamped(s1(0.5), v1(-1.0), activation_tape("relu", 1), 0.25);
    CHECK(deq_forward(clamped).z(0) == 0.0);

    Vector b(2);
    b << 0.3, -1.2;
    // W = 0 violates W + W^T >= 2 theta I for every theta > 0.
    CHECK_THROWS_AS(MonotoneLayer(Matrix::Zero(2, 2), b, activation_tape("tanh", 2), 0.1), ConfigError);
    const MonotoneLayer decoupled = MonotoneLayer::unchecked(Matrix::Zero(2, 2), b, activation_tape("tanh", 2));
    CHECK_FALSE(decoupled.monotone_checked());
    const Vector z = deq_forward(decoupled).z;
    CHECK(z(0) == doctest::Approx(std::tanh(0.3)));
    CHECK(z(1) == doctest::Approx(std::tanh(-1.2)));
  }

  TEST_CASE("layer validation") {
    CHECK_THROWS_AS(MonotoneLayer(s1(0.5), v1(1.0), activation_tape("relu", 1), 0.0), ConfigError);
    CHECK_THROWS_AS(MonotoneLayer(s1(0.5), v1(1.0), activation_tape("relu", 2), 0.1), ConfigError);
    CHECK_THROWS_AS(activation_tape("softplus", 2), ConfigError);
    TapeBuilder mix(2);
    const Tape coupled = mix.build({affine(Matrix::Constant(2, 2, 0.5), mix.input())});
    CHECK_THROWS_AS(MonotoneLayer::unchecked(Matrix::Zero(2, 2), Vector::Zero(2), coupled), ConfigError);
    TapeBuilder steep(1);
    const Tape doubled = steep.build({scale(steep.input(), 2.0)});
    CHECK_THROWS_AS(MonotoneLayer::unchecked(s1(0.0), v1(0.0), doubled), ConfigError);
  }

  TEST_CASE("gradient examples") {
    const MonotoneLayer layer(s1(0.5), v1(1.0), activation_tape("relu", 1), 0.25);
    const Vector z = deq_forward(layer).z;
    const DeqGradient g = deq_conservative_gradient(layer, z, v1(1.0));
    CHECK(g.g_b(0) == doctest::Approx(2.0));
    CHECK(g.g_w(0, 0) == doctest::Approx(4.0));

    // Finite differences of b -> z(W, b) and W -> z(W, b).
    const double h = 1e-6;
    auto z_of = [](double w, double b) {
      return deq_forward(MonotoneLayer::unchecked(s1(w), v1(b), activation_tape("relu", 1))).z(0);
    };
    CHECK(g.g_b(0) == doctest::Approx((z_of(0.5, 1.0 + h) - z_of(0.5, 1.0 - h)) / (2 * h)).epsilon(1e-6));
    CHECK(g.g_w(0, 0) == doctest::Approx((z_of(0.5 + h, 1.0) - z_of(0.5 - h, 1.0)) / (2 * h)).epsilon(1e-6));

    const DeqGradient zero = deq_conservative_gradient(layer, z, v1(0.0));
    CHECK(zero.g_b(0) == 0.0);
    CHECK(zero.g_w(0, 0) == 0.0);

    // W z + b = 0 at the solution: a relu kink.
    const MonotoneLayer kink(s1(0.5), v1(0.0), activation_tape("relu", 1), 0.25);
    const Vector zk = deq_forward(kink).z;
    CHECK(zk(0) == 0.0);
    CHECK(deq_conservative_gradient(kink, zk, v1(1.0)).g_b(0) == 0.0);
    CHECK(deq_conservative_gradient(kink, zk, v1(1.0), SelectionPolicy::upper()).g_b(0) == doctest::Approx(2.0));
  }

  TEST_CASE("singular I - J W is refused") {
    const MonotoneLayer layer = MonotoneLayer::unchecked(s1(1.0), v1(0.0), activation_tape("identity", 1));
    CHECK_THROWS_AS(deq_conservative_gradient(layer, v1(0.0), v1(1.0)), InvertibilityFailure);
  }

  TEST_CASE("gradient agrees with finite differences of the loss") {
    std::mt19937_64 rng(404);
    const int m = 3;
    const double h = 1e-6;
    FixedPointConfig cfg;
    cfg.tolerance = 1e-13;
    int instances = 0;
    double worst = 0.0;
    while (instances < 50) {
      const bool use_relu = instances % 2 == 1;
      const std::string act = use_relu ? "relu" : "tanh";
      Matrix w = nsid::testing::random_matrix(rng, m, m);
      w *= 0.9 / spectral_norm(w);
      const Vector b = nsid::testing::random_vector(rng, m);
      const Vector target = nsid::testing::random_vector(rng, m);
      const MonotoneLayer layer = MonotoneLayer::unchecked(w, b, activation_tape(act, m));
      const Vector z = deq_forward(layer, cfg).z;
      // Generic b: stay clear of relu kinks.
      if (use_relu && (w * z + b).cwiseAbs().minCoeff() < 1e-3) continue;
      ++instances;
      const DeqGradient g = deq_conservative_gradient(layer, z, z - target);
      CHECK(g.g_w == g.g_b * z.transpose());

      auto loss = [&](const Matrix& ww, const Vector& bb) {
        const Vector zz = deq_forward(MonotoneLayer::unchecked(ww, bb, activation_tape(act, m)), cfg, z).z;
        return 0.5 * (zz - target).squaredNorm();
      };
      Vector fd_b(m);
      for (int i = 0; i < m; ++i) {
        Vector bp = b, bm = b;
        bp(i) += h;
        bm(i) -= h;
        fd_b(i) = (loss(w, bp) - loss(w, bm)) / (2 * h);
      }
      Matrix fd_w(m, m);
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < m; ++j) {
          Matrix wp = w, wm = w;
          wp(i, j) += h;
          wm(i, j) -= h;
          fd_w(i, j) = (loss(wp, b) - loss(wm, b)) / (2 * h);
        }
      }
      worst = std::max(worst, max_abs(fd_b - g.g_b) / std::max(1e-3, max_abs(fd_b)));
      worst = std::max(worst, max_abs(fd_w - g.g_w) / std::max(1e-3, max_abs(fd_w)));
    }
    CHECK(worst <= 1e-4);
  }

  TEST_CASE("forward solution does not depend on the initialization") {
    std::mt19937_64 rng(5);
    const int m = 4;
    Matrix a = nsid::testing::random_matrix(rng, m, m);
    // Skew part plus 0.3 I: W + W^T = 0.6 I.
    Matrix w = 0.4 * (a - a.transpose()) + 0.3 * Matrix::Identity(m, m);
    const MonotoneLayer layer(w, nsid::testing::random_vector(rng, m), activation_tape("relu", m), 0.25);
    FixedPointConfig cfg;
    const Vector ref = deq_forward(layer, cfg).z;
    for (int k = 0; k < 10; ++k) {
      const Vector z0 = nsid::testing::random_vector(rng, m, -5.0, 5.0);
      CHECK(max_abs(deq_forward(layer, cfg, z0).z - ref) <= 10 * cfg.tolerance);
    }
  }

  TEST_CASE("expansive monotone layers fall back to Anderson") {
    Matrix w(2, 2);
    w << 1.0, 0.8, -0.8, 1.0;  // ||W||_2 > 1, W + W^T = 2 I
    Vector b(2);
    b << 0.5, -0.5;
    const MonotoneLayer layer(w, b, activation_tape("tanh", 2), 1.0);
    CHECK(spectral_norm(w) > 1.0);
    const auto r = deq_forward(layer);
    CHECK(max_abs(layer.apply(r.z) - r.z) <= 1e-10);
  }
}
