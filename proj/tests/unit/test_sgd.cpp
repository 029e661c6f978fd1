// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "fd_oracle.hpp"
#include "nsid/errors.hpp"
#include "nsid/sgd.hpp"

using namespace nsid;
using nsid::testing::random_vector;

namespace {

Tape half_square(std::size_t p) {
  TapeBuilder tb(p);
  return tb.build({scale(squared_norm(tb.input()), 0.5)});
}

Tape abs_loss() {
  TapeBuilder tb(1);
  return tb.build({sum(abs(tb.input()))});
}

// Brute force over a fine simplex grid for three points.
double hull_oracle(const std::vector<Vector>& pts) {
  double best = 1e300;
  const int n = 400;
  for (int i = 0; i <= n; ++i) {
    for (int j = 0; i + j <= n; ++j) {
      const double a = double(i) / n, b = double(j) / n;
      best = std::min(best, (a * pts[0] + b * pts[1] + (1 - a - b) * pts[2]).norm());
    }
  }
  return best;
}

}  // namespace

TEST_SUITE("sgd") {
  TEST_CASE("quadratic contraction") {
    const SumProblem pb(3, {tape_term(half_square(3))});
    SGDConfig cfg;
    cfg.alpha0 = 1.0;
    cfg.fixed_scale = 1.0;
    cfg.max_steps = 100000;
    cfg.record_stride = 1000;
    const Trajectory t = sgd_run(pb, Vector::Constant(3, 2.0), cfg);
    CHECK(t.final_w.norm() <= 1e-3);
    CHECK_FALSE(t.generic);
  }

  TEST_CASE("objective eventually decreases on a strongly convex quadratic") {
    const SumProblem pb(2, {tape_term(half_square(2))});
    SGDConfig cfg;
    cfg.seed = 3;
    cfg.max_steps = 20000;
    cfg.record_stride = 100;
    const Trajectory t = sgd_run(pb, Vector::Constant(2, 5.0), cfg);
    CHECK(t.generic);
    CHECK(t.scale >= 0.5);
    CHECK(t.scale <= 1.5);
    for (std::size_t i = 1; i < t.records.size(); ++i) {
      CHECK(t.records[i].loss <= t.records[i - 1].loss);
      CHECK(t.records[i].k > t.records[i - 1].k);
    }
    CHECK(t.records.back().loss <= 1e-3);
  }

  TEST_CASE("absolute value oscillates into a band") {
    const SumProblem pb(1, {tape_term(abs_loss())});
    SGDConfig cfg;
    cfg.seed = 5;
    cfg.max_steps = 100000;
    cfg.record_stride = 100;
    const Trajectory t = sgd_run(pb, Vector::Constant(1, 1.0), cfg);
    CHECK(std::abs(t.final_w(0)) <= 1e-2);
    CHECK(std::abs(t.final_w(0)) <= 2 * t.scale * cfg.alpha(cfg.max_steps - 1));
  }

  TEST_CASE("same seed gives identical trajectories") {
    std::vector<LossTerm> terms;
    std::mt19937_64 rng(9);
    for (int i = 0; i < 5; ++i) {
      TapeBuilder tb(2);
      const Vector c = random_vector(rng, 2);
      terms.push_back(tape_term(tb.build({sum(abs(tb.input() - tb.constant(c)))})));
    }
    const SumProblem pb(2, terms);
    SGDConfig cfg;
    cfg.seed = 42;
    cfg.max_steps = 500;
    cfg.batch_size = 2;
    cfg.w0_jitter = 0.1;
    const Trajectory a = sgd_run(pb, Vector::Zero(2), cfg);
    const Trajectory b = sgd_run(pb, Vector::Zero(2), cfg);
    REQUIRE(a.records.size() == b.records.size());
    for (std::size_t i = 0; i < a.records.size(); ++i) {
      CHECK(a.records[i].w == b.records[i].w);
      CHECK(a.records[i].batch == b.records[i].batch);
    }
    cfg.seed = 43;
    CHECK(sgd_run(pb, Vector::Zero(2), cfg).final_w != a.final_w);
  }

  TEST_CASE("schedule validation") {
    SGDConfig cfg;
    cfg.gamma = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.gamma = 1.2;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.gamma = 1.0;
    CHECK_NOTHROW(cfg.validate());
    cfg.s_min = 2.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }

  TEST_CASE("divergence guard") {
    TapeBuilder tb(1);
    const SumProblem pb(1, {tape_term(tb.build({scale(squared_norm(tb.input()), -1.0)}))});
    SGDConfig cfg;
    cfg.fixed_scale = 1.0;
    cfg.alpha0 = 1.0;
    cfg.max_steps = 1000;
    cfg.divergence_bound = 1e3;
    CHECK_THROWS_AS(sgd_run(pb, Vector::Ones(1), cfg), DivergenceDetected);
  }

  TEST_CASE("trajectory csv") {
    Trajectory t;
    TrajectoryRecord r;
    r.k = 0;
    r.loss = 1.5;
    r.selection_norm = 2;
    r.w = Vector::Constant(2, 0.25);
    t.records.push_back(r);
    std::ostringstream os;
    write_trajectory_csv(os, t);
    CHECK(os.str() == "k,loss,grad_norm,w0,w1\n0,1.5,2,0.25,0.25\n");
  }

  TEST_CASE("min-norm point of a hull") {
    Vector a(2), b(2), c(2);
    a << 1, 1;
    b << 1, -1;
    c << 2, 2;
    // Nearest point of segment [a, b] to the origin is (1, 0).
    const Vector x = min_norm_in_hull({a, b, c});
    CHECK(std::abs(x(0) - 1.0) <= 1e-12);
    CHECK(std::abs(x(1)) <= 1e-12);
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<Vector> pts{random_vector(rng, 2, -1, 2), random_vector(rng, 2, -1, 2),
                              random_vector(rng, 2, -1, 2)};
      CHECK(min_norm_in_hull(pts).norm() <= hull_oracle(pts) + 1e-12);
      CHECK(min_norm_in_hull(pts).norm() >= hull_oracle(pts) - 5e-3);
    }
  }

  TEST_CASE("stationarity examples") {
    const SumProblem smooth(2, {tape_term(half_square(2))});
    CHECK(stationarity_measure(smooth, Vector::Zero(2)) <= 1e-8);
    const SumProblem nonsmooth(1, {tape_term(abs_loss())});
    CHECK(stationarity_measure(nonsmooth, Vector::Zero(1)) <= 1e-12);
    CHECK(std::abs(stationarity_measure(nonsmooth, Vector::Ones(1)) - 1.0) <= 1e-12);
    // With only the lower policy the hull is the single point -1.
    const auto vs = policy_variants(2);
    CHECK(std::abs(nonsmooth.full(Vector::Zero(1), vs[1]).selection(0) + 1.0) <= 1e-15);
  }
}
