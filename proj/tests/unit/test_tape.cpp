// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "doctest.h"
#include "fd_oracle.hpp"
#include "nsid/errors.hpp"
#include "nsid/tape.hpp"
#include "nsid/tape_json.hpp"
#include "random_tape.hpp"

using namespace nsid;
using nsid::testing::fd_jacobian;
using nsid::testing::kink_margin;
using nsid::testing::max_abs;

namespace {

// f(z) = tanh z + relu(-z) + z - relu(z), which equals tanh z everywhere.
Tape tanh_in_disguise() {
  TapeBuilder b(1);
  const Var z = b.input();
  return b.build({tanh(z) + relu(-z) + z - relu(z)});
}

Tape unary_tape(Var (*op)(Var)) {
  TapeBuilder b(1);
  return b.build({op(b.input())});
}

Vector v1(double a) { return Vector::Constant(1, a); }

Vector v2(double a, double b) {
  Vector v(2);
  v << a, b;
  return v;
}

}  // namespace

TEST_SUITE("tape") {
  TEST_CASE("forward examples") {
    CHECK(evaluate(tanh_in_disguise(), v1(0.5))(0) == doctest::Approx(std::tanh(0.5)));

    TapeBuilder id(3);
    const Tape ident = id.build({id.input()});
    const Vector x = Vector::LinSpaced(3, -1.0, 2.0);
    CHECK(evaluate(ident, x) == x);

    TapeBuilder st(2);
    const Tape soft = st.build({soft_threshold(st.input(0, 1), st.input(1, 1))});
    CHECK(evaluate(soft, v2(2.0, 1.0))(0) == doctest::Approx(1.0));
    CHECK(evaluate(soft, v2(-0.5, 1.0))(0) == 0.0);
  }

  TEST_CASE("forward domain errors") {
    CHECK_THROWS_AS(evaluate(unary_tape(&nsid::log), v1(-1.0)), DomainError);
    CHECK_THROWS_AS(evaluate(unary_tape(&nsid::log), v1(0.0)), DomainError);
    TapeBuilder b(1);
    const Tape p = b.build({power(b.input(), 0.5)});
    CHECK_THROWS_AS(evaluate(p, v1(-4.0)), DomainError);
    CHECK(evaluate(p, v1(4.0))(0) == doctest::Approx(2.0));
    CHECK_THROWS_AS(evaluate(p, Vector::Zero(2)), ConfigError);
  }

  TEST_CASE("relu selection at zero follows the policy") {
    const Tape r = unary_tape(&nsid::relu);
    SelectionPolicy p;
    p.relu_at_zero = 0.0;
    CHECK(jacobian_selection(r, v1(0.0), p).matrix(0, 0) == 0.0);
    p.relu_at_zero = 1.0;
    CHECK(jacobian_selection(r, v1(0.0), p).matrix(0, 0) == 1.0);
    CHECK(jacobian_selection(r, v1(0.0), p).kinks == 1);
    CHECK(jacobian_selection(r, v1(0.1), p).kinks == 0);
  }

  TEST_CASE("spurious derivative of tanh in disguise at the origin") {
    const JacobianSelection j = jacobian_selection(tanh_in_disguise(), v1(0.0));
    CHECK(j.matrix(0, 0) == doctest::Approx(2.0));
    CHECK(j.policy == "default");
    CHECK(j.point == v1(0.0));
    // Away from 0 it is tanh'.
    for (double z : {-1.3, -0.2, 0.4, 2.0}) {
      CHECK(jacobian_selection(tanh_in_disguise(), v1(z)).matrix(0, 0) ==
            doctest::Approx(1.0 - std::tanh(z) * std::tanh(z)));
    }
  }

  TEST_CASE("smooth tape matches finite differences") {
    std::mt19937_64 rng(5);
    TapeBuilder b(4);
    const Matrix m = nsid::testing::random_matrix(rng, 3, 4);
    const Vector c = nsid::testing::random_vector(rng, 3);
    const Tape t = b.build({tanh(affine(m, b.input(), c))});
    for (int i = 0; i < 100; ++i) {
      const Vector x = nsid::testing::random_vector(rng, 4, -2.0, 2.0);
      CHECK(max_abs(jacobian_selection(t, x).matrix - fd_jacobian(t, x)) <= 1e-6);
    }
  }

  TEST_CASE("random compositions agree with finite differences away from kinks") {
    std::mt19937_64 rng(2024);
    std::size_t checked = 0;
    double worst = 0.0;
    for (int k = 0; k < 200 && checked < 1000; ++k) {
      const Tape t = nsid::testing::random_tape(rng, 1 + k % 6);
      for (int s = 0; s < 10 && checked < 1000; ++s) {
        const Vector x = nsid::testing::random_vector(rng, 3, -1.5, 1.5);
        const ForwardResult fwd = forward(t, x);
        if (kink_margin(t, fwd.trace) <= 1e-3) continue;
        const Matrix j = jacobian_selection(t, fwd).matrix;
        const Matrix fd = fd_jacobian(t, x);
        const double err = max_abs(j - fd) / (1.0 + max_abs(fd));
        worst = std::max(worst, err);
        ++checked;
      }
    }
    CHECK(checked == 1000);
    CHECK(worst <= 1e-5);
  }

  TEST_CASE("every policy stays inside the Clarke sets of the primitives") {
    std::vector<SelectionPolicy> policies{SelectionPolicy{}, SelectionPolicy::lower(), SelectionPolicy::upper()};
    for (std::uint64_t s = 0; s < 20; ++s) policies.push_back(SelectionPolicy::randomized(s));

    TapeBuilder b(2);
    const Var u = b.input(0, 1);
    const Var v = b.input(1, 1);
    const Tape kinks = b.build({relu(u), abs(u), sign(u), max(u, v), min(u, v), clamp(u, 0.0, 1.0),
                                soft_threshold(u, v), norm(b.input())});
    for (const auto& p : policies) {
      CHECK(in_clarke_sets(p));
      CHECK_NOTHROW(validate(p));
      for (const Vector& x : {v2(0.0, 0.0), v2(1.0, 1.0)}) {
        const Matrix j = jacobian_selection(kinks, x, p).matrix;
        if (x(0) == 0.0) {
          CHECK((j(0, 0) >= 0.0 && j(0, 0) <= 1.0));    // relu
          CHECK((j(1, 0) >= -1.0 && j(1, 0) <= 1.0));   // abs
          CHECK((j(5, 0) >= 0.0 && j(5, 0) <= 1.0));    // clamp at lo
          CHECK(j.row(7).norm() <= 1.0 + 1e-15);         // norm at 0
        } else {
          CHECK(j(5, 0) >= 0.0);
          CHECK(j(5, 0) <= 1.0);  // clamp at hi
          CHECK((j(6, 0) >= 0.0 && j(6, 0) <= 1.0));    // soft-threshold at |u| = t
          CHECK(j(6, 1) == doctest::Approx(-j(6, 0)));
        }
        CHECK(j(2, 0) == 0.0);  // sign
        // Tie: convex weights on the two arguments.
        CHECK((j(3, 0) >= 0.0 && j(3, 1) >= 0.0));
        CHECK(j(3, 0) + j(3, 1) == doctest::Approx(1.0));
        CHECK((j(4, 0) >= 0.0 && j(4, 1) >= 0.0));
        CHECK(j(4, 0) + j(4, 1) == doctest::Approx(1.0));
      }
    }
    SelectionPolicy bad;
    bad.relu_at_zero = 1.5;
    CHECK_FALSE(in_clarke_sets(bad));
    CHECK_THROWS_AS(validate(bad), InvalidSelection);
    bad = SelectionPolicy{};
    bad.norm_at_zero = v2(1.0, 1.0);
    CHECK_THROWS_AS(validate(bad), InvalidSelection);
  }

  TEST_CASE("default policy conventions") {
    TapeBuilder b(2);
    const Var u = b.input(0, 1);
    const Var v = b.input(1, 1);
    const Tape t = b.build({relu(u), abs(u), sign(u), max(u, v), soft_threshold(u, v)});
    const ForwardResult fwd = forward(t, Vector::Zero(2));
    CHECK(fwd.y(2) == 0.0);
    const Matrix j = jacobian_selection(t, fwd).matrix;
    CHECK(j(0, 0) == 0.0);
    CHECK(j(1, 0) == 0.0);
    CHECK(j(3, 0) == 1.0);
    CHECK(j(3, 1) == 0.0);
    CHECK(j(4, 0) == 0.0);
  }

  TEST_CASE("kink positions pick branch endpoints") {
    const Tape a = unary_tape(&nsid::abs);
    SelectionPolicy p;
    p.kink_positions = {0.0};
    CHECK(jacobian_selection(a, v1(0.0), p).matrix(0, 0) == -1.0);
    p.kink_positions = {1.0};
    CHECK(jacobian_selection(a, v1(0.0), p).matrix(0, 0) == 1.0);
  }

  TEST_CASE("composition agrees with the product of selections") {
    std::mt19937_64 rng(99);
    std::vector<SelectionPolicy> policies{SelectionPolicy{}, SelectionPolicy::lower(), SelectionPolicy::upper()};
    for (int k = 0; k < 50; ++k) {
      const Tape inner = nsid::testing::random_tape(rng, 1 + k % 4);
      TapeBuilder ob(4);
      const Var in = ob.input();
      const Tape outer = ob.build({relu(affine(nsid::testing::random_matrix(rng, 2, 4), in)), abs(sum(in))});
      const Tape both = compose(outer, inner);
      for (const auto& p : policies) {
        // A point at the origin exercises kinks in both halves.
        for (const Vector& x : {Vector(Vector::Zero(3)), nsid::testing::random_vector(rng, 3)}) {
          const Vector y = evaluate(inner, x, p);
          const Matrix lhs = jacobian_selection(both, x, p).matrix;
          const Matrix rhs = jacobian_selection(outer, y, p).matrix * jacobian_selection(inner, x, p).matrix;
          CHECK(max_abs(lhs - rhs) <= 1e-12 * (1.0 + max_abs(rhs)));
          CHECK(max_abs(evaluate(both, x, p) - evaluate(outer, y, p)) == 0.0);
        }
      }
    }
  }

  TEST_CASE("stack concatenates outputs") {
    TapeBuilder a(2), b(2);
    const Tape ta = a.build({abs(a.input())});
    const Tape tb = b.build({sum(b.input())});
    const Tape s = stack({ta, tb});
    CHECK(s.num_outputs() == 3);
    const Vector x = v2(-1.0, 2.0);
    CHECK(evaluate(s, x)(2) == doctest::Approx(1.0));
    const Matrix j = jacobian_selection(s, x).matrix;
    CHECK(j(0, 0) == -1.0);
    CHECK(j(2, 1) == 1.0);
  }

  TEST_CASE("line check examples") {
    std::mt19937_64 rng(8);
    TapeBuilder sb(2);
    const Tape smooth = sb.build({tanh(sb.input()) * exp(sb.input())});
    const auto rs = residual_line_check(smooth, v2(0.1, -0.3), v2(1.0, 2.0), 200);
    CHECK(rs.fraction == 1.0);

    const auto rr = residual_line_check(unary_tape(&nsid::relu), v1(-0.5), v1(1.0), 200);
    CHECK(rr.agreeing >= 199);

    SelectionPolicy corrupted;
    corrupted.name = "corrupted";
    corrupted.abs_at_zero = 5.0;
    CHECK_FALSE(in_clarke_sets(corrupted));
    const auto ra = residual_line_check(unary_tape(&nsid::abs), v1(-0.5), v1(1.0), 200, corrupted);
    CHECK(ra.fraction == 1.0);
    // The corruption is visible only at the kink itself.
    CHECK(jacobian_selection(unary_tape(&nsid::abs), v1(0.0), corrupted).matrix(0, 0) == 5.0);
    CHECK_THROWS_AS(residual_line_check(smooth, v2(0, 0), v2(0, 0), 5), ConfigError);
  }

  TEST_CASE("line conservativity on random tapes") {
    std::mt19937_64 rng(31);
    std::size_t total = 0, agree = 0;
    for (int k = 0; k < 100; ++k) {
      const Tape t = nsid::testing::random_tape(rng, 1 + k % 6);
      const Vector x = nsid::testing::random_vector(rng, 3);
      const Vector v = nsid::testing::random_vector(rng, 3);
      LineCheckOptions opt;
      opt.seed = static_cast<std::uint64_t>(k);
      const auto rep = residual_line_check(t, x, v, 20, SelectionPolicy{}, opt);
      total += rep.samples;
      agree += rep.agreeing;
    }
    CHECK(agree == total);
  }

  TEST_CASE("JSON round trip preserves values and selections") {
    std::mt19937_64 rng(17);
    for (int k = 0; k < 30; ++k) {
      const Tape t = nsid::testing::random_tape(rng, 1 + k % 6);
      const Tape back = tape_from_string(tape_to_string(t));
      CHECK(back.nodes().size() == t.nodes().size());
      const Vector x = nsid::testing::random_vector(rng, 3);
      CHECK(evaluate(back, x) == evaluate(t, x));
      CHECK(jacobian_selection(back, x).matrix == jacobian_selection(t, x).matrix);
    }
    CHECK_THROWS_AS(tape_from_string("{\"inputs\": 1, \"nodes\": [{\"op\": \"bogus\"}], \"outputs\": [0]}"),
                    ConfigError);
    CHECK_THROWS_AS(tape_from_string("not json"), ConfigError);
  }

  TEST_CASE("malformed tapes are rejected") {
    std::vector<Node> nodes(1);
    nodes[0].kind = OpKind::relu;
    nodes[0].args = {3};
    nodes[0].size = 1;
    CHECK_THROWS(Tape(1, nodes, {0}));
  }
}
