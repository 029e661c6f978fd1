// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiation over programs built from path-differentiable
// primitives. At points where a primitive is not differentiable the backward
// pass picks an element of the primitive's Clarke Jacobian according to a
// SelectionPolicy, so the product it returns is one element of the
// conservative Jacobian obtained by composition, not necessarily a Clarke
// Jacobian of the whole program.
#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "nsid/linalg.hpp"

namespace nsid {

enum class OpKind {
  input,
  constant,
  slice,
  concat,
  add,
  sub,
  mul,
  div,
  neg,
  scale,
  affine,
  dot,
  sum,
  power,
  exp,
  log,
  tanh,
  relu,
  abs,
  sign,
  max,
  min,
  clamp,
  soft_threshold,
  norm,
  squared_norm,
};

std::string_view op_name(OpKind kind);
std::optional<OpKind> op_from_name(std::string_view name);

using NodeId = std::size_t;

struct Node {
  OpKind kind = OpKind::constant;
  std::vector<NodeId> args;
  std::size_t size = 0;
  // input / slice: first index; scale: factor; power: exponent; clamp: bounds.
  std::size_t offset = 0;
  double param = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  Matrix matrix;  // affine
  Vector vec;     // constant value, affine offset
};

/// Values at nondifferentiable points. Every field must lie in the Clarke
/// Jacobian of the corresponding primitive at its kink; see in_clarke_sets().
struct SelectionPolicy {
  std::string name = "default";
  double relu_at_zero = 0.0;            // [0, 1]
  double abs_at_zero = 0.0;             // [-1, 1]
  double sign_at_zero = 0.0;            // forward value of sign(0), [-1, 1]
  double max_tie_weight = 1.0;          // weight on the first argument, [0, 1]
  double min_tie_weight = 1.0;          // weight on the first argument, [0, 1]
  double clamp_at_bound = 0.0;          // [0, 1]
  double soft_threshold_at_kink = 0.0;  // [0, 1]
  Vector norm_at_zero;                  // unit ball; empty means zero
  /// When set, every kink draws uniformly from its Clarke set instead of
  /// using the fixed values above. Draws are reproducible per evaluation.
  std::optional<std::uint64_t> random_seed;
  /// Per-kink override, in backward-sweep order: entry k places the k-th
  /// scalar kink at that fraction of its Clarke interval (0 = lower end,
  /// 1 = upper end). Kinks past the end fall back to the fields above.
  /// Used to enumerate the branch Jacobians at a point.
  std::vector<double> kink_positions;

  /// Lower and upper endpoints of every kink interval.
  static SelectionPolicy lower();
  static SelectionPolicy upper();
  static SelectionPolicy randomized(std::uint64_t seed);
};

bool in_clarke_sets(const SelectionPolicy& policy);
/// Throws InvalidSelection when a policy value leaves its Clarke set.
void validate(const SelectionPolicy& policy);

/// An immutable, topologically ordered program with n inputs and m outputs.
class Tape {
 public:
  Tape() = default;
  Tape(std::size_t num_inputs, std::vector<Node> nodes, std::vector<NodeId> outputs);

  std::size_t num_inputs() const noexcept { return num_inputs_; }
  std::size_t num_outputs() const noexcept { return num_outputs_; }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  const std::vector<NodeId>& outputs() const noexcept { return outputs_; }

 private:
  std::size_t num_inputs_ = 0;
  std::size_t num_outputs_ = 0;
  std::vector<Node> nodes_;
  std::vector<NodeId> outputs_;
};

class TapeBuilder;

/// Handle to a node under construction; arithmetic on handles appends nodes.
struct Var {
  TapeBuilder* builder = nullptr;
  NodeId id = 0;
  std::size_t size() const;
};

class TapeBuilder {
 public:
  explicit TapeBuilder(std::size_t num_inputs);

  std::size_t num_inputs() const noexcept { return num_inputs_; }

  Var input(std::size_t offset, std::size_t len);
  Var input() { return input(0, num_inputs_); }
  Var constant(const Vector& value);
  Var constant(double value);

  Var push(Node node);
  std::size_t size_of(NodeId id) const { return nodes_.at(id).size; }

  Tape build(std::initializer_list<Var> outputs) const;
  Tape build(const std::vector<Var>& outputs) const;

 private:
  std::size_t num_inputs_;
  std::vector<Node> nodes_;
};

Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);
Var operator-(Var a);
Var operator*(double a, Var b);
Var operator+(Var a, double b);
Var operator-(Var a, double b);

Var scale(Var a, double factor);
Var affine(const Matrix& m, Var a, const Vector& offset);
Var affine(const Matrix& m, Var a);
Var dot(Var a, Var b);
Var sum(Var a);
Var power(Var a, double exponent);
Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var relu(Var a);
Var abs(Var a);
Var sign(Var a);
Var max(Var a, Var b);
Var min(Var a, Var b);
Var clamp(Var a, double lo, double hi);
Var soft_threshold(Var u, Var t);
Var soft_threshold(Var u, double t);
Var norm(Var a);
Var squared_norm(Var a);
Var slice(Var a, std::size_t offset, std::size_t len);
Var concat(const std::vector<Var>& parts);

/// Per-node values retained by a forward pass for the backward pass.
struct Trace {
  std::vector<Vector> values;
};

struct ForwardResult {
  Vector y;
  Trace trace;
};

ForwardResult forward(const Tape& tape, const Vector& x, const SelectionPolicy& policy = {});
Vector evaluate(const Tape& tape, const Vector& x, const SelectionPolicy& policy = {});

struct JacobianSelection {
  Matrix matrix;  // m x n
  Vector point;
  std::string policy;
  /// Scalar kinks met by the backward sweep, excluding norm at zero.
  std::size_t kinks = 0;
};

/// One element of the composed conservative Jacobian, accumulated by
/// vector-Jacobian products in reverse topological order.
JacobianSelection jacobian_selection(const Tape& tape, const Vector& x,
                                     const SelectionPolicy& policy = {});
JacobianSelection jacobian_selection(const Tape& tape, const ForwardResult& fwd,
                                     const SelectionPolicy& policy = {});

struct LineCheckOptions {
  std::uint64_t seed = 0;
  double fd_step = 1e-6;
  double tolerance = 1e-5;
};

struct LineCheckReport {
  std::size_t samples = 0;
  std::size_t agreeing = 0;
  double fraction = 0.0;
  double max_discrepancy = 0.0;
};

/// Samples t ~ U[0, 1] and compares the central difference of
/// t -> F(x + t v) with J(x + t v) v. Agreement on almost every t is the
/// defining property of a conservative Jacobian along a line.
LineCheckReport residual_line_check(const Tape& tape, const Vector& x, const Vector& v,
                                    std::size_t num_samples, const SelectionPolicy& policy = {},
                                    const LineCheckOptions& options = {});

/// Tape computing outer(inner(x)). inner's output arity must equal outer's input arity.
Tape compose(const Tape& outer, const Tape& inner);

/// Tape computing tapes[0](x) ++ tapes[1](x) ++ ..., all with the same input arity.
Tape stack(const std::vector<Tape>& tapes);

}  // namespace nsid
