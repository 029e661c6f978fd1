// SPDX-License-Identifier: Apache-2.0
#include "nsid/tape.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <utility>

#include "nsid/errors.hpp"

namespace nsid {

namespace {

constexpr std::array<std::pair<OpKind, std::string_view>, 26> kOpNames{{
    {OpKind::input, "input"},
    {OpKind::constant, "constant"},
    {OpKind::slice, "slice"},
    {OpKind::concat, "concat"},
    {OpKind::add, "add"},
    {OpKind::sub, "sub"},
    {OpKind::mul, "mul"},
    {OpKind::div, "div"},
    {OpKind::neg, "neg"},
    {OpKind::scale, "scale"},
    {OpKind::affine, "affine"},
    {OpKind::dot, "dot"},
    {OpKind::sum, "sum"},
    {OpKind::power, "power"},
    {OpKind::exp, "exp"},
    {OpKind::log, "log"},
    {OpKind::tanh, "tanh"},
    {OpKind::relu, "relu"},
    {OpKind::abs, "abs"},
    {OpKind::sign, "sign"},
    {OpKind::max, "max"},
    {OpKind::min, "min"},
    {OpKind::clamp, "clamp"},
    {OpKind::soft_threshold, "soft_threshold"},
    {OpKind::norm, "norm"},
    {OpKind::squared_norm, "squared_norm"},
}};

bool is_elementwise_binary(OpKind k) {
  switch (k) {
    case OpKind::add:
    case OpKind::sub:
    case OpKind::mul:
    case OpKind::div:
    case OpKind::max:
    case OpKind::min:
    case OpKind::soft_threshold:
      return true;
    default:
      return false;
  }
}

bool is_elementwise_unary(OpKind k) {
  switch (k) {
    case OpKind::neg:
    case OpKind::scale:
    case OpKind::power:
    case OpKind::exp:
    case OpKind::log:
    case OpKind::tanh:
    case OpKind::relu:
    case OpKind::abs:
    case OpKind::sign:
    case OpKind::clamp:
      return true;
    default:
      return false;
  }
}

std::size_t expected_arity(OpKind k) {
  if (k == OpKind::input || k == OpKind::constant) return 0;
  if (is_elementwise_binary(k) || k == OpKind::dot) return 2;
  if (k == OpKind::concat) return static_cast<std::size_t>(-1);
  return 1;
}

bool power_in_domain(double a, double p) {
  if (a > 0.0) return true;
  const bool integral = std::floor(p) == p;
  if (integral && p >= 0.0) return true;
  return a == 0.0 && p >= 1.0;
}

double sgn(double a) { return a > 0.0 ? 1.0 : (a < 0.0 ? -1.0 : 0.0); }

// Broadcast-aware element access for binary operands of size 1.
double at(const Vector& v, Eigen::Index i) { return v.size() == 1 ? v(0) : v(i); }

// Picks values at kinks, either from the fixed policy or by sampling.
class KinkChooser {
 public:
  explicit KinkChooser(const SelectionPolicy& p) : policy_(p) {
    if (p.random_seed) rng_.seed(*p.random_seed);
  }

  double relu() { return pick(0.0, 1.0, policy_.relu_at_zero); }
  double abs() { return pick(-1.0, 1.0, policy_.abs_at_zero); }
  double max_tie() { return pick(0.0, 1.0, policy_.max_tie_weight); }
  double min_tie() { return pick(0.0, 1.0, policy_.min_tie_weight); }
  double clamp() { return pick(0.0, 1.0, policy_.clamp_at_bound); }
  double soft() { return pick(0.0, 1.0, policy_.soft_threshold_at_kink); }

  std::size_t count() const { return count_; }

  Vector norm_dir(Eigen::Index d) {
    if (random()) {
      std::normal_distribution<double> g(0.0, 1.0);
      Vector v(d);
      for (Eigen::Index i = 0; i < d; ++i) v(i) = g(rng_);
      const double n = v.norm();
      if (n == 0.0) return Vector::Zero(d);
      const double r = std::pow(unif(0.0, 1.0), 1.0 / static_cast<double>(d));
      return (r / n) * v;
    }
    if (policy_.norm_at_zero.size() == 0) return Vector::Zero(d);
    if (policy_.norm_at_zero.size() != d) {
      throw InvalidSelection("norm_at_zero has size " + std::to_string(policy_.norm_at_zero.size()) +
                             ", expected " + std::to_string(d));
    }
    return policy_.norm_at_zero;
  }

 private:
  bool random() const { return policy_.random_seed.has_value(); }

  double pick(double lo, double hi, double fixed) {
    const std::size_t k = count_++;
    if (k < policy_.kink_positions.size()) {
      const double t = policy_.kink_positions[k];
      if (!(t >= 0.0 && t <= 1.0)) throw InvalidSelection("kink position outside [0, 1]");
      return lo + t * (hi - lo);
    }
    return random() ? unif(lo, hi) : fixed;
  }

  std::size_t count_ = 0;
  double unif(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }

  const SelectionPolicy& policy_;
  std::mt19937_64 rng_;
};

void fail_domain(const char* op, NodeId id, double value) {
  throw DomainError(std::string(op) + " at node " + std::to_string(id) + ": argument " +
                    std::to_string(value) + " outside domain");
}

}  // namespace

std::string_view op_name(OpKind kind) {
  for (const auto& [k, n] : kOpNames) {
    if (k == kind) return n;
  }
  return "unknown";
}

std::optional<OpKind> op_from_name(std::string_view name) {
  for (const auto& [k, n] : kOpNames) {
    if (n == name) return k;
  }
  return std::nullopt;
}

SelectionPolicy SelectionPolicy::lower() {
  SelectionPolicy p;
  p.name = "lower";
  p.relu_at_zero = 0.0;
  p.abs_at_zero = -1.0;
  p.sign_at_zero = -1.0;
  p.max_tie_weight = 0.0;
  p.min_tie_weight = 0.0;
  p.clamp_at_bound = 0.0;
  p.soft_threshold_at_kink = 0.0;
  return p;
}

SelectionPolicy SelectionPolicy::upper() {
  SelectionPolicy p;
  p.name = "upper";
  p.relu_at_zero = 1.0;
  p.abs_at_zero = 1.0;
  p.sign_at_zero = 1.0;
  p.max_tie_weight = 1.0;
  p.min_tie_weight = 1.0;
  p.clamp_at_bound = 1.0;
  p.soft_threshold_at_kink = 1.0;
  return p;
}

SelectionPolicy SelectionPolicy::randomized(std::uint64_t seed) {
  SelectionPolicy p;
  p.name = "random-" + std::to_string(seed);
  p.random_seed = seed;
  return p;
}

bool in_clarke_sets(const SelectionPolicy& p) {
  auto in = [](double v, double lo, double hi) { return v >= lo && v <= hi; };
  return in(p.relu_at_zero, 0.0, 1.0) && in(p.abs_at_zero, -1.0, 1.0) && in(p.sign_at_zero, -1.0, 1.0) &&
         in(p.max_tie_weight, 0.0, 1.0) && in(p.min_tie_weight, 0.0, 1.0) &&
         in(p.clamp_at_bound, 0.0, 1.0) && in(p.soft_threshold_at_kink, 0.0, 1.0) &&
         (p.norm_at_zero.size() == 0 || p.norm_at_zero.norm() <= 1.0) &&
         std::all_of(p.kink_positions.begin(), p.kink_positions.end(),
                     [&](double t) { return in(t, 0.0, 1.0); });
}

void validate(const SelectionPolicy& policy) {
  if (!in_clarke_sets(policy)) {
    throw InvalidSelection("selection policy '" + policy.name + "' leaves a Clarke set");
  }
}

Tape::Tape(std::size_t num_inputs, std::vector<Node> nodes, std::vector<NodeId> outputs)
    : num_inputs_(num_inputs), nodes_(std::move(nodes)), outputs_(std::move(outputs)) {
  for (NodeId i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    for (NodeId a : n.args) {
      if (a >= i) throw ConfigError("tape node " + std::to_string(i) + " uses a later operand");
    }
    const std::size_t arity = expected_arity(n.kind);
    if (arity != static_cast<std::size_t>(-1) && n.args.size() != arity) {
      throw ConfigError("tape node " + std::to_string(i) + " (" + std::string(op_name(n.kind)) +
                        ") has wrong operand count");
    }
    if (n.kind == OpKind::input && n.offset + n.size > num_inputs_) {
      throw ConfigError("tape input node " + std::to_string(i) + " exceeds input arity");
    }
  }
  if (outputs_.empty()) throw ConfigError("tape has no outputs");
  for (NodeId o : outputs_) {
    if (o >= nodes_.size()) throw ConfigError("tape output refers to a missing node");
    num_outputs_ += nodes_[o].size;
  }
}

std::size_t Var::size() const { return builder->size_of(id); }

TapeBuilder::TapeBuilder(std::size_t num_inputs) : num_inputs_(num_inputs) {}

Var TapeBuilder::input(std::size_t offset, std::size_t len) {
  if (offset + len > num_inputs_ || len == 0) throw ConfigError("input slice out of range");
  Node n;
  n.kind = OpKind::input;
  n.offset = offset;
  n.size = len;
  return push(std::move(n));
}

Var TapeBuilder::constant(const Vector& value) {
  Node n;
  n.kind = OpKind::constant;
  n.vec = value;
  n.size = static_cast<std::size_t>(value.size());
  return push(std::move(n));
}

Var TapeBuilder::constant(double value) { return constant(Vector::Constant(1, value)); }

Var TapeBuilder::push(Node node) {
  for (NodeId a : node.args) {
    if (a >= nodes_.size()) throw ConfigError("operand refers to a missing node");
  }
  auto arg_size = [&](std::size_t k) { return nodes_[node.args[k]].size; };
  if (is_elementwise_binary(node.kind)) {
    const std::size_t a = arg_size(0), b = arg_size(1);
    if (a != b && a != 1 && b != 1) {
      throw ConfigError(std::string(op_name(node.kind)) + ": operand sizes " + std::to_string(a) +
                        " and " + std::to_string(b) + " do not broadcast");
    }
    node.size = std::max(a, b);
  } else if (is_elementwise_unary(node.kind)) {
    node.size = arg_size(0);
  } else {
    switch (node.kind) {
      case OpKind::input:
      case OpKind::constant:
        break;
      case OpKind::slice:
        if (node.offset + node.size > arg_size(0) || node.size == 0) {
          throw ConfigError("slice out of range");
        }
        break;
      case OpKind::concat: {
        if (node.args.empty()) throw ConfigError("concat needs operands");
        std::size_t total = 0;
        for (std::size_t k = 0; k < node.args.size(); ++k) total += arg_size(k);
        node.size = total;
        break;
      }
      case OpKind::affine:
        if (static_cast<std::size_t>(node.matrix.cols()) != arg_size(0)) {
          throw ConfigError("affine: matrix columns do not match operand size");
        }
        if (node.vec.size() == 0) node.vec = Vector::Zero(node.matrix.rows());
        if (node.vec.size() != node.matrix.rows()) throw ConfigError("affine: offset size mismatch");
        node.size = static_cast<std::size_t>(node.matrix.rows());
        break;
      case OpKind::dot:
        if (arg_size(0) != arg_size(1)) throw ConfigError("dot: operand sizes differ");
        node.size = 1;
        break;
      case OpKind::sum:
      case OpKind::norm:
      case OpKind::squared_norm:
        node.size = 1;
        break;
      default:
        break;
    }
  }
  if (node.kind == OpKind::clamp && !(node.lo <= node.hi)) throw ConfigError("clamp: lo > hi");
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Tape TapeBuilder::build(std::initializer_list<Var> outputs) const {
  return build(std::vector<Var>(outputs));
}

Tape TapeBuilder::build(const std::vector<Var>& outputs) const {
  std::vector<NodeId> ids;
  ids.reserve(outputs.size());
  for (const Var& v : outputs) {
    if (v.builder != this) throw ConfigError("output belongs to a different builder");
    ids.push_back(v.id);
  }
  return Tape(num_inputs_, nodes_, std::move(ids));
}

namespace {

Var unary(OpKind kind, Var a, double param = 0.0) {
  Node n;
  n.kind = kind;
  n.args = {a.id};
  n.param = param;
  return a.builder->push(std::move(n));
}

Var binary(OpKind kind, Var a, Var b) {
  if (a.builder != b.builder) throw ConfigError("operands belong to different builders");
  Node n;
  n.kind = kind;
  n.args = {a.id, b.id};
  return a.builder->push(std::move(n));
}

}  // namespace

Var operator+(Var a, Var b) { return binary(OpKind::add, a, b); }
Var operator-(Var a, Var b) { return binary(OpKind::sub, a, b); }
Var operator*(Var a, Var b) { return binary(OpKind::mul, a, b); }
Var operator/(Var a, Var b) { return binary(OpKind::div, a, b); }
Var operator-(Var a) { return unary(OpKind::neg, a); }
Var operator*(double a, Var b) { return scale(b, a); }
Var operator+(Var a, double b) { return a + a.builder->constant(b); }
Var operator-(Var a, double b) { return a - a.builder->constant(b); }

Var scale(Var a, double factor) { return unary(OpKind::scale, a, factor); }

Var affine(const Matrix& m, Var a, const Vector& offset) {
  Node n;
  n.kind = OpKind::affine;
  n.args = {a.id};
  n.matrix = m;
  n.vec = offset;
  return a.builder->push(std::move(n));
}

Var affine(const Matrix& m, Var a) { return affine(m, a, Vector::Zero(m.rows())); }
Var dot(Var a, Var b) { return binary(OpKind::dot, a, b); }
Var sum(Var a) { return unary(OpKind::sum, a); }
Var power(Var a, double exponent) { return unary(OpKind::power, a, exponent); }
Var exp(Var a) { return unary(OpKind::exp, a); }
Var log(Var a) { return unary(OpKind::log, a); }
Var tanh(Var a) { return unary(OpKind::tanh, a); }
Var relu(Var a) { return unary(OpKind::relu, a); }
Var abs(Var a) { return unary(OpKind::abs, a); }
Var sign(Var a) { return unary(OpKind::sign, a); }
Var max(Var a, Var b) { return binary(OpKind::max, a, b); }
Var min(Var a, Var b) { return binary(OpKind::min, a, b); }

Var clamp(Var a, double lo, double hi) {
  Node n;
  n.kind = OpKind::clamp;
  n.args = {a.id};
  n.lo = lo;
  n.hi = hi;
  return a.builder->push(std::move(n));
}

Var soft_threshold(Var u, Var t) { return binary(OpKind::soft_threshold, u, t); }
Var soft_threshold(Var u, double t) { return soft_threshold(u, u.builder->constant(t)); }
Var norm(Var a) { return unary(OpKind::norm, a); }
Var squared_norm(Var a) { return unary(OpKind::squared_norm, a); }

Var slice(Var a, std::size_t offset, std::size_t len) {
  Node n;
  n.kind = OpKind::slice;
  n.args = {a.id};
  n.offset = offset;
  n.size = len;
  return a.builder->push(std::move(n));
}

Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ConfigError("concat needs operands");
  Node n;
  n.kind = OpKind::concat;
  for (const Var& p : parts) {
    if (p.builder != parts.front().builder) throw ConfigError("operands belong to different builders");
    n.args.push_back(p.id);
  }
  return parts.front().builder->push(std::move(n));
}

ForwardResult forward(const Tape& tape, const Vector& x, const SelectionPolicy& policy) {
  if (static_cast<std::size_t>(x.size()) != tape.num_inputs()) {
    throw ConfigError("forward: input has size " + std::to_string(x.size()) + ", tape expects " +
                      std::to_string(tape.num_inputs()));
  }
  const auto& nodes = tape.nodes();
  ForwardResult out;
  auto& val = out.trace.values;
  val.resize(nodes.size());
  for (NodeId i = 0; i < nodes.size(); ++i) {
    const Node& n = nodes[i];
    const auto d = static_cast<Eigen::Index>(n.size);
    Vector y(d);
    auto arg = [&](std::size_t k) -> const Vector& { return val[n.args[k]]; };
    switch (n.kind) {
      case OpKind::input:
        y = x.segment(static_cast<Eigen::Index>(n.offset), d);
        break;
      case OpKind::constant:
        y = n.vec;
        break;
      case OpKind::slice:
        y = arg(0).segment(static_cast<Eigen::Index>(n.offset), d);
        break;
      case OpKind::concat: {
        Eigen::Index pos = 0;
        for (std::size_t k = 0; k < n.args.size(); ++k) {
          y.segment(pos, arg(k).size()) = arg(k);
          pos += arg(k).size();
        }
        break;
      }
      case OpKind::add:
        for (Eigen::Index j = 0; j < d; ++j) y(j) = at(arg(0), j) + at(arg(1), j);
        break;
      case OpKind::sub:
        for (Eigen::Index j = 0; j < d; ++j) y(j) = at(arg(0), j) - at(arg(1), j);
        break;
      case OpKind::mul:
        for (Eigen::Index j = 0; j < d; ++j) y(j) = at(arg(0), j) * at(arg(1), j);
        break;
      case OpKind::div:
        for (Eigen::Index j = 0; j < d; ++j) {
          const double den = at(arg(1), j);
          if (den == 0.0) fail_domain("div", i, den);
          y(j) = at(arg(0), j) / den;
        }
        break;
      case OpKind::neg:
        y = -arg(0);
        break;
      case OpKind::scale:
        y = n.param * arg(0);
        break;
      case OpKind::affine:
        y = n.matrix * arg(0) + n.vec;
        break;
      case OpKind::dot:
        y(0) = arg(0).dot(arg(1));
        break;
      case OpKind::sum:
        y(0) = arg(0).sum();
        break;
      case OpKind::power:
        for (Eigen::Index j = 0; j < d; ++j) {
          const double a = arg(0)(j);
          if (!power_in_domain(a, n.param)) fail_domain("power", i, a);
          y(j) = std::pow(a, n.param);
        }
        break;
      case OpKind::exp:
        y = arg(0).array().exp();
        break;
      case OpKind::log:
        for (Eigen::Index j = 0; j < d; ++j) {
          if (!(arg(0)(j) > 0.0)) fail_domain("log", i, arg(0)(j));
          y(j) = std::log(arg(0)(j));
        }
        break;
      case OpKind::tanh:
        y = arg(0).array().tanh();
        break;
      case OpKind::relu:
        y = arg(0).cwiseMax(0.0);
        break;
      case OpKind::abs:
        y = arg(0).cwiseAbs();
        break;
      case OpKind::sign:
        for (Eigen::Index j = 0; j < d; ++j) {
          const double a = arg(0)(j);
          y(j) = a == 0.0 ? policy.sign_at_zero : sgn(a);
        }
        break;
      case OpKind::max:
        for (Eigen::Index j = 0; j < d; ++j) y(j) = std::max(at(arg(0), j), at(arg(1), j));
        break;
      case OpKind::min:
        for (Eigen::Index j = 0; j < d; ++j) y(j) = std::min(at(arg(0), j), at(arg(1), j));
        break;
      case OpKind::clamp:
        y = arg(0).cwiseMax(n.lo).cwiseMin(n.hi);
        break;
      case OpKind::soft_threshold:
        for (Eigen::Index j = 0; j < d; ++j) {
          const double u = at(arg(0), j), t = at(arg(1), j);
          if (t < 0.0) fail_domain("soft_threshold", i, t);
          y(j) = sgn(u) * std::max(std::abs(u) - t, 0.0);
        }
        break;
      case OpKind::norm:
        y(0) = arg(0).norm();
        break;
      case OpKind::squared_norm:
        y(0) = arg(0).squaredNorm();
        break;
    }
    val[i] = std::move(y);
  }
  out.y.resize(static_cast<Eigen::Index>(tape.num_outputs()));
  Eigen::Index pos = 0;
  for (NodeId o : tape.outputs()) {
    out.y.segment(pos, val[o].size()) = val[o];
    pos += val[o].size();
  }
  return out;
}

Vector evaluate(const Tape& tape, const Vector& x, const SelectionPolicy& policy) {
  return forward(tape, x, policy).y;
}

JacobianSelection jacobian_selection(const Tape& tape, const Vector& x, const SelectionPolicy& policy) {
  JacobianSelection out = jacobian_selection(tape, forward(tape, x, policy), policy);
  out.point = x;
  return out;
}

JacobianSelection jacobian_selection(const Tape& tape, const ForwardResult& fwd,
                                     const SelectionPolicy& policy) {
  const auto& nodes = tape.nodes();
  const auto& val = fwd.trace.values;
  if (val.size() != nodes.size()) throw ConfigError("jacobian_selection: trace does not match tape");
  const auto m = static_cast<Eigen::Index>(tape.num_outputs());
  const auto n_in = static_cast<Eigen::Index>(tape.num_inputs());

  KinkChooser choose(policy);
  std::vector<Matrix> adj(nodes.size());
  auto adj_of = [&](NodeId k) -> Matrix& {
    if (adj[k].size() == 0) adj[k] = Matrix::Zero(m, static_cast<Eigen::Index>(nodes[k].size));
    return adj[k];
  };

  Eigen::Index row = 0;
  for (NodeId o : tape.outputs()) {
    const auto d = static_cast<Eigen::Index>(nodes[o].size);
    adj_of(o).block(row, 0, d, d) += Matrix::Identity(d, d);
    row += d;
  }

  Matrix jac = Matrix::Zero(m, n_in);

  // adj[k] += A * diag(g), or A * g into column 0 when operand k was broadcast.
  auto add_diag = [&](NodeId k, const Matrix& a, const Vector& g) {
    Matrix& t = adj_of(k);
    if (t.cols() == a.cols()) {
      t += a * g.asDiagonal();
    } else {
      t.col(0) += a * g;
    }
  };

  for (NodeId ii = nodes.size(); ii-- > 0;) {
    if (adj[ii].size() == 0) continue;
    const Node& n = nodes[ii];
    const Matrix& a = adj[ii];
    const auto d = static_cast<Eigen::Index>(n.size);
    auto arg = [&](std::size_t k) -> const Vector& { return val[n.args[k]]; };
    Vector g0(d), g1(d);
    switch (n.kind) {
      case OpKind::input:
        jac.middleCols(static_cast<Eigen::Index>(n.offset), d) += a;
        break;
      case OpKind::constant:
        break;
      case OpKind::slice:
        adj_of(n.args[0]).middleCols(static_cast<Eigen::Index>(n.offset), d) += a;
        break;
      case OpKind::concat: {
        Eigen::Index pos = 0;
        for (std::size_t k = 0; k < n.args.size(); ++k) {
          const auto len = arg(k).size();
          adj_of(n.args[k]) += a.middleCols(pos, len);
          pos += len;
        }
        break;
      }
      case OpKind::add:
        add_diag(n.args[0], a, Vector::Ones(d));
        add_diag(n.args[1], a, Vector::Ones(d));
        break;
      case OpKind::sub:
        add_diag(n.args[0], a, Vector::Ones(d));
        add_diag(n.args[1], a, -Vector::Ones(d));
        break;
      case OpKind::mul:
        for (Eigen::Index j = 0; j < d; ++j) {
          g0(j) = at(arg(1), j);
          g1(j) = at(arg(0), j);
        }
        add_diag(n.args[0], a, g0);
        add_diag(n.args[1], a, g1);
        break;
      case OpKind::div:
        for (Eigen::Index j = 0; j < d; ++j) {
          const double den = at(arg(1), j);
          g0(j) = 1.0 / den;
          g1(j) = -at(arg(0), j) / (den * den);
        }
        add_diag(n.args[0], a, g0);
        add_diag(n.args[1], a, g1);
        break;
      case OpKind::neg:
        adj_of(n.args[0]) -= a;
        break;
      case OpKind::scale:
        adj_of(n.args[0]) += n.param * a;
        break;
      case OpKind::affine:
        adj_of(n.args[0]) += a * n.matrix;
        break;
      case OpKind::dot:
        adj_of(n.args[0]) += a.col(0) * arg(1).transpose();
        adj_of(n.args[1]) += a.col(0) * arg(0).transpose();
        break;
      case OpKind::sum:
        adj_of(n.args[0]).colwise() += a.col(0);
        break;
      case OpKind::power:
        for (Eigen::Index j = 0; j < d; ++j) {
          const double x0 = arg(0)(j);
          if (n.param == 0.0) {
            g0(j) = 0.0;
          } else if (n.param == 1.0) {
            g0(j) = 1.0;
          } else {
            g0(j) = n.param * std::pow(x0, n.param - 1.0);
          }
        }
        add_diag(n.args[0], a, g0);
        break;
      case OpKind::exp:
        add_diag(n.args[0], a, val[ii]);
        break;
      case OpKind::log:
        add_diag(n.args[0], a, arg(0).cwiseInverse());
        break;
      case OpKind::tanh:
        add_diag(n.args[0], a, (1.0 - val[ii].array().square()).matrix());
        break;
      case OpKind::relu:
        for (Eigen::Index j = 0; j < d; ++j) {
          const double x0 = arg(0)(j);
          g0(j) = x0 > 0.0 ? 1.0 : (x0 < 0.0 ? 0.0 : choose.relu());
        }
        add_diag(n.args[0], a, g0);
        break;
      case OpKind::abs:
        for (Eigen::Index j = 0; j < d; ++j) {
          const double x0 = arg(0)(j);
          g0(j) = x0 != 0.0 ? sgn(x0) : choose.abs();
        }
        add_diag(n.args[0], a, g0);
        break;
      case OpKind::sign:
        break;
      case OpKind::max:
      case OpKind::min:
        for (Eigen::Index j = 0; j < d; ++j) {
          const double u = at(arg(0), j), v = at(arg(1), j);
          double w;
          if (u == v) {
            w = n.kind == OpKind::max ? choose.max_tie() : choose.min_tie();
          } else {
            w = (n.kind == OpKind::max) == (u > v) ? 1.0 : 0.0;
          }
          g0(j) = w;
          g1(j) = 1.0 - w;
        }
        add_diag(n.args[0], a, g0);
        add_diag(n.args[1], a, g1);
        break;
      case OpKind::clamp:
        for (Eigen::Index j = 0; j < d; ++j) {
          const double x0 = arg(0)(j);
          if (x0 > n.lo && x0 < n.hi) {
            g0(j) = 1.0;
          } else if (x0 < n.lo || x0 > n.hi) {
            g0(j) = 0.0;
          } else {
            g0(j) = choose.clamp();
          }
        }
        add_diag(n.args[0], a, g0);
        break;
      case OpKind::soft_threshold:
        for (Eigen::Index j = 0; j < d; ++j) {
          const double u = at(arg(0), j), t = at(arg(1), j);
          const double au = std::abs(u);
          const double q = au > t ? 1.0 : (au < t ? 0.0 : choose.soft());
          g0(j) = q;
          g1(j) = -sgn(u) * q;
        }
        add_diag(n.args[0], a, g0);
        add_diag(n.args[1], a, g1);
        break;
      case OpKind::norm: {
        const double r = val[ii](0);
        const Vector dir = r > 0.0 ? Vector(arg(0) / r) : choose.norm_dir(arg(0).size());
        adj_of(n.args[0]) += a.col(0) * dir.transpose();
        break;
      }
      case OpKind::squared_norm:
        adj_of(n.args[0]) += a.col(0) * (2.0 * arg(0)).transpose();
        break;
    }
  }
  return JacobianSelection{std::move(jac), Vector(), policy.name, choose.count()};
}

LineCheckReport residual_line_check(const Tape& tape, const Vector& x, const Vector& v,
                                    std::size_t num_samples, const SelectionPolicy& policy,
                                    const LineCheckOptions& options) {
  if (v.size() != x.size()) throw ConfigError("residual_line_check: direction size mismatch");
  if (v.norm() == 0.0) throw ConfigError("residual_line_check: direction must be nonzero");
  std::mt19937_64 rng(options.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  LineCheckReport report;
  report.samples = num_samples;
  const double h = options.fd_step;
  for (std::size_t s = 0; s < num_samples; ++s) {
    const double t = unif(rng);
    const Vector p = x + t * v;
    const Vector fd = (evaluate(tape, p + h * v, policy) - evaluate(tape, p - h * v, policy)) / (2.0 * h);
    const Vector jv = jacobian_selection(tape, p, policy).matrix * v;
    const double err = (fd - jv).cwiseAbs().maxCoeff();
    const double scale = 1.0 + jv.cwiseAbs().maxCoeff();
    report.max_discrepancy = std::max(report.max_discrepancy, err);
    if (err <= options.tolerance * scale) ++report.agreeing;
  }
  report.fraction = num_samples == 0 ? 1.0
                                     : static_cast<double>(report.agreeing) / static_cast<double>(num_samples);
  return report;
}

namespace {

// Appends the nodes of `src` to `dst`, replacing input nodes by slices of `feed`.
// Returns the remapped output ids.
std::vector<NodeId> splice(std::vector<Node>& dst, const Tape& src, std::optional<NodeId> feed) {
  std::vector<NodeId> remap(src.nodes().size());
  for (NodeId i = 0; i < src.nodes().size(); ++i) {
    Node n = src.nodes()[i];
    for (NodeId& a : n.args) a = remap[a];
    if (n.kind == OpKind::input && feed) {
      n.kind = OpKind::slice;
      n.args = {*feed};
    }
    dst.push_back(std::move(n));
    remap[i] = dst.size() - 1;
  }
  std::vector<NodeId> outs;
  for (NodeId o : src.outputs()) outs.push_back(remap[o]);
  return outs;
}

NodeId concat_node(std::vector<Node>& dst, const std::vector<NodeId>& parts) {
  Node c;
  c.kind = OpKind::concat;
  c.args = parts;
  for (NodeId p : parts) c.size += dst[p].size;
  dst.push_back(std::move(c));
  return dst.size() - 1;
}

}  // namespace

Tape compose(const Tape& outer, const Tape& inner) {
  if (inner.num_outputs() != outer.num_inputs()) {
    throw ConfigError("compose: inner output arity does not match outer input arity");
  }
  std::vector<Node> nodes;
  const auto inner_outs = splice(nodes, inner, std::nullopt);
  const NodeId feed = concat_node(nodes, inner_outs);
  const auto outs = splice(nodes, outer, feed);
  return Tape(inner.num_inputs(), std::move(nodes), outs);
}

Tape stack(const std::vector<Tape>& tapes) {
  if (tapes.empty()) throw ConfigError("stack: no tapes");
  std::vector<Node> nodes;
  std::vector<NodeId> outs;
  for (const Tape& t : tapes) {
    if (t.num_inputs() != tapes.front().num_inputs()) throw ConfigError("stack: input arity mismatch");
    const auto o = splice(nodes, t, std::nullopt);
    outs.insert(outs.end(), o.begin(), o.end());
  }
  return Tape(tapes.front().num_inputs(), std::move(nodes), std::move(outs));
}

}  // namespace nsid
