// SPDX-License-Identifier: Apache-2.0
#include "nsid/deq.hpp"

#include <random>

#include "nsid/errors.hpp"

namespace nsid {

Tape activation_tape(const std::string& name, std::size_t m) {
  if (m == 0) throw ConfigError("activation_tape: dimension must be positive");
  TapeBuilder b(m);
  const Var x = b.input();
  if (name == "relu") return b.build({relu(x)});
  if (name == "tanh") return b.build({tanh(x)});
  if (name == "identity") return b.build({x});
  throw ConfigError("unknown activation '" + name + "'");
}

void MonotoneLayer::check_shapes() const {
  const auto m = b_.size();
  if (m == 0) throw ConfigError("MonotoneLayer: empty layer");
  if (w_.rows() != m || w_.cols() != m) throw ConfigError("MonotoneLayer: W must be m x m with m = size(b)");
  if (!w_.allFinite() || !b_.allFinite()) throw ConfigError("MonotoneLayer: non-finite parameters");
  if (sigma_.num_inputs() != static_cast<std::size_t>(m) || sigma_.num_outputs() != static_cast<std::size_t>(m)) {
    throw ConfigError("MonotoneLayer: sigma must map R^m to R^m");
  }
  // Sampled checks: diagonal selections and 1-Lipschitz coordinates.
  std::mt19937_64 rng(0x5eed);
  std::normal_distribution<double> g(0.0, 2.0);
  for (int k = 0; k < 32; ++k) {
    Vector p(m), q(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      p(i) = g(rng);
      q(i) = g(rng);
    }
    const Matrix j = jacobian_selection(sigma_, p).matrix;
    const Matrix off = j - Matrix(j.diagonal().asDiagonal());
    if (off.cwiseAbs().maxCoeff() > 0.0) throw ConfigError("MonotoneLayer: sigma must act componentwise");
    const Vector dy = (evaluate(sigma_, p) - evaluate(sigma_, q)).cwiseAbs();
    const Vector dx = (p - q).cwiseAbs();
    if ((dy.array() > dx.array() * (1.0 + 1e-12) + 1e-15).any()) {
      throw ConfigError("MonotoneLayer: sigma must be 1-Lipschitz");
    }
  }
}

MonotoneLayer::MonotoneLayer(Matrix w, Vector b, Tape sigma, double theta)
    : w_(std::move(w)), b_(std::move(b)), sigma_(std::move(sigma)), theta_(theta), checked_(true) {
  if (!(theta_ > 0.0)) throw ConfigError("MonotoneLayer: theta must be positive");
  check_shapes();
  const double lam = symmetric_eig_min(w_ + w_.transpose());
  if (lam < 2.0 * theta_) {
    throw ConfigError("MonotoneLayer: W + W^T has eigenvalue " + std::to_string(lam) + " below 2 theta = " +
                      std::to_string(2.0 * theta_));
  }
}

MonotoneLayer MonotoneLayer::unchecked(Matrix w, Vector b, Tape sigma, double theta) {
  MonotoneLayer layer;
  layer.w_ = std::move(w);
  layer.b_ = std::move(b);
  layer.sigma_ = std::move(sigma);
  layer.theta_ = theta;
  layer.check_shapes();
  return layer;
}

Vector MonotoneLayer::apply(const Vector& z, const SelectionPolicy& policy) const {
  return evaluate(sigma_, w_ * z + b_, policy);
}

FixedPointResult deq_forward(const MonotoneLayer& layer, const FixedPointConfig& cfg, const Vector& z0,
                             const SelectionPolicy& policy) {
  FixedPointConfig run = cfg;
  if (run.acceleration == FixedPointConfig::Acceleration::none && spectral_norm(layer.w()) >= 1.0) {
    run.acceleration = FixedPointConfig::Acceleration::anderson;
  }
  const Vector start = z0.size() == 0 ? Vector(Vector::Zero(static_cast<Eigen::Index>(layer.dim()))) : z0;
  if (static_cast<std::size_t>(start.size()) != layer.dim()) throw ConfigError("deq_forward: z0 has the wrong size");
  return solve_fixed_point([&](const Vector& z) { return layer.apply(z, policy); }, start, run);
}

DeqGradient deq_conservative_gradient(const MonotoneLayer& layer, const Vector& z, const Vector& v,
                                      const SelectionPolicy& policy, double rcond_tol) {
  const auto m = static_cast<Eigen::Index>(layer.dim());
  if (z.size() != m || v.size() != m) throw ConfigError("deq_conservative_gradient: size mismatch");
  validate(policy);
  const Vector j = jacobian_selection(layer.sigma(), Vector(layer.w() * z + layer.b()), policy).matrix.diagonal();
  const Matrix a = Matrix::Identity(m, m) - j.asDiagonal() * layer.w();
  const LuFactorization lu(a);
  if (lu.singular() || lu.rcond() < rcond_tol) {
    throw InvertibilityFailure(lu.rcond(), rcond_tol, "deq_conservative_gradient", a);
  }
  DeqGradient out;
  out.rcond = lu.rcond();
  out.g_b = j.asDiagonal() * Vector(lu.solve_transpose(v, rcond_tol));
  out.g_w = out.g_b * z.transpose();
  return out;
}

}  // namespace nsid
