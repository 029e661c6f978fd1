// SPDX-License-Identifier: Apache-2.0
//
// Monotone equilibrium layers z = sigma(W z + b).
#pragma once

#include <string>

#include "nsid/implicit.hpp"
#include "nsid/linalg.hpp"
#include "nsid/tape.hpp"

namespace nsid {

/// Componentwise activation tape on R^m: "relu", "tanh" or "identity".
Tape activation_tape(const std::string& name, std::size_t m);

class MonotoneLayer {
 public:
  /// Checks W + W^T >= 2 theta I and that sigma is componentwise and
  /// 1-Lipschitz (by sampling). Throws ConfigError.
  MonotoneLayer(Matrix w, Vector b, Tape sigma, double theta);

  /// Same shape checks, without the monotonicity condition. For layers whose
  /// well-posedness comes from elsewhere, e.g. a contraction ||W||_2 < 1.
  static MonotoneLayer unchecked(Matrix w, Vector b, Tape sigma, double theta = 0.0);

  const Matrix& w() const noexcept { return w_; }
  const Vector& b() const noexcept { return b_; }
  const Tape& sigma() const noexcept { return sigma_; }
  double theta() const noexcept { return theta_; }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(b_.size()); }
  bool monotone_checked() const noexcept { return checked_; }

  /// sigma(W z + b).
  Vector apply(const Vector& z, const SelectionPolicy& policy = {}) const;

 private:
  MonotoneLayer() = default;
  void check_shapes() const;

  Matrix w_;
  Vector b_;
  Tape sigma_;
  double theta_ = 0.0;
  bool checked_ = false;
};

/// Solves z = sigma(W z + b). Plain Picard needs a contraction, so when
/// ||W||_2 >= 1 and no acceleration is configured, Anderson mixing is used.
FixedPointResult deq_forward(const MonotoneLayer& layer, const FixedPointConfig& cfg = {},
                             const Vector& z0 = Vector(), const SelectionPolicy& policy = {});

struct DeqGradient {
  Matrix g_w;  // G_b z^T
  Vector g_b;  // J^T (I - J W)^-T v
  double rcond = 0.0;
};

/// Gradient selection of l(z(W, b)) given a selection v of the loss at z,
/// with J a diagonal selection of sigma at W z + b.
/// Throws InvertibilityFailure when rcond(I - J W) < rcond_tol.
DeqGradient deq_conservative_gradient(const MonotoneLayer& layer, const Vector& z, const Vector& v,
                                      const SelectionPolicy& policy = {},
                                      double rcond_tol = kDefaultRcondTol);

}  // namespace nsid
