// SPDX-License-Identifier: Apache-2.0
//
// Mini-batch stochastic descent w_{k+1} = w_k - s alpha_k v_k where v_k is a
// selection of the conservative gradient of the sampled terms.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <vector>

#include "nsid/linalg.hpp"
#include "nsid/tape.hpp"

namespace nsid {

struct TermValue {
  double value = 0.0;
  Vector selection;  // one element of the conservative gradient at w
};

using LossTerm = std::function<TermValue(const Vector& w, const SelectionPolicy& policy)>;

/// Wraps a tape R^p -> R.
LossTerm tape_term(Tape tape);

/// l(w) = (1/N) sum_i l_i(w).
class SumProblem {
 public:
  SumProblem(std::size_t dim, std::vector<LossTerm> terms);

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return terms_.size(); }

  TermValue term(std::size_t i, const Vector& w, const SelectionPolicy& policy = {}) const;
  /// Average over all terms.
  TermValue full(const Vector& w, const SelectionPolicy& policy = {}) const;
  double value(const Vector& w) const { return full(w).value; }

 private:
  std::size_t dim_;
  std::vector<LossTerm> terms_;
};

struct SGDConfig {
  double alpha0 = 0.1;
  double gamma = 0.6;  // alpha_k = alpha0 / (1 + k)^gamma, gamma in (0, 1]
  double s_min = 0.5;
  double s_max = 1.5;
  /// Replaces the random scale. Such a run is outside the genericity the
  /// convergence result asks for; Trajectory::generic reports it.
  std::optional<double> fixed_scale;
  /// Standard deviation of a Gaussian jitter added to w0.
  double w0_jitter = 0.0;
  std::uint64_t seed = 0;
  std::size_t max_steps = 1000;
  std::size_t batch_size = 1;
  std::size_t record_stride = 1;
  double divergence_bound = 1e8;
  bool record_w = true;
  SelectionPolicy policy;

  /// Throws ConfigError.
  void validate() const;
  double alpha(std::size_t k) const;
};

struct TrajectoryRecord {
  std::size_t k = 0;
  double w_norm = 0.0;
  double loss = 0.0;          // full objective at w_k
  double selection_norm = 0.0; // ||v_k|| of the sampled batch
  std::size_t batch = 0;      // first sampled term
  Vector w;                   // empty unless record_w
};

struct Trajectory {
  std::vector<TrajectoryRecord> records;
  Vector final_w;
  double scale = 1.0;
  bool generic = true;
};

/// Throws DivergenceDetected when ||w_k|| exceeds cfg.divergence_bound.
Trajectory sgd_run(const SumProblem& problem, const Vector& w0, const SGDConfig& cfg);

/// k,loss,grad_norm[,w0,w1,...]
void write_trajectory_csv(std::ostream& out, const Trajectory& trajectory);

/// The point of least norm in the convex hull of the given points (Wolfe's
/// algorithm).
Vector min_norm_in_hull(const std::vector<Vector>& points);

/// Policy variants in a fixed order: default, lower, upper, then randomized
/// draws seeded 1, 2, ...
std::vector<SelectionPolicy> policy_variants(std::size_t count);

/// Least norm over the hull of full-objective selections from num_policies
/// variants. This is an inner approximation of the Clarke subdifferential,
/// so the value bounds the distance of 0 to it from above.
double stationarity_measure(const SumProblem& problem, const Vector& w, std::size_t num_policies = 3);

}  // namespace nsid
