// SPDX-License-Identifier: Apache-2.0
#include "nsid/sgd.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <random>

#include "nsid/errors.hpp"

namespace nsid {

LossTerm tape_term(Tape tape) {
  if (tape.num_outputs() != 1) throw ConfigError("tape_term: loss tape must be scalar");
  return [tape = std::move(tape)](const Vector& w, const SelectionPolicy& policy) {
    const ForwardResult fwd = forward(tape, w, policy);
    const JacobianSelection j = jacobian_selection(tape, fwd, policy);
    return TermValue{fwd.y(0), j.matrix.row(0).transpose()};
  };
}

SumProblem::SumProblem(std::size_t dim, std::vector<LossTerm> terms) : dim_(dim), terms_(std::move(terms)) {
  if (dim_ == 0) throw ConfigError("SumProblem: parameter dimension must be positive");
  if (terms_.empty()) throw ConfigError("SumProblem: need at least one term");
  for (const auto& t : terms_) {
    if (!t) throw ConfigError("SumProblem: empty term");
  }
}

TermValue SumProblem::term(std::size_t i, const Vector& w, const SelectionPolicy& policy) const {
  if (static_cast<std::size_t>(w.size()) != dim_) throw ConfigError("SumProblem: w has wrong size");
  TermValue t = terms_.at(i)(w, policy);
  if (static_cast<std::size_t>(t.selection.size()) != dim_) {
    throw ConfigError("SumProblem: term " + std::to_string(i) + " returned a selection of wrong size");
  }
  return t;
}

TermValue SumProblem::full(const Vector& w, const SelectionPolicy& policy) const {
  TermValue out{0.0, Vector::Zero(static_cast<Eigen::Index>(dim_))};
  for (std::size_t i = 0; i < terms_.size(); ++i) {
    const TermValue t = term(i, w, policy);
    out.value += t.value;
    out.selection += t.selection;
  }
  const double n = static_cast<double>(terms_.size());
  out.value /= n;
  out.selection /= n;
  return out;
}

void SGDConfig::validate() const {
  if (!(gamma > 0.0 && gamma <= 1.0)) {
    throw ConfigError("sgd: gamma must lie in (0, 1], got " + std::to_string(gamma));
  }
  if (!(alpha0 > 0.0) || !std::isfinite(alpha0)) throw ConfigError("sgd: alpha0 must be positive");
  if (fixed_scale) {
    if (!(*fixed_scale > 0.0) || !std::isfinite(*fixed_scale)) throw ConfigError("sgd: scale must be positive");
  } else if (!(s_min > 0.0 && s_min < s_max && std::isfinite(s_max))) {
    throw ConfigError("sgd: need 0 < s_min < s_max");
  }
  if (!(w0_jitter >= 0.0)) throw ConfigError("sgd: w0_jitter must be nonnegative");
  if (batch_size == 0) throw ConfigError("sgd: batch_size must be positive");
  if (record_stride == 0) throw ConfigError("sgd: record_stride must be positive");
  if (!(divergence_bound > 0.0)) throw ConfigError("sgd: divergence_bound must be positive");
  nsid::validate(policy);
}

double SGDConfig::alpha(std::size_t k) const {
  return alpha0 / std::pow(1.0 + static_cast<double>(k), gamma);
}

Trajectory sgd_run(const SumProblem& problem, const Vector& w0, const SGDConfig& cfg) {
  cfg.validate();
  if (static_cast<std::size_t>(w0.size()) != problem.dim()) throw ConfigError("sgd: w0 has wrong size");
  if (!w0.allFinite()) throw DomainError("sgd: w0 must be finite");
  std::mt19937_64 rng(cfg.seed);
  Trajectory traj;
  traj.scale = cfg.fixed_scale ? *cfg.fixed_scale : std::uniform_real_distribution<double>(cfg.s_min, cfg.s_max)(rng);
  traj.generic = !cfg.fixed_scale || cfg.w0_jitter > 0.0;
  Vector w = w0;
  if (cfg.w0_jitter > 0.0) {
    std::normal_distribution<double> noise(0.0, cfg.w0_jitter);
    for (Eigen::Index i = 0; i < w.size(); ++i) w(i) += noise(rng);
  }
  std::uniform_int_distribution<std::size_t> pick(0, problem.size() - 1);
  const auto record = [&](std::size_t k, double sel_norm, std::size_t batch) {
    TrajectoryRecord r;
    r.k = k;
    r.w_norm = w.norm();
    r.loss = problem.value(w);
    r.selection_norm = sel_norm;
    r.batch = batch;
    if (cfg.record_w) r.w = w;
    traj.records.push_back(std::move(r));
  };
  std::size_t k = 0;
  for (; k < cfg.max_steps; ++k) {
    Vector v = Vector::Zero(w.size());
    std::size_t first = 0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const std::size_t i = pick(rng);
      if (b == 0) first = i;
      v += problem.term(i, w, cfg.policy).selection;
    }
    v /= static_cast<double>(cfg.batch_size);
    if (k % cfg.record_stride == 0) record(k, v.norm(), first);
    w -= traj.scale * cfg.alpha(k) * v;
    const double nw = w.norm();
    if (!std::isfinite(nw) || nw > cfg.divergence_bound) {
      throw DivergenceDetected(k + 1, nw, cfg.divergence_bound);
    }
  }
  if (traj.records.empty() || traj.records.back().k != k) {
    record(k, problem.full(w, cfg.policy).selection.norm(), 0);
  }
  traj.final_w = w;
  return traj;
}

void write_trajectory_csv(std::ostream& out, const Trajectory& trajectory) {
  Eigen::Index dim = 0;
  if (!trajectory.records.empty()) dim = trajectory.records.front().w.size();
  out << "k,loss,grad_norm";
  for (Eigen::Index i = 0; i < dim; ++i) out << ",w" << i;
  out << '\n' << std::setprecision(17);
  for (const auto& r : trajectory.records) {
    out << r.k << ',' << r.loss << ',' << r.selection_norm;
    for (Eigen::Index i = 0; i < r.w.size(); ++i) out << ',' << r.w(i);
    out << '\n';
  }
}

Vector min_norm_in_hull(const std::vector<Vector>& points) {
  if (points.empty()) throw ConfigError("min_norm_in_hull: no points");
  const Eigen::Index dim = points.front().size();
  for (const auto& p : points) {
    if (p.size() != dim) throw ConfigError("min_norm_in_hull: points must share a dimension");
  }
  double scale = 0.0;
  for (const auto& p : points) scale = std::max(scale, p.squaredNorm());
  if (scale == 0.0) return Vector::Zero(dim);
  const double eps = 1e-14;

  std::size_t start = 0;
  for (std::size_t i = 1; i < points.size(); ++i) {
    if (points[i].squaredNorm() < points[start].squaredNorm()) start = i;
  }
  std::vector<std::size_t> active{start};
  Vector lambda = Vector::Ones(1);
  Vector x = points[start];

  const auto combine = [&](const Vector& weights) {
    Vector out = Vector::Zero(dim);
    for (std::size_t k = 0; k < active.size(); ++k) out += weights(static_cast<Eigen::Index>(k)) * points[active[k]];
    return out;
  };

  for (std::size_t major = 0; major < 10 * points.size() + 10; ++major) {
    std::size_t j = 0;
    double best = x.dot(points[0]);
    for (std::size_t i = 1; i < points.size(); ++i) {
      const double d = x.dot(points[i]);
      if (d < best) {
        best = d;
        j = i;
      }
    }
    if (x.squaredNorm() - best <= eps * scale) break;
    if (std::find(active.begin(), active.end(), j) != active.end()) break;
    active.push_back(j);
    lambda.conservativeResize(lambda.size() + 1);
    lambda(lambda.size() - 1) = 0.0;

    for (std::size_t minor = 0; minor < 10 * points.size() + 10; ++minor) {
      // Affine minimizer over the active set: [P^T P 1; 1^T 0][a; mu] = [0; 1].
      const auto n = static_cast<Eigen::Index>(active.size());
      Matrix pm(dim, n);
      for (Eigen::Index k = 0; k < n; ++k) pm.col(k) = points[active[static_cast<std::size_t>(k)]];
      Matrix kkt = Matrix::Zero(n + 1, n + 1);
      kkt.topLeftCorner(n, n) = pm.transpose() * pm;
      kkt.block(0, n, n, 1).setOnes();
      kkt.block(n, 0, 1, n).setOnes();
      Vector rhs = Vector::Zero(n + 1);
      rhs(n) = 1.0;
      const Vector alpha = pseudo_inverse_solve(kkt, rhs, 1e-14).col(0).head(n);
      if ((alpha.array() > eps).all()) {
        lambda = alpha;
        break;
      }
      double theta = 1.0;
      for (Eigen::Index k = 0; k < n; ++k) {
        if (alpha(k) <= eps) {
          const double denom = lambda(k) - alpha(k);
          if (denom > 0.0) theta = std::min(theta, lambda(k) / denom);
        }
      }
      lambda = lambda + theta * (alpha - lambda);
      std::vector<std::size_t> kept;
      std::vector<double> kept_w;
      for (Eigen::Index k = 0; k < n; ++k) {
        if (lambda(k) > eps) {
          kept.push_back(active[static_cast<std::size_t>(k)]);
          kept_w.push_back(lambda(k));
        }
      }
      active = kept;
      lambda = Eigen::Map<Vector>(kept_w.data(), static_cast<Eigen::Index>(kept_w.size()));
      lambda /= lambda.sum();
    }
    x = combine(lambda);
  }
  return x;
}

std::vector<SelectionPolicy> policy_variants(std::size_t count) {
  std::vector<SelectionPolicy> out;
  for (std::size_t i = 0; i < count; ++i) {
    if (i == 0) {
      out.emplace_back();
    } else if (i == 1) {
      out.push_back(SelectionPolicy::lower());
    } else if (i == 2) {
      out.push_back(SelectionPolicy::upper());
    } else {
      out.push_back(SelectionPolicy::randomized(i - 2));
    }
  }
  return out;
}

double stationarity_measure(const SumProblem& problem, const Vector& w, std::size_t num_policies) {
  if (num_policies == 0) throw ConfigError("stationarity_measure: need at least one policy");
  std::vector<Vector> sel;
  for (const auto& p : policy_variants(num_policies)) sel.push_back(problem.full(w, p).selection);
  return min_norm_in_hull(sel).norm();
}

}  // namespace nsid
