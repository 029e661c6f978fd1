// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <future>
#include <random>
#include <set>

#include "nsid/errors.hpp"
#include "nsid/experiments.hpp"

namespace nsid {

namespace {

Tape cycle_residual(const CyclePerturbation& e) {
  TapeBuilder b(4);
  const Var x = b.input(0, 1);
  const Var y = b.input(1, 1);
  const Var s = b.input(2, 2);
  const Var g = scale(x, -(3.0 + e[2])) + y + (2.0 + e[3]);
  const Var v = s + g;
  Vector ub(2);
  ub << 3.0 - e[4], 5.0 - e[5];
  // P_U(v) = relu(v) - relu(v - ub).
  const Var proj = relu(v) - relu(v - b.constant(ub));
  return b.build({s - proj});
}

ImplicitProblem make_problem(const CyclePerturbation& e, bool force) {
  ImplicitProblem p(cycle_residual(e), 2, 2);
  p.force_mode = force;
  p.pinv_fallback = true;
  return p;
}

}  // namespace

CycleModel::CycleModel(const CyclePerturbation& eps, bool force_implicit)
    : eps_(eps), problem_(make_problem(eps, force_implicit)) {}

double CycleModel::switching(const Vector& xy) const {
  return -(3.0 + eps_[2]) * xy(0) + xy(1) + 2.0 + eps_[3];
}

Vector CycleModel::upper_bounds() const {
  Vector ub(2);
  ub << 3.0 - eps_[4], 5.0 - eps_[5];
  return ub;
}

Vector CycleModel::box_center() const { return 0.5 * upper_bounds(); }

Vector CycleModel::solve_inner(const Vector& xy, const Vector& s0) const {
  const double g = switching(xy);
  const Vector ub = upper_bounds();
  // s = P_U(s + t g 1) has the same fixed points for every t > 0; a long
  // step reaches the optimal vertex at once instead of after ~5 / |g| steps.
  const double t = g == 0.0 ? 1.0 : std::max(1.0, 10.0 * (ub.cwiseAbs().maxCoeff() + 1.0) / std::abs(g));
  const UpdateMap h = [&](const Vector& s) {
    const Vector v = s.array() + t * g;
    return Vector(v.cwiseMax(0.0) - (v - ub).cwiseMax(0.0));
  };
  FixedPointConfig cfg;
  cfg.max_iterations = 1000;
  cfg.tolerance = 1e-14;
  return solve_fixed_point(h, s0, cfg).z;
}

double CycleModel::loss(const Vector& xy, const Vector& s) const {
  const double dx = xy(0) - s(0), dy = xy(1) - s(1);
  return (1.0 + 4.0 * eps_[0]) * dx * dx + 4.0 * (1.0 + eps_[1]) * dy * dy;
}

double CycleModel::branch_loss(const Vector& xy) const {
  const double g = switching(xy);
  if (g == 0.0) return std::nan("");
  return loss(xy, g < 0.0 ? Vector(Vector::Zero(2)) : upper_bounds());
}

CycleModel::Step CycleModel::evaluate(const Vector& xy, const Vector& s0, const SelectionPolicy& policy) const {
  if (xy.size() != 2) throw ConfigError("cycle: parameter must be (x, y)");
  Step out;
  out.s = solve_inner(xy, s0);
  out.loss = loss(xy, out.s);
  ImplicitProblem p = problem_;
  p.policy = policy;
  Vector z(2);
  z = out.s;
  out.selection = implicit_selection(p, xy, z);
  Vector dl(2);
  dl << 2.0 * (1.0 + 4.0 * eps_[0]) * (xy(0) - out.s(0)), 8.0 * (1.0 + eps_[1]) * (xy(1) - out.s(1));
  // l depends on s with the opposite sign of (x, y).
  out.gradient = dl - out.selection.jacobian.transpose() * dl;
  return out;
}

std::vector<Vector> CycleRun::points() const {
  std::vector<Vector> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    Vector p(2);
    p << r.x, r.y;
    out.push_back(p);
  }
  return out;
}

RecurrenceReport recurrence_statistic(const std::vector<Vector>& points, const RecurrenceOptions& options) {
  RecurrenceReport rep;
  if (points.size() < 3) return rep;
  const auto begin = static_cast<std::size_t>(
      std::floor(options.burn_in_fraction * static_cast<double>(points.size())));
  if (points.size() - begin < 3) return rep;
  rep.min_displacement = std::numeric_limits<double>::infinity();
  for (std::size_t k = begin + 1; k < points.size(); ++k) {
    rep.min_displacement = std::min(rep.min_displacement, (points[k] - points[k - 1]).norm());
  }
  if (rep.min_displacement < options.min_displacement) return rep;
  for (std::size_t i = begin; i < points.size(); ++i) {
    bool left = false;
    for (std::size_t j = i + 1; j < points.size(); ++j) {
      const double d = (points[j] - points[i]).norm();
      if (d >= options.excursion) left = true;
      if (left && d <= options.radius) {
        rep.recurrent = true;
        rep.first = i;
        rep.second = j;
        rep.return_distance = d;
        return rep;
      }
    }
  }
  return rep;
}

CycleRun run_cycle(const CycleOptions& options) {
  if (!(options.step > 0.0)) throw ConfigError("cycle: step must be positive");
  if (options.iterations == 0) throw ConfigError("cycle: iterations must be positive");
  const CycleModel model(options.eps, options.force_implicit);
  Vector xy = options.init.size() == 0 ? Vector(Vector::Ones(2)) : options.init;
  if (xy.size() != 2) throw ConfigError("cycle: init must have two entries");
  Vector s = model.box_center();
  CycleRun run;
  run.records.reserve(options.iterations + 1);
  for (std::size_t k = 0;; ++k) {
    const CycleModel::Step st = model.evaluate(xy, s);
    run.records.push_back({k, xy(0), xy(1), st.s(0), st.s(1), st.loss});
    const double branch = model.branch_loss(xy);
    if (std::isfinite(branch) && std::abs(branch - st.loss) > 1e-12 * (1.0 + std::abs(st.loss))) {
      ++run.branch_mismatches;
    }
    if (st.selection.pseudo_inverse) ++run.singular_steps;
    if (k == options.iterations) break;
    xy -= options.step * st.gradient;
    s = st.s;
    if (!xy.allFinite() || xy.norm() > options.divergence_bound) {
      run.diverged = true;
      break;
    }
  }
  if (!run.diverged) run.recurrence = recurrence_statistic(run.points(), options.recurrence);
  return run;
}

PerturbedReport run_cycle_perturbed(const CycleOptions& base, double sigma2, std::size_t draws,
                                    std::uint64_t seed) {
  if (!(sigma2 >= 0.0)) throw ConfigError("cycle-perturbed: sigma2 must be nonnegative");
  if (draws == 0) throw ConfigError("cycle-perturbed: need at least one draw");
  const double sd = std::sqrt(sigma2);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  PerturbedReport rep;
  rep.draws.resize(draws);
  const Vector init = base.init.size() == 0 ? Vector(Vector::Ones(2)) : base.init;
  for (auto& d : rep.draws) {
    for (auto& e : d.eps) e = sd * normal(rng);
    d.init = init;
    for (Eigen::Index i = 0; i < d.init.size(); ++i) d.init(i) += sd * normal(rng);
  }
  std::vector<std::future<CycleRun>> jobs;
  jobs.reserve(draws);
  for (const auto& d : rep.draws) {
    CycleOptions opt = base;
    opt.eps = d.eps;
    opt.init = d.init;
    jobs.push_back(std::async(std::launch::async, [opt] {
      try {
        return run_cycle(opt);
      } catch (const InvertibilityFailure&) {
        throw;
      } catch (const Error&) {
        // Far from the unperturbed problem the inner problem can lose its
        // solution; the draw is reported as diverged.
        CycleRun failed;
        failed.diverged = true;
        return failed;
      }
    }));
  }
  for (std::size_t i = 0; i < draws; ++i) {
    rep.draws[i].run = jobs[i].get();
    if (rep.draws[i].run.recurrence.recurrent) ++rep.recurrent;
  }
  return rep;
}

LossTerm cycle_term(const CyclePerturbation& eps) {
  auto model = std::make_shared<const CycleModel>(eps, true);
  return [model](const Vector& w, const SelectionPolicy& policy) {
    const CycleModel::Step st = model->evaluate(w, model->box_center(), policy);
    return TermValue{st.loss, st.gradient};
  };
}

BilliardRun run_billiard4d(const BilliardOptions& options) {
  if (!(options.eta > 0.0)) throw ConfigError("billiard4d: eta must be positive");
  if (!(options.step > 0.0)) throw ConfigError("billiard4d: step must be positive");
  if (options.grid == 0) throw ConfigError("billiard4d: grid must be positive");
  const CycleModel model({}, options.force_implicit);
  Vector u = options.init.size() == 0 ? Vector(Vector::Ones(4)) : options.init;
  if (u.size() != 4) throw ConfigError("billiard4d: init must have four entries");
  Vector sa = model.box_center(), sb = model.box_center();
  BilliardRun run;
  run.path.reserve(options.iterations + 1);
  run.path.push_back(u);
  for (std::size_t k = 0; k < options.iterations; ++k) {
    const auto a = model.evaluate(u.head(2), sa);
    const auto b = model.evaluate(u.tail(2), sb);
    u.head(2) -= options.step * a.gradient;
    u.tail(2) -= options.step * options.eta * b.gradient;
    sa = a.s;
    sb = b.s;
    run.path.push_back(u);
  }
  Eigen::Vector2d lo = run.path.front().segment(1, 2), hi = lo;
  for (const auto& p : run.path) {
    lo = lo.cwiseMin(Eigen::Vector2d(p.segment(1, 2)));
    hi = hi.cwiseMax(Eigen::Vector2d(p.segment(1, 2)));
  }
  const auto cell = [&](const Vector& p, int i) {
    const double span = hi(i) - lo(i);
    if (span <= 0.0) return 0L;
    const auto c = static_cast<long>(std::floor((p(1 + i) - lo(i)) / span * static_cast<double>(options.grid)));
    return std::clamp(c, 0L, static_cast<long>(options.grid) - 1);
  };
  for (std::size_t n : options.checkpoints) {
    std::set<std::pair<long, long>> cells;
    const std::size_t upto = std::min(n + 1, run.path.size());
    for (std::size_t k = 0; k < upto; ++k) cells.emplace(cell(run.path[k], 0), cell(run.path[k], 1));
    run.coverage.emplace_back(n, cells.size());
  }
  return run;
}

}  // namespace nsid
