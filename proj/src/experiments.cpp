// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <iomanip>
#include <memory>
#include <mutex>
#include <ostream>
#include <random>

#include "nsid/deq.hpp"
#include "nsid/errors.hpp"
#include "nsid/experiments.hpp"

namespace nsid {

// ---------------------------------------------------------------------------
// Lorenz

Vector lorenz_field(const LorenzParams& p, const Vector& u) {
  if (u.size() != 3) throw ConfigError("lorenz: state must have three entries");
  Vector f(3);
  f << p.sigma * (u(1) - u(0)), u(0) * (p.rho - u(2)) - u(1), u(0) * u(1) - p.beta * u(2);
  return f;
}

Matrix lorenz_quadratic_form(const LorenzParams& p) {
  Matrix h(3, 3);
  h << -2.0 * p.sigma, p.sigma + p.rho, 0.0,
       p.sigma + p.rho, -2.0, 0.0,
       0.0, 0.0, -2.0 * p.beta;
  return h;
}

namespace {

// Inputs [u; s], output 4 ||d||^2 d with d = s - F(u), the gradient in s of ||s - F(u)||^4.
Tape lorenz_residual(const LorenzParams& p) {
  TapeBuilder b(6);
  const Var u1 = b.input(0, 1), u2 = b.input(1, 1), u3 = b.input(2, 1);
  const Var s = b.input(3, 3);
  const Var f = concat({scale(u2 - u1, p.sigma), u1 * (b.constant(p.rho) - u3) - u2, u1 * u2 - scale(u3, p.beta)});
  const Var d = s - f;
  return b.build({scale(squared_norm(d), 4.0) * d});
}

Vector rk4_step(const LorenzParams& p, const Vector& u, double dt) {
  const Vector k1 = lorenz_field(p, u);
  const Vector k2 = lorenz_field(p, u + 0.5 * dt * k1);
  const Vector k3 = lorenz_field(p, u + 0.5 * dt * k2);
  const Vector k4 = lorenz_field(p, u + dt * k3);
  return u + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

}  // namespace

LorenzRun run_lorenz(const LorenzOptions& options) {
  if (!(options.step > 0.0)) throw ConfigError("lorenz: step must be positive");
  if (!(options.inner_tolerance > 0.0)) throw ConfigError("lorenz: inner_tolerance must be positive");
  Vector u0(3);
  if (options.init.size() == 0) {
    u0 << 0.0, 1.0, 1.05;
  } else {
    u0 = options.init;
  }
  if (u0.size() != 3) throw ConfigError("lorenz: init must have three entries");
  const LorenzParams& p = options.params;

  ImplicitProblem problem(lorenz_residual(p), 3, 3);
  problem.force_mode = options.force_implicit;
  problem.pinv_fallback = true;
  problem.pinv_abs_cutoff = options.pinv_cutoff;
  problem.residual_tolerance = -1.0;

  LorenzRun run;
  Vector u = u0;
  Vector s = Vector::Zero(3);
  run.implicit_path.push_back(u);
  for (std::size_t k = 0; k < options.iterations; ++k) {
    const Vector f = lorenz_field(p, u);
    // Newton on ||s - F||^4 divides the error by 3/2 per step.
    for (int it = 0; it < 200; ++it) {
      const Vector step = (s - f) / 3.0;
      s -= step;
      if (step.norm() <= options.inner_tolerance) break;
    }
    Vector x(3);
    x = u;
    const ImplicitSelection sel = implicit_selection(problem, x, s);
    if (sel.pseudo_inverse) ++run.truncated_steps;
    u = u + options.step * (s + sel.jacobian.transpose() * u);
    run.implicit_path.push_back(u);
    if (!u.allFinite() || u.norm() > options.divergence_bound) break;
  }

  const Matrix h = lorenz_quadratic_form(p);
  u = u0;
  run.plain_path.push_back(u);
  for (std::size_t k = 0; k < options.iterations; ++k) {
    u = u + options.step * (h * u);
    run.plain_path.push_back(u);
    if (!u.allFinite() || u.norm() > options.divergence_bound) {
      run.plain_diverged = true;
      break;
    }
  }

  u = u0;
  run.ode_path.push_back(u);
  for (std::size_t k = 0; k < options.iterations; ++k) {
    u = rk4_step(p, u, options.step);
    run.ode_path.push_back(u);
  }
  return run;
}

// ---------------------------------------------------------------------------
// Counterexample

bool CounterexampleReport::ok() const {
  return phi_generators.size() == 4 && inverses.size() == 4 && phi_dimension == 2 && psi_dimension == 3 &&
         max_inverse_error <= 1e-12 && outside_hull > 0;
}

CounterexampleReport run_counterexample() {
  TapeBuilder b(2);
  const Var x = b.input(0, 1), y = b.input(1, 1);
  const Tape phi_tape = b.build({concat({abs(x) + y, scale(x, 2.0) + abs(y)})});

  CounterexampleReport rep;
  const Vector zero = Vector::Zero(2);
  for (int mask = 0; mask < 4; ++mask) {
    SelectionPolicy policy;
    policy.kink_positions = {static_cast<double>(mask & 1), static_cast<double>((mask >> 1) & 1)};
    rep.phi_generators.push_back(jacobian_selection(phi_tape, zero, policy).matrix);
    rep.inverses.push_back(inverse_jacobian_selection(phi_tape, zero, zero, policy));
  }

  Matrix m(2, 2);
  m << -1, 1, 2, -1;
  rep.listed_inverses.push_back(m);  // [[1, 1], [2, 1]]^-1
  m << 1, 1, 2, -1;
  rep.listed_inverses.push_back(m / 3.0);  // [[1, 1], [2, -1]]^-1
  m << -1, 1, 2, 1;
  rep.listed_inverses.push_back(m / 3.0);  // [[-1, 1], [2, 1]]^-1
  m << 1, 1, 2, 1;
  rep.listed_inverses.push_back(m);  // [[-1, 1], [2, -1]]^-1

  // Every listed inverse must be produced, and every produced inverse listed.
  for (const auto& listed : rep.listed_inverses) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& inv : rep.inverses) best = std::min(best, (inv - listed).cwiseAbs().maxCoeff());
    rep.max_inverse_error = std::max(rep.max_inverse_error, best);
  }
  for (const auto& inv : rep.inverses) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& listed : rep.listed_inverses) best = std::min(best, (inv - listed).cwiseAbs().maxCoeff());
    rep.max_inverse_error = std::max(rep.max_inverse_error, best);
  }

  rep.phi_dimension = affine_dimension(rep.phi_generators);
  rep.psi_dimension = affine_dimension(rep.inverses);
  for (const auto& inv : rep.inverses) {
    std::vector<Matrix> pts = rep.phi_generators;
    pts.push_back(inv);
    if (affine_dimension(pts) > rep.phi_dimension) ++rep.outside_hull;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// DEQ training

namespace {

Vector deq_default_target() {
  Vector t(3);
  t << 0.3, 0.8, 0.1;
  return t;
}

// z = relu(W z + U x + b) and its gradient in (W, U, b) of 1/2 (z - target)^2.
TermValue deq_term_value(const Vector& w, double x, double target, const SelectionPolicy& policy) {
  if (w.size() != 3) throw ConfigError("deq-train: parameters are (W, U, b)");
  Matrix wm(1, 1);
  wm(0, 0) = w(0);
  Vector bias(1);
  bias(0) = w(1) * x + w(2);
  const MonotoneLayer layer = MonotoneLayer::unchecked(wm, bias, activation_tape("relu", 1));
  FixedPointConfig cfg;
  cfg.tolerance = 1e-13;
  const Vector z = deq_forward(layer, cfg, Vector(), policy).z;
  const double r = z(0) - target;
  Vector v(1);
  v(0) = r;
  const DeqGradient g = deq_conservative_gradient(layer, z, v, policy);
  TermValue out;
  out.value = 0.5 * r * r;
  out.selection.resize(3);
  out.selection << g.g_w(0, 0), g.g_b(0) * x, g.g_b(0);
  return out;
}

}  // namespace

SumProblem deq_toy_problem(const Vector& target_params, std::size_t samples, std::uint64_t seed) {
  const Vector target = target_params.size() == 0 ? deq_default_target() : target_params;
  if (target.size() != 3) throw ConfigError("deq-train: target must be (W, U, b)");
  if (!(std::abs(target(0)) < 1.0)) throw ConfigError("deq-train: target W must satisfy |W| < 1");
  if (samples == 0) throw ConfigError("deq-train: need at least one sample");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  std::vector<LossTerm> terms;
  for (std::size_t i = 0; i < samples; ++i) {
    const double x = unif(rng);
    // Output of the reference layer: z = relu(W z + U x + b) has the closed form
    // a / (1 - W) when a = U x + b > 0 and 0 otherwise.
    const double a = target(1) * x + target(2);
    const double z = a > 0.0 ? a / (1.0 - target(0)) : 0.0;
    terms.push_back([x, z](const Vector& w, const SelectionPolicy& policy) {
      return deq_term_value(w, x, z, policy);
    });
  }
  return SumProblem(3, std::move(terms));
}

double last_decile_oscillation(const Trajectory& trajectory) {
  const auto& r = trajectory.records;
  if (r.empty()) return 0.0;
  const std::size_t begin = r.size() - std::max<std::size_t>(1, r.size() / 10);
  double lo = r[begin].loss, hi = r[begin].loss;
  for (std::size_t i = begin; i < r.size(); ++i) {
    lo = std::min(lo, r[i].loss);
    hi = std::max(hi, r[i].loss);
  }
  return hi - lo;
}

DeqTrainRun run_deq_train(const DeqTrainOptions& options) {
  Vector init = options.init;
  if (init.size() == 0) {
    init.resize(3);
    init << 0.0, 0.5, 0.5;
  }
  DeqTrainRun run{deq_toy_problem(options.target_params, options.samples, options.sgd.seed), {}, 0.0, 0.0};
  run.trajectory = sgd_run(run.problem, init, options.sgd);
  run.stationarity = stationarity_measure(run.problem, run.trajectory.final_w);
  run.last_decile_oscillation = last_decile_oscillation(run.trajectory);
  return run;
}

// ---------------------------------------------------------------------------
// Lasso tuning

LassoSplit synthetic_lasso_split(std::size_t n_train, std::size_t n_valid, std::size_t p, double noise,
                                 std::uint64_t seed) {
  if (n_train == 0 || n_valid == 0 || p == 0) throw ConfigError("lasso-tune: sizes must be positive");
  if (!(noise >= 0.0)) throw ConfigError("lasso-tune: noise must be nonnegative");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto n_tr = static_cast<Eigen::Index>(n_train), n_va = static_cast<Eigen::Index>(n_valid);
  const auto pp = static_cast<Eigen::Index>(p);
  Vector truth = Vector::Zero(pp);
  const double planted[] = {2.0, -1.5, 1.0};
  for (Eigen::Index j = 0; j < std::min<Eigen::Index>(3, pp); ++j) truth(j) = planted[j];
  const auto draw = [&](Eigen::Index n) {
    Matrix x(n, pp);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < pp; ++j) x(i, j) = normal(rng);
    return x;
  };
  const Matrix x_train = draw(n_tr);
  const Matrix x_valid = draw(n_va);
  Vector y_train = x_train * truth;
  Vector y_valid = x_valid * truth;
  for (Eigen::Index i = 0; i < n_tr; ++i) y_train(i) += noise * normal(rng);
  for (Eigen::Index i = 0; i < n_va; ++i) y_valid(i) += noise * normal(rng);
  return LassoSplit{LassoProblem(x_train, y_train), x_valid, y_valid};
}

namespace {

// Lasso solutions shared by the validation terms: a sweep over all terms at
// one lambda solves the inner problem once. The default policy takes the LARS
// selection; any other policy puts its soft-threshold kink value on E minus
// the support, so lower() gives the weak selection and upper() LARS.
class LassoCache {
 public:
  LassoCache(LassoProblem problem, LassoConfig inner) : problem_(std::move(problem)), inner_(inner) {}

  std::pair<Vector, Vector> at(double lambda, const SelectionPolicy& policy) {
    std::lock_guard<std::mutex> lock(mutex_);
    if (!has_ || lambda != sol_.lambda) {
      sol_ = solve_lasso(problem_, lambda, inner_, has_ ? sol_.beta : Vector());
      has_ = true;
      selections_.clear();
    }
    const double q = policy.name == "default" ? 1.0 : policy.soft_threshold_at_kink;
    for (const auto& [key, d] : selections_) {
      if (key == q) return {sol_.beta, d};
    }
    Vector qv = Vector::Zero(problem_.x().cols());
    for (Eigen::Index j : sol_.equicorrelation) qv(j) = q;
    for (Eigen::Index j : sol_.support) qv(j) = 1.0;
    const Vector d = lasso_jacobian_selection(problem_, sol_, QSelection::custom(qv));
    selections_.emplace_back(q, d);
    return {sol_.beta, d};
  }

 private:
  LassoProblem problem_;
  LassoConfig inner_;
  std::mutex mutex_;
  bool has_ = false;
  LassoSolution sol_;
  std::vector<std::pair<double, Vector>> selections_;
};

}  // namespace

SumProblem lasso_validation_problem(const LassoSplit& split, const LassoConfig& inner) {
  if (split.x_valid.rows() != split.y_valid.size() || split.x_valid.cols() != split.train.x().cols()) {
    throw ConfigError("lasso-tune: validation shapes do not match the training design");
  }
  auto cache = std::make_shared<LassoCache>(split.train, inner);
  std::vector<LossTerm> terms;
  for (Eigen::Index i = 0; i < split.x_valid.rows(); ++i) {
    const Vector xi = split.x_valid.row(i).transpose();
    const double yi = split.y_valid(i);
    terms.push_back([cache, xi, yi](const Vector& w, const SelectionPolicy& policy) {
      if (w.size() != 1) throw ConfigError("lasso-tune: the parameter is lambda");
      const auto [beta, dbeta] = cache->at(w(0), policy);
      const double r = yi - xi.dot(beta);
      TermValue out;
      out.value = 0.5 * r * r;
      out.selection = Vector::Constant(1, -r * xi.dot(dbeta));
      return out;
    });
  }
  return SumProblem(1, std::move(terms));
}

LassoTuneRun run_lasso_tune(const LassoTuneOptions& options) {
  const LassoSplit split =
      synthetic_lasso_split(options.n_train, options.n_valid, options.p, options.noise, options.seed);
  const double top = std::log(split.train.lambda_max_penalty());
  LassoTuneRun run;
  const std::size_t points = 21;
  for (std::size_t k = 0; k < points; ++k) {
    run.grid.push_back(top - std::log(1000.0) * static_cast<double>(points - 1 - k) / static_cast<double>(points - 1));
  }
  const SumProblem problem = lasso_validation_problem(split, options.tune.inner);
  for (double l : run.grid) run.grid_loss.push_back(problem.value(Vector::Constant(1, l)));
  run.grid_best = static_cast<std::size_t>(
      std::min_element(run.grid_loss.begin(), run.grid_loss.end()) - run.grid_loss.begin());

  const double lambda0 = options.lambda0.value_or(run.grid[points / 2]);
  TapeBuilder b(static_cast<std::size_t>(options.p));
  const Var pred = affine(split.x_valid, b.input(), -split.y_valid);
  const Tape criterion = b.build({scale(squared_norm(pred), 0.5 / static_cast<double>(options.n_valid))});
  run.tune = tune_lambda(split.train, criterion, lambda0, options.tune);

  run.stochastic = sgd_run(problem, Vector::Constant(1, lambda0), options.sgd);
  run.stationarity = stationarity_measure(problem, run.stochastic.final_w);
  run.last_decile_oscillation = last_decile_oscillation(run.stochastic);
  return run;
}

// ---------------------------------------------------------------------------
// Conic layer

ConicProblem box_lp(const Vector& c) {
  if (c.size() != 2) throw ConfigError("conic-diff: c must have two entries");
  Matrix a(4, 2);
  a << -1, 0, 0, -1, 1, 0, 0, 1;
  Vector b(4);
  b << 0, 0, 3, 5;
  return ConicProblem(a, b, c, Cone::nonneg(4));
}

namespace {

ConicDiffPoint conic_point(const Vector& c, double theta) {
  ConicDiffPoint pt;
  pt.theta = theta;
  pt.c = c;
  const ConicProblem problem = box_lp(c);
  const ConicSolution sol = solve_residual(problem);
  pt.x = sol.sol.x;
  pt.kkt = kkt_report(problem, sol.sol).max();
  try {
    const SolSelection sel = sol_jacobian_selection(problem, sol.z);
    pt.gate_passed = true;
    pt.rcond = sel.rcond;
    const auto c_col = static_cast<Eigen::Index>(problem.m() * problem.n() + problem.m());
    pt.dx_dc = sel.jacobian.block(0, c_col, 2, 2);
  } catch (const InvertibilityFailure& e) {
    pt.gate_passed = false;
    pt.rcond = e.rcond();
  }
  return pt;
}

}  // namespace

ConicDiffRun run_conic_diff(const ConicDiffOptions& options) {
  Vector c = options.c;
  if (c.size() == 0) {
    c.resize(2);
    c << -1.0, -2.0;
  }
  ConicDiffRun run;
  run.point = conic_point(c, std::atan2(c(1), c(0)));
  if (run.point.gate_passed) {
    const double h = 1e-6;
    Matrix fd(2, 2);
    for (Eigen::Index j = 0; j < 2; ++j) {
      Vector cp = c, cm = c;
      cp(j) += h;
      cm(j) -= h;
      fd.col(j) = (solve_residual(box_lp(cp)).sol.x - solve_residual(box_lp(cm)).sol.x) / (2.0 * h);
    }
    run.fd_error = (fd - run.point.dx_dc).cwiseAbs().maxCoeff();
  }
  for (std::size_t k = 0; k < options.sweep; ++k) {
    const double theta = 2.0 * M_PI * static_cast<double>(k) / static_cast<double>(options.sweep);
    Vector ck(2);
    ck << std::cos(theta), std::sin(theta);
    run.sweep.push_back(conic_point(ck, theta));
  }
  return run;
}

// ---------------------------------------------------------------------------
// CSV

void write_csv_header(std::ostream& out, const std::string& experiment, const std::string& columns) {
  out << "# nsid-csv v1 experiment=" << experiment << '\n' << columns << '\n';
}

namespace {

struct PrecisionGuard {
  explicit PrecisionGuard(std::ostream& out) : out_(out), old_(out.precision(17)) {}
  ~PrecisionGuard() { out_.precision(old_); }
  std::ostream& out_;
  std::streamsize old_;
};

void write_path(std::ostream& out, const std::string& run, const std::vector<Vector>& path) {
  for (std::size_t k = 0; k < path.size(); ++k) {
    out << run << ',' << k;
    for (Eigen::Index i = 0; i < path[k].size(); ++i) out << ',' << path[k](i);
    out << '\n';
  }
}

}  // namespace

void write_cycle_csv(std::ostream& out, const CycleRun& run, const std::string& experiment) {
  PrecisionGuard g(out);
  write_csv_header(out, experiment, "k,x,y,s1,s2,loss");
  for (const auto& r : run.records) {
    out << r.k << ',' << r.x << ',' << r.y << ',' << r.s1 << ',' << r.s2 << ',' << r.loss << '\n';
  }
}

void write_perturbed_csv(std::ostream& out, const PerturbedReport& report) {
  PrecisionGuard g(out);
  write_csv_header(out, "cycle-perturbed", "draw,recurrent,diverged,k,x,y,s1,s2,loss");
  for (std::size_t d = 0; d < report.draws.size(); ++d) {
    const CycleRun& run = report.draws[d].run;
    for (const auto& r : run.records) {
      out << d << ',' << run.recurrence.recurrent << ',' << run.diverged << ',' << r.k << ',' << r.x << ','
          << r.y << ',' << r.s1 << ',' << r.s2 << ',' << r.loss << '\n';
    }
  }
}

void write_billiard_csv(std::ostream& out, const BilliardRun& run) {
  PrecisionGuard g(out);
  write_csv_header(out, "billiard4d", "k,x,y,z,w");
  for (std::size_t k = 0; k < run.path.size(); ++k) {
    const Vector& p = run.path[k];
    out << k << ',' << p(0) << ',' << p(1) << ',' << p(2) << ',' << p(3) << '\n';
  }
}

void write_lorenz_csv(std::ostream& out, const LorenzRun& run) {
  PrecisionGuard g(out);
  write_csv_header(out, "lorenz", "run,k,u1,u2,u3");
  write_path(out, "implicit", run.implicit_path);
  write_path(out, "plain", run.plain_path);
  write_path(out, "ode", run.ode_path);
}

void write_counterexample_csv(std::ostream& out, const CounterexampleReport& report) {
  PrecisionGuard g(out);
  write_csv_header(out, "counterexample", "set,index,a11,a12,a21,a22");
  const auto rows = [&](const char* name, const std::vector<Matrix>& ms) {
    for (std::size_t i = 0; i < ms.size(); ++i) {
      out << name << ',' << i << ',' << ms[i](0, 0) << ',' << ms[i](0, 1) << ',' << ms[i](1, 0) << ','
          << ms[i](1, 1) << '\n';
    }
  };
  rows("phi", report.phi_generators);
  rows("inverse", report.inverses);
  rows("listed", report.listed_inverses);
}

void write_deq_train_csv(std::ostream& out, const DeqTrainRun& run) {
  PrecisionGuard g(out);
  write_csv_header(out, "deq-train", "k,loss,grad_norm,W,U,b");
  for (const auto& r : run.trajectory.records) {
    out << r.k << ',' << r.loss << ',' << r.selection_norm;
    for (Eigen::Index i = 0; i < r.w.size(); ++i) out << ',' << r.w(i);
    out << '\n';
  }
}

void write_lasso_tune_csv(std::ostream& out, const LassoTuneRun& run) {
  PrecisionGuard g(out);
  write_csv_header(out, "lasso-tune", "run,step,lambda,C,hypergradient");
  for (const auto& s : run.tune.steps) {
    out << "deterministic," << s.step << ',' << s.lambda << ',' << s.criterion << ',' << s.hypergradient << '\n';
  }
  for (const auto& r : run.stochastic.records) {
    out << "stochastic," << r.k << ',' << (r.w.size() ? r.w(0) : std::nan("")) << ',' << r.loss << ','
        << r.selection_norm << '\n';
  }
  for (std::size_t i = 0; i < run.grid.size(); ++i) {
    out << "grid," << i << ',' << run.grid[i] << ',' << run.grid_loss[i] << ",\n";
  }
}

void write_conic_diff_csv(std::ostream& out, const ConicDiffRun& run) {
  PrecisionGuard g(out);
  write_csv_header(out, "conic-diff", "theta,c1,c2,x1,x2,kkt,gate,rcond,dx1dc1,dx1dc2,dx2dc1,dx2dc2");
  const auto row = [&](const ConicDiffPoint& p) {
    out << p.theta << ',' << p.c(0) << ',' << p.c(1) << ',' << p.x(0) << ',' << p.x(1) << ',' << p.kkt << ','
        << p.gate_passed << ',' << p.rcond;
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) out << ',' << (p.gate_passed ? p.dx_dc(i, j) : std::nan(""));
    out << '\n';
  };
  row(run.point);
  for (const auto& p : run.sweep) row(p);
}

}  // namespace nsid
