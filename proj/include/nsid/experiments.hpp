// SPDX-License-Identifier: Apache-2.0
//
// Reproducible runs of the pathological and well-behaved training dynamics:
// the bilevel cycle and its perturbations, the coupled 4-d cycle, the
// Lorenz-like implicit ascent, the Clarke inverse counterexample, DEQ
// training, Lasso tuning and conic-layer differentiation. Each run is
// deterministic for a fixed seed and writes a versioned CSV.
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "nsid/conic.hpp"
#include "nsid/implicit.hpp"
#include "nsid/lasso.hpp"
#include "nsid/linalg.hpp"
#include "nsid/sgd.hpp"

namespace nsid {

// ---------------------------------------------------------------------------
// Bilevel cycle
//
//   min (x - s1)^2 + 4 (y - s2)^2,  s in argmax {(a + b)(-3x + y + 2) : (a, b) in [0,3] x [0,5]}
//
// with s computed as the fixed point s = P_U(s + (-3x + y + 2) 1).

/// Perturbation (e1, ..., e6) of the cycle problem. The loss is scaled by 4
/// so that e = 0 gives back the unperturbed problem:
///   (1 + 4 e1)(x - s1)^2 + 4 (1 + e2)(y - s2)^2,
///   s in argmax {(a + b)(-(3 + e3) x + y + 2 + e4) : a in [0, 3 - e5], b in [0, 5 - e6]}.
using CyclePerturbation = std::array<double, 6>;

class CycleModel {
 public:
  explicit CycleModel(const CyclePerturbation& eps = {}, bool force_implicit = true);

  /// -(3 + e3) x + y + 2 + e4; s jumps where this changes sign.
  double switching(const Vector& xy) const;
  Vector upper_bounds() const;
  /// Center of the box, where an interior-point solve of the inner problem lands
  /// when the objective is flat.
  Vector box_center() const;

  /// Inner fixed point, started from s0.
  Vector solve_inner(const Vector& xy, const Vector& s0) const;
  double loss(const Vector& xy, const Vector& s) const;
  /// Closed form of the loss on either side of the switching line.
  double branch_loss(const Vector& xy) const;

  struct Step {
    Vector s;
    double loss = 0.0;
    Vector gradient;  // d/d(x, y) l + J_s^T d/ds l
    ImplicitSelection selection;
  };
  /// Throws InvertibilityFailure through the implicit gate unless force mode is on.
  Step evaluate(const Vector& xy, const Vector& s0, const SelectionPolicy& policy = {}) const;

  const ImplicitProblem& problem() const noexcept { return problem_; }
  const CyclePerturbation& perturbation() const noexcept { return eps_; }

 private:
  CyclePerturbation eps_;
  ImplicitProblem problem_;
};

struct CycleRecord {
  std::size_t k = 0;
  double x = 0.0, y = 0.0, s1 = 0.0, s2 = 0.0, loss = 0.0;
};

struct RecurrenceReport {
  bool recurrent = false;
  std::size_t first = 0;   // indices into the trajectory
  std::size_t second = 0;
  double return_distance = 0.0;
  double min_displacement = 0.0;  // over the post-burn-in segment
};

struct RecurrenceOptions {
  double radius = 1e-2;
  double min_displacement = 1e-3;
  /// The path must leave the ball of this radius around the first point
  /// before returning, so slow drift does not count.
  double excursion = 0.1;
  double burn_in_fraction = 0.5;
};

/// Looks for an iterate past burn-in that comes back within `radius` of an
/// earlier post-burn-in iterate after an excursion, while every post-burn-in
/// step moves at least `min_displacement`.
RecurrenceReport recurrence_statistic(const std::vector<Vector>& points, const RecurrenceOptions& options = {});

struct CycleOptions {
  Vector init;  // default (1, 1)
  double step = 0.05;
  std::size_t iterations = 5000;
  CyclePerturbation eps{};
  bool force_implicit = true;
  /// Iterates beyond this norm stop the run and mark it diverged.
  double divergence_bound = 1e6;
  RecurrenceOptions recurrence;
};

struct CycleRun {
  std::vector<CycleRecord> records;
  RecurrenceReport recurrence;
  bool diverged = false;
  /// Iterates whose loss disagrees with the closed-form branch value.
  std::size_t branch_mismatches = 0;
  /// Iterates where the implicit system was singular and the pseudo-inverse was used.
  std::size_t singular_steps = 0;
  std::vector<Vector> points() const;
};

/// Gradient descent on (x, y). Throws InvertibilityFailure when the gate is on
/// and the trajectory meets a singular selection.
CycleRun run_cycle(const CycleOptions& options);

struct PerturbedDraw {
  CyclePerturbation eps{};
  Vector init;
  CycleRun run;
};

struct PerturbedReport {
  std::vector<PerturbedDraw> draws;
  std::size_t recurrent = 0;
};

/// Independent draws of e ~ N(0, sigma2) with the initial point jittered by
/// N(0, sigma2) as well, run concurrently.
PerturbedReport run_cycle_perturbed(const CycleOptions& base, double sigma2, std::size_t draws,
                                    std::uint64_t seed);

/// Objective (x, y) -> l(x, y, s(x, y)) as a loss term; s is solved from the
/// box center each call.
LossTerm cycle_term(const CyclePerturbation& eps = {});

// ---------------------------------------------------------------------------
// Two cycles coupled into g(x, y, z, w) = f(x, y) + eta f(z, w).

struct BilliardOptions {
  Vector init;  // default (1, 1, 1, 1)
  double step = 0.01;
  std::size_t iterations = 5000;
  double eta = 1.4142135623730951;
  bool force_implicit = true;
  std::vector<std::size_t> checkpoints{500, 1000, 5000};
  std::size_t grid = 50;
};

struct BilliardRun {
  std::vector<Vector> path;  // iterates in R^4, path[0] = init
  /// Occupied cells of a grid x grid partition of the (y, z) bounding box of
  /// the whole path, counted over the first n iterates for each checkpoint n.
  std::vector<std::pair<std::size_t, std::size_t>> coverage;
};

BilliardRun run_billiard4d(const BilliardOptions& options);

// ---------------------------------------------------------------------------
// Lorenz-like dynamics: max u^T z subject to z in argmin ||s - F(u)||^4,
// F the Lorenz vector field.

struct LorenzParams {
  double sigma = 10.0;
  double rho = 28.0;
  double beta = 8.0 / 3.0;
};

Vector lorenz_field(const LorenzParams& p, const Vector& u);
/// H with u^T F(u) = 1/2 u^T H u.
Matrix lorenz_quadratic_form(const LorenzParams& p);

struct LorenzOptions {
  LorenzParams params;
  Vector init;  // default (0, 1, 1.05)
  double step = 0.01;
  std::size_t iterations = 10000;
  bool force_implicit = true;
  /// Newton on the quartic stops once its step is below this.
  double inner_tolerance = 1e-4;
  /// Singular values of the implicit system below this are dropped in force mode.
  double pinv_cutoff = 1e-4;
  /// The plain ascent stops once ||u|| exceeds this.
  double divergence_bound = 1e12;
};

struct LorenzRun {
  std::vector<Vector> implicit_path;
  std::vector<Vector> plain_path;
  std::vector<Vector> ode_path;  // RK4 with dt = step
  bool plain_diverged = false;
  std::size_t truncated_steps = 0;
};

LorenzRun run_lorenz(const LorenzOptions& options);

// ---------------------------------------------------------------------------
// Clarke inverse counterexample: Phi(x, y) = (|x| + y, 2x + |y|).

struct CounterexampleReport {
  std::vector<Matrix> phi_generators;  // branch Jacobians of Phi at 0
  std::vector<Matrix> inverses;        // their inverses, from the implicit module
  std::vector<Matrix> listed_inverses;
  std::size_t phi_dimension = 0;
  std::size_t psi_dimension = 0;
  double max_inverse_error = 0.0;
  /// Inverses outside the affine hull of the Phi generators.
  std::size_t outside_hull = 0;
  bool ok() const;
};

CounterexampleReport run_counterexample();

// ---------------------------------------------------------------------------
// Training a scalar equilibrium layer z = relu(W z + U x + b) to match the
// outputs of a reference layer, with stochastic conservative gradients.

struct DeqTrainOptions {
  Vector target_params;  // default (0.3, 0.8, 0.1) = (W, U, b)
  Vector init;           // default (0, 0.5, 0.5)
  std::size_t samples = 20;
  /// alpha0 = 1 and 10^4 steps; the toy's minimizers form a curve and the
  /// library default alpha0 = 0.1 crawls along it.
  SGDConfig sgd;

  DeqTrainOptions() {
    sgd.alpha0 = 1.0;
    sgd.max_steps = 10000;
    sgd.record_stride = 10;
  }
};

struct DeqTrainRun {
  SumProblem problem;
  Trajectory trajectory;
  double stationarity = 0.0;
  double last_decile_oscillation = 0.0;
};

SumProblem deq_toy_problem(const Vector& target_params, std::size_t samples, std::uint64_t seed);
DeqTrainRun run_deq_train(const DeqTrainOptions& options);

// ---------------------------------------------------------------------------
// Lasso tuning on a synthetic train/validation split.

struct LassoTuneOptions {
  std::size_t n_train = 30;
  std::size_t n_valid = 30;
  std::size_t p = 10;
  double noise = 0.3;
  std::uint64_t seed = 0;
  /// Outer schedule for the deterministic hypergradient run.
  TuneConfig tune;
  /// Stochastic run over validation terms; the parameter is lambda.
  SGDConfig sgd;
  std::optional<double> lambda0;  // default: midpoint of the log grid

  LassoTuneOptions() {
    sgd.max_steps = 2000;
    sgd.record_stride = 10;
  }
};

struct LassoTuneRun {
  TuneTrajectory tune;
  Trajectory stochastic;
  std::vector<double> grid;
  std::vector<double> grid_loss;
  std::size_t grid_best = 0;
  double stationarity = 0.0;
  double last_decile_oscillation = 0.0;
};

struct LassoSplit {
  LassoProblem train;
  Matrix x_valid;
  Vector y_valid;
};

LassoSplit synthetic_lasso_split(std::size_t n_train, std::size_t n_valid, std::size_t p, double noise,
                                 std::uint64_t seed);
/// One term per validation sample: 1/2 (y_i - x_i^T beta(lambda))^2 as a
/// function of lambda. The default policy differentiates beta with the LARS
/// selection; other policies use their soft-threshold kink value as q on the
/// equicorrelation set minus the support.
SumProblem lasso_validation_problem(const LassoSplit& split, const LassoConfig& inner = {});
LassoTuneRun run_lasso_tune(const LassoTuneOptions& options);

// ---------------------------------------------------------------------------
// Conic layer max c^T x over [0, 3] x [0, 5] written as a cone program.

ConicProblem box_lp(const Vector& c);

struct ConicDiffPoint {
  double theta = 0.0;
  Vector c;
  Vector x;
  double kkt = 0.0;
  bool gate_passed = false;
  double rcond = 0.0;
  Matrix dx_dc;  // 2 x 2, empty when the gate failed
};

struct ConicDiffOptions {
  Vector c;  // default (-1, -2), minimized
  std::size_t sweep = 64;
};

struct ConicDiffRun {
  ConicDiffPoint point;  // at options.c
  double fd_error = 0.0;  // of dx/dc at options.c, when the gate passed
  std::vector<ConicDiffPoint> sweep;  // c = (cos theta, sin theta)
};

ConicDiffRun run_conic_diff(const ConicDiffOptions& options);

// ---------------------------------------------------------------------------

/// max - min of the loss over the last tenth of the recorded trajectory.
double last_decile_oscillation(const Trajectory& trajectory);

/// "# nsid-csv v1 experiment=<id>" followed by the column header.
void write_csv_header(std::ostream& out, const std::string& experiment, const std::string& columns);

void write_cycle_csv(std::ostream& out, const CycleRun& run, const std::string& experiment = "cycle");
void write_perturbed_csv(std::ostream& out, const PerturbedReport& report);
void write_billiard_csv(std::ostream& out, const BilliardRun& run);
void write_lorenz_csv(std::ostream& out, const LorenzRun& run);
void write_counterexample_csv(std::ostream& out, const CounterexampleReport& report);
void write_deq_train_csv(std::ostream& out, const DeqTrainRun& run);
void write_lasso_tune_csv(std::ostream& out, const LassoTuneRun& run);
void write_conic_diff_csv(std::ostream& out, const ConicDiffRun& run);

}  // namespace nsid
