// SPDX-License-Identifier: Apache-2.0
//
// Lasso with a log-parametrized penalty,
//   beta(lambda) = argmin 1/2 ||y - X beta||^2 + e^lambda ||beta||_1,
// characterized by F(lambda, beta) = beta - prox(beta - X^T (X beta - y)) = 0,
// and the selections of d beta / d lambda indexed by q in M(lambda).
#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <variant>
#include <vector>

#include "nsid/linalg.hpp"
#include "nsid/tape.hpp"

namespace nsid {

class LassoProblem {
 public:
  /// Throws ConfigError on shape mismatch, non-finite data or an all-zero column.
  LassoProblem(Matrix x, Vector y);

  const Matrix& x() const noexcept { return x_; }
  const Vector& y() const noexcept { return y_; }
  const Matrix& gram() const noexcept { return gram_; }
  Eigen::Index n() const noexcept { return x_.rows(); }
  Eigen::Index p() const noexcept { return x_.cols(); }
  /// ||X^T y||_inf: beta = 0 exactly when e^lambda >= this.
  double lambda_max_penalty() const;

 private:
  Matrix x_;
  Vector y_;
  Matrix gram_;
};

/// Reads X and y from CSV: one sample per row, y in the last column. A first
/// row that does not parse as numbers is taken as a header.
LassoProblem read_lasso_csv(std::istream& in);
LassoProblem read_lasso_csv(const std::string& path);

/// sign(u) max(|u| - t, 0), componentwise. Throws DomainError when t < 0.
Vector soft_threshold(const Vector& u, double t);

/// F(lambda, beta).
Vector lasso_residual(const LassoProblem& problem, double lambda, const Vector& beta);

inline constexpr double kEquicorrelationTol = 1e-8;

struct LassoConfig {
  double tolerance = 1e-10;  // on ||F(lambda, beta)||_inf
  std::size_t max_iterations = 100000;
  double equicorrelation_tol = kEquicorrelationTol;  // relative to e^lambda
  /// Newton polishing on the detected support once the signs settle.
  bool polish = true;
};

struct LassoSolution {
  Vector beta;
  double lambda = 0.0;
  std::vector<Eigen::Index> support;
  std::vector<Eigen::Index> equicorrelation;
  double kkt_residual = 0.0;
  std::size_t iterations = 0;
};

/// FISTA with adaptive restart on the objective, step 1 / ||X^T X||_2.
/// Throws NoConvergence.
LassoSolution solve_lasso(const LassoProblem& problem, double lambda, const LassoConfig& cfg = {},
                          const Vector& warm_start = Vector());

/// Recomputes support, equicorrelation set and residual for a given beta.
LassoSolution describe_solution(const LassoProblem& problem, double lambda, const Vector& beta,
                                double equicorrelation_tol = kEquicorrelationTol);

struct QSelection {
  enum class Mode { lars, weak, custom };
  Mode mode = Mode::lars;
  Vector q;  // custom only

  static QSelection lars() { return {Mode::lars, {}}; }
  static QSelection weak() { return {Mode::weak, {}}; }
  static QSelection custom(Vector q) { return {Mode::custom, std::move(q)}; }
};

/// q as a vector: 1 on the support, 0 off E, and on E minus the support 1
/// (LARS), 0 (weak) or the custom values. Throws InvalidSelection when a
/// custom q leaves M(lambda).
Vector q_vector(const LassoSolution& solution, const QSelection& selection, Eigen::Index p);

/// -e^lambda (I - diag(q)(I - X^T X))^-1 diag(q) sign(beta - X^T (X beta - y)),
/// solved as a full p x p system. Throws InvertibilityFailure when
/// rcond(X_E^T X_E) < rcond_tol and InvalidSelection for q outside M(lambda).
Vector lasso_jacobian_selection(const LassoProblem& problem, const LassoSolution& solution,
                                const QSelection& selection = QSelection::lars(),
                                double rcond_tol = kDefaultRcondTol);

/// The same selection computed on S = {q > 0} only:
/// -e^lambda (I - Q_S (I - G_SS))^-1 Q_S sign(u_S), zero elsewhere.
Vector restricted_selection(const LassoProblem& problem, const LassoSolution& solution, const Vector& q,
                            double rcond_tol = kDefaultRcondTol);

/// -e^lambda (X_E^T X_E)^-1 sign(X_E^T (y - X beta)) on E, zero elsewhere.
Vector lars_selection(const LassoProblem& problem, const LassoSolution& solution,
                      double rcond_tol = kDefaultRcondTol);
/// The same on the support.
Vector weak_selection(const LassoProblem& problem, const LassoSolution& solution,
                      double rcond_tol = kDefaultRcondTol);

struct StepSchedule {
  enum class Kind { constant, decaying };
  Kind kind = Kind::constant;
  double alpha0 = 0.1;
  double power = 0.6;
  /// alpha0 for constant, alpha0 / k^power for decaying (k >= 1).
  double at(std::size_t k) const;
};

struct TuneConfig {
  std::size_t iterations = 200;
  StepSchedule schedule;
  QSelection selection = QSelection::lars();
  LassoConfig inner;
  /// Stop once |hypergradient| falls to this; zero runs every iteration.
  double gradient_tol = 0.0;
};

struct TuneStep {
  std::size_t step = 0;
  double lambda = 0.0;
  double criterion = 0.0;
  double hypergradient = 0.0;
};

struct TuneTrajectory {
  std::vector<TuneStep> steps;
  LassoSolution final_solution;
};

/// Gradient descent on lambda -> C(beta(lambda)) with C given as a tape R^p -> R.
TuneTrajectory tune_lambda(const LassoProblem& problem, const Tape& criterion, double lambda0,
                           const TuneConfig& cfg = {});

/// step,lambda,C,hypergradient
void write_tune_csv(std::ostream& out, const TuneTrajectory& trajectory);

}  // namespace nsid
