// SPDX-License-Identifier: Apache-2.0
#include "nsid/lasso.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "nsid/errors.hpp"

namespace nsid {

namespace {

double objective(const LassoProblem& pb, double penalty, const Vector& beta) {
  return 0.5 * (pb.y() - pb.x() * beta).squaredNorm() + penalty * beta.lpNorm<1>();
}

double residual_norm(const Vector& r) { return r.size() == 0 ? 0.0 : r.lpNorm<Eigen::Infinity>(); }

Matrix principal(const Matrix& a, const std::vector<Eigen::Index>& idx) {
  return a(idx, idx);
}

std::vector<Eigen::Index> positive_entries(const Vector& q) {
  std::vector<Eigen::Index> out;
  for (Eigen::Index i = 0; i < q.size(); ++i) {
    if (q(i) > 0.0) out.push_back(i);
  }
  return out;
}

void gate(const Matrix& g, double rcond_tol, const char* where) {
  const double rc = rcond_estimate(g);
  if (rc == 0.0 || rc < rcond_tol) throw InvertibilityFailure(rc, rcond_tol, where, g);
}

// Solves the support system G_SS b_S = X_S^T y - penalty sign_S.
bool polish_support(const LassoProblem& pb, const Vector& xty, double penalty, Vector& beta) {
  std::vector<Eigen::Index> s;
  for (Eigen::Index i = 0; i < beta.size(); ++i) {
    if (beta(i) != 0.0) s.push_back(i);
  }
  if (s.empty()) return false;
  const Matrix gss = principal(pb.gram(), s);
  LuFactorization lu(gss);
  if (lu.rcond() < 1e-10) return false;
  Vector rhs(static_cast<Eigen::Index>(s.size()));
  for (std::size_t k = 0; k < s.size(); ++k) {
    const auto i = s[k];
    rhs(static_cast<Eigen::Index>(k)) = xty(i) - penalty * (beta(i) > 0.0 ? 1.0 : -1.0);
  }
  const Vector bs = lu.solve(rhs, 0.0);
  Vector cand = Vector::Zero(beta.size());
  for (std::size_t k = 0; k < s.size(); ++k) {
    const auto i = s[k];
    const double v = bs(static_cast<Eigen::Index>(k));
    if (v == 0.0 || (v > 0.0) != (beta(i) > 0.0)) return false;
    cand(i) = v;
  }
  beta = cand;
  return true;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

bool parse_row(const std::vector<std::string>& cells, std::vector<double>& row) {
  row.clear();
  for (const auto& c : cells) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(c, &used);
    } catch (const std::exception&) {
      return false;
    }
    while (used < c.size() && std::isspace(static_cast<unsigned char>(c[used]))) ++used;
    if (used != c.size()) return false;
    row.push_back(v);
  }
  return true;
}

}  // namespace

LassoProblem::LassoProblem(Matrix x, Vector y) : x_(std::move(x)), y_(std::move(y)) {
  if (x_.rows() == 0 || x_.cols() == 0) throw ConfigError("lasso: empty design matrix");
  if (x_.rows() != y_.size()) {
    throw ConfigError("lasso: X has " + std::to_string(x_.rows()) + " rows but y has " +
                      std::to_string(y_.size()) + " entries");
  }
  if (!x_.allFinite() || !y_.allFinite()) throw ConfigError("lasso: non-finite data");
  for (Eigen::Index j = 0; j < x_.cols(); ++j) {
    if ((x_.col(j).array() == 0.0).all()) {
      throw ConfigError("lasso: column " + std::to_string(j) + " of X is identically zero");
    }
  }
  gram_ = x_.transpose() * x_;
}

double LassoProblem::lambda_max_penalty() const {
  return (x_.transpose() * y_).lpNorm<Eigen::Infinity>();
}

LassoProblem read_lasso_csv(std::istream& in) {
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  std::vector<double> row;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos || line[0] == '#') continue;
    if (!parse_row(split_csv(line), row)) {
      if (rows.empty() && lineno == 1) continue;  // header
      throw ConfigError("lasso csv: line " + std::to_string(lineno) + " is not numeric");
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw ConfigError("lasso csv: line " + std::to_string(lineno) + " has " +
                        std::to_string(row.size()) + " fields, expected " +
                        std::to_string(rows.front().size()));
    }
    rows.push_back(row);
  }
  if (rows.empty()) throw ConfigError("lasso csv: no data rows");
  const auto cols = static_cast<Eigen::Index>(rows.front().size());
  if (cols < 2) throw ConfigError("lasso csv: need at least one feature column and y");
  Matrix x(static_cast<Eigen::Index>(rows.size()), cols - 1);
  Vector y(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    for (Eigen::Index j = 0; j + 1 < cols; ++j) x(r, j) = rows[i][static_cast<std::size_t>(j)];
    y(r) = rows[i].back();
  }
  return LassoProblem(std::move(x), std::move(y));
}

LassoProblem read_lasso_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("lasso csv: cannot open " + path);
  return read_lasso_csv(in);
}

Vector soft_threshold(const Vector& u, double t) {
  if (!(t >= 0.0)) throw DomainError("soft_threshold: threshold must be nonnegative");
  Vector out(u.size());
  for (Eigen::Index i = 0; i < u.size(); ++i) {
    const double m = std::max(std::abs(u(i)) - t, 0.0);
    out(i) = m == 0.0 ? 0.0 : std::copysign(m, u(i));
  }
  return out;
}

Vector lasso_residual(const LassoProblem& problem, double lambda, const Vector& beta) {
  if (beta.size() != problem.p()) throw ConfigError("lasso_residual: beta has wrong size");
  const Vector u = beta - problem.x().transpose() * (problem.x() * beta - problem.y());
  return beta - soft_threshold(u, std::exp(lambda));
}

LassoSolution describe_solution(const LassoProblem& problem, double lambda, const Vector& beta,
                                double equicorrelation_tol) {
  LassoSolution sol;
  sol.beta = beta;
  sol.lambda = lambda;
  sol.kkt_residual = residual_norm(lasso_residual(problem, lambda, beta));
  const double penalty = std::exp(lambda);
  const Vector corr = problem.x().transpose() * (problem.y() - problem.x() * beta);
  const double slack = equicorrelation_tol * penalty + sol.kkt_residual;
  for (Eigen::Index i = 0; i < beta.size(); ++i) {
    const bool in_support = beta(i) != 0.0;
    if (in_support) sol.support.push_back(i);
    if (in_support || std::abs(corr(i)) >= penalty - slack) sol.equicorrelation.push_back(i);
  }
  return sol;
}

LassoSolution solve_lasso(const LassoProblem& problem, double lambda, const LassoConfig& cfg,
                          const Vector& warm_start) {
  if (!(cfg.tolerance > 0.0)) throw ConfigError("solve_lasso: tolerance must be positive");
  if (!std::isfinite(lambda)) throw DomainError("solve_lasso: lambda must be finite");
  const double penalty = std::exp(lambda);
  const Matrix& g = problem.gram();
  const Vector xty = problem.x().transpose() * problem.y();
  const double lip = spectral_norm(g);
  const double step = 1.0 / lip;

  Vector beta = Vector::Zero(problem.p());
  if (warm_start.size() == problem.p() && warm_start.allFinite()) beta = warm_start;
  Vector w = beta;
  double t = 1.0;
  double obj = objective(problem, penalty, beta);
  double res = residual_norm(lasso_residual(problem, lambda, beta));
  std::size_t it = 0;
  while (res > cfg.tolerance) {
    if (it >= cfg.max_iterations) throw NoConvergence(it, res, "solve_lasso");
    ++it;
    Vector next = soft_threshold(w - step * (g * w - xty), penalty * step);
    const double next_obj = objective(problem, penalty, next);
    if (next_obj > obj) {
      // Restart the momentum from the last accepted point.
      w = beta;
      t = 1.0;
      next = soft_threshold(beta - step * (g * beta - xty), penalty * step);
    }
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    w = next + ((t - 1.0) / t_next) * (next - beta);
    t = t_next;
    beta = std::move(next);
    obj = objective(problem, penalty, beta);
    res = residual_norm(lasso_residual(problem, lambda, beta));
    if (cfg.polish && res > cfg.tolerance && it % 10 == 0) {
      Vector cand = beta;
      if (polish_support(problem, xty, penalty, cand)) {
        const double cand_res = residual_norm(lasso_residual(problem, lambda, cand));
        if (cand_res < res) {
          beta = cand;
          w = cand;
          t = 1.0;
          obj = objective(problem, penalty, beta);
          res = cand_res;
        }
      }
    }
  }
  if (cfg.polish) {
    // Entries at rounding level usually belong to tied coordinates; drop them
    // when the reduced support still meets the tolerance.
    const double cut = 1e-9 * std::max(1.0, residual_norm(beta));
    Vector cand = beta;
    bool changed = false;
    for (Eigen::Index i = 0; i < cand.size(); ++i) {
      if (cand(i) != 0.0 && std::abs(cand(i)) <= cut) {
        cand(i) = 0.0;
        changed = true;
      }
    }
    if (changed) {
      const bool solved = (cand.array() == 0.0).all() || polish_support(problem, xty, penalty, cand);
      if (solved && residual_norm(lasso_residual(problem, lambda, cand)) <= cfg.tolerance) beta = cand;
    }
  }
  LassoSolution sol = describe_solution(problem, lambda, beta, cfg.equicorrelation_tol);
  sol.iterations = it;
  return sol;
}

Vector q_vector(const LassoSolution& solution, const QSelection& selection, Eigen::Index p) {
  Vector q = Vector::Zero(p);
  std::vector<char> in_e(static_cast<std::size_t>(p), 0), in_s(static_cast<std::size_t>(p), 0);
  for (auto i : solution.equicorrelation) in_e.at(static_cast<std::size_t>(i)) = 1;
  for (auto i : solution.support) in_s.at(static_cast<std::size_t>(i)) = 1;
  switch (selection.mode) {
    case QSelection::Mode::lars:
      for (auto i : solution.equicorrelation) q(i) = 1.0;
      return q;
    case QSelection::Mode::weak:
      for (auto i : solution.support) q(i) = 1.0;
      return q;
    case QSelection::Mode::custom:
      break;
  }
  const Vector& c = selection.q;
  if (c.size() != p) throw InvalidSelection("q has size " + std::to_string(c.size()) + ", expected " + std::to_string(p));
  for (Eigen::Index i = 0; i < p; ++i) {
    const auto k = static_cast<std::size_t>(i);
    const double v = c(i);
    if (in_s[k]) {
      if (v != 1.0) throw InvalidSelection("q_" + std::to_string(i) + " must be 1 on the support");
    } else if (!in_e[k]) {
      if (v != 0.0) throw InvalidSelection("q_" + std::to_string(i) + " must be 0 outside E");
    } else if (!(v >= 0.0 && v <= 1.0)) {
      throw InvalidSelection("q_" + std::to_string(i) + " must lie in [0, 1]");
    }
  }
  return c;
}

Vector lasso_jacobian_selection(const LassoProblem& problem, const LassoSolution& solution,
                                const QSelection& selection, double rcond_tol) {
  const Eigen::Index p = problem.p();
  if (solution.beta.size() != p) throw ConfigError("lasso_jacobian_selection: solution has wrong size");
  gate(principal(problem.gram(), solution.equicorrelation), rcond_tol, "lasso X_E^T X_E");
  const Vector q = q_vector(solution, selection, p);
  const double penalty = std::exp(solution.lambda);
  const Vector u =
      solution.beta - problem.x().transpose() * (problem.x() * solution.beta - problem.y());
  const Matrix id = Matrix::Identity(p, p);
  const Matrix b = id - q.asDiagonal() * (id - problem.gram());
  const Vector a = penalty * q.cwiseProduct(u.cwiseSign());
  LuFactorization lu(b);
  if (lu.rcond() == 0.0 || lu.rcond() < rcond_tol) {
    throw InvertibilityFailure(lu.rcond(), rcond_tol, "lasso I - diag(q)(I - X^T X)", b);
  }
  return -lu.solve(a, rcond_tol);
}

Vector restricted_selection(const LassoProblem& problem, const LassoSolution& solution, const Vector& q,
                            double rcond_tol) {
  const Eigen::Index p = problem.p();
  if (q.size() != p) throw ConfigError("restricted_selection: q has wrong size");
  const auto s = positive_entries(q);
  Vector out = Vector::Zero(p);
  if (s.empty()) return out;
  const auto k = static_cast<Eigen::Index>(s.size());
  const Vector qs = q(s);
  const Matrix id = Matrix::Identity(k, k);
  const Matrix b = id - qs.asDiagonal() * (id - principal(problem.gram(), s));
  const Vector u =
      solution.beta - problem.x().transpose() * (problem.x() * solution.beta - problem.y());
  const Vector a = std::exp(solution.lambda) * qs.cwiseProduct(u(s).cwiseSign());
  LuFactorization lu(b);
  if (lu.rcond() == 0.0 || lu.rcond() < rcond_tol) {
    throw InvertibilityFailure(lu.rcond(), rcond_tol, "lasso restricted system", b);
  }
  out(s) = -lu.solve(a, rcond_tol);
  return out;
}

namespace {

Vector submatrix_selection(const LassoProblem& problem, const LassoSolution& solution,
                           const std::vector<Eigen::Index>& idx, double rcond_tol, const char* where) {
  Vector out = Vector::Zero(problem.p());
  if (idx.empty()) return out;
  const Matrix g = principal(problem.gram(), idx);
  gate(g, rcond_tol, where);
  const Vector corr = problem.x().transpose() * (problem.y() - problem.x() * solution.beta);
  const Vector rhs = std::exp(solution.lambda) * corr(idx).cwiseSign();
  out(idx) = -lu_solve(g, rhs, rcond_tol);
  return out;
}

}  // namespace

Vector lars_selection(const LassoProblem& problem, const LassoSolution& solution, double rcond_tol) {
  return submatrix_selection(problem, solution, solution.equicorrelation, rcond_tol, "lasso X_E^T X_E");
}

Vector weak_selection(const LassoProblem& problem, const LassoSolution& solution, double rcond_tol) {
  return submatrix_selection(problem, solution, solution.support, rcond_tol, "lasso X_S^T X_S");
}

double StepSchedule::at(std::size_t k) const {
  if (kind == Kind::constant) return alpha0;
  return alpha0 / std::pow(static_cast<double>(std::max<std::size_t>(k, 1)), power);
}

TuneTrajectory tune_lambda(const LassoProblem& problem, const Tape& criterion, double lambda0,
                           const TuneConfig& cfg) {
  if (criterion.num_inputs() != static_cast<std::size_t>(problem.p()) || criterion.num_outputs() != 1) {
    throw ConfigError("tune_lambda: criterion must map R^p to R");
  }
  if (!(cfg.schedule.alpha0 > 0.0)) throw ConfigError("tune_lambda: step size must be positive");
  TuneTrajectory traj;
  double lambda = lambda0;
  Vector warm;
  for (std::size_t k = 1; k <= cfg.iterations; ++k) {
    LassoSolution sol = solve_lasso(problem, lambda, cfg.inner, warm);
    const Vector dbeta = lasso_jacobian_selection(problem, sol, cfg.selection);
    const ForwardResult fwd = forward(criterion, sol.beta);
    const Matrix grad = jacobian_selection(criterion, fwd).matrix;
    const double hg = (grad * dbeta)(0);
    traj.steps.push_back({k, lambda, fwd.y(0), hg});
    warm = sol.beta;
    traj.final_solution = std::move(sol);
    if (!std::isfinite(hg)) throw DomainError("tune_lambda: non-finite hypergradient");
    if (cfg.gradient_tol > 0.0 && std::abs(hg) <= cfg.gradient_tol) break;
    lambda -= cfg.schedule.at(k) * hg;
  }
  return traj;
}

void write_tune_csv(std::ostream& out, const TuneTrajectory& trajectory) {
  out << "step,lambda,C,hypergradient\n";
  out << std::setprecision(17);
  for (const auto& s : trajectory.steps) {
    out << s.step << ',' << s.lambda << ',' << s.criterion << ',' << s.hypergradient << '\n';
  }
}

}  // namespace nsid
