// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace nsid {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A square system could not be solved: the reciprocal condition estimate fell
/// below the configured threshold.
class SingularMatrix : public Error {
 public:
  SingularMatrix(double rcond, double tol);
  double rcond() const noexcept { return rcond_; }

 private:
  double rcond_;
};

class NotSymmetric : public Error {
 public:
  using Error::Error;
};

/// The variable block of a Jacobian selection failed the invertibility gate.
/// Carries the witness: the offending block and its reciprocal condition number.
class InvertibilityFailure : public Error {
 public:
  InvertibilityFailure(double rcond, double tol, const std::string& where,
                       Eigen::MatrixXd witness = {});
  double rcond() const noexcept { return rcond_; }
  double tolerance() const noexcept { return tol_; }
  const Eigen::MatrixXd& witness() const noexcept { return witness_; }

 private:
  double rcond_;
  double tol_;
  Eigen::MatrixXd witness_;
};

class NoConvergence : public Error {
 public:
  NoConvergence(std::size_t iterations, double residual, const std::string& where);
  std::size_t iterations() const noexcept { return iterations_; }
  double residual() const noexcept { return residual_; }

 private:
  std::size_t iterations_;
  double residual_;
};

/// A primitive was evaluated outside its domain (log of a nonpositive number, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A Jacobian selection parameter lies outside the admissible set.
class InvalidSelection : public Error {
 public:
  using Error::Error;
};

class DivergenceDetected : public Error {
 public:
  DivergenceDetected(std::size_t step, double norm, double bound);
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// Malformed input: bad shapes, bad JSON, out-of-range configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace nsid
