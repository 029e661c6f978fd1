// SPDX-License-Identifier: Apache-2.0
#include "nsid/errors.hpp"

#include <sstream>
#include <utility>

namespace nsid {

namespace {
std::string format_rcond(const char* what, double rcond, double tol, const std::string& where) {
  std::ostringstream os;
  os << what;
  if (!where.empty()) os << " in " << where;
  os << ": rcond=" << rcond << " < tol=" << tol;
  return os.str();
}
}  // namespace

SingularMatrix::SingularMatrix(double rcond, double tol)
    : Error(format_rcond("singular matrix", rcond, tol, "")), rcond_(rcond) {}

InvertibilityFailure::InvertibilityFailure(double rcond, double tol, const std::string& where,
                                           Eigen::MatrixXd witness)
    : Error(format_rcond("invertibility gate failed", rcond, tol, where)),
      rcond_(rcond),
      tol_(tol),
      witness_(std::move(witness)) {}

NoConvergence::NoConvergence(std::size_t iterations, double residual, const std::string& where)
    : Error(where + ": no convergence after " + std::to_string(iterations) +
            " iterations (residual " + std::to_string(residual) + ")"),
      iterations_(iterations),
      residual_(residual) {}

DivergenceDetected::DivergenceDetected(std::size_t step, double norm, double bound)
    : Error("iterate norm " + std::to_string(norm) + " exceeded bound " + std::to_string(bound) +
            " at step " + std::to_string(step)),
      step_(step) {}

}  // namespace nsid
