// SPDX-License-Identifier: Apache-2.0
#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <string>
#include <utility>
#include <vector>

#include "nsid/conic.hpp"
#include "nsid/deq.hpp"
#include "nsid/errors.hpp"
#include "nsid/experiments.hpp"
#include "nsid/implicit.hpp"
#include "nsid/lasso.hpp"
#include "nsid/sgd.hpp"
#include "nsid/tape.hpp"
#include "nsid/tape_json.hpp"

namespace py = pybind11;
using namespace pybind11::literals;
using nsid::Matrix;
using nsid::Vector;

namespace {

nsid::Cone make_cone(const std::vector<std::pair<std::string, std::size_t>>& blocks) {
  std::vector<nsid::ConeFactor> factors;
  for (const auto& [name, dim] : blocks) {
    nsid::ConeKind kind;
    if (name == "zero") {
      kind = nsid::ConeKind::zero;
    } else if (name == "free") {
      kind = nsid::ConeKind::free;
    } else if (name == "nonneg") {
      kind = nsid::ConeKind::nonneg;
    } else if (name == "soc") {
      kind = nsid::ConeKind::soc;
    } else {
      throw nsid::ConfigError("unknown cone kind '" + name + "'");
    }
    factors.push_back({kind, dim});
  }
  return nsid::Cone(std::move(factors));
}

Matrix records_matrix(const nsid::CycleRun& run) {
  Matrix m(static_cast<Eigen::Index>(run.records.size()), 6);
  for (std::size_t k = 0; k < run.records.size(); ++k) {
    const auto& r = run.records[k];
    m.row(static_cast<Eigen::Index>(k)) << static_cast<double>(r.k), r.x, r.y, r.s1, r.s2, r.loss;
  }
  return m;
}

Matrix path_matrix(const std::vector<Vector>& path) {
  if (path.empty()) return Matrix(0, 0);
  Matrix m(static_cast<Eigen::Index>(path.size()), path.front().size());
  for (std::size_t k = 0; k < path.size(); ++k) m.row(static_cast<Eigen::Index>(k)) = path[k].transpose();
  return m;
}

}  // namespace

PYBIND11_MODULE(_nsid, m) {
  m.doc() = "Conservative Jacobians and nonsmooth implicit differentiation";

  // Translators run most recent first, so derived types are registered after the base.
  auto& error = py::register_exception<nsid::Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<nsid::SingularMatrix>(m, "SingularMatrix", error.ptr());
  py::register_exception<nsid::NotSymmetric>(m, "NotSymmetric", error.ptr());
  py::register_exception<nsid::NoConvergence>(m, "NoConvergence", error.ptr());
  py::register_exception<nsid::DomainError>(m, "DomainError", error.ptr());
  py::register_exception<nsid::InvalidSelection>(m, "InvalidSelection", error.ptr());
  py::register_exception<nsid::DivergenceDetected>(m, "DivergenceDetected", error.ptr());
  py::register_exception<nsid::ConfigError>(m, "ConfigError", error.ptr());
  static PyObject* invertibility =
      py::register_exception<nsid::InvertibilityFailure>(m, "InvertibilityFailure", error.ptr()).ptr();
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const nsid::InvertibilityFailure& e) {
      // Attach the witness so callers can inspect the singular block.
      py::object exc = py::handle(invertibility)(e.what());
      exc.attr("rcond") = e.rcond();
      exc.attr("witness") = py::cast(Matrix(e.witness()));
      PyErr_SetObject(invertibility, exc.ptr());
    }
  });

  // Tapes and selections.
  py::class_<nsid::SelectionPolicy>(m, "SelectionPolicy")
      .def(py::init<>())
      .def_readwrite("name", &nsid::SelectionPolicy::name)
      .def_readwrite("relu_at_zero", &nsid::SelectionPolicy::relu_at_zero)
      .def_readwrite("abs_at_zero", &nsid::SelectionPolicy::abs_at_zero)
      .def_readwrite("sign_at_zero", &nsid::SelectionPolicy::sign_at_zero)
      .def_readwrite("max_tie_weight", &nsid::SelectionPolicy::max_tie_weight)
      .def_readwrite("min_tie_weight", &nsid::SelectionPolicy::min_tie_weight)
      .def_readwrite("clamp_at_bound", &nsid::SelectionPolicy::clamp_at_bound)
      .def_readwrite("soft_threshold_at_kink", &nsid::SelectionPolicy::soft_threshold_at_kink)
      .def_readwrite("kink_positions", &nsid::SelectionPolicy::kink_positions)
      .def_static("lower", &nsid::SelectionPolicy::lower)
      .def_static("upper", &nsid::SelectionPolicy::upper)
      .def_static("randomized", &nsid::SelectionPolicy::randomized, "seed"_a);

  py::class_<nsid::Tape>(m, "Tape")
      .def_static("from_json", &nsid::tape_from_string, "text"_a)
      .def("to_json", [](const nsid::Tape& t) { return nsid::tape_to_string(t); })
      .def_property_readonly("num_inputs", &nsid::Tape::num_inputs)
      .def_property_readonly("num_outputs", &nsid::Tape::num_outputs);

  m.def("evaluate", [](const nsid::Tape& t, const Vector& x, const nsid::SelectionPolicy& p) {
    return nsid::evaluate(t, x, p);
  }, "tape"_a, "x"_a, "policy"_a = nsid::SelectionPolicy{});
  m.def("jacobian_selection", [](const nsid::Tape& t, const Vector& x, const nsid::SelectionPolicy& p) {
    return nsid::jacobian_selection(t, x, p).matrix;
  }, "tape"_a, "x"_a, "policy"_a = nsid::SelectionPolicy{});

  // Implicit differentiation.
  py::class_<nsid::ImplicitProblem>(m, "ImplicitProblem")
      .def(py::init<nsid::Tape, std::size_t, std::size_t>(), "residual"_a, "n"_a, "m"_a)
      .def_readwrite("policy", &nsid::ImplicitProblem::policy)
      .def_readwrite("rcond_tol", &nsid::ImplicitProblem::rcond_tol)
      .def_readwrite("force_mode", &nsid::ImplicitProblem::force_mode)
      .def_readwrite("pinv_fallback", &nsid::ImplicitProblem::pinv_fallback)
      .def_readwrite("pinv_abs_cutoff", &nsid::ImplicitProblem::pinv_abs_cutoff)
      .def_readwrite("residual_tolerance", &nsid::ImplicitProblem::residual_tolerance);

  py::class_<nsid::ImplicitSelection>(m, "ImplicitSelection")
      .def_readonly("jacobian", &nsid::ImplicitSelection::jacobian)
      .def_readonly("a", &nsid::ImplicitSelection::a)
      .def_readonly("b", &nsid::ImplicitSelection::b)
      .def_readonly("rcond", &nsid::ImplicitSelection::rcond)
      .def_readonly("gate_passed", &nsid::ImplicitSelection::gate_passed)
      .def_readonly("pseudo_inverse", &nsid::ImplicitSelection::pseudo_inverse);

  m.def("implicit_selection", &nsid::implicit_selection, "problem"_a, "x"_a, "z"_a);
  m.def("inverse_jacobian_selection", &nsid::inverse_jacobian_selection, "phi"_a, "y"_a, "psi_y"_a,
        "policy"_a = nsid::SelectionPolicy{}, "rcond_tol"_a = nsid::kDefaultRcondTol, "tolerance"_a = 1e-8);

  // Equilibrium layers.
  m.def("deq_forward", [](const Matrix& w, const Vector& b, const std::string& activation, double tol) {
    nsid::FixedPointConfig cfg;
    cfg.tolerance = tol;
    const auto layer = nsid::MonotoneLayer::unchecked(w, b, nsid::activation_tape(activation, b.size()));
    return nsid::deq_forward(layer, cfg).z;
  }, "w"_a, "b"_a, "activation"_a = "relu", "tolerance"_a = 1e-10);
  m.def("deq_gradient", [](const Matrix& w, const Vector& b, const std::string& activation, const Vector& z,
                           const Vector& v) {
    const auto layer = nsid::MonotoneLayer::unchecked(w, b, nsid::activation_tape(activation, b.size()));
    const auto g = nsid::deq_conservative_gradient(layer, z, v);
    return py::make_tuple(g.g_w, g.g_b);
  }, "w"_a, "b"_a, "activation"_a, "z"_a, "v"_a, "Returns (G_W, G_b) for the loss selection v at z.");

  // Cone programs.
  py::class_<nsid::ConicProblem>(m, "ConicProblem")
      .def(py::init([](const Matrix& a, const Vector& b, const Vector& c,
                       const std::vector<std::pair<std::string, std::size_t>>& cone) {
             return nsid::ConicProblem(a, b, c, make_cone(cone));
           }),
           "a"_a, "b"_a, "c"_a, "cone"_a)
      .def_readonly("a", &nsid::ConicProblem::a)
      .def_readonly("b", &nsid::ConicProblem::b)
      .def_readonly("c", &nsid::ConicProblem::c);
  m.def("project_cone", [](const std::vector<std::pair<std::string, std::size_t>>& cone, const Vector& v) {
    return nsid::project_cone(make_cone(cone), v);
  }, "cone"_a, "v"_a);
  m.def("solve_conic", [](const nsid::ConicProblem& p) {
    const auto sol = nsid::solve_residual(p);
    return py::dict("x"_a = sol.sol.x, "y"_a = sol.sol.y, "s"_a = sol.sol.s, "z"_a = sol.z,
                    "residual"_a = sol.residual, "iterations"_a = sol.iterations,
                    "kkt"_a = nsid::kkt_report(p, sol.sol).max());
  }, "problem"_a);
  m.def("conic_solution_jacobian", [](const nsid::ConicProblem& p, const Vector& z) {
    return nsid::sol_jacobian_selection(p, z).jacobian;
  }, "problem"_a, "z"_a, "Rows x, y, s; columns A (column-major), b, c.");
  m.def("box_lp", &nsid::box_lp, "c"_a);

  // Lasso.
  py::class_<nsid::LassoProblem>(m, "LassoProblem")
      .def(py::init<Matrix, Vector>(), "x"_a, "y"_a)
      .def("lambda_max_penalty", &nsid::LassoProblem::lambda_max_penalty);
  py::class_<nsid::LassoSolution>(m, "LassoSolution")
      .def_readonly("beta", &nsid::LassoSolution::beta)
      .def_readonly("lam", &nsid::LassoSolution::lambda)
      .def_readonly("support", &nsid::LassoSolution::support)
      .def_readonly("equicorrelation", &nsid::LassoSolution::equicorrelation)
      .def_readonly("kkt_residual", &nsid::LassoSolution::kkt_residual)
      .def_readonly("iterations", &nsid::LassoSolution::iterations);
  m.def("solve_lasso", [](const nsid::LassoProblem& p, double lam, double tol) {
    nsid::LassoConfig cfg;
    cfg.tolerance = tol;
    return nsid::solve_lasso(p, lam, cfg);
  }, "problem"_a, "lam"_a, "tolerance"_a = 1e-10, "Minimizes 1/2 ||X beta - y||^2 + exp(lam) ||beta||_1.");
  m.def("lars_selection", &nsid::lars_selection, "problem"_a, "solution"_a,
        "rcond_tol"_a = nsid::kDefaultRcondTol);
  m.def("weak_selection", &nsid::weak_selection, "problem"_a, "solution"_a,
        "rcond_tol"_a = nsid::kDefaultRcondTol);

  m.def("min_norm_in_hull", &nsid::min_norm_in_hull, "points"_a);

  // Experiments.
  m.def("run_cycle", [](std::size_t iterations, double step, bool force_implicit,
                        const std::vector<double>& eps) {
    nsid::CycleOptions o;
    o.iterations = iterations;
    o.step = step;
    o.force_implicit = force_implicit;
    if (!eps.empty()) {
      if (eps.size() != 6) throw nsid::ConfigError("eps must have six entries");
      std::copy(eps.begin(), eps.end(), o.eps.begin());
    }
    const auto run = nsid::run_cycle(o);
    return py::dict("records"_a = records_matrix(run), "recurrent"_a = run.recurrence.recurrent,
                    "diverged"_a = run.diverged, "branch_mismatches"_a = run.branch_mismatches);
  }, "iterations"_a = 5000, "step"_a = 0.05, "force_implicit"_a = true, "eps"_a = std::vector<double>{},
     "Records have columns k, x, y, s1, s2, loss.");
  m.def("run_counterexample", [] {
    const auto rep = nsid::run_counterexample();
    return py::dict("phi_generators"_a = rep.phi_generators, "inverses"_a = rep.inverses,
                    "phi_dimension"_a = rep.phi_dimension, "psi_dimension"_a = rep.psi_dimension,
                    "max_inverse_error"_a = rep.max_inverse_error, "outside_hull"_a = rep.outside_hull,
                    "ok"_a = rep.ok());
  });
  m.def("lorenz_quadratic_form", [](double sigma, double rho, double beta) {
    return nsid::lorenz_quadratic_form({sigma, rho, beta});
  }, "sigma"_a = 10.0, "rho"_a = 28.0, "beta"_a = 8.0 / 3.0);
  m.def("run_lorenz", [](std::size_t iterations, double step) {
    nsid::LorenzOptions o;
    o.iterations = iterations;
    o.step = step;
    const auto run = nsid::run_lorenz(o);
    return py::dict("implicit"_a = path_matrix(run.implicit_path), "plain"_a = path_matrix(run.plain_path),
                    "ode"_a = path_matrix(run.ode_path), "plain_diverged"_a = run.plain_diverged);
  }, "iterations"_a = 10000, "step"_a = 0.01);
  m.def("run_billiard4d", [](std::size_t iterations, double eta) {
    nsid::BilliardOptions o;
    o.iterations = iterations;
    o.eta = eta;
    const auto run = nsid::run_billiard4d(o);
    return py::dict("path"_a = path_matrix(run.path), "coverage"_a = run.coverage);
  }, "iterations"_a = 5000, "eta"_a = 1.4142135623730951);
}
