# SPDX-License-Identifier: Apache-2.0
import json
import math

import numpy as np
import pytest

import nsid


def tanh_in_disguise_residual():
    # inputs [x, z]; f(z) - tanh(tanh(x)) with f(z) = tanh z + relu(-z) + z - relu(z)
    nodes = [
        {"op": "input", "offset": 0, "size": 1},
        {"op": "input", "offset": 1, "size": 1},
        {"op": "tanh", "args": [1]},
        {"op": "neg", "args": [1]},
        {"op": "relu", "args": [3]},
        {"op": "relu", "args": [1]},
        {"op": "add", "args": [2, 4]},
        {"op": "add", "args": [6, 1]},
        {"op": "sub", "args": [7, 5]},
        {"op": "tanh", "args": [0]},
        {"op": "tanh", "args": [9]},
        {"op": "sub", "args": [8, 10]},
    ]
    doc = {"format": "nsid.tape", "version": 1, "inputs": 2, "nodes": nodes, "outputs": [11]}
    return nsid.Tape.from_json(json.dumps(doc))


def test_implicit_derivative_and_origin_value():
    problem = nsid.ImplicitProblem(tanh_in_disguise_residual(), 1, 1)
    for x in (-1.2, 0.3, 2.0):
        sel = nsid.implicit_selection(problem, np.array([x]), np.array([math.tanh(x)]))
        assert sel.gate_passed
        assert sel.jacobian[0, 0] == pytest.approx(1 - math.tanh(x) ** 2, abs=1e-10)
    origin = nsid.implicit_selection(problem, np.array([0.0]), np.array([0.0]))
    assert origin.jacobian[0, 0] == 0.5


def test_tape_round_trip_and_jacobian():
    tape = tanh_in_disguise_residual()
    again = nsid.Tape.from_json(tape.to_json())
    x = np.array([0.4, -0.7])
    assert np.allclose(nsid.evaluate(tape, x), nsid.evaluate(again, x))
    assert nsid.jacobian_selection(tape, x).shape == (1, 2)
    with pytest.raises(nsid.ConfigError):
        nsid.Tape.from_json("{}")


def test_gate_failure_carries_witness():
    with pytest.raises(nsid.InvertibilityFailure) as info:
        nsid.run_cycle(iterations=10, force_implicit=False)
    assert info.value.rcond == 0.0
    assert info.value.witness.shape == (2, 2)
    assert issubclass(nsid.InvertibilityFailure, nsid.Error)


def test_cycle_and_counterexample():
    run = nsid.run_cycle(iterations=2000)
    assert run["records"].shape == (2001, 6)
    assert run["recurrent"]
    assert run["branch_mismatches"] == 0
    rep = nsid.run_counterexample()
    assert rep["ok"]
    assert (rep["phi_dimension"], rep["psi_dimension"]) == (2, 3)


def test_lorenz_form():
    h = nsid.lorenz_quadratic_form()
    assert np.array_equal(h, np.array([[-20, 38, 0], [38, -2, 0], [0, 0, -16 / 3]]))
    run = nsid.run_lorenz(iterations=500)
    assert run["plain_diverged"]
    assert np.abs(run["implicit"]).max() < 100


def test_lasso_selection_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((20, 8))
    y = rng.standard_normal(20)
    prob = nsid.LassoProblem(x, y)
    lam = math.log(0.3 * prob.lambda_max_penalty())
    sol = nsid.solve_lasso(prob, lam, tolerance=1e-13)
    d = nsid.lars_selection(prob, sol)
    h = 1e-6
    fd = (nsid.solve_lasso(prob, lam + h, 1e-13).beta - nsid.solve_lasso(prob, lam - h, 1e-13).beta) / (2 * h)
    assert np.allclose(d, fd, atol=1e-5)
    assert np.array_equal(d, nsid.weak_selection(prob, sol))


def test_deq_gradient_shape():
    w = np.array([[0.2, 0.1], [-0.1, 0.3]])
    b = np.array([0.5, -0.2])
    z = nsid.deq_forward(w, b, "tanh", 1e-13)
    assert np.allclose(z, np.tanh(w @ z + b), atol=1e-12)
    g_w, g_b = nsid.deq_gradient(w, b, "tanh", z, z)
    assert g_w.shape == (2, 2) and g_b.shape == (2,)
    assert np.allclose(g_w, np.outer(g_b, z))


def test_conic_box_program():
    prob = nsid.box_lp(np.array([-1.0, -2.0]))
    sol = nsid.solve_conic(prob)
    assert np.allclose(sol["x"], [3, 5], atol=1e-8)
    assert sol["kkt"] <= 1e-8
    jac = nsid.conic_solution_jacobian(prob, sol["z"])
    assert jac.shape == (2 + 4 + 4, 8 + 4 + 2)
    with pytest.raises(nsid.InvertibilityFailure):
        degenerate = nsid.box_lp(np.zeros(2))
        nsid.conic_solution_jacobian(degenerate, nsid.solve_conic(degenerate)["z"])
    proj = nsid.project_cone([("nonneg", 2), ("soc", 3)], np.array([-1.0, 2.0, 0.0, 3.0, 4.0]))
    assert np.allclose(proj[:2], [0, 2])
    assert np.linalg.norm(proj[3:]) <= proj[2] + 1e-12
