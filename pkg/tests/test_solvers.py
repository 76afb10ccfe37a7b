import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from scipy.linalg import solve_banded
from scipy.optimize import brentq, minimize

from nlhomog.errors import SolverError
from nlhomog.lagrangian import LagrangianRealization, NonlinearitySpec, lagrangian_terms
from nlhomog.mesh import gradient, mesh_box, mesh_cube, norm_L2_mean
from nlhomog.solvers import (MeshIntegrand, bind, energy_and_gradient, minimize_energy, pcg, solve_linear_dirichlet,
                             solve_linearized, solve_spd)


def _dl_1d(p, a):
    return p + a * p / math.sqrt(1.0 + p * p)


def test_newton_matches_1d_flux_balance():
    """In 1D the flux DL(u') is constant, so each cell slope solves DL(p_i) = c with mean slope 1."""
    a_cells = np.array([0.0, 2.0, 0.5])
    nl = NonlinearitySpec("perturbed_sqrt", 3.0)
    real = LagrangianRealization.from_cell_values(a_cells, nl)
    mesh = mesh_cube(1, 0.25, 1)
    g = mesh.nodes[:, 0].copy()
    u, report = minimize_energy(real, mesh, g, tol=1e-12)
    assert report.converged

    def slopes(c):
        return np.array([brentq(lambda p: _dl_1d(p, a) - c, -10, 10) for a in a_cells])

    c = brentq(lambda c: slopes(c).mean() - 1.0, 0.1, 10.0)
    want = np.repeat(slopes(c), 4)
    assert np.allclose(gradient(u).values[:, 0], want, atol=1e-9)


def test_newton_matches_quasi_newton_oracle_on_checkerboard():
    cells = np.array([[0.0, 1.0], [1.0, 0.0]])
    real = LagrangianRealization.from_cell_values(cells, NonlinearitySpec("perturbed_sqrt", 2.0))
    mesh = mesh_box(-1.5, 2.0, 0.5, 2)
    g = mesh.nodes[:, 0].copy()
    u, _ = minimize_energy(real, mesh, g, tol=1e-12)
    integrand = bind(real, mesh)
    free = np.flatnonzero(~mesh.boundary)

    def fun(x):
        v = g.copy()
        v[free] = x
        e, grad, _, _ = energy_and_gradient(integrand, mesh, v)
        return e, grad[free]

    res = minimize(fun, g[free], jac=True, method="L-BFGS-B", options={"gtol": 1e-12, "ftol": 1e-15})
    assert np.max(np.abs(res.x - u.values[free])) < 1e-6


def test_solve_spd_matches_banded_solver():
    n = 200
    main = 2.0 + np.linspace(0, 1, n)
    off = -np.ones(n - 1)
    A = sp.diags([off, main, off], [-1, 0, 1])
    b = np.sin(np.arange(n))
    ab = np.zeros((3, n))
    ab[0, 1:] = off
    ab[1] = main
    ab[2, :-1] = off
    want = solve_banded((1, 1), ab, b)
    for method in ["cg", "direct", "auto"]:
        assert np.allclose(solve_spd(A, b, tol=1e-13, method=method), want, atol=1e-10)


def test_asymmetric_operator_is_rejected():
    A = sp.csr_matrix(np.array([[2.0, 1.0], [0.0, 2.0]]))
    with pytest.raises(AssertionError):
        solve_spd(A, np.ones(2))


def test_cg_stagnation_raises():
    A = sp.diags([np.linspace(1, 1e4, 500)], [0]) + sp.diags([np.full(499, 0.4)] * 2, [-1, 1])
    with pytest.raises(SolverError):
        pcg(A.tocsr(), np.ones(500), rtol=1e-14, maxiter=2)


def test_linear_dirichlet_superposition():
    mesh = mesh_cube(1, 0.25, 2)
    rng = np.random.default_rng(3)
    coef = rng.uniform(1, 3, mesh.n_elements)
    g1 = np.sin(mesh.nodes[:, 0])
    g2 = mesh.nodes[:, 1] ** 2
    w1 = solve_linear_dirichlet(mesh, coef, g1)
    w2 = solve_linear_dirichlet(mesh, coef, g2)
    w12 = solve_linear_dirichlet(mesh, coef, 2 * g1 - g2)
    assert np.allclose(w12, 2 * w1 - w2, atol=1e-10)
    # constant coefficients reproduce affine data exactly
    aff = mesh.nodes @ np.array([0.3, -1.0])
    assert np.allclose(solve_linear_dirichlet(mesh, np.ones(mesh.n_elements), aff), aff, atol=1e-10)


def test_linearized_quadratic_equals_nonlinear():
    cells = np.array([[1.0, 3.0, 2.0], [2.0, 1.0, 3.0], [3.0, 2.0, 1.0]])
    real = LagrangianRealization.from_cell_values(cells, NonlinearitySpec("quadratic", 3.0))
    mesh = mesh_cube(1, 0.5, 2)
    g = np.cos(mesh.nodes[:, 0]) + mesh.nodes[:, 1]
    u, _ = minimize_energy(real, mesh, g, tol=1e-12)
    w = solve_linearized(real, mesh, np.zeros((mesh.n_elements, 2)), g)
    assert np.allclose(u.values, w.values, atol=1e-9)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.floats(-2, 2))
def test_minimizer_beats_perturbations(seed, amp):
    rng = np.random.default_rng(seed)
    cells = rng.uniform(0, 2, (3, 3))
    real = LagrangianRealization.from_cell_values(cells, NonlinearitySpec("perturbed_sqrt", 3.0))
    mesh = mesh_cube(1, 0.5, 2)
    g = amp * mesh.nodes[:, 0] * mesh.nodes[:, 1]
    u, report = minimize_energy(real, mesh, g, tol=1e-11)
    integrand = bind(real, mesh)
    e_min = energy_and_gradient(integrand, mesh, u.values)[0]
    assert abs(e_min - report.energy) <= 1e-12 * max(1.0, abs(e_min))
    for _ in range(5):
        v = u.values.copy()
        v[~mesh.boundary] += 0.1 * rng.normal(size=(~mesh.boundary).sum())
        assert energy_and_gradient(integrand, mesh, v)[0] >= e_min - 1e-12


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31))
def test_comparison_estimate(seed):
    """|grad(u - v)| <= Lambda |grad(f - g)| in L^2 for minimizers with boundary data f and g."""
    rng = np.random.default_rng(seed)
    lam = 3.0
    real = LagrangianRealization.from_cell_values(rng.uniform(0, 2, (3, 3)), NonlinearitySpec("perturbed_sqrt", lam))
    mesh = mesh_cube(1, 0.5, 2)
    x, y = mesh.nodes.T
    f = rng.normal() * x + rng.normal() * np.sin(y)
    g = f + rng.normal() * x * y + rng.normal() * np.cos(x)
    u, _ = minimize_energy(real, mesh, f, tol=1e-11)
    v, _ = minimize_energy(real, mesh, g, tol=1e-11)
    lhs = norm_L2_mean(gradient(u - v))
    rhs = lam * norm_L2_mean(gradient(f - g, mesh))
    assert lhs <= rhs + 1e-8


def test_mesh_integrand_terms():
    integ = MeshIntegrand("quadratic", [2.0, 3.0])
    L, DL, _ = integ.terms(np.array([[1.0, 0.0], [0.0, 2.0]]))
    assert np.allclose(L, [1.0, 6.0])
    assert np.allclose(DL, lagrangian_terms("quadratic", np.array([2.0, 3.0]), np.array([[1.0, 0.0], [0.0, 2.0]]))[1])
