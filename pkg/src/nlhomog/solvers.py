"""Damped Newton minimization of discrete convex energies and SPD linear solves."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NonConvergenceError, NumericalError, SolverError
from .lagrangian import lagrangian_terms

DEFAULT_TOL = 1e-9
DIRECT_MAX_UNKNOWNS = 5000
ARMIJO = 1e-4
MAX_NEWTON = 60


@dataclass
class SolveReport:
    iterations: int
    final_gradient_norm: float
    energy: float
    converged: bool
    linear_iterations: int = 0

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def _check_symmetric(A):
    diff = abs(A - A.T)
    scale = abs(A).max() if A.nnz else 0.0
    assert diff.nnz == 0 or diff.max() <= 1e-12 * max(scale, 1.0), "non-symmetric assembly"


def pcg(A, b, rtol=1e-10, x0=None, maxiter=None, atol=0.0):
    """Jacobi-preconditioned conjugate gradients.

    Stops when ||b - A x|| <= max(rtol * ||b||, atol). Returns (x, iterations).
    Raises SolverError on stagnation (iteration cap reached).
    """
    n = b.shape[0]
    if maxiter is None:
        maxiter = max(50, int(50 * math.sqrt(max(n, 1))))
    diag = A.diagonal()
    if np.any(diag <= 0):
        raise SolverError("operator has non-positive diagonal entries")
    minv = 1.0 / diag
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x if x0 is not None else b.copy()
    bnorm = np.linalg.norm(b)
    target = max(rtol * bnorm, atol)
    if bnorm == 0.0 or np.linalg.norm(r) <= target:
        return x, 0
    z = minv * r
    p = z.copy()
    rz = r @ z
    for it in range(1, maxiter + 1):
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0.0:
            raise SolverError("operator is not positive definite")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= target:
            return x, it
        z = minv * r
        rz_new = r @ z
        p *= rz_new / rz
        p += z
        rz = rz_new
    raise SolverError(f"CG stagnated after {maxiter} iterations (residual {np.linalg.norm(r):.3e})")


def _pick(method, n):
    if method == "auto":
        return "direct" if n <= DIRECT_MAX_UNKNOWNS else "cg"
    return method


def solve_spd(A, b, tol=1e-10, x0=None, method="auto", check_symmetry=True, atol=0.0):
    """Solve A x = b for a sparse SPD matrix to relative residual ``tol``.

    ``method='cg'`` runs diagonally preconditioned CG; ``'direct'`` uses a sparse
    LU factorization; ``'auto'`` picks LU up to DIRECT_MAX_UNKNOWNS unknowns
    (where CG on badly conditioned 1D systems is slow) and CG above.
    """
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=float)
    if check_symmetry:
        _check_symmetric(A)
    if b.shape[0] == 0:
        return b.copy()
    method = _pick(method, b.shape[0])
    if method == "cg":
        x, _ = pcg(A, b, rtol=tol, x0=x0, atol=atol)
        return x
    if method == "direct":
        return spla.splu(A.tocsc()).solve(b)
    raise SolverError(f"unknown linear solver {method!r}")


class PoissonSolver:
    """Cached zero-Dirichlet Laplacian solver for one mesh (used by H^-1 norms)."""

    _cache = {}

    def __init__(self, mesh):
        self.mesh = mesh
        self.interior = mesh.interior
        K = mesh.laplacian[self.interior][:, self.interior]
        self.lu = spla.splu(K.tocsc()) if len(self.interior) else None

    @classmethod
    def for_mesh(cls, mesh):
        key = id(mesh)
        hit = cls._cache.get(key)
        if hit is None or hit.mesh is not mesh:
            if len(cls._cache) > 16:
                cls._cache.clear()
            hit = cls._cache[key] = cls(mesh)
        return hit

    def solve(self, load, tol=1e-12):
        phi = np.zeros(self.mesh.n_nodes)
        if self.lu is not None:
            phi[self.interior] = self.lu.solve(np.asarray(load, dtype=float)[self.interior])
        return phi


# ---------------------------------------------------------------------------
# integrands bound to meshes
# ---------------------------------------------------------------------------

class MeshIntegrand:
    """Per-element Lagrangian: coefficients frozen at element barycenters."""

    def __init__(self, kind, coefficients):
        self.kind = kind
        self.coefficients = np.asarray(coefficients, dtype=float)

    @property
    def is_quadratic(self):
        return self.kind == "quadratic"

    def terms(self, grads):
        return lagrangian_terms(self.kind, self.coefficients, grads)


def bind(realization, mesh):
    """Freeze a realization on a mesh (one coefficient per element)."""
    return MeshIntegrand(realization.nonlinearity.kind, realization.coefficient(mesh.barycenters))


def _integrand(model, mesh):
    return model if hasattr(model, "terms") else bind(model, mesh)


# ---------------------------------------------------------------------------
# nonlinear energy minimization
# ---------------------------------------------------------------------------

def energy_and_gradient(integrand, mesh, u):
    grads = (mesh.gradient_operator @ u).reshape(mesh.n_elements, mesh.dimension)
    L, DL, D2L = integrand.terms(grads)
    vol = mesh.volumes
    energy = float(np.sum(vol * L))
    g = mesh.gradient_operator.T @ (vol[:, None] * DL).reshape(-1)
    return energy, g, grads, D2L


def residual_target(mesh, tol, scale=0.0):
    return tol * (1.0 + scale) * math.sqrt(mesh.n_elements)


def minimize_energy(model, mesh, boundary_data, tol=DEFAULT_TOL, fixed=None, initial=None,
                    slope_scale=None, linear_method="auto", max_iter=MAX_NEWTON):
    """Minimize sum_T |T| L(grad u_T, x_T) with u fixed on ``fixed`` nodes.

    ``boundary_data`` is a nodal array (or ScalarField); only its values on fixed
    nodes are used. Converged when the free-node energy gradient has Euclidean
    norm <= tol * (1 + slope_scale) * sqrt(#elements). Returns (u, SolveReport).
    """
    integrand = _integrand(model, mesh)
    g_vals = np.asarray(getattr(boundary_data, "values", boundary_data), dtype=float)
    fixed = mesh.boundary if fixed is None else np.asarray(fixed, dtype=bool)
    free = np.flatnonzero(~fixed)
    u = g_vals.copy() if initial is None else np.asarray(getattr(initial, "values", initial), dtype=float).copy()
    u[fixed] = g_vals[fixed]
    if slope_scale is None:
        grads0 = (mesh.gradient_operator @ g_vals).reshape(mesh.n_elements, mesh.dimension)
        slope_scale = float(np.max(np.linalg.norm(grads0, axis=1))) if mesh.n_elements else 0.0
    target = residual_target(mesh, tol, slope_scale)
    energy, grad, _, D2L = energy_and_gradient(integrand, mesh, u)
    rnorm = float(np.linalg.norm(grad[free]))
    lin_its = 0
    linear_method = _pick(linear_method, len(free))
    for it in range(max_iter + 1):
        if rnorm <= target:
            report = SolveReport(it, rnorm, energy, True, lin_its)
            return _wrap(mesh, u), report
        if it == max_iter:
            break
        local = mesh.volumes[:, None, None] * np.einsum(
            "eik,eij,ejl->ekl", mesh.local_gradients, D2L, mesh.local_gradients)
        H = mesh.assemble(local)[free][:, free]
        rhs = -grad[free]
        rtol = min(1e-2, max(0.1 * target / rnorm, 1e-14))
        if linear_method == "cg":
            step, k = pcg(H, rhs, rtol=rtol)
            lin_its += k
        else:
            step = spla.splu(H.tocsc()).solve(rhs)
            lin_its += 1
        slope = float(-rhs @ step)
        if slope >= 0:
            raise NumericalError("Newton direction is not a descent direction",
                                 SolveReport(it, rnorm, energy, False, lin_its))
        t = 1.0
        roundoff = 64 * np.finfo(float).eps * (abs(energy) + 1.0)
        while True:
            trial = u.copy()
            trial[free] += t * step
            e_new, g_new, _, D2L_new = energy_and_gradient(integrand, mesh, trial)
            if e_new <= energy + ARMIJO * t * slope:
                break
            r_new = float(np.linalg.norm(g_new[free]))
            # near the minimum energy differences drown in rounding; accept a
            # non-increasing step that reduces the residual
            if e_new <= energy + roundoff and r_new < rnorm:
                break
            t *= 0.5
            if t < 1e-12:
                raise NumericalError("line search failed", SolveReport(it, rnorm, energy, False, lin_its))
        u, energy, grad, D2L = trial, min(e_new, energy) if e_new > energy else e_new, g_new, D2L_new
        rnorm = float(np.linalg.norm(grad[free]))
    report = SolveReport(max_iter, rnorm, energy, False, lin_its)
    raise NonConvergenceError(f"Newton did not converge in {max_iter} iterations", report)


def _wrap(mesh, u):
    from .mesh import ScalarField

    return ScalarField(mesh, u)


def solve_linear_dirichlet(mesh, coefficients, boundary_data, tol=1e-12, fixed=None, method="auto"):
    """Solve -div(A grad w) = 0 with w prescribed on ``fixed`` nodes; returns nodal values."""
    w = np.asarray(getattr(boundary_data, "values", boundary_data), dtype=float).copy()
    fixed = mesh.boundary if fixed is None else np.asarray(fixed, dtype=bool)
    free = np.flatnonzero(~fixed)
    K = mesh.stiffness(coefficients)
    Kf = K[free]
    rhs = -(Kf[:, fixed] @ w[fixed])
    w[free] = solve_spd(Kf[:, free], rhs, tol=tol, method=method, check_symmetry=True)
    return w


def solve_linearized(model, mesh, base_gradient, boundary_data, tol=1e-12, fixed=None, method="auto"):
    """Solve -div(D^2_pL(base_gradient, x) grad w) = 0 with the given boundary values."""
    integrand = _integrand(model, mesh)
    base = np.asarray(getattr(base_gradient, "values", base_gradient), dtype=float)
    _, _, D2L = integrand.terms(base)
    return _wrap(mesh, solve_linear_dirichlet(mesh, D2L, boundary_data, tol, fixed, method))
