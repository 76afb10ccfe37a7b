"""Large-scale regularity experiments: radius scans for differences and linearized
solutions, corrector differences, the superlinear linearization error and a
first-order excess-decay fit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .cells import cube_mesh
from .errors import ConfigurationError, InsufficientDataError
from .homog import boundary_profile
from .lagrangian import realization_for_cube
from .mesh import gradient, mean, mesh_lattice_ball, norm_L2_mean
from .solvers import DEFAULT_TOL, bind, minimize_energy, solve_linearized
from .stats import fit_Osigma, loglog_slope

INF = math.inf
K_RATIO = 10.0
SCAN_COLUMNS = ["seed", "R", "r", "value", "reference", "minimal_scale_hat", "experiment_id"]


@dataclass
class RadiusScan:
    seed: int
    R: float
    radii: list
    values: list
    reference: float
    minimal_scale_hat: float
    experiment_id: str = ""

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.radii, self.radii[1:])):
            raise ValueError("radii must be increasing")

    @property
    def ratios(self):
        ref = self.reference
        return [v / ref if ref > 0 else (0.0 if v == 0 else INF) for v in self.values]

    def csv_rows(self):
        return [{"seed": self.seed, "R": self.R, "r": r, "value": v, "reference": self.reference,
                 "minimal_scale_hat": "inf" if math.isinf(self.minimal_scale_hat) else self.minimal_scale_hat,
                 "experiment_id": self.experiment_id} for r, v in zip(self.radii, self.values)]


def scan_radii(R, h):
    """Dyadic multiples of h in [4h, R/2], with R/2 appended as the top radius."""
    radii = []
    r = 4.0 * h
    while r < R / 2.0 - 1e-12:
        radii.append(r)
        r *= 2.0
    radii.append(R / 2.0)
    return radii


def minimal_scale(radii, values, reference, K_ratio=K_RATIO):
    """Smallest radius from which value <= K_ratio * reference holds up to the top radius."""
    best = INF
    for r, v in sorted(zip(radii, values), reverse=True):
        if v <= K_ratio * reference:
            best = r
        else:
            break
    return best


@lru_cache(maxsize=16)
def ball_mesh(R, h, d):
    return mesh_lattice_ball(R, h, d)


def boundary_values(spec, nodes, side):
    """Nodal data from a profile dict, a callable of the nodes, or an array."""
    if isinstance(spec, dict):
        return boundary_profile(spec, nodes, side)
    if callable(spec):
        return np.asarray(spec(nodes), dtype=float)
    return np.asarray(spec, dtype=float)


def _ball_norms(mesh, grad, radii):
    return [norm_L2_mean(grad, mesh.ball_mask(r), mesh) for r in radii]


def _centered_l2(mesh, values):
    return norm_L2_mean(values - mean(values, mesh=mesh), mesh=mesh)


def difference_lipschitz_scan(realization, R, g, f, K_ratio=K_RATIO, h=0.5, tol=DEFAULT_TOL, seed=None,
                              experiment_id="diffreg"):
    """Scan r -> ||grad(u - v)||_{L2(B_r)} for minimizers with data g and g + f on B_R.

    The reference is (1/R) ||(u - v) - mean||_{L2(B_R)}; subtracting the mean
    makes the scan invariant under constants, matching the linearized scan.
    """
    mesh = ball_mesh(float(R), float(h), realization.dimension)
    integ = bind(realization, mesh)
    gv = boundary_values(g, mesh.nodes, 2.0 * R)
    fv = boundary_values(f, mesh.nodes, 2.0 * R)
    u, _ = minimize_energy(integ, mesh, gv, tol=tol)
    v, _ = minimize_energy(integ, mesh, gv + fv, tol=tol, initial=u.values + fv)
    diff = v.values - u.values
    radii = scan_radii(R, h)
    values = _ball_norms(mesh, gradient(diff, mesh).values, radii)
    reference = _centered_l2(mesh, diff) / R
    return RadiusScan(realization.seed if seed is None else seed, float(R), radii, values, reference,
                      minimal_scale(radii, values, reference, K_ratio), experiment_id)


def linearized_lipschitz_scan(realization, R, g, f, K_ratio=K_RATIO, h=0.5, tol=DEFAULT_TOL, seed=None,
                              experiment_id="linreg"):
    """Scan r -> ||grad w||_{L2(B_r)} for the linearization w around the minimizer with data g."""
    mesh = ball_mesh(float(R), float(h), realization.dimension)
    integ = bind(realization, mesh)
    gv = boundary_values(g, mesh.nodes, 2.0 * R)
    fv = boundary_values(f, mesh.nodes, 2.0 * R)
    u, _ = minimize_energy(integ, mesh, gv, tol=tol)
    w = solve_linearized(integ, mesh, gradient(u).values, fv).values
    radii = scan_radii(R, h)
    values = _ball_norms(mesh, gradient(w, mesh).values, radii)
    reference = _centered_l2(mesh, w) / R
    return RadiusScan(realization.seed if seed is None else seed, float(R), radii, values, reference,
                      minimal_scale(radii, values, reference, K_ratio), experiment_id)


@dataclass
class CorrectorDifference:
    radii: list
    ratios: list
    step: float


def corrector_difference(law, nonlinearity, N, xi1, xi2, seed, h=0.5, tol=DEFAULT_TOL, realization=None):
    """Ratios ||grad v(., box_N, xi1) - grad v(., box_N, xi2)||_{L2(B_r)} / |xi1 - xi2| on interior balls."""
    xi1 = np.atleast_1d(np.asarray(xi1, dtype=float))
    xi2 = np.atleast_1d(np.asarray(xi2, dtype=float))
    step = float(np.linalg.norm(xi1 - xi2))
    if step <= 0:
        raise ConfigurationError("corrector_difference needs distinct slopes")
    side = 3**N
    mesh = cube_mesh(int(N), float(h), len(xi1))
    real = realization if realization is not None else realization_for_cube(law, nonlinearity, side, seed)
    integ = bind(real, mesh)
    v1, _ = minimize_energy(integ, mesh, mesh.nodes @ xi1, tol=tol, slope_scale=float(np.linalg.norm(xi1)))
    v2, _ = minimize_energy(integ, mesh, mesh.nodes @ xi2, tol=tol, slope_scale=float(np.linalg.norm(xi2)),
                            initial=v1.values + mesh.nodes @ (xi2 - xi1))
    g = gradient(v1.values - v2.values, mesh).values
    radii = scan_radii(side / 2.0, h)
    radii = [r for r in radii if r <= side / 4.0]
    return CorrectorDifference(radii, [x / step for x in _ball_norms(mesh, g, radii)], step)


@dataclass
class SuperlinearResult:
    s_list: list
    errors: list
    slope: float = None
    inconclusive: bool = False
    fitted: list = field(default_factory=list)


def superlinear_linearization(realization, mesh, g, f, s_list=None, tol=DEFAULT_TOL, floor_factor=100.0):
    """Errors ||grad(u[g + s f] - u[g] - s w)||_{L2} and their log-log slope in s.

    The slope is fitted over the points above the noise floor (floor_factor * tol)
    excluding s > max(s)/2, where the Taylor regime has not set in.
    """
    s_list = [2.0**-j for j in range(9)] if s_list is None else [float(s) for s in s_list]
    integ = bind(realization, mesh) if not hasattr(realization, "terms") else realization
    side = float(np.ptp(mesh.nodes, axis=0).max())
    gv = boundary_values(g, mesh.nodes, side)
    fv = boundary_values(f, mesh.nodes, side)
    # tighter nonlinear solves: the error itself is the small quantity
    inner = tol * 1e-2
    u, _ = minimize_energy(integ, mesh, gv, tol=inner)
    gu = gradient(u).values
    w = solve_linearized(integ, mesh, gu, fv, tol=1e-13).values
    errors = []
    for s in s_list:
        us, _ = minimize_energy(integ, mesh, gv + s * fv, tol=inner, initial=u.values + s * w)
        errors.append(norm_L2_mean(gradient(us.values - u.values - s * w, mesh).values, mesh=mesh))
    top = max(s_list)
    pts = [(s, e) for s, e in zip(s_list, errors) if e > floor_factor * tol and s <= top / 2.0]
    if len(pts) < 3:
        return SuperlinearResult(s_list, errors, None, True, [])
    slope = loglog_slope([p[0] for p in pts], [p[1] for p in pts])
    return SuperlinearResult(s_list, errors, slope, False, [p[0] for p in pts])


@dataclass
class ExcessFit:
    radii: list
    excess: list
    exponent: float
    xi: list
    degenerate: bool = False


def _surrogate_family(integ, mesh, xi0, tol):
    """Finite-volume surrogate v(., box, xi0) and its slope derivatives (linearized solves)."""
    u, _ = minimize_energy(integ, mesh, mesh.nodes @ xi0, tol=tol, slope_scale=float(np.linalg.norm(xi0)))
    gu = gradient(u).values
    tangents = [solve_linearized(integ, mesh, gu, mesh.nodes[:, i]).values for i in range(mesh.dimension)]
    return u.values, tangents


def _masked_mass(mesh, mask):
    """Exact P1 mass matrix of the elements in ``mask``."""
    d = mesh.dimension
    elems = mesh.elements[mask]
    local = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
    vals = mesh.volumes[mask, None, None] * local
    rows = np.repeat(elems, d + 1, axis=1).ravel()
    cols = np.tile(elems, (1, d + 1)).ravel()
    return sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes))


def _ls_fit(target, base, tangents, mesh, mask):
    """(eta, c) minimizing ||target - base - sum eta_i t_i - c||_{L2} over the elements in ``mask``."""
    M = _masked_mass(mesh, mask)
    B = np.stack(list(tangents) + [np.ones(mesh.n_nodes)], axis=1)
    G = B.T @ (M @ B)
    return np.linalg.lstsq(G, B.T @ (M @ (target - base)), rcond=None)[0]


def excess_decay_fit(realization, R, g, xi_match, N, h=0.5, tol=DEFAULT_TOL, xi_radius=0.25, xi_points=3,
                     radii=None):
    """Exponent of r -> min over surrogates ||u - phi||_{L2(B_r)} over r in [R/16, R/2].

    ``u`` minimizes on the lattice ball B_R carved out of the cube box_N with data
    g; surrogates are v(., box_N, xi) on a small slope grid around ``xi_match``,
    extended to first order in xi by the linearized solves and shifted by a
    constant (a linear least-squares fit on each ball).
    """
    d = realization.dimension
    if R > 3**N / 4.0:
        raise ConfigurationError("excess_decay_fit needs R <= 3^N / 4")
    cube = cube_mesh(int(N), float(h), d)
    integ_cube = bind(realization, cube)
    ball_mask = cube.ball_mask(R)
    ball = cube.submesh(ball_mask, extent=float(R))
    parent = ball.parent_nodes
    gv = boundary_values(g, ball.nodes, 2.0 * R)
    u, _ = minimize_energy(bind(realization, ball), ball, gv, tol=tol)
    radii = [R / 16.0, R / 8.0, R / 4.0, R / 2.0] if radii is None else list(radii)
    xi_match = np.atleast_1d(np.asarray(xi_match, dtype=float))
    offsets = np.linspace(-xi_radius, xi_radius, xi_points) if xi_points > 1 else np.zeros(1)
    grid = np.stack(np.meshgrid(*[offsets] * d, indexing="ij"), axis=-1).reshape(-1, d) + xi_match
    best = [INF] * len(radii)
    best_xi = [None] * len(radii)
    for xi0 in grid:
        base, tangents = _surrogate_family(integ_cube, cube, xi0, tol)
        base_b = base[parent]
        tan_b = [t[parent] for t in tangents]
        for j, r in enumerate(radii):
            mask = ball.ball_mask(r)
            coef = _ls_fit(u.values, base_b, tan_b, ball, mask)
            phi = base_b + sum(c * t for c, t in zip(coef[:-1], tan_b)) + coef[-1]
            e = norm_L2_mean(u.values - phi, mask, ball)
            if e < best[j]:
                best[j] = e
                best_xi[j] = (xi0 + coef[:-1]).tolist()
    if min(best) <= 10.0 * tol:
        return ExcessFit(radii, best, None, best_xi[-1], True)
    return ExcessFit(radii, best, loglog_slope(radii, best), best_xi[-1])


def minimal_scale_tail(scans, sigma=1.0):
    """O_sigma tail summary of the finite minimal scales; infinite ones are reported separately."""
    vals = [s.minimal_scale_hat for s in scans]
    finite = [v for v in vals if math.isfinite(v)]
    if len(finite) < 8:
        raise InsufficientDataError("too few finite minimal scales for a tail fit")
    fit = fit_Osigma(finite, sigma)
    return {"finite_fraction": len(finite) / len(vals), "fit": fit.to_dict(),
            "fraction_above_quarter": float(np.mean([v > scans[0].R / 4.0 for v in vals]))}
