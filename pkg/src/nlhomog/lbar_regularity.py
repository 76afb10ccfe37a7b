"""Regularity diagnostics for the homogenized Lagrangian: Hessian bands, Hölder
quotients of the Hessian over the slope grid, and cross-validation of the
frozen-slope matrix against finite differences of the mean slope derivative.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cells import ahom_frozen, ensemble_seeds, nu
from .errors import ConfigurationError
from .lagrangian import realization_for_cube
from .solvers import DEFAULT_TOL
from .stats import mean_and_stderr


def _grid_points(table):
    grid = np.stack(np.meshgrid(*table.axes, indexing="ij"), axis=-1)
    d = table.dimension
    return grid.reshape(-1, d), table.hessians.reshape(-1, d, d)


def hessian_bounds_scan(table):
    """Extremal eigenvalues of the tabulated Hessians, with the largest Hessian stderr."""
    _, H = _grid_points(table)
    eig = np.linalg.eigvalsh(0.5 * (H + np.swapaxes(H, -1, -2)))
    se = 0.0 if table.hessian_stderr is None else float(np.max(table.hessian_stderr))
    asym = float(np.max(np.abs(H - np.swapaxes(H, -1, -2))))
    return {"min_eigenvalue": float(eig.min()), "max_eigenvalue": float(eig.max()), "max_stderr": se,
            "max_asymmetry": asym}


@dataclass
class HolderReport:
    gamma: float
    max_quotient: float
    arg_pair: list
    grid_spacing: float
    noise_floor: float

    def to_dict(self):
        return {"gamma": self.gamma, "max_quotient": self.max_quotient, "arg_pair": self.arg_pair,
                "grid_spacing": self.grid_spacing, "noise_floor": self.noise_floor}


def holder_quotient_scan(table, gamma=1.0, M=2.0, min_separation=None):
    """max |D2L(xi1) - D2L(xi2)| / |xi1 - xi2|^gamma over grid pairs in the closed ball B_M.

    Only pairs at distance >= min_separation (default twice the grid spacing)
    enter, so Monte Carlo noise is not divided by tiny distances. Matrix
    differences use the spectral norm.
    """
    if not 0.0 < gamma <= 1.0:
        raise ConfigurationError("gamma must lie in (0, 1]")
    spacing = float(np.max(table.spacing))
    floor = 2.0 * spacing if min_separation is None else float(min_separation)
    pts, H = _grid_points(table)
    inside = np.linalg.norm(pts, axis=1) <= M + 1e-12
    pts, H = pts[inside], H[inside]
    best, pair = 0.0, None
    for i in range(len(pts)):
        dist = np.linalg.norm(pts[i + 1:] - pts[i], axis=1)
        ok = dist >= floor - 1e-12
        if not ok.any():
            continue
        diff = np.linalg.norm(H[i + 1:][ok] - H[i], ord=2, axis=(1, 2))
        q = diff / dist[ok] ** gamma
        j = int(np.argmax(q))
        if q[j] > best:
            best = float(q[j])
            pair = [pts[i].tolist(), pts[i + 1:][ok][j].tolist()]
    return HolderReport(float(gamma), best, pair, spacing, floor)


@dataclass
class CrossValidation:
    n: int
    k: int
    discrepancy: float
    uncertainty: float
    ahom: np.ndarray
    d2_fd: np.ndarray

    def to_dict(self):
        return {"n": self.n, "k": self.k, "discrepancy": self.discrepancy, "uncertainty": self.uncertainty,
                "ahom": self.ahom.tolist(), "d2_fd": self.d2_fd.tolist()}


def cross_validate_d2(law, nonlinearity, xi, n, k, ensemble_size, master_seed, h=0.5, tol=DEFAULT_TOL, step=0.125):
    """Compare the frozen-slope homogenized matrix with central differences of the mean D nu.

    Both estimators run on the same seeds. The uncertainty is twice the combined
    standard error (Frobenius norm of the elementwise root-sum-square).
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    d = len(xi)
    if d != law.dimension:
        raise ConfigurationError("slope dimension does not match the law")
    A, F = [], []
    for seed in ensemble_seeds(master_seed, ensemble_size):
        real = realization_for_cube(law, nonlinearity, 3**n, seed)
        A.append(ahom_frozen(real, n, xi, k, h, tol))
        fd = np.empty((d, d))
        for j in range(d):
            e = np.zeros(d)
            e[j] = step
            plus = nu(real, n, xi + e, h, tol, want_d2=False).d_nu
            minus = nu(real, n, xi - e, h, tol, want_d2=False).d_nu
            fd[:, j] = (plus - minus) / (2.0 * step)
        F.append(0.5 * (fd + fd.T))
    a_mean, a_se = mean_and_stderr(np.asarray(A))
    f_mean, f_se = mean_and_stderr(np.asarray(F))
    disc = float(np.linalg.norm(a_mean - f_mean, ord=2))
    unc = float(2.0 * np.linalg.norm(np.sqrt(a_se**2 + f_se**2)))
    return CrossValidation(int(n), int(k), disc, unc, a_mean, f_mean)


def hessian_convergence_trend(law, nonlinearity, xis, n_list, ensemble_size, master_seed, h=0.5, tol=DEFAULT_TOL):
    """sup over slopes of |mean D2nu(box_n) - mean D2nu(box_nmax)| for each n below the largest.

    The largest scale stands in for the extrapolated Hessian.
    """
    seeds = ensemble_seeds(master_seed, ensemble_size)
    means = {}
    for n in n_list:
        per = []
        for seed in seeds:
            real = realization_for_cube(law, nonlinearity, 3**n, seed)
            per.append([nu(real, n, xi, h, tol).d2_nu for xi in xis])
        means[n] = np.mean(np.asarray(per), axis=0)
    top = means[max(n_list)]
    return {n: float(np.max(np.linalg.norm(means[n] - top, ord=2, axis=(1, 2)))) for n in sorted(n_list)[:-1]}
