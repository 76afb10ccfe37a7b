"""Cell problems: the subadditive energy nu(cube, xi), its xi-derivatives,
Monte Carlo estimates of the homogenized Lagrangian, and frozen-slope
homogenized matrices.
"""
from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from .errors import ConfigurationError, ConsistencyError, CoverageError, EnsembleError, SolverError
from .lagrangian import lagrangian_terms, realization_for_cube
from .mesh import MeshDomain, ScalarField, gradient, mesh_cube
from .solvers import DEFAULT_TOL, SolveReport, bind, minimize_energy, solve_linear_dirichlet
from .stats import FAILURE_FRACTION, derive_seed, mean_and_stderr


@lru_cache(maxsize=32)
def cube_mesh(n, h, d) -> MeshDomain:
    return mesh_cube(n, h, d)


def face_nodes(mesh, side, center_offset=0.0):
    """Nodes lying on a face of some cube of the given side centered on side*Z^d (+ offset)."""
    t = (mesh.nodes - center_offset - side / 2.0) / side
    on_face = np.abs(t - np.round(t)) < 1e-9 / max(side, 1.0)
    return np.any(on_face, axis=1) | mesh.boundary


def skeleton(mesh, k):
    """Boundary nodes of all triadic subcubes z + box_k, z in 3^k Z^d."""
    return face_nodes(mesh, 3.0**k)


@dataclass
class CellProblemResult:
    nu_value: float
    xi: np.ndarray
    minimizer: ScalarField
    d_nu: np.ndarray
    d2_nu: Optional[np.ndarray]
    report: SolveReport
    correctors: list = field(default_factory=list, repr=False)

    def csv_row(self, seed=None, n=None):
        row = {"seed": seed, "n": n, "nu": self.nu_value, "iterations": self.report.iterations}
        for i, x in enumerate(self.xi):
            row[f"xi{i + 1}"] = float(x)
            row[f"d_nu{i + 1}"] = float(self.d_nu[i])
        if self.d2_nu is not None:
            d = len(self.xi)
            for i in range(d):
                for j in range(d):
                    row[f"d2_nu{i + 1}{j + 1}"] = float(self.d2_nu[i, j])
        return row


def cell_columns(d):
    cols = ["seed", "n"] + [f"xi{i + 1}" for i in range(d)] + ["nu"] + [f"d_nu{i + 1}" for i in range(d)]
    cols += [f"d2_nu{i + 1}{j + 1}" for i in range(d) for j in range(d)]
    return cols + ["iterations", "wall_ms"]


def energy_form(mesh, coefficients, grads_a, grads_b, mask=None):
    """Mean over the (sub)domain of grad_a . A grad_b."""
    vol = mesh.volumes if mask is None else mesh.volumes * mask
    return float(np.sum(vol * np.einsum("ei,eij,ej->e", grads_a, coefficients, grads_b)) / np.sum(vol))


def second_derivative(mesh, D2L, tol, fixed=None, method="auto"):
    """d x d matrix mean(grad w_i . D2L grad w_j), w_i the D2L-harmonic extension of x_i.

    Equals D^2_xi of the mean minimal energy when D2L is the Hessian at the minimizer.
    Returns (matrix, list of nodal w_i).
    """
    d = mesh.dimension
    ws, gs = [], []
    for i in range(d):
        w = solve_linear_dirichlet(mesh, D2L, mesh.nodes[:, i], tol=tol, fixed=fixed, method=method)
        ws.append(w)
        gs.append(gradient(w, mesh).values)
    M = np.empty((d, d))
    for i in range(d):
        for j in range(i, d):
            M[i, j] = M[j, i] = energy_form(mesh, D2L, gs[i], gs[j])
    return M, ws


def nu_on_mesh(model, mesh, xi, tol=DEFAULT_TOL, fixed=None, initial=None, want_d2=True, linear_tol=1e-12):
    """nu for an already bound integrand (or realization) on an arbitrary mesh."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    integrand = bind(model, mesh) if not hasattr(model, "terms") else model
    g = mesh.nodes @ xi
    u, report = minimize_energy(integrand, mesh, g, tol=tol, fixed=fixed, initial=initial,
                                slope_scale=float(np.linalg.norm(xi)))
    grads = gradient(u).values
    L, DL, D2L = integrand.terms(grads)
    vol = mesh.volumes
    total = mesh.total_volume
    nu_value = float(np.sum(vol * L) / total)
    d_nu = (vol[:, None] * DL).sum(axis=0) / total
    d2 = None
    ws = []
    if want_d2:
        d2, ws = second_derivative(mesh, D2L, linear_tol, fixed=fixed)
    return CellProblemResult(nu_value, xi, u, d_nu, d2, report, ws)


def nu(realization, n, xi, h=0.5, tol=DEFAULT_TOL, want_d2=True, initial=None):
    """nu(box_n, xi) for one realization: mean minimal energy with affine data xi.x."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    mesh = cube_mesh(int(n), float(h), len(xi))
    return nu_on_mesh(realization, mesh, xi, tol, initial=initial, want_d2=want_d2)


def subadditivity_check(realization, n, xi, h=0.5, tol=DEFAULT_TOL):
    """Return (nu(box_{n+1}), mean of nu over the 3^d subcubes z + box_n, slack = rhs - lhs).

    The subcube problems are solved together on the box_{n+1} mesh with the
    subcube faces held at xi.x, which decouples them exactly.
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    mesh = cube_mesh(int(n) + 1, float(h), len(xi))
    integrand = bind(realization, mesh)
    lhs = nu_on_mesh(integrand, mesh, xi, tol, want_d2=False).nu_value
    rhs = nu_on_mesh(integrand, mesh, xi, tol, fixed=skeleton(mesh, n), want_d2=False).nu_value
    return lhs, rhs, rhs - lhs


# ---------------------------------------------------------------------------
# Monte Carlo over realizations
# ---------------------------------------------------------------------------

def cell_sweep(law, nonlinearity, n, xis, seeds, h=0.5, tol=DEFAULT_TOL, want_d2=True, timing=False):
    """Solve nu at every slope in ``xis`` for every seed (common random numbers across slopes).

    Returns a dict of arrays: nu (S, P), d_nu (S, P, d), d2_nu (S, P, d, d),
    iterations (S, P), failed (S,) bool, rows (CSV dicts).
    """
    xis = np.atleast_2d(np.asarray(xis, dtype=float))
    d = law.dimension
    if xis.shape[1] != d:
        raise ConfigurationError("slope dimension does not match the law")
    mesh = cube_mesh(int(n), float(h), d)
    S, P = len(seeds), len(xis)
    out = {"nu": np.full((S, P), np.nan), "d_nu": np.full((S, P, d), np.nan),
           "d2_nu": np.full((S, P, d, d), np.nan), "iterations": np.zeros((S, P), dtype=int),
           "failed": np.zeros(S, dtype=bool), "errors": {}, "rows": []}
    for s, seed in enumerate(seeds):
        real = realization_for_cube(law, nonlinearity, 3**n, seed)
        integrand = bind(real, mesh)
        prev = None
        try:
            for p, xi in enumerate(xis):
                t0 = time.perf_counter()
                # warm start from the previous corrector
                init = None if prev is None else prev.minimizer.values - mesh.nodes @ prev.xi + mesh.nodes @ xi
                res = nu_on_mesh(integrand, mesh, xi, tol, initial=init, want_d2=want_d2)
                prev = res
                out["nu"][s, p] = res.nu_value
                out["d_nu"][s, p] = res.d_nu
                if want_d2:
                    out["d2_nu"][s, p] = res.d2_nu
                out["iterations"][s, p] = res.report.iterations
                row = res.csv_row(seed, n)
                row["wall_ms"] = round(1000 * (time.perf_counter() - t0), 3) if timing else None
                out["rows"].append(row)
        except SolverError as exc:
            out["failed"][s] = True
            out["errors"][int(seed)] = str(exc)
    if out["failed"].sum() > FAILURE_FRACTION * S:
        raise EnsembleError(f"{int(out['failed'].sum())} of {S} cell-problem realizations failed", out["errors"])
    return out


@dataclass
class LbarPointEstimate:
    xi: np.ndarray
    n_list: list
    nu_mean: np.ndarray
    nu_stderr: np.ndarray
    d_nu_mean: np.ndarray
    d_nu_stderr: np.ndarray
    d2_nu_mean: np.ndarray
    d2_nu_stderr: np.ndarray
    value: float
    value_uncertainty: float
    gradient: np.ndarray
    gradient_uncertainty: np.ndarray
    hessian: np.ndarray
    hessian_uncertainty: np.ndarray
    monotone: bool
    seeds: list

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}


def _extrapolate(means, errs):
    """Value at the largest scale with uncertainty |last - previous| + 2 stderr."""
    last = means[-1]
    unc = 2.0 * errs[-1]
    if len(means) > 1:
        unc = unc + np.abs(means[-1] - means[-2])
    return last, unc


def ensemble_seeds(master_seed, count):
    return [derive_seed(master_seed, i) for i in range(count)]


def estimate_Lbar_point(law, nonlinearity, xi, n_list, ensemble_size, master_seed, h=0.5, tol=DEFAULT_TOL,
                        want_d2=True):
    """Monte Carlo means of nu, D nu, D^2 nu over n_list and the extrapolated homogenized values."""
    n_list = list(n_list)
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ConfigurationError("n_list must be increasing")
    if ensemble_size < 2:
        raise ConfigurationError("ensemble_size must be >= 2")
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    seeds = ensemble_seeds(master_seed, ensemble_size)
    stats = {k: ([], []) for k in ("nu", "d_nu", "d2_nu")}
    for n in n_list:
        sweep = cell_sweep(law, nonlinearity, n, xi[None, :], seeds, h, tol, want_d2)
        ok = ~sweep["failed"]
        for k in stats:
            m, s = mean_and_stderr(sweep[k][ok, 0])
            stats[k][0].append(m)
            stats[k][1].append(s)
    nu_m, nu_s = (np.asarray(v) for v in stats["nu"])
    dn_m, dn_s = (np.asarray(v) for v in stats["d_nu"])
    d2_m, d2_s = (np.asarray(v) for v in stats["d2_nu"])
    value, vunc = _extrapolate(nu_m, nu_s)
    grad, gunc = _extrapolate(dn_m, dn_s)
    hess, hunc = _extrapolate(d2_m, d2_s)
    combined = np.sqrt(nu_s[1:] ** 2 + nu_s[:-1] ** 2)
    monotone = bool(np.all(nu_m[1:] <= nu_m[:-1] + 2.0 * combined)) if len(n_list) > 1 else True
    return LbarPointEstimate(xi, n_list, nu_m, nu_s, dn_m, dn_s, d2_m, d2_s, float(value), float(vunc),
                             grad, gunc, hess, hunc, monotone, seeds)


# ---------------------------------------------------------------------------
# tabulated homogenized Lagrangian
# ---------------------------------------------------------------------------

def _hermite_basis(t):
    """Cubic Hermite basis on [0, 1]: rows (value, d/dt, d2/dt2), kinds h00, h01, h10, h11."""
    t2, t3 = t * t, t * t * t
    val = np.stack([2 * t3 - 3 * t2 + 1, -2 * t3 + 3 * t2, t3 - 2 * t2 + t, t3 - t2])
    d1 = np.stack([6 * t2 - 6 * t, -6 * t2 + 6 * t, 3 * t2 - 4 * t + 1, 3 * t2 - 2 * t])
    d2 = np.stack([12 * t - 6, -12 * t + 6, 6 * t - 4, 6 * t - 2])
    return val, d1, d2


@dataclass
class HomogenizedLagrangian:
    """Tabulated homogenized Lagrangian with C^1 tensor-product cubic Hermite interpolation.

    Tables are indexed by the tensor grid ``axes``; ``values`` has the grid shape,
    ``gradients`` and ``hessians`` append (d,) and (d, d). Node data for mixed
    derivatives of order > 2 is taken as zero, which keeps the interpolant C^1.
    """

    axes: list
    values: np.ndarray
    gradients: np.ndarray
    hessians: np.ndarray
    value_stderr: np.ndarray = None
    gradient_stderr: np.ndarray = None
    hessian_stderr: np.ndarray = None
    uncertainty: np.ndarray = None
    lambda_max: float = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.axes = [np.asarray(a, dtype=float) for a in self.axes]
        for a in self.axes:
            if len(a) < 2 or not np.allclose(np.diff(a), a[1] - a[0]):
                raise ConfigurationError("slope grid axes must be uniform with at least two points")

    @property
    def dimension(self):
        return len(self.axes)

    @property
    def spacing(self):
        return np.array([a[1] - a[0] for a in self.axes])

    @property
    def lower(self):
        return np.array([a[0] for a in self.axes])

    @property
    def upper(self):
        return np.array([a[-1] for a in self.axes])

    def grid_points(self):
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1).reshape(-1, self.dimension)

    def _node_derivative(self, subset, idx):
        if len(subset) == 0:
            return self.values[idx]
        if len(subset) == 1:
            return self.gradients[idx + (subset[0],)]
        if len(subset) == 2:
            return self.hessians[idx + (subset[0], subset[1])]
        return np.zeros_like(self.values[idx])

    def evaluate(self, xi, order=2):
        """Interpolated (value, gradient, hessian) at slopes ``xi`` (..., d)."""
        xi = np.asarray(xi, dtype=float)
        d = self.dimension
        shape = xi.shape[:-1]
        pts = xi.reshape(-1, d)
        tolr = 1e-9 * self.spacing
        if np.any(pts < self.lower - tolr) or np.any(pts > self.upper + tolr):
            lo = pts.min(axis=0)
            hi = pts.max(axis=0)
            raise CoverageError(f"slopes span [{lo}, {hi}] but the table covers [{self.lower}, {self.upper}]",
                                lo, hi)
        sp_ = self.spacing
        rel = (pts - self.lower) / sp_
        cell = np.clip(np.floor(rel).astype(int), 0, np.array([len(a) - 2 for a in self.axes]))
        t = rel - cell
        bases = [_hermite_basis(t[:, i]) for i in range(d)]
        m = len(pts)
        val = np.zeros(m)
        grad = np.zeros((m, d))
        hess = np.zeros((m, d, d))
        for corner in itertools.product((0, 1), repeat=d):
            idx = tuple(cell[:, i] + corner[i] for i in range(d))
            for r in range(d + 1):
                if r > 2:
                    break
                for subset in itertools.combinations(range(d), r):
                    data = self._node_derivative(subset, idx)
                    # per-axis basis kind: h0c for value axes, scaled h1c for derivative axes
                    f0, f1, f2 = [], [], []
                    for i in range(d):
                        kind = (2 + corner[i]) if i in subset else corner[i]
                        scale = sp_[i] if i in subset else 1.0
                        f0.append(bases[i][0][kind] * scale)
                        f1.append(bases[i][1][kind] * scale / sp_[i])
                        f2.append(bases[i][2][kind] * scale / sp_[i] ** 2)
                    prod_all = np.prod(f0, axis=0)
                    val += data * prod_all
                    if order >= 1:
                        for i in range(d):
                            term = f1[i].copy()
                            for j in range(d):
                                if j != i:
                                    term = term * f0[j]
                            grad[:, i] += data * term
                    if order >= 2:
                        for i in range(d):
                            for j in range(d):
                                if i == j:
                                    term = f2[i].copy()
                                    others = [k for k in range(d) if k != i]
                                else:
                                    term = f1[i] * f1[j]
                                    others = [k for k in range(d) if k not in (i, j)]
                                for k in others:
                                    term = term * f0[k]
                                hess[:, i, j] += data * term
        return val.reshape(shape), grad.reshape(shape + (d,)), hess.reshape(shape + (d, d))

    def terms(self, grads):
        """Integrand protocol used by the solvers: (L, D L, D^2 L) per element."""
        return self.evaluate(grads)

    def check_invariants(self, probes_per_cell=4, hessian_margin=0.05):
        """Raise ConsistencyError if the interpolant leaves the ellipticity band or is not midpoint convex."""
        lam = self.lambda_max
        axes = [np.linspace(a[0], a[-1], (len(a) - 1) * probes_per_cell + 1) for a in self.axes]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.dimension)
        _, _, H = self.evaluate(pts)
        eig = np.linalg.eigvalsh(0.5 * (H + np.swapaxes(H, -1, -2)))
        lo_bad = eig[:, 0] < 1.0 - hessian_margin
        hi_bad = eig[:, -1] > (1.0 + hessian_margin) * lam if lam is not None else np.zeros(len(pts), bool)
        bad = np.flatnonzero(lo_bad | hi_bad)
        if len(bad):
            raise ConsistencyError(f"interpolated Hessian out of range at xi={pts[bad[0]].tolist()} "
                                   f"(eigenvalues {eig[bad[0]].tolist()})")
        nodes = self.grid_points()
        vals = self.values.reshape(-1)
        for offset in itertools.product((-1, 0, 1), repeat=self.dimension):
            step = np.asarray(offset) * self.spacing
            if not np.any(step):
                continue
            ends = nodes + step
            ok = np.all((ends >= self.lower - 1e-12) & (ends <= self.upper + 1e-12), axis=1)
            mids, _, _ = self.evaluate(nodes[ok] + 0.5 * step)
            ends_v, _, _ = self.evaluate(ends[ok])
            slack = 0.5 * (vals[ok] + ends_v) - mids
            if np.any(slack < -1e-10 * (1 + np.abs(mids))):
                j = int(np.argmin(slack))
                raise ConsistencyError(f"interpolant not midpoint convex on segment from {nodes[ok][j].tolist()}")
        return True

    def to_dict(self):
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {"axes": [a.tolist() for a in self.axes], "values": arr(self.values),
                "gradients": arr(self.gradients), "hessians": arr(self.hessians),
                "value_stderr": arr(self.value_stderr), "gradient_stderr": arr(self.gradient_stderr),
                "hessian_stderr": arr(self.hessian_stderr), "uncertainty": arr(self.uncertainty),
                "lambda_max": self.lambda_max, "meta": self.meta}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        def arr(a):
            return None if a is None else np.asarray(a, dtype=float)

        return cls(d["axes"], arr(d["values"]), arr(d["gradients"]), arr(d["hessians"]), arr(d.get("value_stderr")),
                   arr(d.get("gradient_stderr")), arr(d.get("hessian_stderr")), arr(d.get("uncertainty")),
                   d.get("lambda_max"), d.get("meta", {}))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_function(cls, axes, func, lambda_max=None):
        """Table from a closed-form (L, DL, D2L) function of slopes (used for constant laws and tests)."""
        axes = [np.asarray(a, dtype=float) for a in axes]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        L, DL, D2L = func(pts)
        return cls(axes, np.asarray(L), np.asarray(DL), np.asarray(D2L), lambda_max=lambda_max)


def tabulate_Lbar(law, nonlinearity, axes, n, ensemble_size, master_seed, h=0.5, tol=DEFAULT_TOL,
                  n_list=None, check=True):
    """Fill a HomogenizedLagrangian from cell problems at every slope of the tensor grid ``axes``.

    All slopes share one seed set, so the tabulated means are themselves exact
    finite-volume energies averaged over realizations.
    """
    axes = [np.asarray(a, dtype=float) for a in axes]
    if len(axes) != law.dimension:
        raise ConfigurationError("one slope axis per dimension is required")
    for a in axes:
        if len(a) > 1 and np.max(np.diff(a)) > 0.25 + 1e-12:
            raise ConfigurationError("slope grid spacing must be <= 0.25")
    n_list = [n] if n_list is None else list(n_list)
    seeds = ensemble_seeds(master_seed, ensemble_size)
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    shape = grid.shape[:-1]
    pts = grid.reshape(-1, law.dimension)
    levels = []
    for m in n_list:
        sw = cell_sweep(law, nonlinearity, m, pts, seeds, h, tol, True)
        ok = ~sw["failed"]
        levels.append({k: mean_and_stderr(sw[k][ok]) for k in ("nu", "d_nu", "d2_nu")})
    ext = {}
    for k in ("nu", "d_nu", "d2_nu"):
        means = np.asarray([lv[k][0] for lv in levels])
        errs = np.asarray([lv[k][1] for lv in levels])
        ext[k] = (means[-1], errs[-1], _extrapolate(means, errs)[1])
    d = law.dimension
    table = HomogenizedLagrangian(
        axes, ext["nu"][0].reshape(shape), ext["d_nu"][0].reshape(shape + (d,)),
        ext["d2_nu"][0].reshape(shape + (d, d)), ext["nu"][1].reshape(shape), ext["d_nu"][1].reshape(shape + (d,)),
        ext["d2_nu"][1].reshape(shape + (d, d)), ext["nu"][2].reshape(shape), nonlinearity.lambda_max,
        {"n_list": n_list, "ensemble_size": ensemble_size, "master_seed": master_seed, "h": h,
         "law": law.to_dict(), "nonlinearity": nonlinearity.to_dict(),
         "hessian_uncertainty": ext["d2_nu"][2].reshape(shape + (d, d)).tolist()})
    if check:
        table.check_invariants()
    return table


def constant_table(nonlinearity, a, axes):
    """Exact table for a constant coefficient a (L is its own homogenization)."""
    kind = nonlinearity.kind
    return HomogenizedLagrangian.from_function(
        axes, lambda p: lagrangian_terms(kind, np.full(p.shape[:-1], float(a)), p), nonlinearity.lambda_max)


# ---------------------------------------------------------------------------
# frozen-slope coefficient fields
# ---------------------------------------------------------------------------

def frozen_coefficients(model, mesh, xi, k, tol=DEFAULT_TOL):
    """a_xi: D^2_pL at the minimizers of the local problems on the subcubes z + box_k."""
    integrand = bind(model, mesh) if not hasattr(model, "terms") else model
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    u, _ = minimize_energy(integrand, mesh, mesh.nodes @ xi, tol=tol, fixed=skeleton(mesh, k),
                           slope_scale=float(np.linalg.norm(xi)))
    _, _, D2L = integrand.terms(gradient(u).values)
    return D2L


def ahom_frozen(realization, n, xi, k=1, h=0.5, tol=DEFAULT_TOL, linear_tol=1e-12):
    """Homogenized matrix of the frozen field a_xi, estimated on box_n by d linear Dirichlet solves."""
    if not 0 <= k < n:
        raise ConfigurationError("frozen scale k must satisfy 0 <= k < n")
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    mesh = cube_mesh(int(n), float(h), len(xi))
    A = frozen_coefficients(realization, mesh, xi, k, tol)
    M, _ = second_derivative(mesh, A, linear_tol)
    return M
