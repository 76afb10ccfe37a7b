"""Dirichlet-problem homogenization harnesses.

* commutativity trials: heterogeneous vs homogenized nonlinear solutions and their
  linearizations, compared in the normalized H^-1 norm;
* empirical rate fits across scales;
* the two-scale expansion diagnostic built from frozen-slope correctors, a
  partition of unity, a boundary cutoff and a mesoscopic mollifier.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .cells import cube_mesh, frozen_coefficients
from .errors import ConfigurationError
from .lagrangian import bump_cdf, bump_density, lagrangian_terms, realization_for_cube
from .mesh import gradient, mesh_cube, norm_Hminus1, norm_L2_mean, dual_norm
from .solvers import DEFAULT_TOL, MeshIntegrand, bind, minimize_energy, solve_linear_dirichlet, solve_linearized
from .stats import fit_rate

PROFILE_KINDS = ("affine", "bump", "sinusoidal", "quadratic")


class ConstantLagrangian:
    """Closed-form homogenized Lagrangian of a constant-coefficient law (L itself)."""

    def __init__(self, kind, a, lambda_max=None):
        self.kind = kind
        self.a = float(a)
        self.lambda_max = lambda_max

    def terms(self, grads):
        grads = np.asarray(grads, dtype=float)
        return lagrangian_terms(self.kind, np.full(grads.shape[:-1], self.a), grads)

    evaluate = terms


def homogenized_model(law, nonlinearity, table=None):
    """Exact model for degenerate (constant) laws, else the supplied table."""
    if law.range_low == law.range_high:
        return ConstantLagrangian(nonlinearity.kind, law.range_low, nonlinearity.lambda_max)
    if table is None:
        raise ConfigurationError("a tabulated homogenized Lagrangian is required for random laws")
    return table


# ---------------------------------------------------------------------------
# boundary profiles
# ---------------------------------------------------------------------------

def boundary_profile(profile, nodes, side):
    """Nodal values of a macroscopic boundary profile on a cube of the given side.

    ``profile`` is a dict {kind, slope, amplitude}; gradients stay O(1) as the
    side grows (the profile is side * F(x / side)).
    """
    kind = profile.get("kind", "affine")
    if kind not in PROFILE_KINDS:
        raise ConfigurationError(f"unknown boundary profile {kind!r}")
    d = nodes.shape[1]
    slope = np.zeros(d) if profile.get("slope") is None else np.asarray(profile["slope"], dtype=float)
    amp = float(profile.get("amplitude", 0.0))
    y = nodes / side
    base = nodes @ slope
    if kind == "affine":
        return base
    if kind == "bump":
        # quadratic bump vanishing on the boundary; the gradient of 4^d prod(1/4 - y^2)
        # peaks at 4 on the face midpoints, so the gradient amplitude is <= amp
        q = np.prod(0.25 - y**2, axis=1) * 4.0**d
        return base + amp * side * q / 4.0
    if kind == "quadratic":
        # harmonic quadratic y1^2 - y2^2 in d >= 2, y1^2 in d = 1
        q = y[:, 0] ** 2 - (y[:, 1] ** 2 if d > 1 else 0.0)
        return base + amp * side * q
    phase = 2.0 * math.pi * y
    s = np.sin(phase[:, 0])
    for i in range(1, d):
        s = s * np.cos(phase[:, i])
    return base + amp * side * s / (2.0 * math.pi)


def profile_id(profile):
    slope = ",".join(f"{float(v):g}" for v in (profile.get("slope") or []))
    return f"{profile.get('kind', 'affine')}[{slope}]a{float(profile.get('amplitude', 0.0)):g}"


# ---------------------------------------------------------------------------
# commutativity of homogenization and linearization
# ---------------------------------------------------------------------------

@dataclass
class CommutativitySample:
    n: int
    seed: int
    boundary_profile: str
    err_grad_Hm1: float
    err_flux_Hm1: float
    err_nonlinear_Hm1: float
    norm_f: float
    wall_ms: float = None
    reports: dict = field(default_factory=dict, repr=False)

    @property
    def rel_grad(self):
        return self.err_grad_Hm1 / self.norm_f

    @property
    def rel_flux(self):
        return self.err_flux_Hm1 / self.norm_f

    @property
    def rel_nonlinear(self):
        return self.err_nonlinear_Hm1 / self.norm_f

    def csv_row(self, timing=False):
        return {"seed": self.seed, "n": self.n, "profile": self.boundary_profile,
                "err_grad_Hm1": self.err_grad_Hm1, "err_flux_Hm1": self.err_flux_Hm1,
                "err_nonlinear_Hm1": self.err_nonlinear_Hm1, "norm_f": self.norm_f,
                "wall_ms": self.wall_ms if timing else None}


COMMUTATIVITY_COLUMNS = ["seed", "n", "profile", "err_grad_Hm1", "err_flux_Hm1", "err_nonlinear_Hm1",
                         "norm_f", "wall_ms"]


def commutativity_fields(realization, mesh, homogenized, g, f, tol=DEFAULT_TOL):
    """Solve the four Dirichlet problems; returns a dict of nodal solutions and element gradients."""
    integ = bind(realization, mesh)
    u, rep_u = minimize_energy(integ, mesh, g, tol=tol)
    u_hom, rep_h = minimize_energy(homogenized, mesh, g, tol=tol)
    gu = gradient(u).values
    gh = gradient(u_hom).values
    w = solve_linearized(integ, mesh, gu, f)
    w_hom = solve_linearized(homogenized, mesh, gh, f)
    return {"u": u.values, "u_hom": u_hom.values, "w": w.values, "w_hom": w_hom.values, "grad_u": gu,
            "grad_u_hom": gh, "integrand": integ, "reports": {"u": rep_u, "u_hom": rep_h}}


def commutativity_trial(law, nonlinearity, n, seed, f_profile, table=None, g_profile=None, h=0.5,
                        tol=DEFAULT_TOL, realization=None):
    """One trial of the commutativity experiment on the cube box_n.

    Errors are H^-1 norms divided by the cube side, the rescaled form of the
    homogenization estimate for the linearized problems.
    """
    t0 = time.perf_counter()
    d = law.dimension
    g_profile = g_profile or {"kind": "affine", "slope": [1.0] + [0.0] * (d - 1)}
    side = 3**n
    mesh = cube_mesh(int(n), float(h), d)
    real = realization if realization is not None else realization_for_cube(law, nonlinearity, side, seed)
    model = homogenized_model(law, nonlinearity, table)
    g = boundary_profile(g_profile, mesh.nodes, side)
    f = boundary_profile(f_profile, mesh.nodes, side)
    F = commutativity_fields(real, mesh, model, g, f, tol)
    gw = gradient(F["w"], mesh).values
    gwh = gradient(F["w_hom"], mesh).values
    _, _, a_het = F["integrand"].terms(F["grad_u"])
    _, _, a_hom = model.terms(F["grad_u_hom"])
    flux = np.einsum("eij,ej->ei", a_het, gw) - np.einsum("eij,ej->ei", a_hom, gwh)
    err_grad = norm_Hminus1(gw - gwh, mesh) / side
    err_flux = norm_Hminus1(flux, mesh) / side
    err_nl = norm_Hminus1(F["grad_u"] - F["grad_u_hom"], mesh) / side
    norm_f = norm_L2_mean(gradient(f, mesh).values, mesh=mesh)
    wall = 1000.0 * (time.perf_counter() - t0)
    return CommutativitySample(int(n), int(seed), profile_id(f_profile), err_grad, err_flux, err_nl, norm_f, wall,
                               {k: r.to_dict() for k, r in F["reports"].items()})


def rate_fits(samples, fields=("rel_grad", "rel_flux", "rel_nonlinear"), **kw):
    """fit_rate for each error type over CommutativitySample lists."""
    out = {}
    for name in fields:
        groups = {}
        for s in samples:
            groups.setdefault(s.n, []).append(getattr(s, name))
        out[name] = fit_rate(groups, **kw)
    return out


# ---------------------------------------------------------------------------
# two-scale expansion
# ---------------------------------------------------------------------------

@dataclass
class TwoScaleLedger:
    mesoscales: tuple
    errors: dict

    def to_dict(self):
        return {"mesoscales": list(self.mesoscales), "errors": dict(self.errors)}


def smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t**3 * (10.0 - 15.0 * t + 6.0 * t * t)


def cutoff(nodes, half_side, start, width):
    """Boundary cutoff: 0 within ``start`` of the cube boundary, 1 beyond ``start + width``."""
    dist = half_side - np.abs(nodes)
    return np.prod(smoothstep((dist - start) / width), axis=1)


def partition_chi(t, spacing):
    """1D factor of the partition of unity: mollified indicator of (-s/2, s/2), s = spacing.

    Supported in |t| < 3s/2; translates by s sum to one.
    """
    return bump_cdf(t + spacing / 2.0, spacing) - bump_cdf(t - spacing / 2.0, spacing)


def _axis_conv(values, matrix, axis):
    return np.moveaxis(np.tensordot(matrix, values, axes=([1], [axis])), 0, axis)


def _kernel_matrix(targets, sources, width, h):
    """Quadrature weights psi1(x_i - y_j) h, normalized to unit lattice mass."""
    offs = targets[:, None] - sources[None, :]
    K = bump_density(offs, width) * h
    # lattice mass of the bump for this offset class (exact discrete normalization)
    frac = (targets[0] - sources[0]) / h
    frac -= math.floor(frac)
    k = np.arange(-int(width / h) - 2, int(width / h) + 3)
    mass = float(np.sum(bump_density((k + frac) * h, width)) * h)
    return K / mass


def mollify(mesh, nodal, element_grads, width):
    """Return (w * psi at nodes, (grad w) * psi at nodes (N, d)) on a cube mesh grid."""
    d = mesh.dimension
    counts = mesh.grid_counts
    m = counts[0] - 1
    if width is None or width <= mesh.h:
        # identity limit: nodal averages of the adjacent element gradients
        acc = np.zeros((mesh.n_nodes, d))
        wts = np.zeros(mesh.n_nodes)
        for c in range(d + 1):
            np.add.at(acc, mesh.elements[:, c], mesh.volumes[:, None] * element_grads)
            np.add.at(wts, mesh.elements[:, c], mesh.volumes)
        return np.asarray(nodal, dtype=float).copy(), acc / wts[:, None]
    X = [mesh.grid_lower[i] + mesh.h * np.arange(m + 1) for i in range(d)]
    Y = [x[:-1] + mesh.h / 2.0 for x in X]
    W = np.asarray(nodal, dtype=float).reshape(counts)
    for i in range(d):
        W = _axis_conv(W, _kernel_matrix(X[i], X[i], width, mesh.h), i)
    nsimp = math.factorial(d)
    cellg = element_grads.reshape((m,) * d + (nsimp, d)).mean(axis=d)
    G = []
    for j in range(d):
        Gj = cellg[..., j]
        for i in range(d):
            Gj = _axis_conv(Gj, _kernel_matrix(X[i], Y[i], width, mesh.h), i)
        G.append(Gj.reshape(-1))
    return W.reshape(-1), np.stack(G, axis=1)


def _local_to_global(mesh, local_mesh, center):
    """Indices of global nodes matching the local mesh nodes shifted by ``center``."""
    key_scale = 1.0 / mesh.h
    counts = np.asarray(mesh.grid_counts)
    loc = np.round((local_mesh.nodes + center - mesh.grid_lower) * key_scale).astype(np.int64)
    inside = np.all((loc >= 0) & (loc < counts), axis=1)
    idx = np.full(len(loc), -1, dtype=np.int64)
    idx[inside] = np.ravel_multi_index(tuple(loc[inside].T), tuple(counts))
    return idx


def _cell_average_gradient(mesh, grads, center, side):
    mask = mesh.cube_mask(center, side)
    if not mask.any():
        # nearest element
        j = int(np.argmin(np.linalg.norm(mesh.barycenters - center, axis=1)))
        return grads[j]
    return (mesh.volumes[mask, None] * grads[mask]).sum(axis=0) / mesh.volumes[mask].sum()


def _shifted_integrand(realization, local_mesh, center):
    return MeshIntegrand(realization.nonlinearity.kind, realization.coefficient(local_mesh.barycenters + center))


def two_scale_expansion(realization, n, mesoscales, u_hom, f, table, h=0.5, tol=DEFAULT_TOL, psi_width="default",
                        zeta="default", zeta_start=None, zeta_width=None):
    """Build the two-scale competitor T around w_hom and measure how well it solves the
    locally stationary linear problem.

    ``mesoscales`` is (k, l, m) with k < l < m < n. ``psi_width=None`` gives the
    identity-mollifier limit; ``zeta=None`` sets the cutoff to one everywhere.
    Returns a TwoScaleLedger with glue_error, expansion_residual, flux_residual
    and auxiliary terms.
    """
    k, l, m = (int(v) for v in mesoscales)
    if not (0 <= k < l < m < n):
        raise ConfigurationError(f"mesoscales must satisfy k < l < m < n, got {(k, l, m, n)}")
    d = realization.dimension
    mesh = cube_mesh(int(n), float(h), d)
    side = 3.0**n
    u_vals = np.asarray(getattr(u_hom, "values", u_hom), dtype=float)
    f_vals = np.asarray(getattr(f, "values", f), dtype=float)
    grad_uh = gradient(u_vals, mesh).values
    w_hom = solve_linearized(table, mesh, grad_uh, f_vals).values
    grad_wh = gradient(w_hom, mesh).values

    # glued locally stationary coefficient field a(x)
    local_l = mesh_cube(l, h, d)
    A = np.zeros((mesh.n_elements, d, d))
    l_side = 3.0**l
    centers_1d = np.arange(-(3 ** (n - l) - 1) / 2, (3 ** (n - l) - 1) / 2 + 1) * l_side
    filled = np.zeros(mesh.n_elements, dtype=bool)
    for c in np.stack(np.meshgrid(*[centers_1d] * d, indexing="ij"), axis=-1).reshape(-1, d):
        xi = _cell_average_gradient(mesh, grad_uh, c, l_side)
        integ = _shifted_integrand(realization, local_l, c)
        A_loc = frozen_coefficients(integ, local_l, xi, k, tol)
        gmask = mesh.cube_mask(c, l_side)
        order_g = _element_keys(mesh, gmask, np.zeros(d))
        order_l = _element_keys(local_l, None, c)
        A[np.flatnonzero(gmask)[order_g]] = A_loc[order_l]
        filled[gmask] = True
    if not filled.all():
        raise ConfigurationError("mesoscopic cubes do not tile the domain")

    # cutoff and mollifier
    if zeta is None:
        zeta_vals = np.ones(mesh.n_nodes)
        psi = psi_width if psi_width != "default" else None
    else:
        psi = 3.0**l / 2.0 if psi_width == "default" else psi_width
        start = (psi if psi else 0.0) if zeta_start is None else zeta_start
        width = 3.0 ** (m - 1) if zeta_width is None else zeta_width
        zeta_vals = cutoff(mesh.nodes, side / 2.0, start, width)
    w_moll, grad_moll = mollify(mesh, w_hom, grad_wh, psi)

    # glued correctors phi_e = sum_z chi(x - z) phi_{e,z}
    spacing = 3.0 ** (l - 1)
    phi = np.zeros((mesh.n_nodes, d))
    support = zeta_vals > 0
    lo = mesh.nodes[support].min(axis=0) - 1.5 * spacing
    hi = mesh.nodes[support].max(axis=0) + 1.5 * spacing
    zs_axes = [np.arange(math.floor(lo[i] / spacing), math.ceil(hi[i] / spacing) + 1) * spacing for i in range(d)]
    for z in np.stack(np.meshgrid(*zs_axes, indexing="ij"), axis=-1).reshape(-1, d):
        if np.any(np.abs(z) > side / 2.0 + 1.5 * spacing):
            continue
        xi_z = _cell_average_gradient(mesh, grad_uh, z, 1.0)
        integ = _shifted_integrand(realization, local_l, z)
        A_z = frozen_coefficients(integ, local_l, xi_z, k, tol)
        gidx = _local_to_global(mesh, local_l, z)
        keep = gidx >= 0
        if not keep.any():
            continue
        chi = np.prod(partition_chi(local_l.nodes, spacing), axis=1)
        for j in range(d):
            w = solve_linear_dirichlet(local_l, A_z, local_l.nodes[:, j])
            phi_ez = w - local_l.nodes[:, j]
            phi[gidx[keep], j] += chi[keep] * phi_ez[keep]

    T = (1.0 - zeta_vals) * w_hom + zeta_vals * w_moll + zeta_vals * np.sum(grad_moll * phi, axis=1)
    w_tilde = solve_linear_dirichlet(mesh, A, f_vals)
    grad_T = gradient(T, mesh).values
    grad_wt = gradient(w_tilde, mesh).values
    K = mesh.stiffness(A)
    residual = K @ T
    _, _, a_bar = table.terms(grad_uh)
    flux = np.einsum("eij,ej->ei", A, grad_T) - np.einsum("eij,ej->ei", a_bar, grad_wh)
    errors = {
        "glue_error": norm_L2_mean(grad_T - grad_wt, mesh=mesh),
        "expansion_residual": dual_norm(mesh, residual),
        "interior_residual": _interior_residual(mesh, zeta_vals, residual),
        "flux_residual": norm_Hminus1(flux, mesh) / side,
        "boundary_mismatch": float(np.max(np.abs(T - f_vals)[mesh.boundary])),
        "homogenization_error": norm_Hminus1(grad_wt - grad_wh, mesh) / side,
        "corrector_size": float(np.sqrt(np.mean(phi**2))),
    }
    return TwoScaleLedger((k, l, m, int(n)), errors)


def _interior_residual(mesh, zeta_vals, residual):
    """Dual norm of the residual tested only against functions supported where zeta = 1."""
    full = np.all(zeta_vals[mesh.elements] >= 1.0 - 1e-12, axis=1)
    if not full.any():
        return float("nan")
    sub = mesh.submesh(full, shape="cube")
    if not len(sub.interior):
        return float("nan")
    return dual_norm(sub, residual[sub.parent_nodes])


def _element_keys(mesh, mask, shift):
    """Permutation sorting the selected elements by (shifted) barycenter coordinates."""
    b = mesh.barycenters if mask is None else mesh.barycenters[mask]
    key = np.round((b + shift) * (mesh.dimension + 1) / mesh.h).astype(np.int64)
    return np.lexsort(key.T[::-1])
