"""Random uniformly convex Lagrangians L(p, x) on the unit lattice.

Two parametric families are available:

* ``quadratic``:      L(p, x) = a(x) |p|^2 / 2,                 a(x) in [1, lambda_max]
* ``perturbed_sqrt``: L(p, x) = |p|^2 / 2 + a(x) sqrt(1 + |p|^2),  a(x) in [0, lambda_max - 1]

Both satisfy Id <= D^2_p L <= lambda_max Id and have Lipschitz Hessians in p.
The coefficient a(x) is drawn cell by cell from a counter-based generator, so a
cell's value depends only on (seed, cell index) and never on the box size or on
the order in which cells are visited.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DomainError

NONLINEARITIES = ("quadratic", "perturbed_sqrt")
LAW_KINDS = ("iid_uniform", "iid_two_point", "mollified_iid")

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def splitmix64(x):
    """Vectorized splitmix64 finalizer on uint64 arrays (wrapping arithmetic)."""
    z = np.asarray(x, dtype=np.uint64) + np.uint64(0x9E3779B97F4A7C15)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def cell_uniforms(seed: int, cells: np.ndarray) -> np.ndarray:
    """Uniform numbers in [0, 1) keyed by (seed, integer cell index).

    ``cells`` has shape (..., d). The map is pure: the same pair always gives the
    same bits.
    """
    cells = np.asarray(cells, dtype=np.int64)
    key = splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    h = np.broadcast_to(key, cells.shape[:-1]).copy()
    with np.errstate(over="ignore"):
        for i in range(cells.shape[-1]):
            coord = cells[..., i].astype(np.uint64)  # two's complement wrap for negatives
            h = splitmix64(h ^ splitmix64(coord + np.uint64(i + 1) * np.uint64(0x632BE59BD9B4E019)))
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


@dataclass(frozen=True)
class NonlinearitySpec:
    kind: str
    lambda_max: float

    def __post_init__(self):
        if self.kind not in NONLINEARITIES:
            raise ConfigurationError(f"unknown nonlinearity {self.kind!r}; expected one of {NONLINEARITIES}")
        if not self.lambda_max >= 1.0:
            raise ConfigurationError("lambda_max must be >= 1")

    @property
    def admissible_range(self):
        """Interval the coefficient a(x) must stay in for the ellipticity bounds to hold."""
        if self.kind == "quadratic":
            return 1.0, self.lambda_max
        return 0.0, self.lambda_max - 1.0

    def to_dict(self):
        return {"kind": self.kind, "lambda_max": self.lambda_max}


@dataclass(frozen=True)
class CoefficientLaw:
    kind: str
    range_low: float
    range_high: float
    dimension: int
    mollifier_width: float = 0.25

    def __post_init__(self):
        if self.kind not in LAW_KINDS:
            raise ConfigurationError(f"unknown law {self.kind!r}; expected one of {LAW_KINDS}")
        if self.range_low > self.range_high:
            raise ConfigurationError("range_low exceeds range_high")
        if self.dimension < 1:
            raise ConfigurationError("dimension must be >= 1")
        if self.kind == "mollified_iid" and not 0.0 < self.mollifier_width <= 0.5:
            raise ConfigurationError("mollifier_width must lie in (0, 1/2]")

    @property
    def range_of_dependence(self):
        if self.kind == "mollified_iid":
            return 1.0 + 2.0 * self.mollifier_width
        return 1.0

    def check_compatible(self, nonlinearity: NonlinearitySpec):
        lo, hi = nonlinearity.admissible_range
        eps = 1e-12
        if self.range_low < lo - eps or self.range_high > hi + eps:
            raise ConfigurationError(
                f"law range [{self.range_low}, {self.range_high}] violates the "
                f"{nonlinearity.kind} bounds [{lo}, {hi}] for lambda_max={nonlinearity.lambda_max}"
            )

    def base_values(self, seed: int, cells: np.ndarray) -> np.ndarray:
        """Unmollified per-cell values (uniform or two-point)."""
        u = cell_uniforms(seed, cells)
        if self.kind == "iid_uniform":
            return self.range_low + (self.range_high - self.range_low) * u
        return np.where(u < 0.5, self.range_low, self.range_high)

    def to_dict(self):
        d = {"kind": self.kind, "range_low": self.range_low, "range_high": self.range_high,
             "dimension": self.dimension}
        if self.kind == "mollified_iid":
            d["mollifier_width"] = self.mollifier_width
        return d


def bump_cdf(t, width):
    """CDF of the biweight bump (15/16)(1 - (t/w)^2)^2 / w supported on [-w, w]."""
    u = np.clip(np.asarray(t, dtype=float) / width, -1.0, 1.0)
    return 0.5 + (15.0 / 16.0) * (u - 2.0 * u**3 / 3.0 + u**5 / 5.0)


def bump_density(t, width):
    u = np.asarray(t, dtype=float) / width
    return np.where(np.abs(u) < 1.0, (15.0 / 16.0) * (1.0 - u**2) ** 2 / width, 0.0)


# ---------------------------------------------------------------------------
# pointwise integrand
# ---------------------------------------------------------------------------

def lagrangian_terms(kind: str, a, p):
    """Return (L, D_pL, D^2_pL) for coefficients ``a`` (...,) and slopes ``p`` (..., d)."""
    p = np.asarray(p, dtype=float)
    a = np.asarray(a, dtype=float)
    d = p.shape[-1]
    sq = np.einsum("...i,...i->...", p, p)
    eye = np.eye(d)
    if kind == "quadratic":
        L = 0.5 * a * sq
        DL = a[..., None] * p
        D2L = a[..., None, None] * eye
    elif kind == "perturbed_sqrt":
        s = np.sqrt(1.0 + sq)
        L = 0.5 * sq + a * s
        DL = p * (1.0 + a / s)[..., None]
        outer = p[..., :, None] * p[..., None, :]
        D2L = (1.0 + a / s)[..., None, None] * eye - (a / s**3)[..., None, None] * outer
    else:
        raise ConfigurationError(f"unknown nonlinearity {kind!r}")
    return L, DL, D2L


@dataclass
class LagrangianRealization:
    """One draw of the random Lagrangian restricted to a box of unit cells.

    Cells are the unit cubes z + (-1/2, 1/2)^d for integer z. The box covers the
    cells ``origin + k`` with ``0 <= k < box`` componentwise.
    """

    law: CoefficientLaw
    nonlinearity: NonlinearitySpec
    box: tuple
    seed: int
    origin: tuple = None
    cell_values: np.ndarray = field(default=None, repr=False)
    _explicit: bool = field(default=False, repr=False)

    def __post_init__(self):
        self.box = tuple(int(b) for b in self.box)
        if self.origin is None:
            self.origin = tuple(-(b // 2) for b in self.box)
        self.origin = tuple(int(o) for o in self.origin)
        if len(self.box) != self.law.dimension or len(self.origin) != self.law.dimension:
            raise ConfigurationError("box/origin rank does not match the law dimension")

    @property
    def dimension(self):
        return self.law.dimension

    @property
    def lower(self):
        return np.asarray(self.origin, dtype=float) - 0.5

    @property
    def upper(self):
        return np.asarray(self.origin, dtype=float) + np.asarray(self.box) - 0.5

    def cell_index(self, x):
        return np.floor(np.asarray(x, dtype=float) + 0.5).astype(np.int64)

    def _check_inside(self, x):
        x = np.asarray(x, dtype=float)
        tol = 1e-12
        if np.any(x < self.lower - tol) or np.any(x > self.upper + tol):
            raise DomainError("point outside the realization box")

    def base_at_cells(self, cells):
        cells = np.asarray(cells, dtype=np.int64)
        if self._explicit:
            k = cells - np.asarray(self.origin)
            if np.any(k < 0) or np.any(k >= np.asarray(self.box)):
                raise DomainError("cell outside the explicit realization box")
            return self.cell_values[tuple(k[..., i] for i in range(k.shape[-1]))]
        return self.law.base_values(self.seed, cells)

    def coefficient(self, x):
        """a(x) at points ``x`` of shape (..., d)."""
        x = np.asarray(x, dtype=float)
        self._check_inside(x)
        if self.law.kind != "mollified_iid" or self._explicit:
            return self.base_at_cells(self.cell_index(x))
        # a = sum_z c_z * prod_i [F(x_i - z_i + 1/2) - F(x_i - z_i - 1/2)]
        w = self.law.mollifier_width
        center = self.cell_index(x)
        d = x.shape[-1]
        out = np.zeros(x.shape[:-1])
        for offset in np.ndindex(*(3,) * d):
            z = center + (np.asarray(offset) - 1)
            weight = np.ones(x.shape[:-1])
            for i in range(d):
                t = x[..., i] - z[..., i]
                weight = weight * (bump_cdf(t + 0.5, w) - bump_cdf(t - 0.5, w))
            out += weight * self.law.base_values(self.seed, z)
        return out

    def eval(self, p, x):
        """Return (L, D_pL, D^2_pL) at slopes ``p`` and points ``x``."""
        return lagrangian_terms(self.nonlinearity.kind, self.coefficient(x), p)

    def to_json(self):
        return json.dumps({"law": self.law.to_dict(), "nonlinearity": self.nonlinearity.to_dict(),
                           "box": list(self.box), "origin": list(self.origin), "seed": int(self.seed)},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return sample_realization(CoefficientLaw(**d["law"]), NonlinearitySpec(**d["nonlinearity"]),
                                  d["box"], d["seed"], origin=d.get("origin"))

    @classmethod
    def from_cell_values(cls, values, nonlinearity: NonlinearitySpec, origin=None):
        """Deterministic realization with prescribed per-cell values (periodic patterns, oracles)."""
        values = np.asarray(values, dtype=float)
        law = CoefficientLaw("iid_uniform", float(values.min()), float(values.max()), values.ndim)
        law.check_compatible(nonlinearity)
        return cls(law, nonlinearity, values.shape, 0, origin, values.copy(), True)


def sample_realization(law: CoefficientLaw, nonlinearity: NonlinearitySpec, box, seed: int,
                       origin: Optional[tuple] = None) -> LagrangianRealization:
    if isinstance(box, (int, np.integer)):
        box = (int(box),) * law.dimension
    if any(int(b) < 1 for b in box):
        raise ConfigurationError("box extents must be >= 1")
    law.check_compatible(nonlinearity)
    real = LagrangianRealization(law, nonlinearity, tuple(box), int(seed), origin)
    cells = np.stack(np.meshgrid(*[np.arange(o, o + b) for o, b in zip(real.origin, real.box)],
                                 indexing="ij"), axis=-1)
    real.cell_values = law.base_values(real.seed, cells)
    return real


def realization_for_cube(law, nonlinearity, side, seed, margin=0):
    """Realization covering the centered cube of (odd) integer side plus ``margin`` cells."""
    half = (int(side) - 1) // 2 + int(margin)
    box = (2 * half + 1,) * law.dimension
    return sample_realization(law, nonlinearity, box, seed, origin=(-half,) * law.dimension)
