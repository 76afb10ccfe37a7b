"""Simplicial P1 meshes of cubes and lattice balls, fields, and normalized norms.

Cubes are Kuhn-triangulated tensor grids. Because the mesh width divides the
unit cell and cube faces sit on half-integers (odd sides) or integers, every
simplex lies inside one coefficient cell. Lattice balls are the union of the
cube elements whose barycenter lies in the ball.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, DomainError, ResourceError

DEFAULT_MEMORY_CAP = 2 * 1024**3


def _kuhn_simplices(d):
    """Vertex offsets (d!, d+1, d) of the Kuhn triangulation of the unit cube."""
    out = []
    for perm in itertools.permutations(range(d)):
        v = np.zeros(d, dtype=np.int64)
        verts = [v.copy()]
        for axis in perm:
            v[axis] += 1
            verts.append(v.copy())
        out.append(verts)
    return np.asarray(out, dtype=np.int64)


def _is_power_of_half(h):
    k = -math.log2(h)
    return h > 0 and abs(k - round(k)) < 1e-12 and round(k) >= 0


class MeshDomain:
    """Immutable simplicial mesh.

    Attributes: ``nodes`` (N, d), ``elements`` (E, d+1), ``boundary`` (N,) bool,
    ``h``, ``shape`` ('cube' or 'lattice_ball'). Cube meshes also carry the grid
    layout (``grid_lower``, ``grid_counts``) used for tensor-product operations;
    submeshes keep ``parent_nodes`` into the grid they were cut from.
    """

    def __init__(self, nodes, elements, h, shape="cube", grid_lower=None, grid_counts=None,
                 parent_nodes=None, extent=None):
        self.nodes = np.ascontiguousarray(nodes, dtype=float)
        self.elements = np.ascontiguousarray(elements, dtype=np.int64)
        self.h = float(h)
        self.shape = shape
        self.grid_lower = None if grid_lower is None else np.asarray(grid_lower, dtype=float)
        self.grid_counts = None if grid_counts is None else tuple(int(c) for c in grid_counts)
        self.parent_nodes = parent_nodes
        self.extent = extent
        for arr in (self.nodes, self.elements):
            arr.setflags(write=False)

    @property
    def dimension(self):
        return self.nodes.shape[1]

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_elements(self):
        return self.elements.shape[0]

    @cached_property
    def local_gradients(self):
        """(E, d, d+1) matrices mapping local nodal values to the element gradient."""
        x = self.nodes[self.elements]
        edges = x[:, 1:, :] - x[:, :1, :]
        inv = np.linalg.inv(edges)
        d = self.dimension
        D = np.hstack([-np.ones((d, 1)), np.eye(d)])
        return inv @ D

    @cached_property
    def volumes(self):
        x = self.nodes[self.elements]
        edges = x[:, 1:, :] - x[:, :1, :]
        return np.abs(np.linalg.det(edges)) / math.factorial(self.dimension)

    @cached_property
    def total_volume(self):
        return float(self.volumes.sum())

    @cached_property
    def barycenters(self):
        return self.nodes[self.elements].mean(axis=1)

    @cached_property
    def boundary(self):
        d = self.dimension
        facets = []
        for drop in range(d + 1):
            keep = [i for i in range(d + 1) if i != drop]
            facets.append(self.elements[:, keep])
        facets = np.sort(np.concatenate(facets, axis=0), axis=1)
        uniq, counts = np.unique(facets, axis=0, return_counts=True)
        mask = np.zeros(self.n_nodes, dtype=bool)
        mask[uniq[counts == 1].ravel()] = True
        mask.setflags(write=False)
        return mask

    @cached_property
    def interior(self):
        return np.flatnonzero(~self.boundary)

    @cached_property
    def gradient_operator(self):
        """Sparse (E*d, N) matrix B with (B u).reshape(E, d) the element gradients."""
        E, d = self.n_elements, self.dimension
        rows = np.repeat(np.arange(E * d), d + 1)
        cols = np.broadcast_to(self.elements[:, None, :], (E, d, d + 1)).reshape(-1)
        return sp.csr_matrix((self.local_gradients.reshape(-1), (rows, cols)), shape=(E * d, self.n_nodes))

    @cached_property
    def _assembly_plan(self):
        E, k = self.elements.shape
        rows = np.repeat(self.elements, k, axis=1).reshape(-1)
        cols = np.tile(self.elements, (1, k)).reshape(-1)
        keys = rows * self.n_nodes + cols
        uniq, inverse = np.unique(keys, return_inverse=True)
        r = uniq // self.n_nodes
        c = uniq % self.n_nodes
        indptr = np.zeros(self.n_nodes + 1, dtype=np.int64)
        np.add.at(indptr, r + 1, 1)
        indptr = np.cumsum(indptr)
        return inverse, c, indptr, len(uniq)

    def assemble(self, local):
        """Sum per-element (E, d+1, d+1) matrices into a CSR matrix.

        ``np.bincount`` accumulates in a fixed index order, so the result is
        reproducible bit for bit.
        """
        inverse, cols, indptr, nnz = self._assembly_plan
        data = np.bincount(inverse, weights=np.ascontiguousarray(local).reshape(-1), minlength=nnz)
        return sp.csr_matrix((data, cols, indptr), shape=(self.n_nodes, self.n_nodes))

    def stiffness(self, coefficients=None):
        """Stiffness matrix of -div(A grad); ``coefficients`` is (E,), (E, d, d) or None for Id."""
        G = self.local_gradients
        if coefficients is None:
            AG = G
        else:
            A = np.asarray(coefficients, dtype=float)
            if A.ndim == 1:
                AG = A[:, None, None] * G
            else:
                AG = A @ G
        local = self.volumes[:, None, None] * np.einsum("eik,eil->ekl", G, AG)
        return self.assemble(local)

    def load_from_element_vectors(self, vectors):
        """Load vector b_j = sum_T |T| v_T . grad(phi_j) for element-constant fields v (E, d)."""
        G = self.local_gradients
        local = self.volumes[:, None] * np.einsum("eik,ei->ek", G, np.asarray(vectors, dtype=float))
        return np.bincount(self.elements.reshape(-1), weights=local.reshape(-1), minlength=self.n_nodes)

    def load_from_element_scalars(self, values):
        """Load vector b_j = int g phi_j for element-constant g (E,)."""
        d = self.dimension
        local = np.repeat((self.volumes * np.asarray(values, dtype=float) / (d + 1))[:, None], d + 1, axis=1)
        return np.bincount(self.elements.reshape(-1), weights=local.reshape(-1), minlength=self.n_nodes)

    @cached_property
    def mass(self):
        d = self.dimension
        ref = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
        return self.assemble(self.volumes[:, None, None] * ref)

    @cached_property
    def laplacian(self):
        return self.stiffness()

    def element_mask(self, subdomain):
        """Normalize a subdomain (None, bool mask over elements, or index array) to a bool mask."""
        if subdomain is None:
            return np.ones(self.n_elements, dtype=bool)
        sub = np.asarray(subdomain)
        if sub.dtype == bool:
            if sub.shape != (self.n_elements,):
                raise DomainError("element mask length does not match the mesh")
            return sub
        mask = np.zeros(self.n_elements, dtype=bool)
        mask[sub] = True
        return mask

    def ball_mask(self, radius, center=None):
        c = np.zeros(self.dimension) if center is None else np.asarray(center, dtype=float)
        return np.linalg.norm(self.barycenters - c, axis=1) < radius

    def cube_mask(self, center, side):
        c = np.asarray(center, dtype=float)
        return np.all(np.abs(self.barycenters - c) < side / 2.0, axis=1)

    def submesh(self, element_mask, shape="lattice_ball", extent=None):
        mask = self.element_mask(element_mask)
        elems = self.elements[mask]
        used = np.unique(elems)
        remap = -np.ones(self.n_nodes, dtype=np.int64)
        remap[used] = np.arange(len(used))
        parent = used if self.parent_nodes is None else self.parent_nodes[used]
        return MeshDomain(self.nodes[used], remap[elems], self.h, shape, self.grid_lower, self.grid_counts,
                          parent_nodes=parent, extent=extent)

    def memory_estimate(self):
        return estimate_memory(self.n_nodes, self.n_elements, self.dimension)


def estimate_memory(n_nodes, n_elements, d):
    # element geometry + a handful of assembled matrices and solver vectors
    return int(n_elements * (d + 1) ** 2 * 8 * 6 + n_nodes * 8 * 40)


def mesh_box(lower, side, h, d, memory_cap=DEFAULT_MEMORY_CAP):
    """Kuhn-triangulated grid on the cube prod_i (lower_i, lower_i + side)."""
    if not _is_power_of_half(h):
        raise ConfigurationError("mesh width must be 2^-k with k >= 0")
    if d not in (1, 2, 3):
        raise ConfigurationError("dimension must be 1, 2 or 3")
    m = side / h
    if abs(m - round(m)) > 1e-9 or round(m) < 1:
        raise ConfigurationError("mesh width must divide the cube side")
    m = int(round(m))
    n_nodes = (m + 1) ** d
    n_elements = m**d * math.factorial(d)
    if estimate_memory(n_nodes, n_elements, d) > memory_cap:
        raise ResourceError(f"mesh with {n_elements} elements exceeds the memory cap of {memory_cap} bytes")
    lower = np.broadcast_to(np.asarray(lower, dtype=float), (d,)).copy()
    axes = [lower[i] + h * np.arange(m + 1) for i in range(d)]
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    counts = (m + 1,) * d
    corners = np.stack(np.meshgrid(*[np.arange(m)] * d, indexing="ij"), axis=-1).reshape(-1, d)
    kuhn = _kuhn_simplices(d)
    verts = corners[:, None, None, :] + kuhn[None, :, :, :]
    elements = np.ravel_multi_index(tuple(np.moveaxis(verts, -1, 0)), counts).reshape(-1, d + 1)
    return MeshDomain(nodes, elements, h, "cube", lower, counts, extent=float(side))


def mesh_cube(n, h, d, memory_cap=DEFAULT_MEMORY_CAP):
    """Mesh of the triadic cube (-3^n/2, 3^n/2)^d."""
    if n < 0:
        raise ConfigurationError("cube exponent must be >= 0")
    side = 3**n
    return mesh_box(-side / 2.0, side, h, d, memory_cap)


def mesh_lattice_ball(radius, h, d, center=None, memory_cap=DEFAULT_MEMORY_CAP):
    """Lattice ball: cube-grid elements whose barycenter lies within ``radius``."""
    half = math.ceil(radius)
    c = np.zeros(d) if center is None else np.asarray(center, dtype=float)
    cube = mesh_box(c - half, 2 * half, h, d, memory_cap)
    return cube.submesh(cube.ball_mask(radius, c), extent=float(radius))


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

@dataclass
class ScalarField:
    mesh: MeshDomain
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_nodes,):
            raise DomainError("nodal field length does not match the mesh")

    def __add__(self, other):
        _same_mesh(self, other)
        return ScalarField(self.mesh, self.values + other.values)

    def __sub__(self, other):
        _same_mesh(self, other)
        return ScalarField(self.mesh, self.values - other.values)

    def to_csv(self, path):
        d = self.mesh.dimension
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node_index"] + [f"x{i + 1}" for i in range(d)] + ["value"])
            for i, (x, v) in enumerate(zip(self.mesh.nodes, self.values)):
                w.writerow([i] + [repr(float(c)) for c in x] + [repr(float(v))])


@dataclass
class VectorField:
    mesh: MeshDomain
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_elements, self.mesh.dimension):
            raise DomainError("element field shape does not match the mesh")

    def __sub__(self, other):
        _same_mesh(self, other)
        return VectorField(self.mesh, self.values - other.values)

    def to_csv(self, path):
        d = self.mesh.dimension
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["element_index"] + [f"b{i + 1}" for i in range(d)] + [f"g{i + 1}" for i in range(d)])
            for i, (b, g) in enumerate(zip(self.mesh.barycenters, self.values)):
                w.writerow([i] + [repr(float(c)) for c in b] + [repr(float(c)) for c in g])


def _same_mesh(a, b):
    if a.mesh is not b.mesh:
        raise DomainError("fields live on different meshes")


def _values(field, mesh=None):
    if isinstance(field, (ScalarField, VectorField)):
        return field.mesh, field.values
    if mesh is None:
        raise DomainError("a mesh is required for raw arrays")
    return mesh, np.asarray(field, dtype=float)


def gradient(field, mesh=None) -> VectorField:
    """Element gradients of the piecewise-affine interpolant of nodal values."""
    mesh, u = _values(field, mesh)
    g = np.einsum("eik,ek->ei", mesh.local_gradients, u[mesh.elements])
    return VectorField(mesh, g)


def affine_field(mesh, slope, offset=0.0):
    return ScalarField(mesh, mesh.nodes @ np.asarray(slope, dtype=float) + offset)


def _sub_volume(mesh, mask):
    vol = float(mesh.volumes[mask].sum())
    if not mask.any() or vol <= 0.0:
        raise DomainError("empty subdomain")
    return vol


def integral_sq(field, subdomain=None, mesh=None):
    """Exact integral of |field|^2 over whole elements of the subdomain."""
    mesh, v = _values(field, mesh)
    mask = mesh.element_mask(subdomain)
    vol = mesh.volumes[mask]
    if v.ndim == 2 and v.shape[0] == mesh.n_elements:
        return float(np.sum(vol * np.einsum("ei,ei->e", v[mask], v[mask])))
    d = mesh.dimension
    loc = v[mesh.elements[mask]]
    return float(np.sum(vol * (np.sum(loc**2, axis=1) + np.sum(loc, axis=1) ** 2) / ((d + 1) * (d + 2))))


def norm_L2_mean(field, subdomain=None, mesh=None):
    """Volume-normalized L^2 norm (mean of |f|^2 over the subdomain, square-rooted)."""
    mesh, v = _values(field, mesh)
    mask = mesh.element_mask(subdomain)
    return math.sqrt(integral_sq(v, mask, mesh) / _sub_volume(mesh, mask))


def mean(field, subdomain=None, mesh=None):
    """Volume-weighted mean; vector fields return a vector."""
    mesh, v = _values(field, mesh)
    mask = mesh.element_mask(subdomain)
    vol = mesh.volumes[mask]
    total = _sub_volume(mesh, mask)
    if v.ndim == 2 and v.shape[0] == mesh.n_elements:
        return (vol[:, None] * v[mask]).sum(axis=0) / total
    return float(np.sum(vol * v[mesh.elements[mask]].mean(axis=1)) / total)


def restrict(field, subdomain):
    """Restrict a field to the submesh spanned by the selected elements."""
    mesh = field.mesh
    mask = mesh.element_mask(subdomain)
    sub = mesh.submesh(mask, shape=mesh.shape)
    if isinstance(field, VectorField):
        return VectorField(sub, field.values[mask])
    local = np.unique(mesh.elements[mask])
    return ScalarField(sub, field.values[local])


def norm_Lq_mean(field, q, subdomain=None, mesh=None):
    """Normalized L^q norm of an element-constant vector field (|.| Euclidean)."""
    mesh, v = _values(field, mesh)
    mask = mesh.element_mask(subdomain)
    total = _sub_volume(mesh, mask)
    mag = np.linalg.norm(v[mask], axis=1) if v.ndim == 2 else np.abs(v[mask])
    return float((np.sum(mesh.volumes[mask] * mag**q) / total) ** (1.0 / q))


# ---------------------------------------------------------------------------
# H^-1
# ---------------------------------------------------------------------------

def dual_norm(mesh, load, tol=1e-12):
    """Normalized H^-1 norm of the functional v -> load . v on H^1_0.

    Equals (mean |grad phi|^2)^{1/2} where phi solves the discrete Poisson problem
    with zero boundary values and right-hand side ``load``.
    """
    from .solvers import PoissonSolver

    phi = PoissonSolver.for_mesh(mesh).solve(load, tol)
    energy = float(phi @ (mesh.laplacian @ phi))
    return math.sqrt(max(energy, 0.0) / mesh.total_volume)


def norm_Hminus1(field, mesh=None, tol=1e-12):
    """Normalized H^-1 norm of a nodal scalar field or an element-constant vector field.

    Vector fields are taken componentwise and combined in l^2.
    """
    mesh, v = _values(field, mesh)
    if v.ndim == 1:
        if v.shape[0] != mesh.n_nodes:
            raise DomainError("scalar field must be nodal")
        return dual_norm(mesh, mesh.mass @ v, tol)
    if v.shape != (mesh.n_elements, mesh.dimension):
        raise DomainError("vector field must be element-constant")
    total = 0.0
    for i in range(mesh.dimension):
        total += dual_norm(mesh, mesh.load_from_element_scalars(v[:, i]), tol) ** 2
    return math.sqrt(total)
