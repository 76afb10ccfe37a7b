import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nlhomog.errors import ConfigurationError, DomainError
from nlhomog.lagrangian import (CoefficientLaw, LagrangianRealization, NonlinearitySpec, bump_density,
                                lagrangian_terms, realization_for_cube, sample_realization)


def test_two_point_sample_is_reproducible():
    law = CoefficientLaw("iid_two_point", 0.0, 1.0, 2)
    nl = NonlinearitySpec("perturbed_sqrt", 2.0)
    a = sample_realization(law, nl, (2, 2), 7)
    b = sample_realization(law, nl, (2, 2), 7)
    assert a.cell_values.shape == (2, 2)
    assert set(np.unique(a.cell_values)) <= {0.0, 1.0}
    assert np.array_equal(a.cell_values, b.cell_values)


def test_degenerate_uniform_law_is_constant():
    law = CoefficientLaw("iid_uniform", 0.5, 0.5, 3)
    real = sample_realization(law, NonlinearitySpec("perturbed_sqrt", 3.0), (3, 2, 4), 11)
    assert np.all(real.cell_values == 0.5)


def test_inconsistent_range_is_rejected():
    law = CoefficientLaw("iid_two_point", 0.0, 2.0, 2)
    with pytest.raises(ConfigurationError):
        sample_realization(law, NonlinearitySpec("perturbed_sqrt", 2.0), (2, 2), 1)
    with pytest.raises(ConfigurationError):
        sample_realization(CoefficientLaw("iid_uniform", 0.5, 2.0, 1), NonlinearitySpec("quadratic", 4.0), 3, 1)


def _gauss_convolution(real, x, width):
    """a(x) = int psi(x - y) c(y) dy by Gauss-Legendre on the pieces between cell faces."""
    nodes, weights = np.polynomial.legendre.leggauss(8)
    d = len(x)
    pieces = []
    for i in range(d):
        lo, hi = x[i] - width, x[i] + width
        cuts = np.arange(np.ceil(lo - 0.5), np.floor(hi - 0.5) + 1) + 0.5
        edges = np.concatenate([[lo], cuts[(cuts > lo) & (cuts < hi)], [hi]])
        pts, wts = [], []
        for a, b in zip(edges[:-1], edges[1:]):
            pts.append(0.5 * (b - a) * nodes + 0.5 * (a + b))
            wts.append(0.5 * (b - a) * weights)
        pieces.append((np.concatenate(pts), np.concatenate(wts)))
    grids = np.meshgrid(*[p for p, _ in pieces], indexing="ij")
    wgrid = np.ones_like(grids[0])
    for i, (p, w) in enumerate(pieces):
        shape = [1] * d
        shape[i] = -1
        wgrid = wgrid * (w * bump_density(x[i] - p, width)).reshape(shape)
    y = np.stack(grids, axis=-1)
    cells = np.floor(y + 0.5).astype(np.int64)
    return float(np.sum(wgrid * real.law.base_values(real.seed, cells)))


def test_mollified_field_matches_direct_quadrature():
    law = CoefficientLaw("mollified_iid", 0.0, 1.0, 2, mollifier_width=0.25)
    real = sample_realization(law, NonlinearitySpec("perturbed_sqrt", 2.0), (8, 8), 1)
    rng = np.random.default_rng(0)
    pts = rng.uniform(real.lower + 0.01, real.upper - 0.01, size=(40, 2))
    got = real.coefficient(pts)
    want = np.array([_gauss_convolution(real, p, 0.25) for p in pts])
    assert np.max(np.abs(got - want)) < 1e-12
    # away from the mollification layer the field equals the cell value
    centers = np.array([[0.0, 0.0], [1.0, -2.0]])
    assert np.allclose(real.coefficient(centers), real.law.base_values(1, centers.astype(np.int64)))


def test_eval_closed_forms():
    nl = NonlinearitySpec("perturbed_sqrt", 2.0)
    real = LagrangianRealization.from_cell_values(np.ones((2, 2)), nl)
    L, DL, D2L = real.eval(np.zeros(2), np.zeros(2))
    assert L == pytest.approx(1.0)
    assert np.allclose(DL, 0.0)
    assert np.allclose(D2L, 2.0 * np.eye(2))
    _, _, D2L = real.eval(np.array([1.0, 0.0]), np.zeros(2))
    assert np.allclose(np.sort(np.linalg.eigvalsh(D2L)), [1 + 2**-1.5, 1 + 2**-0.5])
    _, _, D2L = lagrangian_terms("quadratic", np.array(2.5), np.array([3.0, -1.0, 7.0]))
    assert np.allclose(D2L, 2.5 * np.eye(3))


def test_eval_outside_box_raises():
    real = sample_realization(CoefficientLaw("iid_uniform", 1.0, 2.0, 2), NonlinearitySpec("quadratic", 2.0), (2, 2), 3)
    with pytest.raises(DomainError):
        real.eval(np.zeros(2), np.array([5.0, 0.0]))


@pytest.mark.parametrize("kind,lam,lo,hi", [("perturbed_sqrt", 3.0, 0.0, 2.0), ("quadratic", 4.0, 1.0, 4.0)])
def test_hessian_eigenvalues_within_band(kind, lam, lo, hi):
    rng = np.random.default_rng(5)
    p = rng.normal(size=(1000, 3))
    p *= (10.0 * rng.uniform(size=(1000, 1)) ** (1 / 3)) / np.linalg.norm(p, axis=1, keepdims=True)
    a = rng.uniform(lo, hi, size=1000)
    _, _, D2L = lagrangian_terms(kind, a, p)
    eig = np.linalg.eigvalsh(D2L)
    assert eig.min() >= 1.0 - 1e-12 and eig.max() <= lam + 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=2), st.floats(0.0, 3.0))
def test_derivatives_match_finite_differences(p, a):
    p = np.array(p)
    a = np.array(a)
    step = 1e-4
    _, DL, D2L = lagrangian_terms("perturbed_sqrt", a, p)
    for i in range(2):
        e = np.zeros(2)
        e[i] = step
        Lp, DLp, _ = lagrangian_terms("perturbed_sqrt", a, p + e)
        Lm, DLm, _ = lagrangian_terms("perturbed_sqrt", a, p - e)
        assert abs((Lp - Lm) / (2 * step) - DL[i]) <= 1e-6 * max(1.0, abs(DL[i]))
        assert np.allclose((DLp - DLm) / (2 * step), D2L[:, i], rtol=1e-6, atol=1e-6)


def test_lattice_shift_stationarity():
    law = CoefficientLaw("iid_uniform", 1.0, 3.0, 2)
    nl = NonlinearitySpec("quadratic", 3.0)
    a = sample_realization(law, nl, (5, 4), 42, origin=(0, 0))
    b = sample_realization(law, nl, (5, 4), 42, origin=(3, -2))
    cells = np.stack(np.meshgrid(np.arange(5), np.arange(4), indexing="ij"), axis=-1)
    assert np.array_equal(b.cell_values, law.base_values(42, cells + np.array([3, -2])))
    # restriction consistency: a larger box contains the smaller one bit-exactly
    big = sample_realization(law, nl, (9, 9), 42, origin=(-2, -3))
    assert np.array_equal(big.cell_values[2:7, 3:7], a.cell_values)


def test_json_roundtrip_regenerates_cells():
    law = CoefficientLaw("mollified_iid", 0.0, 1.0, 2, mollifier_width=0.3)
    nl = NonlinearitySpec("perturbed_sqrt", 2.0)
    real = realization_for_cube(law, nl, 9, 123)
    text = real.to_json()
    assert "cell_values" not in text
    back = LagrangianRealization.from_json(text)
    assert np.array_equal(back.cell_values, real.cell_values)
    x = np.array([[0.3, -1.2], [2.49, 0.0]])
    assert np.array_equal(back.coefficient(x), real.coefficient(x))


def test_distinct_seeds_give_distinct_draws():
    law = CoefficientLaw("iid_uniform", 1.0, 2.0, 2)
    nl = NonlinearitySpec("quadratic", 2.0)
    a = sample_realization(law, nl, (10, 10), 1).cell_values
    b = sample_realization(law, nl, (10, 10), 2).cell_values
    assert not np.array_equal(a, b)
    assert abs(np.corrcoef(a.ravel(), b.ravel())[0, 1]) < 0.35
