import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nlhomog.cells import (HomogenizedLagrangian, ahom_frozen, cell_sweep, constant_table, ensemble_seeds,
                           estimate_Lbar_point, nu, nu_on_mesh, skeleton, subadditivity_check, tabulate_Lbar, cube_mesh)
from nlhomog.mesh import mesh_box
from nlhomog.errors import ConfigurationError, ConsistencyError, CoverageError
from nlhomog.lagrangian import (CoefficientLaw, LagrangianRealization, NonlinearitySpec, lagrangian_terms,
                                realization_for_cube)


def test_constant_coefficient_nu_is_closed_form():
    nl = NonlinearitySpec("perturbed_sqrt", 2.0)
    real = LagrangianRealization.from_cell_values(np.ones((3, 3)), nl, origin=(-1, -1))
    res = nu(real, 1, [1.0, 0.0])
    assert res.nu_value == pytest.approx(0.5 + math.sqrt(2.0), abs=1e-9)
    assert res.nu_value == pytest.approx(1.914214, abs=1e-6)
    _, DL, D2L = lagrangian_terms("perturbed_sqrt", np.array(1.0), np.array([1.0, 0.0]))
    assert np.allclose(res.d_nu, DL, atol=1e-9)
    assert np.allclose(res.d2_nu, D2L, atol=1e-9)


def test_one_dimensional_quadratic_is_harmonic_mean():
    law = CoefficientLaw("iid_two_point", 1.0, 4.0, 1)
    nl = NonlinearitySpec("quadratic", 4.0)
    for seed in range(5):
        real = realization_for_cube(law, nl, 27, seed)
        hm = 1.0 / np.mean(1.0 / real.cell_values)
        res = nu(real, 3, [2.0])
        assert res.nu_value == pytest.approx(0.5 * 4.0 * hm, rel=1e-10)
        assert res.d_nu[0] == pytest.approx(2.0 * hm, rel=1e-10)
        assert res.d2_nu[0, 0] == pytest.approx(hm, rel=1e-10)
    # alternating 1, 4 pattern: harmonic mean 1.6, so nu(xi = 1) = 0.8 on every even-length run
    alt = LagrangianRealization.from_cell_values(np.tile([1.0, 4.0], 4), nl, origin=(-4,))
    assert nu_on_mesh(alt, mesh_box(-4.5, 8.0, 0.5, 1), [1.0]).nu_value == pytest.approx(0.8, rel=1e-10)


def test_derivatives_match_finite_differences():
    law = CoefficientLaw("iid_two_point", 0.0, 2.0, 2)
    nl = NonlinearitySpec("perturbed_sqrt", 3.0)
    real = realization_for_cube(law, nl, 3, 5)
    xi = np.array([0.7, -0.3])
    res = nu(real, 1, xi, tol=1e-12)
    step = 1e-4
    for j in range(2):
        e = np.zeros(2)
        e[j] = step
        p = nu(real, 1, xi + e, tol=1e-12)
        m = nu(real, 1, xi - e, tol=1e-12)
        assert (p.nu_value - m.nu_value) / (2 * step) == pytest.approx(res.d_nu[j], abs=1e-6)
        assert np.allclose((p.d_nu - m.d_nu) / (2 * step), res.d2_nu[:, j], atol=1e-5)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6), st.floats(-2, 2), st.floats(-2, 2))
def test_subadditivity(seed, x1, x2):
    law = CoefficientLaw("iid_uniform", 0.0, 2.0, 2)
    real = realization_for_cube(law, NonlinearitySpec("perturbed_sqrt", 3.0), 3, seed)
    lhs, rhs, slack = subadditivity_check(real, 0, [x1, x2])
    assert slack >= -1e-9 * (1 + abs(lhs))


def test_skeleton_marks_subcube_faces():
    mesh = cube_mesh(1, 0.5, 1)
    marked = mesh.nodes[skeleton(mesh, 0), 0]
    assert np.allclose(np.sort(marked), [-1.5, -0.5, 0.5, 1.5])


def test_quadratic_hessian_has_no_slope_dependence():
    law = CoefficientLaw("iid_uniform", 1.0, 3.0, 2)
    nl = NonlinearitySpec("quadratic", 3.0)
    real = realization_for_cube(law, nl, 9, 2)
    a = nu(real, 2, [1.0, 0.0]).d2_nu
    b = nu(real, 2, [-0.5, 2.0]).d2_nu
    assert np.allclose(a, b, atol=1e-10)
    assert np.allclose(a, a.T)
    # frozen coefficients of a quadratic law are the law itself
    assert np.allclose(ahom_frozen(real, 2, [0.3, 0.1], k=1), a, atol=1e-10)
    assert np.all(np.linalg.eigvalsh(a) >= 1.0 - 1e-10) and np.all(np.linalg.eigvalsh(a) <= 3.0 + 1e-10)


def test_estimate_Lbar_constant_law():
    law = CoefficientLaw("iid_uniform", 1.0, 1.0, 1)
    nl = NonlinearitySpec("perturbed_sqrt", 2.0)
    est = estimate_Lbar_point(law, nl, [1.0], [1, 2], 3, 0)
    assert est.value == pytest.approx(0.5 + math.sqrt(2.0), abs=1e-9)
    assert est.value_uncertainty < 1e-9
    assert est.monotone
    with pytest.raises(ConfigurationError):
        estimate_Lbar_point(law, nl, [1.0], [2, 1], 3, 0)
    with pytest.raises(ConfigurationError):
        estimate_Lbar_point(law, nl, [1.0], [1], 1, 0)


def test_tabulate_matches_sweep_means_in_1d():
    law = CoefficientLaw("iid_two_point", 1.0, 4.0, 1)
    nl = NonlinearitySpec("quadratic", 4.0)
    axes = [np.linspace(-1, 1, 9)]
    table = tabulate_Lbar(law, nl, axes, 2, 6, 11)
    hm = [1.0 / np.mean(1.0 / realization_for_cube(law, nl, 9, s).cell_values) for s in ensemble_seeds(11, 6)]
    assert np.allclose(table.values, 0.5 * np.mean(hm) * axes[0] ** 2, rtol=1e-9)
    assert np.allclose(table.hessians[:, 0, 0], np.mean(hm), rtol=1e-9)
    with pytest.raises(ConfigurationError):
        tabulate_Lbar(law, nl, [np.linspace(-1, 1, 3)], 2, 6, 11)


def test_cell_sweep_common_seeds_and_rows():
    law = CoefficientLaw("iid_uniform", 0.0, 1.0, 2)
    nl = NonlinearitySpec("perturbed_sqrt", 2.0)
    seeds = ensemble_seeds(3, 2)
    out = cell_sweep(law, nl, 1, [[0.0, 0.0], [1.0, 0.5]], seeds)
    assert out["nu"].shape == (2, 2) and not out["failed"].any()
    assert len(out["rows"]) == 4
    direct = nu(realization_for_cube(law, nl, 3, seeds[1]), 1, [1.0, 0.5])
    assert out["nu"][1, 1] == pytest.approx(direct.nu_value, abs=1e-9)


def test_hermite_is_exact_on_bicubics():
    def f(p):
        x, y = p[..., 0], p[..., 1]
        L = 1 + x - 2 * y + x**3 * y**2 - x * y**3 + 0.5 * x**2 * y
        Lx = 1 + 3 * x**2 * y**2 - y**3 + x * y
        Ly = -2 + 2 * x**3 * y - 3 * x * y**2 + 0.5 * x**2
        Lxx = 6 * x * y**2 + y
        Lyy = 2 * x**3 - 6 * x * y
        Lxy = 6 * x**2 * y - 3 * y**2 + x
        return L, np.stack([Lx, Ly], -1), np.stack([np.stack([Lxx, Lxy], -1), np.stack([Lxy, Lyy], -1)], -2)

    table = HomogenizedLagrangian.from_function([np.linspace(-1, 1, 5), np.linspace(-1, 1, 9)], f)
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, (200, 2))
    L, DL, D2L = table.evaluate(pts)
    eL, eDL, eD2L = f(pts)
    assert np.allclose(L, eL, atol=1e-12)
    assert np.allclose(DL, eDL, atol=1e-11)
    assert np.allclose(D2L, eD2L, atol=1e-10)


def test_table_coverage_and_invariants():
    nl = NonlinearitySpec("perturbed_sqrt", 3.0)
    table = constant_table(nl, 1.5, [np.linspace(-2, 2, 17)] * 2)
    assert table.check_invariants()
    with pytest.raises(CoverageError) as err:
        table.evaluate(np.array([[2.5, 0.0]]))
    assert err.value.needed_high[0] == pytest.approx(2.5)
    bad = constant_table(nl, 1.5, [np.linspace(-1, 1, 9)] * 2)
    bad.values = bad.values - 0.5 * (bad.grid_points()[:, 0] ** 2).reshape(bad.values.shape)
    bad.hessians = bad.hessians * 0.5
    with pytest.raises(ConsistencyError):
        bad.check_invariants()
    back = HomogenizedLagrangian.from_json(table.to_json())
    assert np.array_equal(back.hessians, table.hessians)
