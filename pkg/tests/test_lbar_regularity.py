import numpy as np
import pytest

from nlhomog.cells import constant_table
from nlhomog.errors import ConfigurationError
from nlhomog.lagrangian import CoefficientLaw, NonlinearitySpec
from nlhomog.lbar_regularity import (cross_validate_d2, hessian_bounds_scan, hessian_convergence_trend,
                                     holder_quotient_scan)


def _d2(p, a):
    return 1.0 + a * (1.0 + p * p) ** -1.5


def test_hessian_bounds_of_constant_table():
    nl = NonlinearitySpec("perturbed_sqrt", 3.0)
    table = constant_table(nl, 2.0, [np.linspace(-1, 1, 9)] * 2)
    b = hessian_bounds_scan(table)
    # eigenvalues 1 + a (1 + |p|^2)^{-3/2} (radial) and 1 + a (1 + |p|^2)^{-1/2} (tangential)
    assert b["min_eigenvalue"] == pytest.approx(1.0 + 2.0 * 3.0**-1.5)
    assert b["max_eigenvalue"] == pytest.approx(3.0)
    assert b["max_stderr"] == 0.0 and b["max_asymmetry"] == 0.0


def test_holder_quotient_matches_brute_force_1d():
    a = 2.0
    nl = NonlinearitySpec("perturbed_sqrt", 3.0)
    axis = np.arange(-2.0, 2.0 + 1e-9, 0.125)
    table = constant_table(nl, a, [axis])
    rep = holder_quotient_scan(table, gamma=1.0, M=2.0)
    p = axis[np.abs(axis) <= 2.0]
    D = np.abs(p[:, None] - p[None, :])
    Q = np.abs(_d2(p[:, None], a) - _d2(p[None, :], a))
    ok = D >= 0.25 - 1e-12
    assert rep.max_quotient == pytest.approx(np.max(Q[ok] / D[ok]), rel=1e-12)
    # the symbolic supremum of |d/dp D2L| = 3 a p (1 + p^2)^{-5/2} is attained at p = 1/2
    assert rep.max_quotient <= 3 * a * 0.5 * 1.25**-2.5
    assert rep.max_quotient >= 0.9 * 3 * a * 0.5 * 1.25**-2.5
    assert rep.noise_floor == pytest.approx(0.25)


def test_holder_gamma_range_and_refinement():
    nl = NonlinearitySpec("perturbed_sqrt", 3.0)
    coarse = holder_quotient_scan(constant_table(nl, 2.0, [np.linspace(-2, 2, 17)] * 2))
    fine = holder_quotient_scan(constant_table(nl, 2.0, [np.linspace(-2, 2, 33)] * 2))
    assert abs(fine.max_quotient - coarse.max_quotient) <= 0.5 * coarse.max_quotient
    with pytest.raises(ConfigurationError):
        holder_quotient_scan(constant_table(nl, 2.0, [np.linspace(-2, 2, 17)]), gamma=1.5)


def test_cross_validation_constant_law():
    law = CoefficientLaw("iid_uniform", 1.0, 1.0, 2)
    nl = NonlinearitySpec("perturbed_sqrt", 3.0)
    cv = cross_validate_d2(law, nl, [1.0, 0.5], 1, 0, 2, 0, step=1e-4)
    assert cv.discrepancy <= 1e-7
    assert cv.uncertainty <= 1e-7
    with pytest.raises(ConfigurationError):
        cross_validate_d2(law, nl, [1.0], 1, 0, 2, 0)


def test_hessian_trend_vanishes_for_constant_law():
    law = CoefficientLaw("iid_uniform", 1.0, 1.0, 2)
    nl = NonlinearitySpec("perturbed_sqrt", 3.0)
    trend = hessian_convergence_trend(law, nl, [np.array([0.5, 0.0])], [1, 2], 2, 0)
    assert list(trend) == [1] and trend[1] < 1e-9
