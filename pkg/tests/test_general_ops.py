import math

import numpy as np
import pytest

from singulax.general_ops import (GeneralCoefficients, TorusGrid, apply_oblique, apply_oblique_direct,
                                  conjugation_deviation, oblique_shear, random_spd, reduce_general_Q,
                                  solve_neumann_general, solve_oblique, solve_oblique_direct, tilde_Q,
                                  validate_oblique)
from singulax.weighted_grid import build_graded_grid, random_core_functions, values_of

COEFFS = GeneralCoefficients.make([[1.0]], [0.3], 1.2, [0.4], 1.5)


def _tg(J=64, n_x=32, period=4 * math.pi, N=1):
    return TorusGrid(build_graded_grid(J, 20.0), n_x, period, N)


def _phi(tg, seed=0):
    f = random_core_functions(np.random.default_rng(seed), tg.grid, 1, period=tg.period, n_x=tg.n_x,
                              N=tg.N, complex_valued=True, max_support=4.0)[0]
    return values_of(f)


def test_reduction_scalar_examples():
    r = reduce_general_Q(GeneralCoefficients.make([[4.0]], [0.0], 1.0))
    assert r.S[0, 0] == pytest.approx(0.5)
    assert r.a.a == (0.0,)
    co = GeneralCoefficients.make([[1.0]], [0.5], 1.0, c=2.0)
    r = reduce_general_Q(co)
    assert r.a.a[0] == pytest.approx(0.5)
    assert co.schur == pytest.approx(0.75)
    assert r.c_reduced == pytest.approx(2.0)


def test_reduction_random_spd():
    rng = np.random.default_rng(1)
    for _ in range(100):
        Q = random_spd(rng, 3)
        co = GeneralCoefficients.from_matrix(Q)
        r = reduce_general_Q(co)
        np.testing.assert_allclose(r.S @ co.Q1 @ r.S.T, co.gamma * np.eye(2), atol=1e-12 * co.gamma * 50)
        assert r.a.norm < 1
        assert r.a.norm ** 2 == pytest.approx(1 - co.schur / co.gamma, rel=1e-9, abs=1e-12)


def test_not_positive_definite_reports_minor():
    co = GeneralCoefficients.make([[1.0]], [2.0], 1.0)
    with pytest.raises(ValueError, match="leading minor of order 2"):
        reduce_general_Q(co)
    with pytest.raises(ValueError, match="order 1"):
        GeneralCoefficients.make([[-1.0]], [0.0], 1.0).check_positive_definite()


def test_tilde_Q_examples():
    co = GeneralCoefficients.from_matrix(np.eye(2), [0.5], 1.0)
    np.testing.assert_allclose(tilde_Q(co), [[1.25, -0.5], [-0.5, 1.0]])
    co0 = GeneralCoefficients.make([[2.0]], [0.3], 1.7, [0.0], 1.0)
    np.testing.assert_allclose(tilde_Q(co0), co0.Q)
    rng = np.random.default_rng(2)
    for _ in range(20):
        co = GeneralCoefficients.from_matrix(random_spd(rng, 3), rng.normal(size=2), rng.uniform(0.5, 2))
        assert tilde_Q(co)[-1, -1] == pytest.approx(co.gamma)


def test_tilde_Q_positive_definite_random():
    rng = np.random.default_rng(3)
    for _ in range(100):
        c = rng.choice([-1, 1]) * rng.uniform(0.2, 3)
        co = GeneralCoefficients.from_matrix(random_spd(rng, 3), rng.normal(size=2), c)
        assert np.linalg.eigvalsh(tilde_Q(co)).min() > 0


def test_tilde_Q_minus_sign_differs():
    co = GeneralCoefficients.from_matrix(np.eye(2), [0.5], 1.0)
    diff = tilde_Q(co) - tilde_Q(co, minus_sign=True)
    np.testing.assert_allclose(diff, [[0.5, 0.0], [0.0, 0.0]])


def test_tilde_Q_rejects_c0():
    with pytest.raises(ValueError):
        tilde_Q(GeneralCoefficients.from_matrix(np.eye(2), [0.5], 0.0))


def test_shear_b0_identity_and_c0():
    tg = _tg()
    u = _phi(tg)
    np.testing.assert_allclose(oblique_shear(u, tg, [0.0], 1.0), u, atol=1e-15)
    with pytest.raises(ValueError):
        oblique_shear(u, tg, [0.5], 0.0)


def test_shear_isometry_and_inverse():
    tg = _tg()
    u = _phi(tg, 4)
    Tu = oblique_shear(u, tg, [0.4], 1.5)
    for m in (0.0, 1.0, 2.5):
        assert tg.norm(Tu, m) == pytest.approx(tg.norm(u, m), rel=1e-12)
    back = oblique_shear(Tu, tg, [0.4], 1.5, "inverse")
    assert np.max(np.abs(back - u)) <= 1e-12 * np.max(np.abs(u))


def test_shear_support_check():
    tg = _tg()
    with pytest.raises(ValueError):
        oblique_shear(_phi(tg), tg, [2.0], 1.0, max_support_fraction=0.5)


def test_b0_oblique_is_neumann():
    co = GeneralCoefficients.make([[1.0]], [0.3], 1.2, [0.0], 1.5)
    tg = _tg()
    f = _phi(tg, 5)
    np.testing.assert_allclose(solve_oblique(co, 1.0, f, tg), solve_neumann_general(co, 1.0, f, tg),
                               atol=1e-13)


def test_oblique_roundtrip():
    tg = _tg()
    phiT = oblique_shear(_phi(tg, 6), tg, COEFFS.b, COEFFS.c)
    f = phiT - apply_oblique(COEFFS, phiT, tg)
    u = solve_oblique(COEFFS, 1.0, f, tg, m=0.5, p=2.0)
    assert tg.norm(u - phiT, 0.5) <= 1e-6 * tg.norm(phiT, 0.5)


def test_direct_vs_conjugated_improves():
    errs = []
    for J in (64, 128, 256):
        tg = _tg(J=J)
        f = _phi(tg, 7)
        u = solve_oblique(COEFFS, 1.0, f, tg)
        ud = solve_oblique_direct(COEFFS, 1.0, f, tg)
        errs.append(tg.norm(u - ud, 0.5) / tg.norm(u, 0.5))
    assert errs[-1] <= 1e-2
    assert errs[2] < errs[1] < errs[0]


def test_direct_apply_matches_solve():
    tg = _tg()
    f = _phi(tg, 8)
    u = solve_oblique_direct(COEFFS, 1.0, f, tg)
    r = u - apply_oblique_direct(COEFFS, u, tg) - f
    assert tg.norm(r, 0.0) <= 1e-10 * tg.norm(f, 0.0)


def test_conjugation_deviation_order():
    devs = []
    for J in (64, 128, 256):
        tg = _tg(J=J)
        devs.append(conjugation_deviation(COEFFS, _phi(tg, 9), tg, m=0.5))
    assert devs[2] < devs[1] < devs[0]
    assert math.log2(devs[1] / devs[2]) >= 1.0


def test_minus_sign_variant_does_not_converge():
    devs = []
    for J in (64, 128):
        tg = _tg(J=J)
        devs.append(conjugation_deviation(COEFFS, _phi(tg, 9), tg, m=0.5, minus_sign=True))
    assert min(devs) > 1e-2
    assert devs[1] > 0.5 * devs[0]


def test_validation():
    with pytest.raises(ValueError):
        validate_oblique(GeneralCoefficients.make([[1.0]], [0.3], 1.2, [0.4], 0.0), 0.5, 2.0)
    # admissibility uses c/gamma: c = 1.5, gamma = 1.2 -> (m+1)/p < 2.25
    validate_oblique(COEFFS, 3.4, 2.0)
    with pytest.raises(ValueError, match="inadmissible"):
        validate_oblique(COEFFS, 3.6, 2.0)
    # gamma = 2: (m+1)/p = 1.8 passes c + 1 = 2.5 but not c/gamma + 1 = 1.75
    with pytest.raises(ValueError, match="inadmissible"):
        validate_oblique(GeneralCoefficients.make([[1.0]], [0.0], 2.0, [0.4], 1.5), 2.6, 2.0)


def test_N2_reduction_solve():
    co = GeneralCoefficients.from_matrix([[1.0, 0.2, 0.1], [0.2, 1.5, -0.2], [0.1, -0.2, 1.1]],
                                         [0.3, -0.2], 1.3)
    tg = _tg(J=32, n_x=8, N=2)
    phiT = oblique_shear(_phi(tg, 10), tg, co.b, co.c)
    f = 2.0 * phiT - apply_oblique(co, phiT, tg)
    u = solve_oblique(co, 2.0, f, tg)
    assert tg.norm(u - phiT, 0.0) <= 1e-8 * tg.norm(phiT, 0.0)
