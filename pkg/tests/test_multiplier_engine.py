import math

import numpy as np
import pytest

from singulax.bessel_core import assemble_bessel, resolvent_apply, semigroup_apply
from singulax.multiplier_engine import (AnisotropyVector, ResolventSymbol, domination_constant,
                                        family_derivative, laplace_resolvent, lambda_lattice,
                                        mikhlin_scan, quadratic_form_Qa, resolvent_symbol,
                                        selfadjoint_oracle, square_function_ratio, symbol_derivative,
                                        symbol_derivative_fd, xi_lattice)
from singulax.weighted_grid import build_graded_grid, random_core_functions, values_of


@pytest.fixture(scope="module")
def g64():
    return build_graded_grid(64, 20.0)


@pytest.fixture(scope="module")
def g128():
    return build_graded_grid(128, 20.0)


def _probes(grid, k=4, seed=0):
    fs = random_core_functions(np.random.default_rng(seed), grid, k, complex_valued=True)
    return np.stack([values_of(f) for f in fs], axis=1)


def test_Qa_examples():
    assert quadratic_form_Qa([0.0, 0.0], [1.0, 2.0]) == pytest.approx(5.0)
    assert quadratic_form_Qa([0.6, 0.0], [1.0, 0.0]) == pytest.approx(0.64)
    assert quadratic_form_Qa([0.6, 0.0], [0.0, 3.0]) == pytest.approx(9.0)


def test_Qa_bounds():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a = rng.normal(size=2)
        a *= rng.uniform(0, 0.99) / np.linalg.norm(a)
        xi = rng.normal(size=2) * 3
        q, r2 = quadratic_form_Qa(a, xi), xi @ xi
        assert (1 - a @ a) * r2 - 1e-12 <= q <= r2 + 1e-12


def test_Qa_rejects_large_a():
    with pytest.raises(ValueError):
        quadratic_form_Qa([1.0, 0.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        AnisotropyVector((0.8, 0.6))


def test_sector_angles_monotone():
    a = AnisotropyVector((0.5,))
    assert a.theta(0.5) == pytest.approx(math.pi / 2)
    th = [a.theta(d) for d in np.linspace(0.5, 1.0, 20)]
    assert np.all(np.diff(th) < 0)
    assert a.omega == pytest.approx(math.atan(0.5 / math.sqrt(0.75)))


def test_resolvent_at_a0_is_shifted_bessel(g128):
    f = _probes(g128, 1)[:, 0]
    for lam in (1.0, 0.5 + 2j):
        R = resolvent_symbol(lam, [1.5, -0.5], [0.0, 0.0], 1.0, g128)
        ref = resolvent_apply(assemble_bessel(g128, 1.0), lam + 2.5, f).values
        np.testing.assert_allclose(R.apply(f), ref, rtol=1e-12, atol=1e-14)


def test_resolvent_residual(g128):
    f = _probes(g128, 1)[:, 0]
    R = resolvent_symbol(2 - 1j, [0.7], [0.5], 1.0, g128)
    # rows near y = 0 carry entries ~ 1/y_1^2 ~ 1e8, so round-off sits near 1e-12
    assert R.residual(R.apply(f), f) < 1e-10


def test_resolvent_outside_sector_rejected(g64):
    with pytest.raises(ValueError):
        resolvent_symbol(-1.0, [1.0], [0.5], 1.0, g64)


def test_resolvent_identity(g128):
    f = _probes(g128, 1)[:, 0]
    lam, mu = 1.0, 2 + 1j
    Rl = ResolventSymbol(lam, np.array([0.8]), AnisotropyVector((0.5,)), 1.0, g128)
    Rm = ResolventSymbol(mu, np.array([0.8]), AnisotropyVector((0.5,)), 1.0, g128)
    lhs = Rl.apply(f) - Rm.apply(f)
    rhs = (mu - lam) * Rl.apply(Rm.apply(f))
    assert np.linalg.norm(lhs - rhs) <= 1e-10 * np.linalg.norm(lhs)


def test_laplace_representation(g64):
    f = _probes(g64, 1)[:, 0]
    xi, a = [0.6], [0.5]
    u = laplace_resolvent(1.5, xi, a, 1.0, g64, f)
    ref = resolvent_symbol(1.5, xi, a, 1.0, g64).apply(f)
    assert np.linalg.norm(u - ref) <= 1e-3 * np.linalg.norm(ref)


def test_derivative_a0_collapses(g64):
    R = resolvent_symbol(1 + 1j, [0.7, -1.2], [0.0, 0.0], 1.0, g64)
    Rd = R.dense()
    for j in (0, 1):
        al = (1, 0) if j == 0 else (0, 1)
        np.testing.assert_allclose(symbol_derivative(al, R), -2 * R.xi[j] * Rd @ Rd, atol=1e-13)


@pytest.mark.parametrize("with_Dy", [False, True])
def test_first_derivative_vs_fd(g64, with_Dy):
    rng = np.random.default_rng(2)
    a = AnisotropyVector((0.5, 0.0))
    f = _probes(g64, 2)
    for _ in range(8):
        lam = complex(np.exp(rng.uniform(-1, 1)) * np.exp(1j * rng.uniform(-1.5, 1.5)))
        xi = rng.normal(size=2)
        R = ResolventSymbol(lam, xi, a, 1.0, g64)
        for al in ((1, 0), (0, 1)):
            A = symbol_derivative(al, R, with_Dy=with_Dy) @ f
            B = symbol_derivative_fd(al, lam, xi, a, 1.0, g64, with_Dy=with_Dy) @ f
            assert np.linalg.norm(A - B) <= 1e-4 * np.linalg.norm(A)


def test_mixed_derivative_vs_fd(g64):
    rng = np.random.default_rng(3)
    a = AnisotropyVector((0.5, 0.2))
    f = _probes(g64, 2)
    for _ in range(8):
        lam = complex(np.exp(rng.uniform(-1, 1)) * np.exp(1j * rng.uniform(-1.2, 1.2)))
        xi = rng.normal(size=2) + 0.3
        R = ResolventSymbol(lam, xi, a, 1.0, g64)
        A = symbol_derivative((1, 1), R) @ f
        B = symbol_derivative_fd((1, 1), lam, xi, a, 1.0, g64, h_rel=1e-3) @ f
        assert np.linalg.norm(A - B) <= 1e-3 * np.linalg.norm(A)


def test_derivative_rejects_zero_xi(g64):
    R = ResolventSymbol(1.0, np.zeros(1), AnisotropyVector((0.5,)), 1.0, g64)
    with pytest.raises(ValueError):
        symbol_derivative((1,), R)


def test_family_alpha0_is_lambda_R(g64):
    R = resolvent_symbol(2.0, [1.0], [0.3], 0.5, g64)
    np.testing.assert_allclose(family_derivative("lambda_R", (0,), R), 2.0 * R.dense())
    with pytest.raises(ValueError):
        family_derivative("nope", (0,), R)


def test_lattices():
    a = AnisotropyVector((0.5,))
    lams = lambda_lattice(a, n_mod=4, n_arg=3)
    assert len(lams) == 12
    edge = math.pi - a.omega
    assert max(abs(np.angle(l)) for l in lams) == pytest.approx(edge - math.radians(5))
    assert len(xi_lattice(2, n_mod=3, n_dir=4)) == 12
    assert all(np.any(x) for x in xi_lattice(1, n_mod=5))


def test_selfadjoint_scan_bounded_by_one():
    grids = [build_graded_grid(J, 20.0) for J in (64, 128)]
    lams = [0.1, 1.0, 10.0]
    xis = [np.array([r]) for r in (0.1, 1.0, 5.0)]
    rep = mikhlin_scan("lambda_R", [0.0], 0.0, 2.0, 0.0, grids, lams, xis)
    assert rep.sup <= 1 + 1e-6
    for lam in lams:
        for xi in xis:
            assert selfadjoint_oracle(lam, xi, grids[1], 0.0) <= lam / (lam + xi @ xi) + 1e-12


def test_anisotropic_scan_stable():
    grids = [build_graded_grid(J, 20.0) for J in (128, 256)]
    a = AnisotropyVector((0.5,))
    lams = lambda_lattice(a, n_mod=3, n_arg=2, mod_range=(0.1, 10))
    xis = xi_lattice(1, n_mod=3, mod_range=(0.1, 10))
    for target in ("lambda_R", "xisq_R"):
        rep = mikhlin_scan(target, a, 1.0, 2.0, 1.0, grids, lams, xis)
        assert np.isfinite(rep.sup)
        assert 0.5 <= rep.stability_ratio <= 2
        assert rep.to_dict()["estimator"] == "svd_exact"


def test_scan_probe_estimator_for_p_not_2():
    grids = [build_graded_grid(64, 20.0)]
    rep = mikhlin_scan("lambda_R", [0.5], 1.0, 3.0, 1.0, grids, [1.0], [np.array([1.0])], n_probes=16)
    assert np.isfinite(rep.sup) and rep.sup > 0
    assert rep.to_dict()["estimator"] == "probe_lower_bound"


def test_scan_rejects_inadmissible_and_sector():
    g = [build_graded_grid(32, 20.0)]
    with pytest.raises(ValueError, match="inadmissible"):
        mikhlin_scan("lambda_R", [0.5], 1.0, 2.0, 3.0, g, [1.0], [np.array([1.0])])
    with pytest.raises(ValueError, match="sector"):
        mikhlin_scan("lambda_R", [0.5], 1.0, 2.0, 1.0, g, [-1.0 + 0.1j], [np.array([1.0])])
    with pytest.raises(ValueError):
        mikhlin_scan("lambda_R", [0.5], 1.0, 2.0, 1.0, g, [1.0], [np.array([0.0])])


def test_scan_csv(tmp_path):
    rep = mikhlin_scan("lambda_R", [0.5], 1.0, 2.0, 1.0, [build_graded_grid(32, 20.0)], [1.0],
                       [np.array([1.0])])
    rep.to_csv(tmp_path / "pts.csv")
    lines = (tmp_path / "pts.csv").read_text().splitlines()
    assert lines[0] == "re_lambda,im_lambda,xi0,alpha,norm_estimate"
    assert len(lines) == 3


def test_gamma_domination_stable():
    consts = []
    for J in (64, 128):
        g = build_graded_grid(J, 20.0)
        f = np.abs(_probes(g, 3, seed=4))
        R = resolvent_symbol(1.0, [0.5], [0.5], 1.0, g)
        consts.append((domination_constant(R, f), domination_constant(R, f, derivative=True)))
    for k in range(2):
        assert np.isfinite(consts[1][k]) and consts[1][k] > 0
        assert consts[1][k] / consts[0][k] == pytest.approx(1.0, abs=0.25)


def test_square_function_identity(g64):
    f = _probes(g64, 1)[:, 0]
    assert square_function_ratio([np.eye(64)], [f], g64, 3.0, 0.5) == pytest.approx(1.0)


def test_square_function_resolvent_family(g64):
    rng = np.random.default_rng(5)
    ops, fs = [], []
    for f in _probes(g64, 16, seed=6).T:
        lam = complex(np.exp(rng.uniform(-2, 2)) * np.exp(1j * rng.uniform(-1.4, 1.4)))
        R = resolvent_symbol(lam, [np.exp(rng.uniform(-1, 1))], [0.0], 0.0, g64)
        ops.append(lam * R.dense())
        fs.append(f)
    assert square_function_ratio(ops, fs, g64, 2.0, 0.0) <= 1 + 1e-10


def test_square_function_semigroup_family_stable(g64):
    B = assemble_bessel(g64, 1.0)
    rng = np.random.default_rng(7)
    zs = np.exp(rng.uniform(-3, 1, 32)) * np.exp(1j * rng.uniform(-0.6, 0.6, 32))
    fs = list(_probes(g64, 32, seed=8).T)
    ops = [lambda f, z=z: semigroup_apply(B, z, f).values for z in zs]
    r16 = square_function_ratio(ops[:16], fs[:16], g64, 3.0, 1.0)
    r32 = square_function_ratio(ops, fs, g64, 3.0, 1.0)
    assert np.isfinite(r16) and np.isfinite(r32)
    assert r32 <= 2 * r16


def test_square_function_errors(g64):
    with pytest.raises(ValueError):
        square_function_ratio([np.eye(64)], [], g64, 2.0, 0.0)
    with pytest.raises(ValueError):
        square_function_ratio([np.eye(64)], [np.zeros(64)], g64, 2.0, 0.0)
