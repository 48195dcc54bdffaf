import numpy as np
import pytest

from singulax.bessel_core import assemble_bessel, resolvent_apply
from singulax.halfspace_solver import (HalfSpaceConfig, apply_L, duhamel_reference, elliptic_solve,
                                       equality_probe, form_sectoriality_check, maxreg_ratio,
                                       mean_free, parabolic_solve, regularity_ratios, residual,
                                       second_derivatives)
from singulax.weighted_grid import (CoreFunctionSpec, build_graded_grid, make_core_function,
                                    random_core_functions, torus_axis, values_of)


def _cfg(J=64, n_x=16, a=(0.5,), c=1.0, m=1.0, p=2.0, N=1, Y=20.0):
    return HalfSpaceConfig(build_graded_grid(J, Y), c, a, m, p, n_x=n_x, N=N)


def _probes(cfg, k, seed=0, **kw):
    fs = random_core_functions(np.random.default_rng(seed), cfg.grid, k, period=cfg.period,
                               n_x=cfg.n_x, N=cfg.N, complex_valued=True, max_support=5.0, **kw)
    return [values_of(f) for f in fs]


def test_config_validation():
    g = build_graded_grid(16, 10.0)
    with pytest.raises(ValueError, match="inadmissible"):
        HalfSpaceConfig(g, 1.0, (0.5,), 3.0, 2.0)
    with pytest.raises(ValueError):
        HalfSpaceConfig(g, 1.0, (1.0,), 1.0, 2.0)
    with pytest.raises(ValueError):
        HalfSpaceConfig(g, 1.0, (0.5,), 1.0, 2.0, N=2)


def test_constant_y_part_gives_laplacian():
    cfg = _cfg(a=(0.5,))
    xs = torus_axis(cfg.n_x, cfg.period)
    u = np.cos(2 * xs)[:, None] * np.ones(cfg.grid.J)[None, :]
    Lu = apply_L(cfg, u)
    # the top row sees the Dirichlet ghost; check the rest
    np.testing.assert_allclose(Lu[:, :-1], -4 * u[:, :-1], atol=1e-10)


def test_separable_a0_matches_1d():
    cfg = _cfg(a=(0.0,))
    xs = torus_axis(cfg.n_x, cfg.period)
    v = make_core_function(CoreFunctionSpec(1.0, 4.0), cfg.grid).values
    u = np.cos(3 * xs)[:, None] * v[None, :]
    Bv = assemble_bessel(cfg.grid, 1.0).matvec(v)
    np.testing.assert_allclose(apply_L(cfg, u), -9 * u + np.cos(3 * xs)[:, None] * Bv[None, :], atol=1e-10)


def test_apply_L_rejects_shape():
    cfg = _cfg()
    with pytest.raises(ValueError):
        apply_L(cfg, np.zeros((3, 3)))


def test_core_probe_has_finite_drift_term():
    cfg = _cfg()
    u = _probes(cfg, 1)[0]
    d = second_derivatives(cfg, u)
    assert np.all(np.isfinite(d["y^-1 D_y"]))
    assert np.abs(d["y^-1 D_y"][:, 0]).max() < 1e-6


@pytest.mark.parametrize("N", [1, 2])
def test_elliptic_roundtrip(N):
    cfg = _cfg(J=64, n_x=16 if N == 1 else 8, a=(0.5,) if N == 1 else (0.4, 0.3), N=N)
    phi = _probes(cfg, 1)[0]
    lam = 1.3 + 0.4j
    f = lam * phi - apply_L(cfg, phi)
    u = elliptic_solve(cfg, lam, f)
    assert np.linalg.norm(u - phi) <= 1e-8 * np.linalg.norm(phi)
    assert residual(cfg, lam, u, f) <= 1e-8


def test_elliptic_a0_per_frequency():
    cfg = _cfg(a=(0.0,))
    f = _probes(cfg, 1, seed=2)[0]
    u = elliptic_solve(cfg, 2.0, f)
    fh, uh = np.fft.fft(f, axis=0), np.fft.fft(u, axis=0)
    B = assemble_bessel(cfg.grid, 1.0)
    k = np.fft.fftfreq(cfg.n_x, d=cfg.period / (2 * np.pi * cfg.n_x))
    for i in (0, 1, 5, cfg.n_x - 3):
        ref = resolvent_apply(B, 2.0 + k[i] ** 2, fh[i]).values
        np.testing.assert_allclose(uh[i], ref, rtol=1e-10, atol=1e-12 * np.abs(ref).max())


def test_elliptic_resolvent_identity():
    cfg = _cfg()
    f = _probes(cfg, 1, seed=3)[0]
    lam, mu = 1.0, 2 + 1j
    lhs = elliptic_solve(cfg, lam, f) - elliptic_solve(cfg, mu, f)
    rhs = (mu - lam) * elliptic_solve(cfg, lam, elliptic_solve(cfg, mu, f))
    assert np.linalg.norm(lhs - rhs) <= 1e-9 * np.linalg.norm(lhs)


def test_elliptic_rejects_lambda_outside_sector():
    cfg = _cfg()
    with pytest.raises(ValueError):
        elliptic_solve(cfg, -1.0, np.zeros(cfg.shape))


def test_regularity_ratios_finite_and_stable():
    ratios = []
    for J, n_x in ((128, 32), (256, 64)):
        cfg = _cfg(J=J, n_x=n_x)
        fs = [mean_free(cfg, f) for f in _probes(cfg, 16, seed=4)]
        rep = regularity_ratios(cfg, fs)
        assert all(np.isfinite(v) for v in rep.ratios.values())
        ratios.append(rep.max_ratio)
    assert abs(ratios[1] / ratios[0] - 1) <= 0.1


def test_regularity_batch_too_small():
    cfg = _cfg()
    with pytest.raises(ValueError):
        regularity_ratios(cfg, _probes(cfg, 3))


def test_regularity_grows_towards_endpoint():
    # c = 1, p = 2: (m+1)/p -> 2 as m -> 3
    vals = []
    for m in (1.0, 2.0, 2.7):
        cfg = _cfg(J=128, n_x=16, m=m)
        fs = [mean_free(cfg, f) for f in _probes(cfg, 16, seed=5)]
        vals.append(regularity_ratios(cfg, fs).ratios["y^-1 D_y"])
    assert vals[0] < vals[1] < vals[2]


def test_parabolic_contraction_a0():
    cfg = _cfg(a=(0.0,), m=0.0 + 1.0, c=1.0)
    u0 = _probes(cfg, 1, seed=6)[0]
    traj = parabolic_solve(cfg, u0, None, 1.0, 40)
    mass = cfg.mass(1.0)
    n = [np.sqrt(np.sum(np.abs(u) ** 2 * mass)) for u in traj.u]
    assert np.all(np.diff(n) <= 1e-12 * n[0])


def test_parabolic_duhamel():
    cfg = _cfg(J=64, n_x=8)
    phi = _probes(cfg, 1, seed=7)[0]
    traj = parabolic_solve(cfg, np.zeros(cfg.shape), lambda t: np.exp(-t) * phi, 1.0, 200)
    ref = duhamel_reference(cfg, phi, 1.0)
    assert np.linalg.norm(traj.u[-1] - ref) <= 1e-3 * np.linalg.norm(ref)


def test_parabolic_semigroup_law():
    cfg = _cfg(J=64, n_x=8)
    u0 = _probes(cfg, 1, seed=8)[0]
    whole = parabolic_solve(cfg, u0, None, 1.0, 100)
    first = parabolic_solve(cfg, u0, None, 0.5, 50)
    second = parabolic_solve(cfg, first.u[-1], None, 0.5, 50)
    assert np.linalg.norm(whole.u[-1] - second.u[-1]) <= 1e-12 * np.linalg.norm(whole.u[-1])


def test_parabolic_errors():
    cfg = _cfg()
    with pytest.raises(ValueError):
        parabolic_solve(cfg, np.zeros(cfg.shape), None, 1.0, 1)
    with pytest.raises(ValueError):
        parabolic_solve(cfg, np.zeros(cfg.shape), None, 1.0, 4, scheme="rk4")
    traj = parabolic_solve(cfg, np.ones(cfg.shape), None, 1.0, 4)
    with pytest.raises(ValueError):
        maxreg_ratio(cfg, traj)


def test_backward_euler_positivity_a0():
    cfg = _cfg(a=(0.0,))
    # real data: |complex sum| has kinks that ring under spectral x-derivatives
    f = random_core_functions(np.random.default_rng(9), cfg.grid, 1, period=cfg.period, n_x=cfg.n_x,
                              max_support=5.0)[0]
    u0 = np.abs(values_of(f).real)
    traj = parabolic_solve(cfg, u0, None, 0.5, 20, scheme="backward_euler")
    assert traj.u.real.min() >= -1e-10


def _maxreg(a, steps, J=64, n_x=16):
    cfg = _cfg(J=J, n_x=n_x, a=a)
    phi = _probes(cfg, 1, seed=10)[0]
    traj = parabolic_solve(cfg, np.zeros(cfg.shape), lambda t: np.cos(3 * t) * phi, 1.0, steps)
    return maxreg_ratio(cfg, traj)


def test_maxreg_finite_and_step_stable():
    r1, r2 = _maxreg((0.0,), 50), _maxreg((0.0,), 100)
    assert np.isfinite(r1)
    assert abs(r2 / r1 - 1) <= 0.1


def test_maxreg_anisotropic_comparable():
    r0, ra = _maxreg((0.0,), 50), _maxreg((0.5,), 50)
    assert 0.1 <= ra / r0 <= 10


def test_sectoriality_a0_real():
    cfg = _cfg(a=(0.0,))
    rep = form_sectoriality_check(cfg, _probes(cfg, 8, seed=11, max_wave=3))
    assert rep.max_abs_im <= 1e-12 * rep.re.max()
    assert rep.accretive_margin >= -1e-12


def test_sectoriality_anisotropic():
    cfg = _cfg(a=(0.5,))
    rep = form_sectoriality_check(cfg, _probes(cfg, 64, seed=12, max_wave=3))
    assert rep.passed
    assert rep.to_dict()["n_probes"] == 64


def test_equality_probe_approaches_constant():
    cfg = _cfg(J=256, n_x=64, a=(0.5,))
    margins = []
    for k in (2, 4, 8):
        u = equality_probe(cfg, k)
        rep = form_sectoriality_check(cfg, [u])
        margins.append(rep.re[0] / rep.energy[0])
    assert margins[0] > margins[1] > margins[2] >= 0.5 - 1e-12
    assert margins[2] - 0.5 < 0.05
