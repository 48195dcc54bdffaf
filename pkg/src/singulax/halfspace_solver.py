"""L = Delta_x + 2a.grad_x D_y + B_y on a torus in x times the radial grid in y.

x-derivatives are spectral (FFT).  Each x-frequency xi gives the 1D operator
``L_xi = B_h - |xi|^2 + 2i(a.xi) D_h`` from multiplier_engine.  For even point
counts the Nyquist frequency is dropped from odd derivatives so that real data
stay real.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla

from .bessel_core import assemble_bessel, derivative_stencil
from .multiplier_engine import AnisotropyVector, check_admissible, in_sector
from .weighted_grid import GridFunction2D, RadialGrid, WeightedMeasure, values_of


@dataclass
class HalfSpaceConfig:
    grid: RadialGrid
    c: float
    a: AnisotropyVector
    m: float
    p: float
    n_x: int = 32
    period: float = 2 * np.pi
    N: int = 1

    def __post_init__(self):
        if not isinstance(self.a, AnisotropyVector):
            self.a = AnisotropyVector(tuple(np.atleast_1d(self.a)))
        if self.a.N != self.N:
            raise ValueError("a must have N components")
        if self.N not in (1, 2):
            raise ValueError("N must be 1 or 2")
        if self.n_x < 4:
            raise ValueError("n_x must be >= 4")
        check_admissible(self.m, self.p, self.c)
        self._B = assemble_bessel(self.grid, self.c)
        self._D = derivative_stencil(self.grid)
        k = np.fft.fftfreq(self.n_x, d=self.period / (2 * np.pi * self.n_x))
        k_odd = k.copy()
        if self.n_x % 2 == 0:
            k_odd[self.n_x // 2] = 0.0
        grids = np.meshgrid(*([k] * self.N), indexing="ij")
        grids_odd = np.meshgrid(*([k_odd] * self.N), indexing="ij")
        self.xi = np.stack(grids, axis=-1)          # shape (n_x,)*N + (N,)
        self.xi_odd = np.stack(grids_odd, axis=-1)

    @property
    def shape(self) -> tuple:
        return (self.n_x,) * self.N + (self.grid.J,)

    @property
    def dx(self) -> float:
        return self.period / self.n_x

    @property
    def B(self):
        return self._B

    @property
    def D(self):
        return self._D

    def xi_sq(self) -> np.ndarray:
        return np.sum(self.xi**2, axis=-1)

    def a_dot_xi(self) -> np.ndarray:
        return self.xi_odd @ self.a.vec

    def refined(self) -> "HalfSpaceConfig":
        from .weighted_grid import build_graded_grid
        g = build_graded_grid(2 * self.grid.J, self.grid.Y_max, self.grid.grading)
        return HalfSpaceConfig(g, self.c, self.a, self.m, self.p, 2 * self.n_x, self.period, self.N)

    def mass(self, m: float | None = None) -> np.ndarray:
        return WeightedMeasure.on(self.grid, self.m if m is None else m).cell_mass

    def norm(self, u, m: float | None = None, p: float | None = None) -> float:
        p = self.p if p is None else p
        mass = self.mass(m) * self.dx ** self.N
        return float(np.sum(np.abs(values_of(u)) ** p * mass) ** (1 / p))


def _fft(u: np.ndarray, N: int) -> np.ndarray:
    return np.fft.fftn(u, axes=tuple(range(N)))


def _ifft(u: np.ndarray, N: int) -> np.ndarray:
    return np.fft.ifftn(u, axes=tuple(range(N)))


def apply_L_hat(cfg: HalfSpaceConfig, uh: np.ndarray) -> np.ndarray:
    """L applied mode by mode to Fourier coefficients (last axis is y)."""
    Bu = cfg.B.matvec(uh)
    Du = cfg.D.matvec(uh)
    return Bu - cfg.xi_sq()[..., None] * uh + 2j * cfg.a_dot_xi()[..., None] * Du


def apply_L(cfg: HalfSpaceConfig, u) -> np.ndarray:
    u = values_of(u)
    if u.shape != cfg.shape:
        raise ValueError(f"expected shape {cfg.shape}, got {u.shape}")
    return _ifft(apply_L_hat(cfg, _fft(u, cfg.N)), cfg.N)


def _mode_banded(cfg: HalfSpaceConfig, lam: complex, idx: tuple) -> np.ndarray:
    q = cfg.xi_sq()[idx]
    s = cfg.a_dot_xi()[idx]
    op = cfg.B.shifted(shift=-q)
    if s != 0:
        op = op + cfg.D.shifted(scale=2j * s)
    return op.banded(lam)


def _solve_hat(cfg: HalfSpaceConfig, lam: complex, fh: np.ndarray, skip_zero: bool = False) -> np.ndarray:
    uh = np.zeros_like(fh, dtype=complex)
    for idx in np.ndindex(*cfg.shape[:-1]):
        if skip_zero and not any(idx):
            continue
        uh[idx] = sla.solve_banded((1, 1), _mode_banded(cfg, lam, idx), fh[idx])
    return uh


def elliptic_solve(cfg: HalfSpaceConfig, lam: complex, f, project_zero_mode: bool = False) -> np.ndarray:
    """Solve (lam - L) u = f by FFT in x and banded solves in y."""
    lam = complex(lam)
    half = np.pi - cfg.a.omega
    if not (lam.real > 0 or in_sector(lam, half)):
        raise ValueError(f"lambda={lam} outside the admissible sector")
    f = values_of(f)
    fh = _fft(f.astype(complex), cfg.N)
    if project_zero_mode:
        fh[(0,) * cfg.N] = 0.0
    return _ifft(_solve_hat(cfg, lam, fh, skip_zero=project_zero_mode), cfg.N)


def residual(cfg: HalfSpaceConfig, lam: complex, u, f) -> float:
    r = lam * values_of(u) - apply_L(cfg, u) - values_of(f)
    return float(np.linalg.norm(r) / np.linalg.norm(values_of(f)))


# -- regularity -----------------------------------------------------------------

@dataclass
class RegularityReport:
    params: dict
    norms: dict            # piece -> list of norms per probe
    Lu_norms: list
    ratios: dict           # piece -> max ratio over the batch

    @property
    def max_ratio(self) -> float:
        return max(self.ratios.values())

    def to_dict(self) -> dict:
        return {"params": self.params, "ratios": self.ratios, "max_ratio": self.max_ratio}


def second_derivatives(cfg: HalfSpaceConfig, u) -> dict:
    """All pieces of the W^{2,p}_{m,N} seminorm as physical-space arrays."""
    u = values_of(u)
    uh = _fft(u.astype(complex), cfg.N)
    N = cfg.N
    y = cfg.grid.nodes
    Duh = cfg.D.matvec(uh)
    out = {}
    for i in range(N):
        for j in range(i, N):
            xi_i = cfg.xi[..., i] if i == j else cfg.xi_odd[..., i]
            xi_j = cfg.xi[..., j] if i == j else cfg.xi_odd[..., j]
            out[f"D_x{i}x{j}"] = _ifft(-(xi_i * xi_j)[..., None] * uh, N)
        out[f"D_x{i}y"] = _ifft(1j * cfg.xi_odd[..., i][..., None] * Duh, N)
    Du = _ifft(Duh, N)
    Bu = _ifft(cfg.B.matvec(uh), N)
    out["y^-1 D_y"] = Du / y
    out["D_yy"] = Bu - cfg.c * Du / y
    return out


def regularity_ratios(cfg: HalfSpaceConfig, fs, lam: float = 1e-6) -> RegularityReport:
    """Solve L u = f (surrogate lam - L with small lam, zero mode removed) and
    compare every second-order piece of u with ||L u|| in L^p_m."""
    if len(fs) < 16:
        raise ValueError("need a batch of at least 16 probes")
    norms: dict = {}
    Lu_norms = []
    for f in fs:
        u = -elliptic_solve(cfg, lam, f, project_zero_mode=True)
        Lu = apply_L(cfg, u)
        nLu = cfg.norm(Lu)
        Lu_norms.append(nLu)
        for k, v in second_derivatives(cfg, u).items():
            norms.setdefault(k, []).append(cfg.norm(v))
    ratios = {k: float(max(n / d for n, d in zip(v, Lu_norms))) for k, v in norms.items()}
    params = {"c": cfg.c, "a": list(cfg.a.a), "m": cfg.m, "p": cfg.p, "J": cfg.grid.J,
              "n_x": cfg.n_x, "lambda": lam}
    return RegularityReport(params, norms, Lu_norms, ratios)


def mean_free(cfg: HalfSpaceConfig, f) -> np.ndarray:
    f = values_of(f)
    return f - f.mean(axis=tuple(range(cfg.N)), keepdims=True)


# -- parabolic --------------------------------------------------------------------

@dataclass
class Trajectory:
    times: np.ndarray
    u: np.ndarray          # (steps+1,) + shape
    du_dt: np.ndarray      # (steps,) + shape, at midpoints
    Lu: np.ndarray         # (steps,) + shape, at midpoints
    f_mid: np.ndarray      # (steps,) + shape
    u0_zero: bool = True

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


def parabolic_solve(cfg: HalfSpaceConfig, u0, f: Callable[[float], np.ndarray] | None, T: float,
                    steps: int, scheme: str = "crank_nicolson") -> Trajectory:
    """Crank-Nicolson (or backward Euler) per x-frequency for u' = L u + f."""
    if steps < 2:
        raise ValueError("need at least 2 steps")
    theta = {"crank_nicolson": 0.5, "backward_euler": 1.0}.get(scheme)
    if theta is None:
        raise ValueError(f"unknown scheme {scheme!r}")
    dt = T / steps
    N = cfg.N
    uh = _fft(values_of(u0).astype(complex), N)
    modes = list(np.ndindex(*cfg.shape[:-1]))
    ab = {idx: _mode_banded(cfg, 1.0 / (theta * dt), idx) for idx in modes}
    times = np.linspace(0.0, T, steps + 1)
    us = [_ifft(uh, N)]
    dts, Lus, fms = [], [], []
    Luh = apply_L_hat(cfg, uh)
    for n in range(steps):
        tm = times[n] + 0.5 * dt
        fm = np.zeros(cfg.shape) if f is None else values_of(f(tm))
        fmh = _fft(fm.astype(complex), N)
        rhs = (uh + (1 - theta) * dt * Luh + dt * fmh) / (theta * dt)
        new = np.empty_like(uh)
        for idx in modes:
            new[idx] = sla.solve_banded((1, 1), ab[idx], rhs[idx])
        Lnew = apply_L_hat(cfg, new)
        dts.append(_ifft((new - uh) / dt, N))
        Lus.append(_ifft(0.5 * (Lnew + Luh), N))
        fms.append(fm)
        uh, Luh = new, Lnew
        us.append(_ifft(uh, N))
    return Trajectory(times, np.array(us), np.array(dts), np.array(Lus), np.array(fms),
                      u0_zero=not np.any(values_of(u0)))


def _lp_time(cfg: HalfSpaceConfig, series: np.ndarray, dt: float) -> float:
    """(trapezoid over the midpoint samples of ||.||^p)^{1/p}."""
    vals = np.array([cfg.norm(s) ** cfg.p for s in series])
    total = dt * (vals.sum() - 0.5 * (vals[0] + vals[-1])) if len(vals) > 1 else dt * vals[0]
    return float(total ** (1 / cfg.p))


def maxreg_ratio(cfg: HalfSpaceConfig, traj: Trajectory) -> float:
    """(||D_t u|| + ||L u||) / ||f|| in L^p(0,T; L^p_m)."""
    if not traj.u0_zero:
        raise ValueError("maximal regularity ratio requires zero initial data")
    dt = traj.dt
    den = _lp_time(cfg, traj.f_mid, dt)
    if den == 0:
        raise ValueError("f vanishes identically")
    return (_lp_time(cfg, traj.du_dt, dt) + _lp_time(cfg, traj.Lu, dt)) / den


def duhamel_reference(cfg: HalfSpaceConfig, phi, t: float) -> np.ndarray:
    """Exact u(t) for u' = L u + e^{-s} phi, u(0) = 0, per mode:
    u(t) = (I + L)^{-1} (e^{tL} phi - e^{-t} phi)."""
    N = cfg.N
    ph = _fft(values_of(phi).astype(complex), N)
    out = np.zeros_like(ph)
    s = np.sqrt(cfg.B.mass)
    for idx in np.ndindex(*cfg.shape[:-1]):
        if not np.any(ph[idx]):
            continue
        q = cfg.xi_sq()[idx]
        a_xi = cfg.a_dot_xi()[idx]
        op = cfg.B.shifted(shift=-q)
        if a_xi != 0:
            op = op + cfg.D.shifted(scale=2j * a_xi)
        S = (s[:, None] * op.dense()) / s[None, :]
        E = sla.expm(t * S)
        g = E @ (s * ph[idx]) / s - np.exp(-t) * ph[idx]
        out[idx] = sla.solve_banded((1, 1), op.banded(-1.0), -g)
    return _ifft(out, N)


# -- form sectoriality ---------------------------------------------------------------

@dataclass
class SectorialityReport:
    a_norm: float
    re: np.ndarray
    im: np.ndarray
    energy: np.ndarray
    accretive_margin: float    # min (Re a - (1-|a|) E) / E
    sector_margin: float       # min ((|a|/(1-|a|)) Re a - |Im a|) / Re a
    max_abs_im: float

    @property
    def passed(self) -> bool:
        return self.accretive_margin >= -1e-12 and self.sector_margin >= -1e-12

    def to_dict(self) -> dict:
        return {"a_norm": self.a_norm, "accretive_margin": self.accretive_margin,
                "sector_margin": self.sector_margin, "max_abs_im": self.max_abs_im,
                "n_probes": int(len(self.re)), "passed": self.passed}


def form_pieces(cfg: HalfSpaceConfig, u) -> tuple[complex, float, float]:
    """Discrete a(u,u), ||grad_x u||^2_c and ||D_y u||^2_c.

    All terms live on the segments between consecutive nodes (plus [0, y_1]
    where the probe is flat and [y_J, Y_max] towards the zero ghost) with the
    exact y^c mass of each segment, so Cauchy-Schwarz holds exactly.
    """
    u = values_of(u).astype(complex)
    N = cfg.N
    grid = cfg.grid
    uh = _fft(u, N)
    gx = [_ifft(1j * cfg.xi_odd[..., i][..., None] * uh, N) for i in range(N)]
    pts = np.concatenate([[0.0], grid.nodes, [grid.Y_max]])
    F = pts ** (cfg.c + 1) / (cfg.c + 1)
    w = np.diff(F) * cfg.dx ** N  # J+1 segments
    zero = np.zeros(u.shape[:-1] + (1,))
    ue = np.concatenate([u, zero], axis=-1)
    Dy = np.concatenate([zero, np.diff(ue, axis=-1) / np.diff(pts[1:])], axis=-1)

    def seg_avg(v):
        ve = np.concatenate([v[..., :1], v, zero], axis=-1)
        return 0.5 * (ve[..., :-1] + ve[..., 1:])

    gxs = [seg_avg(g) for g in gx]
    grad2 = float(sum(np.sum(np.abs(g) ** 2 * w) for g in gxs))
    dy2 = float(np.sum(np.abs(Dy) ** 2 * w))
    cross = complex(sum(2 * cfg.a.vec[i] * np.sum(Dy * np.conj(gxs[i]) * w) for i in range(N)))
    return grad2 + dy2 + cross, grad2, dy2


def form_sectoriality_check(cfg: HalfSpaceConfig, probes) -> SectorialityReport:
    r = cfg.a.norm
    re, im, en = [], [], []
    for u in probes:
        a_uu, g2, d2 = form_pieces(cfg, u)
        re.append(a_uu.real)
        im.append(a_uu.imag)
        en.append(g2 + d2)
    re, im, en = map(np.array, (re, im, en))
    acc = float(np.min((re - (1 - r) * en) / en))
    sec = float(np.min(((r / (1 - r)) * re - np.abs(im)) / re))
    return SectorialityReport(r, re, im, en, acc, sec, float(np.max(np.abs(im))))


def equality_probe(cfg: HalfSpaceConfig, k: int = 4, support: float | None = None) -> np.ndarray:
    """u = exp(i k (e.x - y)) chi(y) with e = a/|a|; Re a(u,u)/E -> 1 - |a| as k grows."""
    from .weighted_grid import smooth_step, torus_axis
    xs = torus_axis(cfg.n_x, cfg.period)
    X = np.meshgrid(*([xs] * cfg.N), indexing="ij")
    e = cfg.a.vec / cfg.a.norm if cfg.a.norm > 0 else np.eye(cfg.N)[0]
    kk = k * 2 * np.pi / cfg.period
    y = cfg.grid.nodes
    R = support or 0.5 * cfg.grid.Y_max
    chi = smooth_step((y - 0.05 * R) / (0.95 * R))
    phase = sum(e[i] * X[i] for i in range(cfg.N))
    return np.exp(1j * kk * (phase[..., None] - y)) * chi
