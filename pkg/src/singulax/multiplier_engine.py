"""Frequency-side machinery: Q_a, the resolvent symbol, its xi-derivatives and
Mikhlin-type scans.

For a frequency xi the half-space operator reduces to the 1D operator

    L_xi = B + 2i (a.xi) D_y - |xi|^2,

so that ``lambda - L_xi = lambda + Q_a(xi) - L_{2a.xi}``.  The discrete version
uses the flux-form B_h and the three-point D_h; differentiating
``(lambda + |xi|^2 - B_h - 2i(a.xi) D_h)^{-1}`` in xi then gives the product
formula exactly at the discrete level.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla

from .bessel_core import (DiscreteOperator1D, S_alpha_beta_matrix, _log_trapezoid_weights,
                          assemble_bessel, derivative_stencil, _check_c)
from .weighted_grid import RadialGrid, WeightedMeasure, values_of, weighted_norm


@dataclass(frozen=True)
class AnisotropyVector:
    a: tuple

    def __post_init__(self):
        v = np.asarray(self.a, dtype=float)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError("a must be a finite vector")
        if np.linalg.norm(v) >= 1:
            raise ValueError(f"|a| must be < 1, got {np.linalg.norm(v)}")
        object.__setattr__(self, "a", tuple(float(x) for x in v))

    @property
    def vec(self) -> np.ndarray:
        return np.asarray(self.a)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.vec))

    @property
    def N(self) -> int:
        return len(self.a)

    def theta(self, delta: float) -> float:
        """theta_delta = arctan(|a| / sqrt(delta^2 - |a|^2)) for |a| <= delta <= 1."""
        r = self.norm
        if not (r <= delta <= 1):
            raise ValueError("need |a| <= delta <= 1")
        if delta == r:
            return math.pi / 2
        return math.atan(r / math.sqrt(delta * delta - r * r))

    @property
    def omega(self) -> float:
        return self.theta(1.0)


def _as_vec(x, N: int | None = None) -> np.ndarray:
    v = np.atleast_1d(np.asarray(x, dtype=float))
    if N is not None and v.size != N:
        raise ValueError(f"expected a {N}-vector")
    return v


def quadratic_form_Qa(a, xi) -> float:
    av = a.vec if isinstance(a, AnisotropyVector) else _as_vec(a)
    if np.linalg.norm(av) >= 1:
        raise ValueError("|a| must be < 1")
    x = _as_vec(xi, av.size)
    return float(x @ x - (av @ x) ** 2)


def mode_operator(grid: RadialGrid, c: float, a, xi) -> DiscreteOperator1D:
    """L_xi = B_h + 2i(a.xi) D_h - |xi|^2 on one frequency."""
    av = a.vec if isinstance(a, AnisotropyVector) else _as_vec(a)
    x = _as_vec(xi, av.size)
    B = assemble_bessel(grid, c)
    op = B.shifted(shift=-(x @ x))
    s = av @ x
    if s != 0:
        op = op + derivative_stencil(grid).shifted(scale=2j * s)
    return DiscreteOperator1D(grid, float(c), op.lower, op.diag, op.upper,
                              meta={"kind": "L_xi", "xi": tuple(x), "a": tuple(av)})


def in_sector(lam: complex, half_angle: float) -> bool:
    lam = complex(lam)
    return lam != 0 and abs(np.angle(lam)) < half_angle


@dataclass
class ResolventSymbol:
    """R_lambda(xi) = (lambda + Q_a(xi) - L_{2a.xi})^{-1} on one grid."""

    lam: complex
    xi: np.ndarray
    a: AnisotropyVector
    c: float
    grid: RadialGrid
    op: DiscreteOperator1D = field(init=False, repr=False)
    D: DiscreteOperator1D = field(init=False, repr=False)
    _dense: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.xi = _as_vec(self.xi, self.a.N)
        self.op = mode_operator(self.grid, self.c, self.a, self.xi)
        self.D = derivative_stencil(self.grid)
        self._ab = self.op.banded(self.lam)

    def apply(self, f) -> np.ndarray:
        return sla.solve_banded((1, 1), self._ab, values_of(f))

    def apply_Dy(self, f) -> np.ndarray:
        return self.D.matvec(self.apply(f).T).T if np.ndim(f) > 1 else self.D.matvec(self.apply(f))

    def residual(self, u, f) -> float:
        u, f = values_of(u), values_of(f)
        r = self.lam * u - self.op.matvec(u) - f
        return float(np.linalg.norm(r) / np.linalg.norm(f))

    def dense(self) -> np.ndarray:
        if self._dense is None:
            self._dense = self.apply(np.eye(self.grid.J, dtype=complex))
        return self._dense

    def D_dense(self) -> np.ndarray:
        return self.D.dense()


def resolvent_symbol(lam: complex, xi, a, c: float, grid: RadialGrid) -> ResolventSymbol:
    _check_c(c)
    av = a if isinstance(a, AnisotropyVector) else AnisotropyVector(tuple(_as_vec(a)))
    lam = complex(lam)
    if not in_sector(lam, math.pi - av.omega):
        raise ValueError(f"lambda={lam} outside the sector |arg| < pi - omega_a")
    return ResolventSymbol(lam, xi, av, float(c), grid)


def _factor(R: ResolventSymbol, j: int) -> np.ndarray:
    """Dense F_j = 2i a_j D_h - 2 xi_j."""
    F = 2j * R.a.vec[j] * R.D_dense()
    F[np.diag_indices_from(F)] -= 2 * R.xi[j]
    return F


def _alpha_dirs(alpha) -> list[int]:
    al = tuple(int(v) for v in alpha)
    if any(v not in (0, 1) for v in al):
        raise ValueError("alpha must be a multi-index in {0,1}^N")
    return [j for j, v in enumerate(al) if v]


def symbol_derivative(alpha, R: ResolventSymbol, with_Dy: bool = False) -> np.ndarray:
    """Dense D^alpha_xi R (or D^alpha_xi D_y R) via the permutation product formula.

    D^alpha R = sum over orderings (j_1..j_n) of R F_{j_1} R F_{j_2} ... F_{j_n} R
    with F_j = 2i a_j D_y - 2 xi_j.
    """
    dirs = _alpha_dirs(alpha)
    if len(dirs) > 0 and not np.any(R.xi):
        raise ValueError("xi must be nonzero")
    Rd = R.dense()
    if not dirs:
        out = Rd
    else:
        F = {j: _factor(R, j) for j in dirs}
        out = np.zeros_like(Rd)
        for perm in itertools.permutations(dirs):
            term = Rd
            for j in perm:
                term = term @ F[j] @ Rd
            out = out + term
    return R.D_dense() @ out if with_Dy else out


def symbol_derivative_fd(alpha, lam, xi, a, c, grid, h_rel: float = 1e-4,
                         with_Dy: bool = False) -> np.ndarray:
    """Central (nested for |alpha|=2) finite differences in xi of R or D_y R."""
    dirs = _alpha_dirs(alpha)
    xi = _as_vec(xi)
    h = h_rel * np.linalg.norm(xi)

    def ev(x):
        R = ResolventSymbol(complex(lam), x, a if isinstance(a, AnisotropyVector) else AnisotropyVector(tuple(a)), c, grid)
        M = R.dense()
        return R.D_dense() @ M if with_Dy else M

    def rec(x, remaining):
        if not remaining:
            return ev(x)
        j, rest = remaining[0], remaining[1:]
        e = np.zeros_like(x)
        e[j] = h
        return (rec(x + e, rest) - rec(x - e, rest)) / (2 * h)

    return rec(xi, dirs)


# -- Mikhlin families --------------------------------------------------------

TARGETS = ("lambda_R", "xisq_R", "xi_Dy_R")


def family_derivative(target: str, alpha, R: ResolventSymbol, component: int = 0) -> np.ndarray:
    """Dense xi^alpha D^alpha_xi M(xi) for the three multiplier families."""
    dirs = _alpha_dirs(alpha)
    xa = float(np.prod(R.xi[dirs])) if dirs else 1.0
    if target == "lambda_R":
        M = R.lam * symbol_derivative(alpha, R)
    elif target == "xisq_R":
        # D^alpha(|xi|^2 R) for distinct directions
        q = float(R.xi @ R.xi)
        M = q * symbol_derivative(alpha, R)
        for j in dirs:
            sub = tuple(1 if (k in dirs and k != j) else 0 for k in range(R.a.N))
            M = M + 2 * R.xi[j] * symbol_derivative(sub, R)
    elif target == "xi_Dy_R":
        k = component
        M = R.xi[k] * symbol_derivative(alpha, R, with_Dy=True)
        if k in dirs:
            sub = tuple(1 if (i in dirs and i != k) else 0 for i in range(R.a.N))
            M = M + symbol_derivative(sub, R, with_Dy=True)
    else:
        raise ValueError(f"unknown target {target!r}")
    return xa * M


def operator_norm_p2(A: np.ndarray, weight: np.ndarray) -> float:
    """Exact ||A|| on L^2(weight): largest singular value of W^{1/2} A W^{-1/2}."""
    s = np.sqrt(weight)
    G = (s[:, None] * A) / s[None, :]
    return float(sla.svdvals(G, check_finite=False)[0])


def operator_norm_probes(A: np.ndarray, grid: RadialGrid, probes: np.ndarray, m: float,
                         p: float) -> float:
    """Lower bound max_f ||Af||/||f|| over the probe columns."""
    mass = WeightedMeasure.on(grid, m).cell_mass
    Af = A @ probes
    num = (np.abs(Af) ** p * mass[:, None]).sum(axis=0) ** (1 / p)
    den = (np.abs(probes) ** p * mass[:, None]).sum(axis=0) ** (1 / p)
    return float(np.max(num / den))


def check_admissible(m: float, p: float, c: float) -> None:
    if not (p >= 1 and np.isfinite(p)):
        raise ValueError("p must be finite and >= 1")
    r = (m + 1) / p
    if not (0 < r < c + 1):
        raise ValueError(f"inadmissible parameters: need 0 < (m+1)/p < c+1, got (m+1)/p={r}, c+1={c + 1}")


@dataclass
class ScanPoint:
    lam: complex
    xi: tuple
    alpha: tuple
    norm_estimate: float


@dataclass
class SymbolScanReport:
    target: str
    c: float
    a: tuple
    p: float
    m: float
    points: list
    sup: float
    sup_coarse: float | None = None
    exact: bool = True
    J: tuple = ()

    @property
    def stability_ratio(self) -> float | None:
        if self.sup_coarse is None:
            return None
        return self.sup / self.sup_coarse

    def to_dict(self) -> dict:
        return {"target": self.target, "c": self.c, "a": list(self.a), "p": self.p, "m": self.m,
                "sup": self.sup, "sup_coarse": self.sup_coarse,
                "stability_ratio": self.stability_ratio, "estimator":
                "svd_exact" if self.exact else "probe_lower_bound",
                "n_points": len(self.points), "J": list(self.J)}

    def to_csv(self, path) -> None:
        import csv
        N = len(self.a)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["re_lambda", "im_lambda"] + [f"xi{k}" for k in range(N)] + ["alpha", "norm_estimate"])
            for pt in self.points:
                w.writerow([repr(pt.lam.real), repr(pt.lam.imag)] + [repr(float(v)) for v in pt.xi]
                           + ["".join(str(v) for v in pt.alpha), repr(pt.norm_estimate)])


def lambda_lattice(a: AnisotropyVector, n_mod: int = 16, n_arg: int = 5,
                   mod_range=(1e-2, 1e2), margin_deg: float = 5.0, delta: float = 1.0) -> list[complex]:
    """Moduli log-spaced; arguments from 0 up to the sector edge minus a margin."""
    edge = math.pi - a.theta(max(delta, a.norm)) - math.radians(margin_deg)
    args = np.linspace(0.0, edge, n_arg)
    return [complex(r * np.exp(1j * t)) for r in np.geomspace(*mod_range, n_mod) for t in args]


def xi_lattice(N: int, n_mod: int = 24, n_dir: int = 8, mod_range=(1e-2, 1e2)) -> list[np.ndarray]:
    if N == 1:
        dirs = [np.array([1.0]), np.array([-1.0])][:max(1, min(n_dir, 2))]
    else:
        ang = np.arange(n_dir) * 2 * np.pi / n_dir + np.pi / (2 * n_dir)
        dirs = [np.array([np.cos(t), np.sin(t)]) for t in ang]
    return [r * d for r in np.geomspace(*mod_range, n_mod) for d in dirs]


def _scan_grid(targets, a, c, p, m, grid, lams, xis, probes):
    weight = WeightedMeasure.on(grid, m).cell_mass
    alphas = list(itertools.product((0, 1), repeat=a.N))
    pts = {t: [] for t in targets}
    for lam in lams:
        for xi in xis:
            R = ResolventSymbol(lam, xi, a, c, grid)
            for al in alphas:
                for target in targets:
                    comps = range(a.N) if target == "xi_Dy_R" else [0]
                    best = 0.0
                    for k in comps:
                        A = family_derivative(target, al, R, component=k)
                        if p == 2:
                            val = operator_norm_p2(A, weight)
                        else:
                            val = operator_norm_probes(A, grid, probes, m, p)
                        best = max(best, val)
                    pts[target].append(ScanPoint(complex(lam), tuple(float(v) for v in xi), al, best))
    return pts


def mikhlin_scan_families(targets, a, c: float, p: float, m: float, grids: Sequence[RadialGrid],
                          lams=None, xis=None, seed: int = 0,
                          n_probes: int = 32) -> dict[str, SymbolScanReport]:
    """Scan several multiplier families sharing one resolvent per lattice point.

    With two grids the last one is the fine grid and sup(fine)/sup(coarse)
    is the stability ratio.  For p != 2 the norms are lower bounds from
    ``n_probes`` seeded core-function probes; for p = 2 they are exact.
    """
    for t in targets:
        if t not in TARGETS:
            raise ValueError(f"unknown target {t!r}")
    _check_c(c)
    check_admissible(m, p, c)
    av = a if isinstance(a, AnisotropyVector) else AnisotropyVector(tuple(_as_vec(a)))
    lams = lambda_lattice(av) if lams is None else lams
    for lam in lams:
        if not in_sector(lam, math.pi - av.omega):
            raise ValueError(f"lambda={lam} violates the sector condition")
    xis = xi_lattice(av.N) if xis is None else xis
    for xi in xis:
        if not np.any(_as_vec(xi)):
            raise ValueError("xi = 0 is excluded from scan lattices")
    sups = {t: [] for t in targets}
    last = None
    for grid in grids:
        probes = None
        if p != 2:
            from .weighted_grid import random_core_functions
            rng = np.random.default_rng(seed)
            probes = np.stack([values_of(f) for f in random_core_functions(
                rng, grid, n_probes, complex_valued=True)], axis=1)
        last = _scan_grid(targets, av, c, p, m, grid, lams, xis, probes)
        for t in targets:
            sups[t].append(max(pt.norm_estimate for pt in last[t]))
    return {t: SymbolScanReport(t, float(c), av.a, float(p), float(m), last[t], sups[t][-1],
                                sups[t][0] if len(sups[t]) > 1 else None, exact=(p == 2),
                                J=tuple(g.J for g in grids)) for t in targets}


def mikhlin_scan(target: str, a, c: float, p: float, m: float, grids: Sequence[RadialGrid],
                 lams=None, xis=None, seed: int = 0, n_probes: int = 32) -> SymbolScanReport:
    """Sup of ||xi^alpha D^alpha M(xi)|| on L^p_m over the (lambda, xi, alpha) lattice."""
    return mikhlin_scan_families([target], a, c, p, m, grids, lams, xis, seed, n_probes)[target]


def selfadjoint_oracle(lam: complex, xi, grid: RadialGrid, c: float) -> float:
    """sup over the spectrum mu <= 0 of B_h of |lam| / |lam + |xi|^2 - mu|."""
    mu = np.linalg.eigvalsh(assemble_bessel(grid, c).symmetrized())
    x = _as_vec(xi)
    return float(np.max(abs(lam) / np.abs(lam + x @ x - mu)))


# -- Gamma / Psi domination ---------------------------------------------------

def gamma_psi_matrices(grid: RadialGrid, c: float, lam: float, kappa: float = 4.0,
                       times=None) -> tuple[np.ndarray, np.ndarray]:
    """Dense Gamma(lam), Psi(lam) on the grid (acting on nodal values)."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    from .bessel_core import GAMMA_T
    times = GAMMA_T if times is None else times
    w = _log_trapezoid_weights(times)
    G = np.zeros((grid.J, grid.J))
    P = np.zeros_like(G)
    for t, wt in zip(times, w):
        e = np.exp(-lam * t) * wt
        if e < 1e-300:
            continue
        S = S_alpha_beta_matrix(grid, t, 0.0, -c, kappa)
        G += e * S
        P += e * S / np.sqrt(t)
    return G, P


def domination_constant(R: ResolventSymbol, probes: np.ndarray, k: float = 0.5,
                        kappa: float = 4.0, derivative: bool = False) -> float:
    """max over nodes and probes of |R f| / (Gamma(k(|lam|+|xi|^2)) |f|).

    With ``derivative`` the numerator is |D_y R f| and Psi replaces Gamma.
    """
    mu = k * (abs(R.lam) + float(R.xi @ R.xi))
    G, P = gamma_psi_matrices(R.grid, R.c, mu, kappa)
    comp = P if derivative else G
    Rf = R.apply(probes)
    num = np.abs(R.D.matvec(Rf.T).T if derivative else Rf)
    den = comp @ np.abs(probes)
    mask = den > 1e-14 * den.max()
    return float(np.max(num[mask] / den[mask]))


# -- Laplace representation and square functions ------------------------------

def laplace_resolvent(lam: float, xi, a, c: float, grid: RadialGrid, f,
                      s_range=(-25.0, 8.0), n: int = 1200) -> np.ndarray:
    """int_0^inf e^{-lam t} e^{t L_xi} f dt by the trapezoid rule in log t."""
    op = mode_operator(grid, c, a, xi)
    sM = np.sqrt(op.mass)
    S = (sM[:, None] * op.dense()) / sM[None, :]
    w, V = sla.eig(S)
    g = sla.solve(V, sM * values_of(f))
    ts = np.exp(np.linspace(*s_range, n))
    wts = _log_trapezoid_weights(ts)
    coef = (np.exp(np.outer(ts, w - lam)) * wts[:, None]).sum(axis=0)
    return (V @ (coef * g)) / sM


def square_function_ratio(ops: Sequence[Callable | np.ndarray], fs, grid: RadialGrid,
                          p: float, m: float) -> float:
    if len(ops) != len(fs):
        raise ValueError("operator and probe families must have the same length")
    if len(ops) > 64:
        raise ValueError("at most 64 family members")
    outs, ins = [], []
    for S, f in zip(ops, fs):
        f = values_of(f)
        ins.append(f)
        outs.append(S @ f if isinstance(S, np.ndarray) else S(f))
    num = weighted_norm(np.sqrt(sum(np.abs(o) ** 2 for o in outs)), m, p, grid)
    den = weighted_norm(np.sqrt(sum(np.abs(i) ** 2 for i in ins)), m, p, grid)
    if den == 0:
        raise ValueError("zero denominator")
    return num / den
