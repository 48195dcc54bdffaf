"""General constant coefficients and oblique boundary conditions.

Operator: ``Tr(Q D^2 u) + (b.grad_x u + c D_y u) / y`` with
``Q = [[Q1, q], [q^T, gamma]]`` positive definite and ``c != 0`` (b = 0 gives
the Neumann case with drift c/y).

* The change of variables ``x' = S x``, ``S = sqrt(gamma) Q1^{-1/2}``, turns
  ``Tr(Q D^2) + (c/y) D_y`` into ``gamma (Delta' + 2 a.grad' D_y + B^{c/gamma})``
  with ``a = Q1^{-1/2} q / sqrt(gamma)``.  Per Fourier mode this means
  ``xi' = S^{-1} xi`` and an overall factor gamma.
* The shear ``T u(x, y) = u(x - (b/c) y, y)`` conjugates the oblique operator
  to ``Tr(Qt D^2) + (c/y) D_y`` with Neumann condition, where
  ``Qt = M Q M^T`` and ``M = [[I, -b/c], [0, 1]]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .bessel_core import assemble_bessel, derivative_stencil
from .multiplier_engine import AnisotropyVector, check_admissible
from .weighted_grid import RadialGrid, WeightedMeasure, values_of


@dataclass(frozen=True)
class GeneralCoefficients:
    Q1: np.ndarray
    q: np.ndarray
    gamma: float
    b: np.ndarray
    c: float

    @classmethod
    def make(cls, Q1, q, gamma, b=None, c=1.0) -> "GeneralCoefficients":
        Q1 = np.atleast_2d(np.asarray(Q1, dtype=float))
        N = Q1.shape[0]
        q = np.atleast_1d(np.asarray(q, dtype=float))
        b = np.zeros(N) if b is None else np.atleast_1d(np.asarray(b, dtype=float))
        if Q1.shape != (N, N) or q.shape != (N,) or b.shape != (N,):
            raise ValueError("inconsistent coefficient shapes")
        if not np.allclose(Q1, Q1.T):
            raise ValueError("Q1 must be symmetric")
        return cls(Q1, q, float(gamma), b, float(c))

    @classmethod
    def from_matrix(cls, Q, b=None, c=1.0) -> "GeneralCoefficients":
        Q = np.asarray(Q, dtype=float)
        return cls.make(Q[:-1, :-1], Q[:-1, -1], Q[-1, -1], b, c)

    @property
    def N(self) -> int:
        return self.Q1.shape[0]

    @property
    def Q(self) -> np.ndarray:
        N = self.N
        out = np.empty((N + 1, N + 1))
        out[:N, :N] = self.Q1
        out[:N, N] = self.q
        out[N, :N] = self.q
        out[N, N] = self.gamma
        return out

    @property
    def schur(self) -> float:
        return float(self.gamma - self.q @ np.linalg.solve(self.Q1, self.q))

    def check_positive_definite(self) -> None:
        Q = self.Q
        for k in range(1, Q.shape[0] + 1):
            minor = float(np.linalg.det(Q[:k, :k]))
            if not minor > 0:
                raise ValueError(f"Q is not positive definite: leading minor of order {k} is {minor:.6g}")


@dataclass(frozen=True)
class ReductionResult:
    S: np.ndarray
    a: AnisotropyVector
    c_reduced: float
    gamma: float

    def to_dict(self) -> dict:
        return {"S": self.S.tolist(), "a": list(self.a.a), "c_reduced": self.c_reduced,
                "gamma": self.gamma}


def _sym_sqrt_inv(A: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(A)
    return (V / np.sqrt(w)) @ V.T


def reduce_general_Q(coeffs: GeneralCoefficients, c: float | None = None) -> ReductionResult:
    """Change of x variables reducing Tr(QD^2) + (c/y)D_y to the model form."""
    coeffs.check_positive_definite()
    c = coeffs.c if c is None else c
    g = coeffs.gamma
    Qih = _sym_sqrt_inv(coeffs.Q1)
    S = np.sqrt(g) * Qih
    a = Qih @ coeffs.q / np.sqrt(g)
    a2 = float(coeffs.q @ np.linalg.solve(coeffs.Q1, coeffs.q) / g)
    if not a2 < 1:
        raise ValueError(f"reduced anisotropy |a|^2 = {a2} is not < 1")
    return ReductionResult(S, AnisotropyVector(tuple(a)), c / g, g)


def tilde_Q(coeffs: GeneralCoefficients, minus_sign: bool = False) -> np.ndarray:
    """M Q M^T with the shear Jacobian M = [[I, -b/c], [0, 1]].

    ``minus_sign=True`` flips the sign of the (gamma/c^2) b b^T term; that
    variant exists only to compare the two signs in the operator identity check.
    """
    if coeffs.c == 0:
        raise ValueError("oblique vector needs c != 0")
    coeffs.check_positive_definite()
    N = coeffs.N
    M = np.eye(N + 1)
    M[:N, N] = -coeffs.b / coeffs.c
    Qt = M @ coeffs.Q @ M.T
    if minus_sign:
        Qt[:N, :N] -= 2 * coeffs.gamma / coeffs.c**2 * np.outer(coeffs.b, coeffs.b)
    return 0.5 * (Qt + Qt.T)


# -- discrete shear on the torus -------------------------------------------------

@dataclass
class TorusGrid:
    grid: RadialGrid
    n_x: int
    period: float
    N: int = 1

    @property
    def xi(self) -> np.ndarray:
        k = np.fft.fftfreq(self.n_x, d=self.period / (2 * np.pi * self.n_x))
        return np.stack(np.meshgrid(*([k] * self.N), indexing="ij"), axis=-1)

    @property
    def shape(self) -> tuple:
        return (self.n_x,) * self.N + (self.grid.J,)

    @property
    def dx(self) -> float:
        return self.period / self.n_x

    def norm(self, u, m: float, p: float = 2.0) -> float:
        mass = WeightedMeasure.on(self.grid, m).cell_mass * self.dx ** self.N
        return float(np.sum(np.abs(values_of(u)) ** p * mass) ** (1 / p))


def _axes(N: int) -> tuple:
    return tuple(range(N))


def oblique_shear(u, tg: TorusGrid, b, c: float, direction: str = "forward",
                  max_support_fraction: float | None = None) -> np.ndarray:
    """T u(x, y) = u(x - (b/c) y, y) as an exact Fourier phase per y-slice."""
    if c == 0:
        raise ValueError("oblique vector needs c != 0")
    if direction not in ("forward", "inverse"):
        raise ValueError("direction must be 'forward' or 'inverse'")
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if max_support_fraction is not None:
        shift = np.max(np.abs(b / c)) * tg.grid.Y_max
        if shift > max_support_fraction * tg.period:
            raise ValueError("shear displacement too large relative to the period")
    sign = -1.0 if direction == "forward" else 1.0
    uh = np.fft.fftn(values_of(u), axes=_axes(tg.N))
    phase = np.exp(sign * 1j * (tg.xi @ (b / c))[..., None] * tg.grid.nodes)
    return np.fft.ifftn(uh * phase, axes=_axes(tg.N))


# -- per-mode operators --------------------------------------------------------------

def _neumann_mode(grid, Q1, q, gamma, c, xi, reduction: ReductionResult | None = None):
    """Tr(QD^2) + (c/y)D_y on mode xi, assembled through the model reduction."""
    red = reduction
    xp = np.linalg.solve(red.S, xi)
    B = assemble_bessel(grid, red.c_reduced)
    op = B.shifted(shift=-(xp @ xp))
    s = red.a.vec @ xp
    if s != 0:
        op = op + derivative_stencil(grid).shifted(scale=2j * s)
    return op.shifted(scale=gamma)


def _fd_weights(x0: float, xs: np.ndarray, deriv: int) -> np.ndarray:
    """Lagrange finite-difference weights for the deriv-th derivative at x0."""
    n = len(xs)
    V = np.vander(xs - x0, n, increasing=True).T
    rhs = np.zeros(n)
    rhs[deriv] = float(np.prod(np.arange(1, deriv + 1)))
    return np.linalg.solve(V, rhs)


def oblique_fd_matrix(grid: RadialGrid, coeffs: GeneralCoefficients, xi) -> np.ndarray:
    """Nodal FD matrix of the oblique operator on mode xi, in (1, 2) banded layout.

    ``-xi.Q1.xi + 2i(q.xi) D1 + gamma D2 + (c D1 + i b.xi) / y`` with three-point
    stencils; the first node uses a one-sided stencil (no boundary row, the
    regular solution carries the oblique condition) and the top node a zero
    ghost at Y_max.
    """
    y = grid.nodes
    J = grid.J
    ab = np.zeros((4, J), dtype=complex)
    ext = np.append(y, grid.Y_max)
    pot = -(xi @ coeffs.Q1 @ xi) + 1j * (coeffs.b @ xi) / y
    d1c = 2j * (coeffs.q @ xi) + coeffs.c / y
    for j in range(J):
        cols = [0, 1, 2] if j == 0 else [j - 1, j, j + 1]
        w1 = _fd_weights(y[j], ext[cols], 1)
        w2 = _fd_weights(y[j], ext[cols], 2)
        row = coeffs.gamma * w2 + d1c[j] * w1
        row[cols.index(j)] += pot[j]
        for k, col in enumerate(cols):
            if col < J:
                ab[2 + j - col, col] = row[k]
    return ab


def _banded_matvec(ab: np.ndarray, v: np.ndarray) -> np.ndarray:
    J = ab.shape[1]
    out = ab[2] * v
    out[:-1] += ab[1, 1:] * v[1:]
    out[:-2] += ab[0, 2:] * v[2:]
    out[1:] += ab[3, :-1] * v[:-1]
    return out


def _per_mode(tg: TorusGrid, f, build, fn):
    fh = np.fft.fftn(values_of(f).astype(complex), axes=_axes(tg.N))
    xi = tg.xi
    out = np.zeros_like(fh)
    for idx in np.ndindex(*tg.shape[:-1]):
        op = build(xi[idx])
        out[idx] = fn(op, fh[idx])
    return np.fft.ifftn(out, axes=_axes(tg.N))


def validate_oblique(coeffs: GeneralCoefficients, m: float, p: float) -> ReductionResult:
    if coeffs.c == 0:
        raise ValueError("oblique vector needs c != 0")
    coeffs.check_positive_definite()
    check_admissible(m, p, coeffs.c / coeffs.gamma)
    return reduce_general_Q(coeffs)


def solve_neumann_general(coeffs: GeneralCoefficients, lam: complex, f, tg: TorusGrid) -> np.ndarray:
    """(lam - Tr(QD^2) - (c/y)D_y)^{-1} f with Neumann condition via the reduction."""
    red = reduce_general_Q(coeffs)
    return _per_mode(tg, f, lambda xi: _neumann_mode(tg.grid, coeffs.Q1, coeffs.q, coeffs.gamma,
                                                     coeffs.c, xi, red),
                     lambda op, v: sla.solve_banded((1, 1), op.banded(lam), v))


def apply_neumann_general(coeffs: GeneralCoefficients, u, tg: TorusGrid) -> np.ndarray:
    red = reduce_general_Q(coeffs)
    return _per_mode(tg, u, lambda xi: _neumann_mode(tg.grid, coeffs.Q1, coeffs.q, coeffs.gamma,
                                                     coeffs.c, xi, red),
                     lambda op, v: op.matvec(v))


def _tilde_coeffs(coeffs: GeneralCoefficients, minus_sign: bool = False) -> GeneralCoefficients:
    return GeneralCoefficients.from_matrix(tilde_Q(coeffs, minus_sign), None, coeffs.c)


def solve_oblique(coeffs: GeneralCoefficients, lam: complex, f, tg: TorusGrid,
                  m: float = 0.0, p: float = 2.0) -> np.ndarray:
    """u = T (lam - Lt)^{-1} T^{-1} f with Lt = Tr(Qt D^2) + (c/y) D_y (Neumann)."""
    validate_oblique(coeffs, m, p)
    g = oblique_shear(f, tg, coeffs.b, coeffs.c, "inverse")
    w = solve_neumann_general(_tilde_coeffs(coeffs), lam, g, tg)
    return oblique_shear(w, tg, coeffs.b, coeffs.c, "forward")


def solve_oblique_direct(coeffs: GeneralCoefficients, lam: complex, f, tg: TorusGrid) -> np.ndarray:
    """Independent FD solve of (lam - L_oblique) u = f, mode by mode."""
    def solve(ab, v):
        lhs = -ab
        lhs[2] += lam
        return sla.solve_banded((1, 2), lhs, v)
    return _per_mode(tg, f, lambda xi: oblique_fd_matrix(tg.grid, coeffs, xi), solve)


def apply_oblique_direct(coeffs: GeneralCoefficients, u, tg: TorusGrid) -> np.ndarray:
    return _per_mode(tg, u, lambda xi: oblique_fd_matrix(tg.grid, coeffs, xi), _banded_matvec)


def apply_oblique(coeffs: GeneralCoefficients, u, tg: TorusGrid) -> np.ndarray:
    """Conjugated discrete oblique operator T Lt_h T^{-1} u."""
    w = apply_neumann_general(_tilde_coeffs(coeffs), oblique_shear(u, tg, coeffs.b, coeffs.c, "inverse"), tg)
    return oblique_shear(w, tg, coeffs.b, coeffs.c, "forward")


def conjugation_deviation(coeffs: GeneralCoefficients, phi, tg: TorusGrid, m: float = 0.0,
                          minus_sign: bool = False) -> float:
    """|| T^{-1} L_obl T phi - Lt phi || / || Lt phi || in L^2_m."""
    lhs = oblique_shear(apply_oblique_direct(coeffs, oblique_shear(phi, tg, coeffs.b, coeffs.c), tg),
                        tg, coeffs.b, coeffs.c, "inverse")
    if minus_sign:
        # the displayed variant need not be positive definite: assemble unreduced
        tc = _tilde_coeffs(coeffs, True)
        B = assemble_bessel(tg.grid, coeffs.c / tc.gamma)
        D = derivative_stencil(tg.grid)

        def build(xi):
            op = B.shifted(scale=tc.gamma).shifted(shift=-(xi @ tc.Q1 @ xi))
            return op + D.shifted(scale=2j * (tc.q @ xi))
        rhs = _per_mode(tg, phi, build, lambda op, v: op.matvec(v))
    else:
        rhs = apply_neumann_general(_tilde_coeffs(coeffs), phi, tg)
    return tg.norm(lhs - rhs, m) / tg.norm(rhs, m)


def oblique_trace(u, tg: TorusGrid, coeffs: GeneralCoefficients, m: float, p: float = 2.0) -> float:
    """|| y^{-1} (b.grad_x u + c D_y u) ||_{L^p_m} with spectral x and D_h in y."""
    uh = np.fft.fftn(values_of(u), axes=_axes(tg.N))
    y = tg.grid.nodes
    Du = np.empty_like(uh)
    # one-sided at the first node: u need not be even in y
    Du[..., 0] = uh[..., :3] @ _fd_weights(y[0], y[:3], 1)
    ext = np.append(y, tg.grid.Y_max)
    hm, hp = y[1:] - y[:-1], ext[2:] - y[1:]
    up = np.concatenate([uh[..., 2:], np.zeros(uh.shape[:-1] + (1,))], axis=-1)
    Du[..., 1:] = (-hp / (hm * (hm + hp)) * uh[..., :-1] + (hp - hm) / (hm * hp) * uh[..., 1:]
                   + hm / (hp * (hm + hp)) * up)
    v = 1j * (tg.xi @ coeffs.b)[..., None] * uh + coeffs.c * Du
    v = np.fft.ifftn(v, axes=_axes(tg.N)) / tg.grid.nodes
    return tg.norm(v, m, p)


def random_spd(rng: np.random.Generator, n: int, cond_max: float = 50.0) -> np.ndarray:
    A = rng.normal(size=(n, n))
    Q, _ = np.linalg.qr(A)
    w = np.exp(rng.uniform(0, np.log(cond_max), n))
    return (Q * w) @ Q.T
