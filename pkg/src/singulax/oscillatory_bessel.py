"""L_b = B + i b D_y - b^2/4 and the auxiliary A_b = B - i b c / (2y).

The primary evolution path is the gauge route: with T = e^{iby/2},
L_b = T^{-1} A_b T, so e^{zL_b} f = e^{-iby/2} e^{zA_b} (e^{iby/2} f).

A_b is assembled from its sesquilinear form.  After summation by parts the
skew term ``-i(b/2) int (u conj v)' y^c dy`` becomes a diagonal
``i(b/2) d_j / M_j`` with ``d_j = y_{j-1/2}^c - y_{j+1/2}^c`` taken at the
same cell faces as the flux of B.  The real part of the discrete form is
then exactly the Bessel form, and the gauge conjugation is consistent up to
the first node.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

from .bessel_core import (DiscreteOperator1D, KernelTable, assemble_bessel, default_sample_index,
                          derivative_stencil, heat_kernel, _check_c)
from .weighted_grid import GridFunction1D, RadialGrid, build_graded_grid, values_of


@dataclass(frozen=True)
class GaugePhase:
    b: float
    direction: str = "forward"

    def __post_init__(self):
        if self.direction not in ("forward", "inverse"):
            raise ValueError("direction must be 'forward' or 'inverse'")

    def factor(self, y) -> np.ndarray:
        sign = 1.0 if self.direction == "forward" else -1.0
        return np.exp(sign * 0.5j * self.b * np.asarray(y))

    def inverse(self) -> "GaugePhase":
        return GaugePhase(self.b, "inverse" if self.direction == "forward" else "forward")

    def apply(self, f, grid: RadialGrid | None = None) -> np.ndarray:
        grid = grid if grid is not None else f.grid
        return self.factor(grid.nodes) * values_of(f)


def skew_weights(grid: RadialGrid, c: float) -> np.ndarray:
    """d_j = y_{j-1/2}^c - y_{j+1/2}^c at the cell faces (zero below the first cell).

    Same face weights as the flux of B_h, so the O(1/y) terms of a gauged
    function cancel node by node, including at the first node.
    """
    up = grid.edges[1:] ** c
    lo = np.concatenate([[0.0], up[:-1]])
    return lo - up


def assemble_Ab(grid: RadialGrid, c: float, b: float) -> DiscreteOperator1D:
    _check_c(c)
    B = assemble_bessel(grid, c)
    diag = B.diag + 0.5j * b * skew_weights(grid, c) / B.mass
    if b == 0:
        diag = B.diag.copy()
    return DiscreteOperator1D(grid, float(c), B.lower.copy(), diag, B.upper.copy(),
                              meta={"kind": "A_b", "b": float(b)})


def assemble_Lb_direct(grid: RadialGrid, c: float, b: float) -> DiscreteOperator1D:
    """B_h + i b D_h, without the scalar shift -b^2/4."""
    B = assemble_bessel(grid, c)
    if b == 0:
        return B
    D = derivative_stencil(grid)
    op = B + D.shifted(scale=1j * b)
    return DiscreteOperator1D(grid, float(c), op.lower, op.diag, op.upper,
                              meta={"kind": "L_b direct", "b": float(b)})


@dataclass
class LbFamily:
    """Operators for one (grid, c, b) with cached propagators."""

    grid: RadialGrid
    c: float
    b: float
    A: DiscreteOperator1D = field(init=False, repr=False)
    B: DiscreteOperator1D = field(init=False, repr=False)
    _direct: DiscreteOperator1D | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.A = assemble_Ab(self.grid, self.c, self.b)
        self.B = assemble_bessel(self.grid, self.c)

    @property
    def direct(self) -> DiscreteOperator1D:
        if self._direct is None:
            self._direct = assemble_Lb_direct(self.grid, self.c, self.b)
        return self._direct

    @property
    def phase(self) -> np.ndarray:
        return GaugePhase(self.b).factor(self.grid.nodes)

    def semigroup(self, z: complex, f, via: str = "gauge") -> np.ndarray:
        z = complex(z)
        if z.real <= 0:
            raise ValueError("semigroup requires Re z > 0")
        f = values_of(f)
        if via == "gauge":
            T = self.phase
            return np.conj(T) * (self.A.propagator(z) @ (T * f))
        if via == "direct":
            return np.exp(-0.25 * self.b**2 * z) * (self.direct.propagator(z) @ f)
        raise ValueError(f"unknown route {via!r}")

    def auxiliary_kernel(self, z: complex, rho_index=None) -> KernelTable:
        return heat_kernel(self.A, z, rho_index)

    def kernel(self, z: complex, rho_index=None, via: str = "gauge") -> KernelTable:
        z = complex(z)
        if via == "gauge":
            tab = self.auxiliary_kernel(z, rho_index)
            y, rho = tab.y[:, None], tab.rho[None, :]
            vals = np.exp(0.5j * self.b * (rho - y)) * tab.values
        elif via == "direct":
            tab = heat_kernel(self.direct, z, rho_index)
            vals = np.exp(-0.25 * self.b**2 * z) * tab.values
        else:
            raise ValueError(f"unknown route {via!r}")
        return KernelTable(z, tab.y, tab.rho, tab.rho_index, vals, self.c, b=float(self.b))

    def derivative_kernel(self, z: complex, rho_index=None) -> KernelTable:
        tab = self.kernel(z, rho_index)
        D = derivative_stencil(self.grid)
        return KernelTable(tab.z, tab.y, tab.rho, tab.rho_index, D.matvec(tab.values.T).T,
                           self.c, b=tab.b)

    def time_derivative_kernel(self, z: complex, rho_index=None, h: float | None = None) -> KernelTable:
        """Fourth-order central difference in t along the direction of z."""
        z = complex(z)
        h = h if h is not None else 1e-3 * abs(z)
        u = z / abs(z)
        K = [self.kernel(z + k * h * u, rho_index).values for k in (-2, -1, 1, 2)]
        dv = (K[0] - 8 * K[1] + 8 * K[2] - K[3]) / (12 * h * u)
        tab = self.kernel(z, rho_index)
        return KernelTable(z, tab.y, tab.rho, tab.rho_index, dv, self.c, b=tab.b)


def semigroup_Lb(grid: RadialGrid, c: float, z: complex, b: float, f, via: str = "gauge") -> GridFunction1D:
    return GridFunction1D(grid, LbFamily(grid, c, b).semigroup(z, f, via))


def kernel_Lb(grid: RadialGrid, c: float, z: complex, b: float, rho_index=None) -> KernelTable:
    return LbFamily(grid, c, b).kernel(z, rho_index)


def derivative_kernel(grid: RadialGrid, c: float, z: complex, b: float, rho_index=None) -> KernelTable:
    return LbFamily(grid, c, b).derivative_kernel(z, rho_index)


def check_domination(grid: RadialGrid, c: float, t: float, b: float, f,
                     family: LbFamily | None = None) -> float:
    """max_j (|e^{tL_b} f| - e^{tB}|f|)_j; positive values are violations."""
    if not t > 0:
        raise ValueError("t must be positive")
    fam = family or LbFamily(grid, c, b)
    lhs = np.abs(fam.semigroup(t, f))
    rhs = (fam.B.propagator(t) @ np.abs(values_of(f))).real
    return float(np.max(lhs - rhs))


def kernel_domination(fam: LbFamily, t: float) -> float:
    """max over the kernel matrix of |p_b| - p_0."""
    pb = np.abs(fam.kernel(t).values)
    p0 = heat_kernel(fam.B, t).values
    return float(np.max(pb - p0))


def _interp2(values: np.ndarray, nodes: np.ndarray, yq: np.ndarray, rq: np.ndarray) -> np.ndarray:
    out = []
    for part in (values.real, values.imag):
        step = PchipInterpolator(nodes, part, axis=0)(yq)
        out.append(PchipInterpolator(nodes, step, axis=1)(rq))
    return out[0] + 1j * out[1]


def check_scaling(c: float, t: float, b: float, s: float | None = None, J: int = 512,
                  grading: float = 2.0, y_factor: float = 30.0, floor: float = 1e-12,
                  mode: str = "sup") -> float:
    """Deviation in p_b(t,y,rho) = s^{c+1} p_{b/s}(s^2 t, s y, s rho).

    ``s`` defaults to |b|.  Both kernels are computed on one physical grid
    large enough for either time scale; the rescaled kernel is read off by
    monotone cubic interpolation.  Nodes are compared in the inner 90% of the
    domain (for both y and s*y) where both kernels exceed ``floor`` times the
    kernel maximum.  ``mode="sup"`` divides the largest difference by the
    kernel maximum; ``mode="pointwise"`` takes the largest pointwise relative
    difference, which is dominated by far Gaussian tails.
    """
    if b == 0:
        raise ValueError("scaling check needs b != 0")
    s = abs(b) if s is None else s
    if not s > 0:
        raise ValueError("s must be positive")
    if mode not in ("sup", "pointwise"):
        raise ValueError(f"unknown mode {mode!r}")
    grid = build_graded_grid(J, y_factor * np.sqrt(t) * max(1.0, s), grading)
    y = grid.nodes
    lhs = LbFamily(grid, c, b).kernel(t).values
    if s == 1:
        keep = y <= 0.9 * grid.Y_max
        A = lhs[np.ix_(keep, keep)]
        Bv = A
    else:
        other = LbFamily(grid, c, b / s).kernel(s * s * t).values
        keep = (y <= 0.9 * grid.Y_max) & (s * y <= 0.9 * grid.Y_max) & (s * y >= y[0])
        yk = y[keep]
        A = lhs[np.ix_(keep, keep)]
        Bv = s ** (c + 1) * _interp2(other, y, s * yk, s * yk)
    scale = max(np.abs(A).max(), np.abs(Bv).max())
    mask = (np.abs(A) > floor * scale) & (np.abs(Bv) > floor * scale)
    if not np.any(mask):
        return 0.0
    diff = np.abs(A - Bv)[mask]
    if mode == "sup":
        return float(diff.max() / np.abs(A).max())
    return float(np.max(diff / np.abs(A)[mask]))


def gauge_vs_direct(grid: RadialGrid, c: float, t: complex, b: float, f) -> float:
    """Relative L^2_c deviation between the two evolution routes."""
    fam = LbFamily(grid, c, b)
    g = fam.semigroup(t, f, "gauge")
    d = fam.semigroup(t, f, "direct")
    M = fam.B.mass
    return float(np.sqrt(np.sum(np.abs(g - d) ** 2 * M) / np.sum(np.abs(g) ** 2 * M)))


def conjugation_defect(grid: RadialGrid, c: float, b: float, probes) -> float:
    """max over probes of ||(L_direct - T^{-1} A_h T) u||_c / ||u||_c.

    L_direct includes the -b^2/4 shift.  Probes should be smooth.
    """
    fam = LbFamily(grid, c, b)
    T = fam.phase
    M = fam.B.mass
    worst = 0.0
    for u in probes:
        u = values_of(u)
        lhs = fam.direct.matvec(u) - 0.25 * b**2 * u
        rhs = np.conj(T) * fam.A.matvec(T * u)
        worst = max(worst, float(np.sqrt(np.sum(np.abs(lhs - rhs) ** 2 * M) /
                                          np.sum(np.abs(u) ** 2 * M))))
    return worst


def robin_residual(u, grid: RadialGrid, c: float, b: float) -> float:
    """|y^c (D_y u - i(b/2) u)| at the first interior face."""
    u = values_of(u)
    y = grid.nodes
    yf = grid.edges[1]
    du = (u[1] - u[0]) / (y[1] - y[0])
    return float(abs(yf**c * (du - 0.5j * b * 0.5 * (u[0] + u[1]))))


def form_parts(grid: RadialGrid, c: float, b: float, u) -> tuple[complex, float]:
    """(<-A_h u, u>_c, <-B_h u, u>_c)."""
    A = assemble_Ab(grid, c, b)
    B = assemble_bessel(grid, c)
    u = values_of(u)
    a = complex(np.sum(-A.matvec(u) * np.conj(u) * A.mass))
    r = float(np.real(np.sum(-B.matvec(u) * np.conj(u) * B.mass)))
    return a, r


def osc_kernel_tables(c: float, b: float, times, J: int, grading: float = 2.0,
                      y_factor: float = 20.0, derivative: bool = False) -> list[KernelTable]:
    """Sub-sampled p_b tables, one grid per time with Y_max = y_factor*sqrt|z|."""
    tabs = []
    for z in times:
        grid = build_graded_grid(J, y_factor * np.sqrt(abs(z)), grading)
        idx = default_sample_index(J)
        fam = LbFamily(grid, c, b)
        full = fam.derivative_kernel(z, idx) if derivative else fam.kernel(z, idx)
        tabs.append(KernelTable(full.z, full.y[idx], full.rho, idx, full.values[idx], c, b=float(b)))
    return tabs
