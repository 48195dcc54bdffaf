"""Graded radial grids, power-weight quadrature and core test functions.

The half-line (0, Y_max] is split into J cells with boundaries
``Y_max * (k/J)**grading`` and nodes ``Y_max * ((j-1/2)/J)**grading``.  Cell
masses for the measure ``y**m dy`` use the exact antiderivative, so weighted
norms of cellwise-constant functions are exact.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


def _check_finite(**kwargs: float) -> None:
    for name, value in kwargs.items():
        if not np.isfinite(value):
            raise ValueError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class RadialGrid:
    J: int
    Y_max: float
    grading: float
    nodes: np.ndarray = field(repr=False)
    edges: np.ndarray = field(repr=False)

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    def cell_mass(self, m: float) -> np.ndarray:
        return WeightedMeasure.on(self, m).cell_mass

    def scaled(self, s: float) -> "RadialGrid":
        """Same index structure with every length multiplied by ``s``."""
        return build_graded_grid(self.J, self.Y_max * s, self.grading)

    def to_dict(self) -> dict:
        return {"J": self.J, "Y_max": self.Y_max, "grading": self.grading}


def build_graded_grid(J: int, Y_max: float, grading: float = 2.0) -> RadialGrid:
    _check_finite(Y_max=Y_max, grading=grading)
    if int(J) != J or J < 2:
        raise ValueError(f"J must be an integer >= 2, got {J!r}")
    if Y_max <= 0:
        raise ValueError("Y_max must be positive")
    if grading < 1:
        raise ValueError("grading must be >= 1")
    J = int(J)
    s = np.arange(J + 1) / J
    edges = Y_max * s**grading
    nodes = Y_max * ((np.arange(1, J + 1) - 0.5) / J) ** grading
    edges[-1] = Y_max
    return RadialGrid(J, float(Y_max), float(grading), nodes, edges)


def _power_antiderivative(y: np.ndarray, m: float) -> np.ndarray:
    return y ** (m + 1.0) / (m + 1.0)


@dataclass(frozen=True)
class WeightedMeasure:
    exponent: float
    cell_mass: np.ndarray = field(repr=False)

    @classmethod
    def on(cls, grid: RadialGrid, m: float) -> "WeightedMeasure":
        if not m > -1:
            raise ValueError(f"weight exponent must be > -1, got {m}")
        F = _power_antiderivative(grid.edges, m)
        return cls(float(m), np.diff(F))

    @property
    def total(self) -> float:
        return float(self.cell_mass.sum())


@dataclass(frozen=True)
class GridFunction1D:
    grid: RadialGrid
    values: np.ndarray

    def __post_init__(self):
        if np.shape(self.values) != (self.grid.J,):
            raise ValueError("values must have one entry per node")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["y", "re", "im"])
            v = np.asarray(self.values, dtype=complex)
            for y, z in zip(self.grid.nodes, v):
                w.writerow([repr(float(y)), repr(float(z.real)), repr(float(z.imag))])


@dataclass(frozen=True)
class GridFunction2D:
    """Samples on an x-torus (``n_x`` points per axis) times the y-grid.

    ``values`` has shape ``(n_x,)*N + (J,)``.
    """

    grid: RadialGrid
    period: float
    values: np.ndarray

    @property
    def N(self) -> int:
        return self.values.ndim - 1


def values_of(f) -> np.ndarray:
    return np.asarray(getattr(f, "values", f))


def weighted_norm(f, m: float, p: float = 2.0, grid: RadialGrid | None = None) -> float:
    """Discrete L^p(y^m dy) norm using exact cell masses.

    ``f`` is a GridFunction1D, or an array together with ``grid``.  For 2D
    arrays (x-torus times y) the x-direction uses the uniform torus spacing
    supplied through a GridFunction2D.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    if grid is None:
        grid = f.grid
    mass = WeightedMeasure.on(grid, m).cell_mass
    v = np.abs(values_of(f))
    if isinstance(f, GridFunction2D):
        dx = (f.period / f.values.shape[0]) ** f.N
        mass = mass * dx
    if np.isinf(p):
        return float(v.max())
    return float((np.sum(v**p * mass)) ** (1.0 / p))


def ball_mass(y0: float, r: float, c: float) -> float:
    """Q_c(y0, r): mass of [y0, y0 + r] under y**c dy."""
    if not c > -1:
        raise ValueError("c must be > -1")
    if y0 < 0 or r <= 0:
        raise ValueError("need y0 >= 0 and r > 0")
    return ((y0 + r) ** (c + 1) - y0 ** (c + 1)) / (c + 1)


def doubling_ratio_sweep(c: float, y0s: Sequence[float], rs: Sequence[float],
                         ss: Sequence[float]) -> float:
    """Largest Q_c(y0,s)/Q_c(y0,r) / (1 v s/r)^(1 v (c+1)) over the lattice."""
    expo = max(1.0, c + 1.0)
    worst = 0.0
    for y0 in y0s:
        for r in rs:
            qr = ball_mass(y0, r, c)
            for s in ss:
                ratio = ball_mass(y0, s, c) / qr / max(1.0, s / r) ** expo
                worst = max(worst, ratio)
    return worst


# -- core functions ---------------------------------------------------------

def _psi(t: np.ndarray) -> np.ndarray:
    out = np.zeros_like(t, dtype=float)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def smooth_step(t) -> np.ndarray:
    """C-infinity step: 1 for t <= 0, 0 for t >= 1."""
    t = np.asarray(t, dtype=float)
    a, b = _psi(1.0 - t), _psi(t)
    return a / (a + b)


def bump(r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = np.abs(r) < 1
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - r[inside] ** 2))
    return out


@dataclass(frozen=True)
class CoreFunctionSpec:
    """One tensor term u(x) v(y) of the core set.

    The y-part equals 1 on [0, flat], decays smoothly and vanishes from
    ``support`` on.  The x-part is a bump of the given radius around
    ``x_center`` (periodised), optionally modulated by ``exp(i k.x)``.
    """

    flat: float
    support: float
    amplitude: complex = 1.0
    x_center: tuple = (0.0,)
    x_radius: float = 1.0
    x_wave: tuple = ()

    def y_part(self, y) -> np.ndarray:
        if not 0 < self.flat < self.support:
            raise ValueError("need 0 < flat < support")
        return smooth_step((np.asarray(y) - self.flat) / (self.support - self.flat))


def _periodic_offset(x: np.ndarray, x0: float, period: float) -> np.ndarray:
    return (x - x0 + 0.5 * period) % period - 0.5 * period


def torus_axis(n_x: int, period: float) -> np.ndarray:
    return np.arange(n_x) * (period / n_x) - 0.5 * period


def make_core_function(spec: CoreFunctionSpec | Sequence[CoreFunctionSpec], grid: RadialGrid,
                       period: float | None = None, n_x: int | None = None, N: int = 1):
    """Sample a (sum of) core function(s).

    Without ``period`` only the y-parts are sampled (GridFunction1D).
    Otherwise the x-parts live on a torus ``[-period/2, period/2)^N``.
    """
    specs = [spec] if isinstance(spec, CoreFunctionSpec) else list(spec)
    for s in specs:
        if s.support >= grid.Y_max:
            raise ValueError("core function support must stay inside (0, Y_max)")
    if period is None:
        vals = sum(s.amplitude * s.y_part(grid.nodes) for s in specs)
        return GridFunction1D(grid, np.asarray(vals))
    xs = torus_axis(n_x, period)
    X = np.meshgrid(*([xs] * N), indexing="ij")
    out = np.zeros((n_x,) * N + (grid.J,), dtype=complex)
    for s in specs:
        center = tuple(s.x_center) + (0.0,) * (N - len(s.x_center))
        if 2 * s.x_radius >= period:
            raise ValueError("x-support must fit inside the torus")
        r2 = sum(_periodic_offset(X[i], center[i], period) ** 2 for i in range(N))
        xpart = bump(np.sqrt(r2) / s.x_radius).astype(complex)
        if s.x_wave:
            k = tuple(s.x_wave) + (0,) * (N - len(s.x_wave))
            xpart = xpart * np.exp(1j * sum(k[i] * X[i] for i in range(N)))
        out += s.amplitude * xpart[..., None] * s.y_part(grid.nodes)
    return GridFunction2D(grid, float(period), out)


def forward_difference(values: np.ndarray, grid: RadialGrid) -> np.ndarray:
    """(u_{j+1} - u_j)/(y_{j+1} - y_j) on interior faces."""
    return np.diff(values, axis=-1) / np.diff(grid.nodes)


def random_core_functions(rng: np.random.Generator, grid: RadialGrid, count: int,
                          terms: int = 3, period: float | None = None,
                          n_x: int | None = None, N: int = 1, complex_valued: bool = False,
                          max_support: float | None = None, max_wave: int = 0,
                          torus_period: float | None = None):
    """Seeded probes built as finite sums of core functions.

    x-shapes are drawn relative to ``period``; ``torus_period`` (default
    ``period``) is the torus they are sampled on, so the same draws can be
    placed on a larger torus.
    """
    top = max_support if max_support is not None else 0.5 * grid.Y_max
    probes = []
    for _ in range(count):
        specs = []
        for _ in range(terms):
            support = rng.uniform(0.2, 1.0) * top
            flat = rng.uniform(0.05, 0.6) * support
            amp = rng.normal()
            if complex_valued:
                amp = amp + 1j * rng.normal()
            kwargs = {}
            if period is not None:
                kwargs["x_center"] = tuple(rng.uniform(-0.25, 0.25, N) * period)
                kwargs["x_radius"] = rng.uniform(0.15, 0.3) * period
                if max_wave:
                    kwargs["x_wave"] = tuple(int(k) for k in rng.integers(-max_wave, max_wave + 1, N))
            specs.append(CoreFunctionSpec(flat=flat, support=support, amplitude=amp, **kwargs))
        probes.append(make_core_function(specs, grid, period=torus_period or period, n_x=n_x, N=N))
    return probes


def convergence_order(err_coarse: float, err_fine: float, ratio: float = 2.0) -> float:
    if err_fine <= 0:
        return math.inf
    return math.log(err_coarse / err_fine) / math.log(ratio)
