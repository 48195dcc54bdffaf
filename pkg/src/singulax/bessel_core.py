"""The Bessel operator B = D_yy + (c/y) D_y with the weighted Neumann condition.

Discretization is by finite volumes in flux form on a RadialGrid.  With
``M = diag(cell_mass(c))`` and face weights
``w_{j+1/2} = y_{j+1/2}^c / (y_{j+1} - y_j)`` the operator reads

    (B_h u)_j = (F_{j+1/2} - F_{j-1/2}) / M_j,   F_{j+1/2} = w_{j+1/2} (u_{j+1} - u_j),

with ``F_{1/2} = 0`` (no flux through y = 0) and a zero Dirichlet ghost value at
``Y_max``.  ``M B_h`` is symmetric, so B_h is self-adjoint for the discrete
y^c inner product and has nonnegative off-diagonal entries.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import scipy.linalg as sla
from scipy.special import gammaln, ive, erf

from .weighted_grid import GridFunction1D, RadialGrid, WeightedMeasure, build_graded_grid, values_of


class FitFailure(RuntimeError):
    """Raised when no Gaussian bound of the requested form fits the data."""


def _check_c(c: float) -> None:
    if not np.isfinite(c) or c <= -1:
        raise ValueError(f"c must be > -1, got {c}")


@dataclass(frozen=True)
class DiscreteOperator1D:
    """Tridiagonal nodal operator ``u -> lower*u[j-1] + diag*u[j] + upper*u[j+1]``.

    ``lower[j]`` couples row j to j-1 (``lower[0]`` unused), ``upper[j]``
    couples row j to j+1 (``upper[-1]`` unused).
    """

    grid: RadialGrid
    c: float
    lower: np.ndarray = field(repr=False)
    diag: np.ndarray = field(repr=False)
    upper: np.ndarray = field(repr=False)
    boundary_convention: str = "neumann_flux+dirichlet_top"
    meta: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def mass(self) -> np.ndarray:
        if "mass" not in self._cache:
            self._cache["mass"] = WeightedMeasure.on(self.grid, self.c).cell_mass
        return self._cache["mass"]

    @property
    def J(self) -> int:
        return self.grid.J

    def matvec(self, u) -> np.ndarray:
        u = values_of(u)
        out = self.diag * u
        out[..., 1:] += self.lower[1:] * u[..., :-1]
        out[..., :-1] += self.upper[:-1] * u[..., 1:]
        return out

    def dense(self) -> np.ndarray:
        A = np.diag(self.diag).astype(np.result_type(self.diag, self.lower, self.upper))
        A += np.diag(self.lower[1:], -1) + np.diag(self.upper[:-1], 1)
        return A

    def shifted(self, shift: complex = 0.0, scale: complex = 1.0) -> "DiscreteOperator1D":
        """The operator ``scale*A + shift``."""
        return DiscreteOperator1D(self.grid, self.c, scale * self.lower,
                                  scale * self.diag + shift, scale * self.upper,
                                  self.boundary_convention, dict(self.meta))

    def __add__(self, other: "DiscreteOperator1D") -> "DiscreteOperator1D":
        return DiscreteOperator1D(self.grid, self.c, self.lower + other.lower,
                                  self.diag + other.diag, self.upper + other.upper,
                                  self.boundary_convention, dict(self.meta))

    def banded(self, lam: complex = 0.0) -> np.ndarray:
        """(lam - A) in the 3-row layout used by scipy.linalg.solve_banded."""
        J = self.J
        dtype = np.result_type(self.diag, self.lower, lam)
        ab = np.zeros((3, J), dtype=dtype)
        ab[0, 1:] = -self.upper[:-1]
        ab[1] = lam - self.diag
        ab[2, :-1] = -self.lower[1:]
        return ab

    def solve_shifted(self, lam: complex, f) -> np.ndarray:
        """Solve (lam - A) u = f; ``f`` may carry extra trailing columns."""
        f = values_of(f)
        ab = self.banded(lam)
        try:
            return sla.solve_banded((1, 1), ab, f, check_finite=True)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(f"singular system at lambda={lam}") from exc

    def symmetrized(self) -> np.ndarray:
        """Dense ``M^{1/2} A M^{-1/2}`` (real symmetric for B_h)."""
        s = np.sqrt(self.mass)
        return (s[:, None] * self.dense()) / s[None, :]

    @property
    def is_selfadjoint(self) -> bool:
        if np.iscomplexobj(self.diag) and np.any(self.diag.imag != 0):
            return False
        Ms = self.mass
        return bool(np.allclose(Ms[:-1] * self.upper[:-1], Ms[1:] * self.lower[1:],
                                rtol=1e-12, atol=0))

    def eigh(self):
        """Cached eigenpairs of the symmetrized operator."""
        if "eigh" not in self._cache:
            if not self.is_selfadjoint:
                raise ValueError("eigh requires a self-adjoint operator")
            self._cache["eigh"] = sla.eigh(self.symmetrized().real)
        return self._cache["eigh"]

    def eig(self, max_cond: float = 1e6):
        """Cached diagonalization of a non-self-adjoint symmetrized operator.

        Returns None when the eigenvector matrix is too ill-conditioned, in
        which case callers fall back to a dense matrix exponential.
        """
        if "eig" not in self._cache:
            w, V = sla.eig(self.symmetrized())
            cond = np.linalg.cond(V)
            self._cache["eig"] = (w, V, np.linalg.inv(V)) if cond < max_cond else None
        return self._cache["eig"]

    def propagator(self, z: complex) -> np.ndarray:
        """Dense e^{zA} in nodal form (acts on column vectors of values)."""
        key = ("prop", complex(z))
        if key in self._cache:
            return self._cache[key]
        s = np.sqrt(self.mass)
        if self.is_selfadjoint:
            mu, Q = self.eigh()
            E = (Q * np.exp(z * mu)) @ Q.T
        else:
            dec = self.eig()
            if dec is None:
                E = sla.expm(z * self.symmetrized())
            else:
                w, V, Vi = dec
                E = (V * np.exp(z * w)) @ Vi
        P = E / s[:, None] * s[None, :]
        if len(self._cache) < 64:
            self._cache[key] = P
        return P


def face_weights(grid: RadialGrid, c: float) -> np.ndarray:
    """Weights w_{j+1/2}, j = 1..J; the last entry is the top Dirichlet face."""
    y, e = grid.nodes, grid.edges
    w = np.empty(grid.J)
    w[:-1] = e[1:-1] ** c / np.diff(y)
    w[-1] = grid.Y_max ** c / (grid.Y_max - y[-1])
    return w


def assemble_bessel(grid: RadialGrid, c: float) -> DiscreteOperator1D:
    _check_c(c)
    M = WeightedMeasure.on(grid, c).cell_mass
    w = face_weights(grid, c)
    w_lo = np.concatenate([[0.0], w[:-1]])  # w_{j-1/2}, zero flux at the bottom
    diag = -(w + w_lo) / M
    upper = np.zeros(grid.J)
    upper[:-1] = w[:-1] / M[:-1]
    lower = np.zeros(grid.J)
    lower[1:] = w[:-1] / M[1:]
    return DiscreteOperator1D(grid, float(c), lower, diag, upper,
                              meta={"kind": "bessel"})


def derivative_stencil(grid: RadialGrid) -> DiscreteOperator1D:
    """Three-point divided difference D_h on the nodes.

    The first node uses the even extension (u depends on y^2 near 0); the
    last node uses the zero Dirichlet ghost at Y_max.
    """
    y = grid.nodes
    J = grid.J
    hm = np.empty(J)
    hp = np.empty(J)
    hm[1:] = np.diff(y)
    hp[:-1] = np.diff(y)
    hp[-1] = grid.Y_max - y[-1]
    lower = np.zeros(J)
    diag = np.zeros(J)
    upper = np.zeros(J)
    sl = slice(1, J)
    lower[sl] = -hp[sl] / (hm[sl] * (hm[sl] + hp[sl]))
    diag[sl] = (hp[sl] - hm[sl]) / (hm[sl] * hp[sl])
    upper[sl] = hm[sl] / (hp[sl] * (hm[sl] + hp[sl]))
    g = 2.0 * y[0] / (y[1] ** 2 - y[0] ** 2)
    diag[0], upper[0] = -g, g
    upper[-1] = 0.0
    return DiscreteOperator1D(grid, 0.0, lower, diag, upper, meta={"kind": "D_y"})


def weighted_inner(u, v, op_or_mass) -> complex:
    mass = getattr(op_or_mass, "mass", op_or_mass)
    return complex(np.sum(values_of(u) * np.conj(values_of(v)) * mass))


def _check_lambda(lam: complex) -> None:
    lam = complex(lam)
    if lam.imag == 0 and lam.real <= 0:
        raise ValueError("lambda must lie outside (-inf, 0]")


def resolvent_apply(op: DiscreteOperator1D, lam: complex, f) -> GridFunction1D:
    _check_lambda(lam)
    return GridFunction1D(op.grid, op.solve_shifted(lam, f))


Scheme = Literal["eigen_exact", "crank_nicolson", "backward_euler"]


def semigroup_apply(op: DiscreteOperator1D, z: complex, f, scheme: Scheme = "eigen_exact",
                    steps: int | None = None) -> GridFunction1D:
    """Approximate e^{zA} f.

    ``eigen_exact`` uses the eigendecomposition for self-adjoint operators and
    a dense matrix exponential of the symmetrized matrix otherwise.  The
    stepping schemes march along the ray s*z, s in [0, 1].
    """
    z = complex(z)
    if z.real <= 0:
        raise ValueError("semigroup requires Re z > 0")
    f = values_of(f)
    if scheme == "eigen_exact":
        vals = op.propagator(z) @ f
    elif scheme in ("crank_nicolson", "backward_euler"):
        n = steps or 200
        if n < 1:
            raise ValueError("steps must be positive")
        dz = z / n
        theta = 0.5 if scheme == "crank_nicolson" else 1.0
        u = f.astype(complex)
        impl = op.shifted(scale=theta * dz)
        ab = impl.banded(1.0)
        for _ in range(n):
            rhs = u + (1 - theta) * dz * op.matvec(u) if theta < 1 else u
            u = sla.solve_banded((1, 1), ab, rhs)
        vals = u
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    if np.isrealobj(f) and z.imag == 0 and op.is_selfadjoint:
        vals = np.real(vals)
    return GridFunction1D(op.grid, vals)


# -- kernels ----------------------------------------------------------------

@dataclass(frozen=True)
class KernelTable:
    """Kernel samples p(z, y_i, rho_j) with respect to rho^c d rho."""

    z: complex
    y: np.ndarray = field(repr=False)
    rho: np.ndarray = field(repr=False)
    rho_index: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)  # shape (len(y), len(rho))
    c: float = 0.0
    measure: str = "rho^c drho"
    b: float | None = None

    def mass(self, grid: RadialGrid) -> np.ndarray:
        M = WeightedMeasure.on(grid, self.c).cell_mass
        return M @ self.values

    def to_csv(self, path) -> None:
        import csv
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            head = ["t", "y", "rho", "re", "im"]
            if self.b is not None:
                head.insert(0, "b")
            w.writerow(head)
            zt = repr(float(self.z.real)) if self.z.imag == 0 else repr(complex(self.z))
            for j, r in enumerate(self.rho):
                for i, yy in enumerate(self.y):
                    v = complex(self.values[i, j])
                    row = [zt, repr(float(yy)), repr(float(r)), repr(v.real), repr(v.imag)]
                    if self.b is not None:
                        row.insert(0, repr(float(self.b)))
                    w.writerow(row)


def _as_index(op: DiscreteOperator1D, rho_index) -> np.ndarray:
    idx = np.atleast_1d(np.asarray(rho_index))
    if idx.dtype.kind not in "iu":
        raise ValueError("rho_index must be integer")
    if np.any(idx < 0) or np.any(idx >= op.J):
        raise IndexError("rho_index out of range")
    return idx


def heat_kernel(op: DiscreteOperator1D, z: complex, rho_index=None) -> KernelTable:
    """Columns of e^{zB_h} applied to delta_j / cell_mass_j."""
    z = complex(z)
    if z.real <= 0:
        raise ValueError("heat kernel requires Re z > 0")
    idx = np.arange(op.J) if rho_index is None else _as_index(op, rho_index)
    P = op.propagator(z)[:, idx] / op.mass[idx]
    if z.imag == 0 and op.is_selfadjoint:
        P = P.real
    return KernelTable(z, op.grid.nodes, op.grid.nodes[idx], idx, P, op.c)


def closed_form_kernel(c: float, t: float, y, rho) -> np.ndarray:
    """Exact Neumann Bessel heat kernel w.r.t. rho^c d rho.

    (2t)^{-1} (y rho)^{-nu} exp(-(y^2+rho^2)/4t) I_nu(y rho / 2t), nu = (c-1)/2.
    Small arguments use the power series of (y rho)^{-nu} I_nu, larger ones
    the exponentially scaled Bessel function.
    """
    _check_c(c)
    if not t > 0:
        raise ValueError("t must be positive")
    nu = 0.5 * (c - 1.0)
    y, rho = np.broadcast_arrays(np.asarray(y, float), np.asarray(rho, float))
    x = y * rho / (2 * t)
    out = np.empty(y.shape)
    small = x < 1.0
    if np.any(small):
        q = (x[small] / 2) ** 2
        k = np.arange(40)[:, None]
        terms = np.exp(k * np.log(np.maximum(q, 1e-300)) - gammaln(k + 1) - gammaln(k + nu + 1))
        terms[0] = np.exp(-gammaln(nu + 1))
        series = terms.sum(axis=0)
        out[small] = ((4 * t) ** -nu * series
                      * np.exp(-(y[small] ** 2 + rho[small] ** 2) / (4 * t)) / (2 * t))
    big = ~small
    if np.any(big):
        yb, rb, xb = y[big], rho[big], x[big]
        out[big] = (ive(nu, xb) * np.exp(-nu * np.log(yb * rb) - (yb - rb) ** 2 / (4 * t))
                    / (2 * t))
    return out if out.ndim else float(out)


# -- Gaussian bound fitting -------------------------------------------------

@dataclass(frozen=True)
class GaussianBoundFit:
    C: float
    kappa: float
    kind: str
    prefactor: str
    n_samples: int
    C_of_kappa: np.ndarray = field(repr=False)
    saturated: bool = False
    C_refined: float | None = None
    stable: bool | None = None
    growth_removed: float = 0.0

    @property
    def variation(self) -> float | None:
        if self.C_refined is None:
            return None
        return abs(self.C_refined - self.C) / self.C

    def to_dict(self) -> dict:
        return {"C": self.C, "kappa": self.kappa, "kind": self.kind,
                "prefactor": self.prefactor, "n_samples": self.n_samples,
                "saturated": self.saturated, "C_refined": self.C_refined,
                "stable": self.stable, "growth_removed": self.growth_removed}


KAPPA_GRID = np.geomspace(1.0, 64.0, 32)


def gaussian_prefactor(kind: str, z: complex, y, rho, c: float) -> np.ndarray:
    r = abs(z)
    s = np.sqrt(r)
    base = rho ** (-c) * np.minimum(rho / s, 1.0) ** c
    if kind == "kernel":
        return base / s
    if kind == "y_derivative":
        return base * np.minimum(y / s, 1.0) / r
    if kind == "t_derivative":
        return base / (r * s)
    raise ValueError(f"unknown kind {kind!r}")


def default_sample_index(J: int, n: int = 64) -> np.ndarray:
    """64 node indices, geometric in index, up to 0.9 J."""
    top = int(0.9 * J)
    idx = np.unique(np.round(np.geomspace(1, top, n)).astype(int) - 1)
    return idx


@dataclass
class _Samples:
    ratio_base: np.ndarray   # |p| / prefactor
    dist2_over_z: np.ndarray  # |y - rho|^2 / |z|


def _collect(tables, kind: str, growth: float, rel_floor: float) -> _Samples:
    rb, d2 = [], []
    for tab in tables:
        Y, R = np.meshgrid(tab.y, tab.rho, indexing="ij")
        vals = np.abs(tab.values)
        keep = vals >= rel_floor * vals.max(axis=0, keepdims=True)
        pref = gaussian_prefactor(kind, tab.z, Y, R, tab.c)
        g = np.exp(-growth * tab.z.real)
        rb.append((vals * g / pref)[keep])
        d2.append(((Y - R) ** 2 / abs(tab.z))[keep])
    return _Samples(np.concatenate(rb), np.concatenate(d2))


def C_of_kappa(samples: _Samples, kappas=KAPPA_GRID) -> np.ndarray:
    return np.array([np.max(samples.ratio_base * np.exp(samples.dist2_over_z / k))
                     for k in kappas])


def verify_gaussian_bound(tables, kind: str = "kernel", refined_tables=None,
                          growth: float = 0.0, rel_floor: float = 1e-8,
                          tolerance: float = 0.10, near_min: float = 1.10) -> GaussianBoundFit:
    """Fit |p| <= C * prefactor * exp(-|y-rho|^2/(kappa |z|)) over the tables.

    C(kappa) is non-increasing in kappa, so the literal minimizer is always the
    largest grid value.  The fit therefore reports the smallest kappa whose C
    is within ``near_min`` of the smallest C on the grid.  ``growth``
    multiplies samples by exp(-growth * Re z) before fitting.  When
    ``refined_tables`` is given, C is recomputed there at the same kappa and
    the relative change is compared with ``tolerance``.
    """
    if isinstance(tables, KernelTable):
        tables = [tables]
    samples = _collect(tables, kind, growth, rel_floor)
    if samples.ratio_base.size == 0:
        raise FitFailure("no samples above the noise floor")
    Ck = C_of_kappa(samples)
    if not np.any(np.isfinite(Ck)):
        raise FitFailure("C(kappa) diverges for every kappa on the grid")
    cmin = np.nanmin(Ck)
    i = int(np.argmax(Ck <= near_min * cmin))
    C, kappa = float(Ck[i]), float(KAPPA_GRID[i])
    if not (np.isfinite(C) and C > 0):
        raise FitFailure(f"non-finite constant C={C}")
    C2 = stable = None
    if refined_tables is not None:
        if isinstance(refined_tables, KernelTable):
            refined_tables = [refined_tables]
        s2 = _collect(refined_tables, kind, growth, rel_floor)
        C2 = float(C_of_kappa(s2, [kappa])[0])
        stable = bool(abs(C2 - C) / C < tolerance)
    pref = {"kernel": "|z|^-1/2 rho^-c (rho/|z|^1/2 ^ 1)^c",
            "y_derivative": "|z|^-1 rho^-c (y/|z|^1/2 ^ 1)(rho/|z|^1/2 ^ 1)^c",
            "t_derivative": "|z|^-3/2 rho^-c (rho/|z|^1/2 ^ 1)^c"}[kind]
    return GaussianBoundFit(C, kappa, kind, pref, int(samples.ratio_base.size), Ck,
                            saturated=bool(i == len(KAPPA_GRID) - 1), C_refined=C2,
                            stable=stable, growth_removed=float(growth))


def _subtable(full: KernelTable, idx: np.ndarray, values: np.ndarray) -> KernelTable:
    return KernelTable(full.z, full.y[idx], full.rho, idx, values[idx], full.c, b=full.b)


def kernel_tables(op: DiscreteOperator1D, times, sample_index=None,
                  derivative: bool = False) -> list[KernelTable]:
    """Sub-sampled kernel (or D_y kernel) tables on a 64 x 64 lattice per time."""
    idx = default_sample_index(op.J) if sample_index is None else sample_index
    D = derivative_stencil(op.grid) if derivative else None
    tabs = []
    for z in times:
        full = heat_kernel(op, z, idx)
        vals = D.matvec(full.values.T).T if derivative else full.values
        tabs.append(_subtable(full, idx, vals))
    return tabs


def scaled_kernel_tables(c: float, times, J: int, grading: float = 2.0, y_factor: float = 20.0,
                         derivative: bool = False) -> list[KernelTable]:
    """Kernel tables where each time gets its own grid with Y_max = y_factor*sqrt|z|.

    A single grid cannot resolve three time decades at once; a grid that
    follows the parabolic length scale keeps every time point equally resolved.
    """
    tabs = []
    for z in times:
        grid = build_graded_grid(J, y_factor * np.sqrt(abs(z)), grading)
        tabs += kernel_tables(assemble_bessel(grid, c), [z], derivative=derivative)
    return tabs


# -- comparison operators S^{alpha,beta}, Gamma, Psi -----------------------

def _gauss_cell_integrals(y: np.ndarray, edges: np.ndarray, width: float) -> np.ndarray:
    """int_{cell k} exp(-(y_i - z)^2 / width^2) dz for every node i and cell k."""
    a = (edges[None, :] - y[:, None]) / width
    F = 0.5 * np.sqrt(np.pi) * width * erf(a)
    return np.diff(F, axis=1)


def S_alpha_beta_matrix(grid: RadialGrid, t: float, alpha: float, beta: float,
                        kappa: float) -> np.ndarray:
    if not t > 0:
        raise ValueError("t must be positive")
    s = np.sqrt(t)
    y = grid.nodes
    G = _gauss_cell_integrals(y, grid.edges, np.sqrt(kappa * t))
    left = np.minimum(y / s, 1.0) ** (-alpha)
    right = np.minimum(y / s, 1.0) ** (-beta)
    return left[:, None] * G * right[None, :] / s


def apply_S_alpha_beta(grid: RadialGrid, t: float, alpha: float, beta: float, kappa: float,
                       f) -> GridFunction1D:
    """t^{-1/2} int (y/sqrt t ^ 1)^-alpha (z/sqrt t ^ 1)^-beta e^{-|y-z|^2/(kappa t)} f(z) dz.

    f is taken cellwise constant and the Gaussian is integrated exactly per
    cell, so the quadrature is Lebesgue in z.
    """
    return GridFunction1D(grid, S_alpha_beta_matrix(grid, t, alpha, beta, kappa) @ values_of(f))


GAMMA_T = np.geomspace(1e-8, 1e5, 261)


def _log_trapezoid_weights(t: np.ndarray) -> np.ndarray:
    u = np.log(t)
    w = np.zeros_like(t)
    du = np.diff(u)
    w[:-1] += 0.5 * du
    w[1:] += 0.5 * du
    return w * t


def apply_gamma_psi(grid: RadialGrid, c: float, lam: float, f, kappa: float = 4.0,
                    times: np.ndarray = GAMMA_T):
    """Gamma(lam) f and Psi(lam) f built from S^{0,-c}.

    The Laplace integrals use the trapezoid rule in log t on a fixed time grid
    that does not depend on lam, so monotonicity in lam is inherited exactly.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    f = values_of(f)
    w = _log_trapezoid_weights(times)
    g = np.zeros(grid.J, dtype=np.result_type(f, float))
    p = np.zeros_like(g)
    for t, wt in zip(times, w):
        e = np.exp(-lam * t) * wt
        if e == 0:
            continue
        Sf = S_alpha_beta_matrix(grid, t, 0.0, -c, kappa) @ f
        g += e * Sf
        p += e * Sf / np.sqrt(t)
    return GridFunction1D(grid, g), GridFunction1D(grid, p)


# -- interpolation inequality ------------------------------------------------

def interpolation_constant(op: DiscreteOperator1D, probes, m: float, p: float,
                           eps=tuple(2.0 ** -k for k in range(11))) -> float:
    """Smallest C with ||D u|| <= eps ||B u|| + (C/eps) ||u|| over probes and eps."""
    from .weighted_grid import weighted_norm
    D = derivative_stencil(op.grid)
    best = 0.0
    for u in probes:
        u = values_of(u)
        nd = weighted_norm(D.matvec(u), m, p, op.grid)
        nb = weighted_norm(op.matvec(u), m, p, op.grid)
        nu = weighted_norm(u, m, p, op.grid)
        for e in eps:
            best = max(best, e * (nd - e * nb) / nu)
    return best
