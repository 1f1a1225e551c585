"""Spatially homogeneous noise, the anticipating Walsh integral and the
random-field X-integral, with heat and wave fundamental solutions.

Fields live on a uniform box grid of C cells.  A space-time field is a
:class:`~hvolterra.paths.Path` whose values are vectors of length C.  The
cell Gram matrix of the correlation measure is factored once,

    G = V diag(lam) V^T,   S = V_r sqrt(lam_r),   Q = V_r / sqrt(lam_r),

so that the field noise of cell c in time cell i is M_i(c) = sum_k S[c, k]
dB_{i,k} with r = rank(G) independent Brownian motions, and the columns
of Q form an orthonormal system of the correlation inner product.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, special

from .chaos import (
    ChaosElement,
    MalliavinField,
    NoiseBasis,
    accumulate,
    make_increment,
    skorohod_dense,
    trace_dense,
)
from .kernels import KernelOperator, OperatorKernel, box_increment
from .paths import Path
from .xintegral import VolterraSpec, XIntegralResult, x_integral

__all__ = [
    "HomogeneousNoiseSpec",
    "h_inner",
    "walsh_norm0",
    "field_increment",
    "field_measure",
    "field_path",
    "transform_integrand",
    "rf_skorohod",
    "heat_kernel",
    "heat_kernel_dx",
    "heat_kernel_dtdx",
    "heat_derivative_bound",
    "heat_box_half_width",
    "FieldKernel",
    "heat_field_kernel",
    "function_field_kernel",
    "assemble_Kg_field",
    "rf_X",
    "rf_x_integral",
    "hilbert_spec",
    "hilbert_equivalence_gap",
    "SphereQuadrature",
    "BallQuadrature4",
    "wave3d_rho",
    "wave3d_Kg",
    "wave4d_phi",
    "wave4d_Kg",
    "wave_moment_check",
    "field_snapshot_rows",
    "write_field_snapshot",
]

GAMMAS = ("dirac", "gaussian", "exponential")
EIGEN_FLOOR = -1e-10
BOUNDARY_MASS_LIMIT = 1e-4


# ---------------------------------------------------------------------------
# Correlation measures


def _second_antiderivative(gamma: str, width: float) -> Callable[[np.ndarray], np.ndarray]:
    """F with F'' equal to the one-axis density of Gamma."""
    if gamma == "dirac":
        return lambda x: np.maximum(x, 0.0)
    if gamma == "gaussian":
        def F(x):
            u = x / width
            return x * special.ndtr(u) + width * np.exp(-0.5 * u * u) / math.sqrt(2 * math.pi)
        return F
    if gamma == "exponential":
        return lambda x: np.maximum(x, 0.0) + 0.5 * width * np.exp(-np.abs(x) / width)
    raise ValueError(f"unknown correlation measure {gamma!r}; choose from {GAMMAS}")


def _axis_gram(gamma: str, width: float, n: int, h: float) -> np.ndarray:
    """int_{cell a} int_{cell b} gamma(y - y') dy' dy for one axis."""
    if gamma == "dirac":
        return h * np.eye(n)
    F = _second_antiderivative(gamma, width)
    offsets = (np.arange(n)[:, None] - np.arange(n)[None, :]) * h
    return F(offsets + h) - 2.0 * F(offsets) + F(offsets - h)


@dataclass(frozen=True, eq=False)
class HomogeneousNoiseSpec:
    """White-in-time noise on a box grid with spatial correlation Gamma.

    ``gamma`` is ``dirac`` (white), ``gaussian`` (density of width
    ``width``) or ``exponential`` (separable Laplace density of scale
    ``width``).
    """

    time_grid: np.ndarray
    lower: tuple
    upper: tuple
    cells: int
    gamma: str = "dirac"
    width: float = 1.0
    d_max: int = 4
    rank_tol: float = 1e-12
    gram: np.ndarray = field(init=False, repr=False)
    eigenvalues: np.ndarray = field(init=False, repr=False)
    S: np.ndarray = field(init=False, repr=False)
    Q: np.ndarray = field(init=False, repr=False)
    basis: NoiseBasis = field(init=False, repr=False)

    def __post_init__(self):
        lo = tuple(float(x) for x in np.atleast_1d(self.lower))
        hi = tuple(float(x) for x in np.atleast_1d(self.upper))
        if len(lo) != len(hi) or any(b <= a for a, b in zip(lo, hi)):
            raise ValueError("need lower < upper in every coordinate")
        if self.cells < 1:
            raise ValueError("need at least one cell per axis")
        if self.gamma not in GAMMAS:
            raise ValueError(f"unknown correlation measure {self.gamma!r}; choose from {GAMMAS}")
        if self.gamma != "dirac" and not self.width > 0:
            raise ValueError("correlation width must be positive")
        steps = {round((b - a) / self.cells, 12) for a, b in zip(lo, hi)}
        if len(steps) != 1:
            raise ValueError("box sides must give equal spacing in every axis")
        set_ = object.__setattr__
        set_(self, "lower", lo)
        set_(self, "upper", hi)
        set_(self, "time_grid", np.asarray(self.time_grid, dtype=float))
        G1 = _axis_gram(self.gamma, self.width, self.cells, self.dx)
        G = G1
        for _ in range(self.dim - 1):
            G = np.kron(G, G1)
        G = 0.5 * (G + G.T)
        w, V = np.linalg.eigh(G)
        if w.min() < EIGEN_FLOOR:
            raise ValueError(f"correlation Gram matrix is not PSD (eigenvalue {w.min():.3e})")
        order = np.argsort(w)[::-1]
        w, V = np.clip(w[order], 0.0, None), V[:, order]
        keep = w > self.rank_tol * w[0]
        set_(self, "gram", G)
        set_(self, "eigenvalues", w)
        set_(self, "S", V[:, keep] * np.sqrt(w[keep]))
        set_(self, "Q", V[:, keep] / np.sqrt(w[keep]))
        set_(self, "basis", NoiseBasis(self.time_grid, noise_dim=int(keep.sum()), d_max=self.d_max))

    @classmethod
    def uniform(cls, N: int, T: float = 1.0, half_width: float = 1.0, cells: int = 16, dim: int = 1,
                gamma: str = "dirac", width: float = 1.0, d_max: int = 4) -> "HomogeneousNoiseSpec":
        return cls(np.linspace(0.0, T, N + 1), (-half_width,) * dim, (half_width,) * dim, cells,
                   gamma, width, d_max)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def dx(self) -> float:
        return (self.upper[0] - self.lower[0]) / self.cells

    @property
    def n_cells(self) -> int:
        return self.cells ** self.dim

    @property
    def rank(self) -> int:
        return self.S.shape[1]

    @property
    def N(self) -> int:
        return len(self.time_grid) - 1

    @property
    def T(self) -> float:
        return float(self.time_grid[-1])

    def edges(self, axis: int = 0) -> np.ndarray:
        return np.linspace(self.lower[axis], self.upper[axis], self.cells + 1)

    def centers(self) -> np.ndarray:
        """Cell centres, shape (C, d), in C order over the axes."""
        mids = [0.5 * (e[1:] + e[:-1]) for e in (self.edges(a) for a in range(self.dim))]
        mesh = np.meshgrid(*mids, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def cell_mask(self, lower, upper) -> np.ndarray:
        """Cells whose centre lies in the box [lower, upper]."""
        c = self.centers()
        lo = np.atleast_1d(np.asarray(lower, dtype=float))
        hi = np.atleast_1d(np.asarray(upper, dtype=float))
        return np.all((c >= lo) & (c <= hi), axis=1).astype(float)

    def rank_report(self) -> dict:
        w = self.eigenvalues
        return {
            "n_cells": self.n_cells,
            "rank": self.rank,
            "dropped": self.n_cells - self.rank,
            "max_eigenvalue": float(w[0]),
            "min_kept_eigenvalue": float(w[self.rank - 1]),
            "rank_reduced": self.rank < self.n_cells,
        }

    def flat(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        C = self.n_cells
        if f.shape[-1] == C:
            return f
        if f.shape[-self.dim:] == (self.cells,) * self.dim:
            return f.reshape(f.shape[: f.ndim - self.dim] + (C,))
        raise ValueError(f"field of shape {f.shape} does not match {self.cells}^{self.dim} cells")


# ---------------------------------------------------------------------------
# Inner products and the anticipating Walsh integral


def h_inner(f, h, noise: HomogeneousNoiseSpec) -> float:
    """<f, h>_H = int int f(y) h(y - z) dy Gamma(dz) for cellwise-constant f, h."""
    f, h = noise.flat(f), noise.flat(h)
    if f.ndim != 1 or h.ndim != 1:
        raise ValueError("h_inner takes single spatial fields")
    return float(f @ noise.gram @ h)


def walsh_norm0(f, noise: HomogeneousNoiseSpec) -> float:
    """Squared norm sum_i <f_i, f_i>_H dt_i of a field given per time cell."""
    f = noise.flat(f)
    if f.shape != (noise.N, noise.n_cells):
        raise ValueError(f"space-time field needs shape ({noise.N}, {noise.n_cells})")
    dt = np.diff(noise.time_grid)
    return float(np.einsum("ic,cd,id,i->", f, noise.gram, f, dt))


def field_increment(noise: HomogeneousNoiseSpec, i: int, cell: int) -> ChaosElement:
    """M_i(cell), the noise mass of one space-time cell."""
    basis = noise.basis
    return accumulate(basis, (), [(noise.S[cell, k], make_increment(basis, i, k)) for k in range(noise.rank)])


def field_measure(noise: HomogeneousNoiseSpec, t: float, mask) -> ChaosElement:
    """M_t(A) for the cell indicator ``mask`` of A."""
    basis = noise.basis
    n = basis.index_of(t)
    weights = noise.flat(mask) @ noise.S
    return accumulate(basis, (), [(weights[k], make_increment(basis, i, k))
                                  for i in range(n) for k in range(noise.rank) if weights[k] != 0.0])


def field_path(noise: HomogeneousNoiseSpec, value) -> Path:
    """Space-time field as a Path of length-C vectors.

    Accepts a Path, a scalar, one spatial field (constant in time), N cell
    values or N + 1 node values.
    """
    basis = noise.basis
    C = noise.n_cells
    if isinstance(value, Path):
        if value.value_shape != (C,):
            raise ValueError(f"field path values must have shape ({C},)")
        return value
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(C, float(arr))
    arr = noise.flat(arr)
    if arr.ndim == 1:
        return Path.constant(basis, arr)
    if arr.shape[0] == noise.N:
        return Path.step(basis, list(arr))
    if arr.shape[0] == noise.N + 1:
        return Path.from_nodes(basis, list(arr))
    raise ValueError(f"cannot read a space-time field of shape {arr.shape}")


def _coordinates(noise: HomogeneousNoiseSpec) -> np.ndarray:
    """Map of a spatial field onto the orthonormal system: G Q."""
    return noise.gram @ noise.Q


def transform_integrand(u, noise: HomogeneousNoiseSpec) -> MalliavinField:
    """Coordinates <u(s_i), e_k>_H of a field integrand as a MalliavinField."""
    u = field_path(noise, u)
    P = _coordinates(noise)
    entries = {}
    for i in range(noise.N):
        ui = u.mid(i)
        if ui.coeffs:
            for k in range(noise.rank):
                entries[(i, k)] = ui @ P[:, k]
    return MalliavinField(noise.basis, entries, ())


def rf_skorohod(u, noise: HomogeneousNoiseSpec) -> ChaosElement:
    """Anticipating Walsh integral int int u(s, y) M(ds, dy)."""
    u = field_path(noise, u)
    keys, L, R = u.dense()
    U = 0.5 * (L + R) @ _coordinates(noise)
    return skorohod_dense(noise.basis, keys, U)


# ---------------------------------------------------------------------------
# Heat kernel


def heat_kernel(t, x, d: int = 1):
    """(4 pi t)^{-d/2} exp(-|x|^2 / 4t); ``x`` has a trailing axis of length d for d > 1."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("heat kernel needs t > 0")
    x = np.asarray(x, dtype=float)
    r2 = x * x if d == 1 else np.sum(x * x, axis=-1)
    return (4 * np.pi * t) ** (-d / 2) * np.exp(-r2 / (4 * t))


def heat_kernel_dx(t, x, d: int = 1):
    """Spatial gradient -x g / 2t (same trailing axis as ``x``)."""
    t = np.asarray(t, dtype=float)
    g = heat_kernel(t, x, d)
    x = np.asarray(x, dtype=float)
    return -x * (g if d == 1 else g[..., None]) / (2 * (t if d == 1 else t[..., None] if t.ndim else t))


def heat_kernel_dtdx(t, x, d: int = 1):
    """Mixed derivative d/dt of the spatial gradient."""
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    g = heat_kernel(t, x, d)
    r2 = x * x if d == 1 else np.sum(x * x, axis=-1)
    dt_g = g * (-d / (2 * t) + r2 / (4 * t * t))
    if d > 1:
        dt_g, g, t = dt_g[..., None], g[..., None], (t[..., None] if t.ndim else t)
    return -x * dt_g / (2 * t) + x * g / (2 * t * t)


def heat_derivative_bound(t, x, c: float, a: int = 0):
    """c |x| t^{-(3 + 2a)/2} exp(-c x^2 / t)."""
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    return c * np.abs(x) * t ** (-(3 + 2 * a) / 2) * np.exp(-c * x * x / t)


def heat_box_half_width(T: float) -> float:
    """Six standard deviations of the heat kernel at time T."""
    return 6.0 * math.sqrt(2.0 * T)


# ---------------------------------------------------------------------------
# Field kernels


@dataclass(frozen=True, eq=False)
class FieldKernel:
    """g(t, s; z, y) whose spatial measure in z is d^d g / dz_1..dz_d dz.

    ``weights(noise, t, s)`` returns W[z_cell, y] = int_{z_cell} g(t, s; dz, y)
    with y the cell centres.  ``func(t, s, z, y)`` evaluates g pointwise.
    """

    kind: str
    func: Callable
    cell_weights: Callable | None = None
    anchor: float = 0.5
    params: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    def weights(self, noise: HomogeneousNoiseSpec, t: float, s: float) -> np.ndarray:
        if not t > s:
            raise ValueError("field kernel weights need t > s")
        if self.cell_weights is not None:
            return self.cell_weights(noise, t, s)
        centers = noise.centers()
        lo = centers - 0.5 * noise.dx
        hi = centers + 0.5 * noise.dx
        C = noise.n_cells
        W = np.empty((C, C))
        for zc in range(C):
            for yc in range(C):
                y = centers[yc]
                W[zc, yc] = box_increment(lambda z: self.func(t, s, z, y), lo[zc], hi[zc])
        return W

    def table(self, noise: HomogeneousNoiseSpec) -> np.ndarray:
        """W(t_j, s_i) for j > i, shape (N + 1, N, C, C)."""
        cached = self._cache.get(noise)
        if cached is None:
            t = noise.time_grid
            s = t[:-1] + self.anchor * np.diff(t)
            N, C = noise.N, noise.n_cells
            cached = np.zeros((N + 1, N, C, C))
            for i in range(N):
                for j in range(i + 1, N + 1):
                    cached[j, i] = self.weights(noise, t[j], s[i])
            self._cache[noise] = cached
        return cached

    def boundary_mass(self, noise: HomogeneousNoiseSpec) -> float:
        """Mass outside the box of a heat kernel centred in the box at time T."""
        if self.kind != "heat":
            return 0.0
        sd = math.sqrt(2.0 * noise.T)
        inside = 1.0
        for lo, hi in zip(noise.lower, noise.upper):
            c = 0.5 * (lo + hi)
            inside *= special.ndtr((hi - c) / sd) - special.ndtr((lo - c) / sd)
        return 1.0 - inside

    def check_domain(self, noise: HomogeneousNoiseSpec) -> float:
        mass = self.boundary_mass(noise)
        if mass > BOUNDARY_MASS_LIMIT:
            warnings.warn(f"spatial box too small: heat kernel boundary mass {mass:.2e}", RuntimeWarning,
                          stacklevel=3)
        return mass

    def operator_kernel(self, noise: HomogeneousNoiseSpec) -> OperatorKernel:
        """The same kernel as a (C x C) operator-valued g(t, s)."""
        t = noise.time_grid
        s_grid = t[:-1] + self.anchor * np.diff(t)
        tab = self.table(noise)

        def lookup(tv, sv):
            j = int(np.argmin(np.abs(t - tv)))
            i = int(np.argmin(np.abs(s_grid - sv)))
            if abs(t[j] - tv) < 1e-12 and abs(s_grid[i] - sv) < 1e-12 and j > i:
                return tab[j, i]
            return self.weights(noise, tv, sv)

        def pairs(ts, ss):
            return np.stack([lookup(a, b) for a, b in zip(ts, ss)])

        C = noise.n_cells
        return OperatorKernel(func=lookup, shape=(C, C), diagonal="singular", table=pairs,
                              anchor=self.anchor, name=f"field-{self.kind}", params=dict(self.params))


def _heat_cell_weights(noise: HomogeneousNoiseSpec, t: float, s: float) -> np.ndarray:
    tau = t - s
    e = noise.edges(0)
    y = 0.5 * (e[1:] + e[:-1])
    # one-axis increments of z -> g(tau, z - y) across each z cell
    point = heat_kernel(tau, e[:, None] - y[None, :], 1)
    W1 = point[1:] - point[:-1]
    W = W1
    for _ in range(noise.dim - 1):
        W = np.kron(W, W1)
    return W


def heat_field_kernel(anchor: float = 0.5) -> FieldKernel:
    """g(t, s; z, y) = heat kernel at time t - s and displacement z - y."""
    def func(t, s, z, y):
        z = np.asarray(z, dtype=float)
        return heat_kernel(t - s, z - y, z.size) if z.size > 1 else heat_kernel(t - s, float(z[0] - y[0]), 1)

    return FieldKernel("heat", func, _heat_cell_weights, anchor, {})


def function_field_kernel(func: Callable, kind: str = "table", anchor: float = 0.5) -> FieldKernel:
    """Kernel from a pointwise g(t, s, z, y); increments by corner sums."""
    return FieldKernel(kind, func, None, anchor, {})


# ---------------------------------------------------------------------------
# Random-field kernel and integral


def _field_kernel_coeffs(W: np.ndarray, L: np.ndarray, S: np.ndarray, n: int) -> np.ndarray:
    """K(t_n, s_i, y) = sum_z S_i(z) W(t_{i+1}, s_i) + sum_{i<j<n} L_j(z) (W(t_{j+1}, s_i) - W(t_j, s_i))."""
    nk, _, C = L.shape
    out = np.zeros((nk, n, C))
    for i in range(n):
        out[:, i] = S[:, i] @ W[i + 1, i]
        for j in range(i + 1, n):
            out[:, i] += L[:, j] @ (W[j + 1, i] - W[j, i])
    return out


def assemble_Kg_field(g: FieldKernel, h, noise: HomogeneousNoiseSpec, t: float, slot: str = "left") -> KernelOperator:
    """K_g(h)(t, s_i, y) for the cells s_i < t and centres y.

    ``slot`` picks the value of h on the cell of s paired with g(t_{i+1}, s_i).
    """
    h = field_path(noise, h)
    n = noise.basis.index_of(t)
    keys, L, R = h.dense()
    S = {"left": L, "right": R, "mid": 0.5 * (L + R)}.get(slot)
    if S is None:
        raise ValueError(f"unknown slot {slot!r}")
    if n == 0:
        coeffs = np.zeros((len(keys), 0, noise.n_cells))
    else:
        g.check_domain(noise)
        coeffs = _field_kernel_coeffs(g.table(noise), L, S, n)
    return KernelOperator(noise.basis, n, "field", keys, coeffs, h.truncated)


def _sigma_cells(noise: HomogeneousNoiseSpec, sigma) -> np.ndarray:
    """Deterministic volatility per time cell, shape (N, C)."""
    if sigma is None:
        return np.ones((noise.N, noise.n_cells))
    p = field_path(noise, sigma)
    if not p.is_deterministic:
        raise ValueError("random-field volatility must be deterministic")
    L, R = p.deterministic_arrays()
    return 0.5 * (L + R)


def rf_X(g: FieldKernel, noise: HomogeneousNoiseSpec, t: float, sigma=None) -> ChaosElement:
    """X(t, cell) = int int W(t, s; cell, y) sigma(s, y) M(ds, dy) for every cell."""
    n = noise.basis.index_of(t)
    C = noise.n_cells
    if n == 0:
        return ChaosElement.zero(noise.basis, (C,))
    sig = _sigma_cells(noise, sigma)
    W = g.table(noise)[n, :n]
    U = np.einsum("izy,iy,yk->izk", W, sig[:n], _coordinates(noise))
    return skorohod_dense(noise.basis, [()], U[None])


def rf_x_integral(Y, g: FieldKernel, noise: HomogeneousNoiseSpec, t: float, sigma=None) -> XIntegralResult:
    """int_0^t int Y(s, y) X(ds, dy).

    Walsh integral of K_g(Y) sigma plus the Gamma-weighted trace
    int int int D_{s, y - z} K_g(Y)(t, s, y) sigma(s, y) dy Gamma(dz) ds.
    """
    Y = field_path(noise, Y)
    basis = noise.basis
    n = basis.index_of(t)
    report_extra = dict(noise.rank_report())
    if n == 0:
        zero = ChaosElement.zero(basis, ())
        return XIntegralResult(zero, zero, zero, {**_domain(True, True, True, False), **report_extra})
    report_extra["boundary_mass"] = g.check_domain(noise)
    sig = _sigma_cells(noise, sigma)[:n]
    keys, L, R = Y.dense()
    W = g.table(noise)
    Kmid = _field_kernel_coeffs(W, L, 0.5 * (L + R), n)
    KR = Kmid if Y.is_step else _field_kernel_coeffs(W, L, R, n)
    P = _coordinates(noise)
    sk = skorohod_dense(basis, keys, (Kmid * sig) @ P)
    tr = trace_dense(basis, keys, (KR * sig) @ P)
    value = sk + tr
    value.truncated = sk.truncated or Y.truncated
    finite = bool(np.all(np.isfinite(Kmid)) and np.all(np.isfinite(KR)))
    report = _domain(finite, bool(np.isfinite(sk.second_moment())), bool(np.isfinite(tr.second_moment())),
                     value.truncated)
    return XIntegralResult(value, sk, tr, {**report, **report_extra})


def _domain(kernel: bool, skorohod: bool, trace: bool, truncated: bool) -> dict:
    return {
        "kernel_finite": kernel,
        "skorohod_finite": skorohod,
        "trace_finite": trace,
        "truncated": truncated,
        "in_domain": kernel and skorohod and trace and not truncated,
    }


def hilbert_spec(g: FieldKernel, noise: HomogeneousNoiseSpec, sigma=None) -> VolterraSpec:
    """The random field as a Volterra process with values in R^C.

    The volatility maps the r independent Brownian motions to cell noise,
    sigma(s, y) S[y, k].
    """
    sig = _sigma_cells(noise, sigma)
    mats = [sig[i][:, None] * noise.S for i in range(noise.N)]
    return VolterraSpec(g.operator_kernel(noise), Path.step(noise.basis, mats), noise.basis)


def hilbert_equivalence_gap(Y, g: FieldKernel, noise: HomogeneousNoiseSpec, t: float, sigma=None) -> float:
    """Chaos norm of (random-field integral) - (Hilbert-valued X-integral)."""
    Y = field_path(noise, Y)
    rf = rf_x_integral(Y, g, noise, t, sigma).value
    row = Path(noise.basis, [x.reshape((1, noise.n_cells)) for x in Y.left],
               [x.reshape((1, noise.n_cells)) for x in Y.right])
    hv = x_integral(row, hilbert_spec(g, noise, sigma), t).value.reshape(())
    return (rf - hv).l2_norm()


# ---------------------------------------------------------------------------
# Wave kernels


@dataclass(frozen=True)
class SphereQuadrature:
    """Gauss-Legendre in cos(theta) times a uniform azimuth rule on the unit 2-sphere."""

    n_theta: int = 16
    n_phi: int = 32

    @property
    def rule(self) -> tuple[np.ndarray, np.ndarray]:
        x, w = np.polynomial.legendre.leggauss(self.n_theta)
        phi = 2 * np.pi * np.arange(self.n_phi) / self.n_phi
        st = np.sqrt(1 - x * x)
        nodes = np.stack([
            np.outer(st, np.cos(phi)).ravel(),
            np.outer(st, np.sin(phi)).ravel(),
            np.repeat(x, self.n_phi),
        ], axis=-1)
        weights = np.repeat(w, self.n_phi) * (2 * np.pi / self.n_phi)
        return nodes, weights


@dataclass(frozen=True)
class BallQuadrature4:
    """Rule for int_{B4(0,1)} f(y) / sqrt(1 - |y|^2) dy.

    Radius r = sin(a) removes the edge singularity: r^3 dr / sqrt(1 - r^2)
    = sin^3(a) da.  The unit 3-sphere uses hyperspherical angles.
    """

    n_radial: int = 24
    n_polar: int = 16
    n_phi: int = 24

    @property
    def rule(self) -> tuple[np.ndarray, np.ndarray]:
        xa, wa = np.polynomial.legendre.leggauss(self.n_radial)
        a = 0.25 * np.pi * (xa + 1)
        r, wr = np.sin(a), 0.25 * np.pi * wa * np.sin(a) ** 3
        x1, w1 = np.polynomial.legendre.leggauss(self.n_polar)
        p1 = 0.5 * np.pi * (x1 + 1)
        w1 = 0.5 * np.pi * w1 * np.sin(p1) ** 2
        c2, w2 = np.polynomial.legendre.leggauss(self.n_polar)
        phi = 2 * np.pi * np.arange(self.n_phi) / self.n_phi
        P1, C2, PH = np.meshgrid(p1, c2, phi, indexing="ij")
        S2 = np.sqrt(1 - C2 * C2)
        sphere = np.stack([
            np.cos(P1), np.sin(P1) * C2, np.sin(P1) * S2 * np.cos(PH), np.sin(P1) * S2 * np.sin(PH)
        ], axis=-1).reshape(-1, 4)
        ws = (w1[:, None, None] * w2[None, :, None] * np.full(self.n_phi, 2 * np.pi / self.n_phi)).ravel()
        nodes = (r[:, None, None] * sphere[None]).reshape(-1, 4)
        weights = (wr[:, None] * ws[None]).ravel()
        return nodes, weights


def _apply(f: Callable, pts: np.ndarray) -> np.ndarray:
    vals = np.asarray(f(pts), dtype=float)
    return np.broadcast_to(vals, pts.shape[:1]) if vals.ndim == 0 else vals


def wave3d_rho(v: float, f: Callable, quad: SphereQuadrature | None = None) -> float:
    """rho_v(f) = v^2 int_{unit sphere} f(v y) rho_1(dy)."""
    if v < 0:
        raise ValueError("radius must be nonnegative")
    nodes, weights = (quad or SphereQuadrature()).rule
    return float(v * v * weights @ _apply(f, v * nodes))


def _derivative(Y: Callable, dY: Callable | None) -> Callable:
    if dY is not None:
        return dY

    def fd(u):
        h = 1e-6 * max(1.0, abs(u))
        lo = max(u - h, 0.0)
        return (Y(u + h) - Y(lo)) / (u + h - lo)

    return fd


PROBE_RADII = (1e-2, 1e-7)


def _decays(rate: Callable[[float], float]) -> bool:
    """True unless rate(v) stays of order one (or is non-finite) as v -> 0."""
    big, small = (abs(rate(v)) for v in PROBE_RADII)
    if not (math.isfinite(big) and math.isfinite(small)):
        return False
    return not (small > 0.5 * big and small > 1e-12)


def wave3d_Kg(Y: Callable, t: float, s: float, f: Callable, c: float = 1.0, dY: Callable | None = None,
              quad: SphereQuadrature | None = None) -> float:
    """c [ Y(t) rho_{t-s}(f)/(t-s) - int_0^{t-s} Y'(s+v) rho_v(f)/v dv ]."""
    tau = t - s
    if not tau > 0:
        raise ValueError("need t > s")
    d1 = _derivative(Y, dY)
    if not _decays(lambda v: d1(s + v) * v * v):
        raise ValueError("Y' blows up like v^-2 or faster at the diagonal; kernel undefined")
    head = Y(t) * wave3d_rho(tau, f, quad) / tau
    tail, _ = integrate.quad(lambda v: d1(s + v) * wave3d_rho(v, f, quad) / v if v > 0 else 0.0,
                             0.0, tau, epsabs=1e-13, epsrel=1e-11, limit=200)
    return c * (head - tail)


def wave4d_phi(v: float, f: Callable, quad: BallQuadrature4 | None = None) -> float:
    """(v^2 - |.|^2)_+^{-1/2} f = v^3 int_{B4} f(v y) / sqrt(1 - |y|^2) dy."""
    if v < 0:
        raise ValueError("radius must be nonnegative")
    nodes, weights = (quad or BallQuadrature4()).rule
    return float(v ** 3 * weights @ _apply(f, v * nodes))


def wave4d_Kg(Y: Callable, t: float, s: float, f: Callable, dY: Callable, d2Y: Callable,
              c4: float = 1.0, quad: BallQuadrature4 | None = None) -> float:
    """c4 [ Y(t) g(tau) f - Y'(t)/tau Phi(tau) + int_0^tau (Y''v - Y')/v^2 Phi(v) dv ].

    Phi(v) = (v^2 - |.|^2)_+^{-1/2} f and g(v) f = Phi'(v) / v.
    """
    tau = t - s
    if not tau > 0:
        raise ValueError("need t > s")

    def rate(v):
        return max(abs(dY(s + v)) * v * v, abs(d2Y(s + v)) * v ** 3)

    if not _decays(rate):
        raise ValueError("boundary condition Y'/v (v^2 - |.|^2)^{-1/2} -> 0 fails at the diagonal")
    h = 1e-5 * tau
    dphi = (wave4d_phi(tau + h, f, quad) - wave4d_phi(tau - h, f, quad)) / (2 * h)
    phi_tau = wave4d_phi(tau, f, quad)
    tail, _ = integrate.quad(
        lambda v: (d2Y(s + v) * v - dY(s + v)) / (v * v) * wave4d_phi(v, f, quad) if v > 0 else 0.0,
        0.0, tau, epsabs=1e-13, epsrel=1e-11, limit=200)
    return c4 * (Y(t) * dphi / tau - dY(t) / tau * phi_tau + tail)


def wave_moment_check(Y, sigma, p: float = 2.0, dx: float = 1.0, dt: float = 1.0,
                      tail_ratio: float = 10.0) -> dict:
    """Grid estimates of the integrability quantities trading Y against sigma.

    ``Y`` holds samples of shape (M, n_t, n_1, ..., n_d) and ``sigma`` samples
    of shape (M, ...).  Report only.
    """
    if p <= 1:
        raise ValueError("need p > 1")
    q = p / (p - 1)
    Y = np.asarray(Y, dtype=float)
    sig = np.asarray(sigma, dtype=float)
    d = Y.ndim - 2
    deriv = Y
    for axis in range(2, 2 + d):
        deriv = np.gradient(deriv, dx, axis=axis) if deriv.shape[axis] > 1 else np.zeros_like(deriv)
    mixed = np.gradient(deriv, dt, axis=1) if deriv.shape[1] > 1 else np.zeros_like(deriv)
    cell = dx ** d
    y_term = float(np.sum(np.mean(deriv[:, -1] ** (2 * p), axis=0) ** (1 / p)) * cell)
    mixed_term = float(np.sum(np.mean(mixed ** (2 * p), axis=0) ** (1 / p)) * cell * dt)
    sig_q = np.mean(sig ** (2 * q), axis=0) ** (1 / q)
    sig_2 = np.mean(sig ** 2, axis=0)
    sigma_term = float(np.max(sig_q))
    ratio = float(np.max(sig_q / np.where(sig_2 > 0, sig_2, 1.0)))
    finite = all(math.isfinite(v) for v in (y_term, mixed_term, sigma_term))
    heavy = ratio > tail_ratio
    return {
        "p": p,
        "q": q,
        "y_term": y_term,
        "mixed_term": mixed_term,
        "sigma_term": sigma_term,
        "sigma_tail_ratio": ratio,
        "finite": finite,
        "heavy_tail": heavy,
        "status": "pass" if finite and not heavy else "flagged",
    }


# ---------------------------------------------------------------------------
# Snapshots


def field_snapshot_rows(noise: HomogeneousNoiseSpec, t: float, values) -> list[list[float]]:
    """Rows (t, x_1..x_d, value) over the cell centres."""
    values = noise.flat(values)
    return [[float(t), *map(float, x), float(v)] for x, v in zip(noise.centers(), values)]


def write_field_snapshot(target, noise: HomogeneousNoiseSpec, snapshots) -> str:
    """CSV "t,x1..xd,value" for (t, values) pairs; writes to ``target`` if given."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t", *[f"x{a + 1}" for a in range(noise.dim)], "value"])
    for t, values in snapshots:
        writer.writerows(field_snapshot_rows(noise, t, values))
    text = buf.getvalue()
    if target is not None:
        with open(target, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text
