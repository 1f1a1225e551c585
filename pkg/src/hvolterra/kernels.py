"""Deterministic operator kernels g(t, s) and the kernel operator K_g(h).

A kernel is tabulated on a noise basis as ``G[j, i] = g(t_j, s_i)`` for
grid times t_j > s_i, where ``s_i = t_i + anchor * dt_i`` is the point at
which cell i of the noise is attached.  Kernels with a singular diagonal
use a positive anchor so that the first Stieltjes cell never touches it.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path as FsPath
from typing import Callable, Mapping

import numpy as np
from scipy import integrate, linalg

from .chaos import ChaosElement, NoiseBasis
from .paths import Path, unstack

__all__ = [
    "OperatorKernel",
    "KernelGrid",
    "KernelOperator",
    "make_exp_kernel",
    "make_fbm_kernel",
    "make_identity_kernel",
    "make_function_kernel",
    "make_table_kernel",
    "load_table_kernel",
    "kernel_from_descriptor",
    "fbm_profile",
    "fbm_variance_quadrature",
    "calibrate_fbm",
    "symmetric_sqrt",
    "stieltjes_integrate",
    "box_increment",
    "assemble_Kg",
    "VARIANTS",
]

VARIANTS = ("general", "regular", "ac", "shift")


@dataclass(frozen=True, eq=False)
class OperatorKernel:
    """g(t, s) for 0 <= s < t, with values of shape ``shape``.

    ``func`` evaluates a single pair.  ``table`` optionally evaluates arrays
    of pairs at once and returns shape ``(len, *shape)``.  ``shift`` is the
    one-argument profile of a shift-invariant kernel.
    """

    func: Callable[[float, float], np.ndarray]
    shape: tuple
    diagonal: str = "defined"
    density: Callable[[float, float], np.ndarray] | None = None
    shift: Callable[[float], np.ndarray] | None = None
    table: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    anchor: float = 0.0
    variation_bound: Callable[[float, float, float], float] | None = None
    name: str = "custom"
    params: Mapping = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.diagonal not in ("defined", "singular"):
            raise ValueError("diagonal must be 'defined' or 'singular'")
        if not 0.0 <= self.anchor < 1.0:
            raise ValueError("anchor must lie in [0, 1)")

    @property
    def shift_invariant(self) -> bool:
        return self.shift is not None

    @property
    def regular(self) -> bool:
        return self.diagonal == "defined"

    def __call__(self, t: float, s: float) -> np.ndarray:
        return self.eval(t, s)

    def eval(self, t: float, s: float) -> np.ndarray:
        if s < 0 or t < s:
            raise ValueError(f"kernel needs 0 <= s <= t, got t={t}, s={s}")
        if t == s:
            return self.diag(s)
        return np.asarray(self.func(float(t), float(s)), dtype=float).reshape(self.shape)

    def diag(self, s: float) -> np.ndarray:
        """g(s, s); only for kernels with a defined diagonal."""
        if not self.regular:
            raise ValueError(f"kernel '{self.name}' has a singular diagonal")
        return np.asarray(self.func(float(s), float(s)), dtype=float).reshape(self.shape)

    def phi(self, t: float, s: float) -> np.ndarray:
        if self.density is None:
            raise ValueError(f"kernel '{self.name}' has no density")
        return np.asarray(self.density(float(t), float(s)), dtype=float).reshape(self.shape)

    def evaluate_pairs(self, ts: np.ndarray, ss: np.ndarray) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        ss = np.asarray(ss, dtype=float)
        if ts.size == 0:
            return np.zeros((0,) + self.shape)
        if self.table is not None:
            return np.asarray(self.table(ts, ss), dtype=float).reshape((ts.size,) + self.shape)
        return np.stack([self.eval(t, s) for t, s in zip(ts, ss)])

    def grid(self, basis: NoiseBasis) -> "KernelGrid":
        key = ("grid", basis)
        cached = self._cache.get(key)
        if cached is None:
            cached = KernelGrid.build(self, basis)
            self._cache[key] = cached
        return cached

    def descriptor(self) -> dict:
        return {"type": self.name, "params": dict(self.params)}


class KernelGrid:
    """Tabulated kernel on one basis.

    ``G[j, i] = g(t_j, s_i)`` for j > i (zero otherwise), ``diag[i] =
    g(s_i, s_i)`` when defined, ``phi[j, i] = phi(t_j, s_i)`` on demand.
    """

    def __init__(self, kernel: OperatorKernel, basis: NoiseBasis, anchors, G, diag):
        self.kernel = kernel
        self.basis = basis
        self.anchors = anchors
        self.G = G
        self.diag = diag
        self._phi = None
        self._phi_anchor = None

    @classmethod
    def build(cls, kernel: OperatorKernel, basis: NoiseBasis) -> "KernelGrid":
        t = basis.time_grid
        N = basis.N
        anchors = t[:-1] + kernel.anchor * basis.dt
        jj, ii = np.nonzero(np.tril(np.ones((N + 1, N), dtype=bool), -1))
        G = np.zeros((N + 1, N) + kernel.shape)
        G[jj, ii] = kernel.evaluate_pairs(t[jj], anchors[ii])
        diag = None
        if kernel.regular:
            diag = np.stack([kernel.diag(s) for s in anchors])
        return cls(kernel, basis, anchors, G, diag)

    @property
    def N(self) -> int:
        return self.basis.N

    def next_cell(self) -> np.ndarray:
        """g(t_{i+1}, s_i) for every cell."""
        idx = np.arange(self.N)
        return self.G[idx + 1, idx]

    def phi(self) -> np.ndarray:
        """phi(t_j, s_i) for j > i."""
        if self._phi is None:
            k = self.kernel
            t = self.basis.time_grid
            N = self.N
            out = np.zeros((N + 1, N) + k.shape)
            for i in range(N):
                for j in range(i + 1, N + 1):
                    out[j, i] = k.phi(t[j], self.anchors[i])
            self._phi = out
        return self._phi

    def phi_at_anchors(self) -> np.ndarray:
        """phi(s_i, s_j) for j < i, as used by the semimartingale drift."""
        if self._phi_anchor is None:
            k = self.kernel
            N = self.N
            s = self.anchors
            out = np.zeros((N, N) + k.shape)
            for i in range(N):
                for j in range(i):
                    out[i, j] = k.phi(s[i], s[j])
            self._phi_anchor = out
        return self._phi_anchor

    def at_anchors(self) -> np.ndarray:
        """g(s_i, s_j) for j < i (zero otherwise)."""
        key = "anchor_table"
        cached = self.kernel._cache.get((key, self.basis))
        if cached is None:
            N = self.N
            s = self.anchors
            ii, jj = np.nonzero(np.tril(np.ones((N, N), dtype=bool), -1))
            cached = np.zeros((N, N) + self.kernel.shape)
            cached[ii, jj] = self.kernel.evaluate_pairs(s[ii], s[jj])
            self.kernel._cache[(key, self.basis)] = cached
        return cached


# ---------------------------------------------------------------------------
# Kernel constructors


def make_identity_kernel(dim: int = 1, scale: float = 1.0) -> OperatorKernel:
    eye = scale * np.eye(dim)

    def func(t, s):
        return eye

    def table(ts, ss):
        return np.broadcast_to(eye, (np.size(ts), dim, dim))

    return OperatorKernel(
        func=func,
        shape=(dim, dim),
        density=lambda t, s: np.zeros((dim, dim)),
        shift=lambda tau: eye,
        table=table,
        variation_bound=lambda s, u, v: 0.0,
        name="identity",
        params={"dim": dim, "scale": scale},
    )


def make_exp_kernel(A) -> OperatorKernel:
    """g(t, s) = exp(-(t - s) A) with density -A exp(-(t - s) A)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] != A.shape[1]:
        raise ValueError("generator must be square")
    dim = A.shape[0]
    diagonal = np.allclose(A, np.diag(np.diag(A)), rtol=0, atol=0)
    a = np.diag(A).copy()

    if diagonal:
        def shift(tau):
            return np.diag(np.exp(-tau * a))

        def table(ts, ss):
            tau = np.asarray(ts) - np.asarray(ss)
            out = np.zeros((tau.size, dim, dim))
            idx = np.arange(dim)
            out[:, idx, idx] = np.exp(-np.outer(tau, a))
            return out
    else:
        @lru_cache(maxsize=1 << 16)
        def _expm(tau):
            return linalg.expm(-tau * A)

        def shift(tau):
            return _expm(float(tau))

        def table(ts, ss):
            return np.stack([_expm(float(t - s)) for t, s in zip(ts, ss)])

    def func(t, s):
        return shift(t - s)

    def density(t, s):
        return -A @ shift(t - s)

    norm = float(np.linalg.norm(A, 2))
    return OperatorKernel(
        func=func,
        shape=(dim, dim),
        density=density,
        shift=shift,
        table=table,
        variation_bound=lambda s, u, v: norm * (v - u) * math.exp(norm * (v - s)),
        name="exp",
        params={"A": A.tolist()},
    )


def _fbm_q(w: float, a: float) -> float:
    d = w - 1.0
    if abs(d) < 1e-12:
        return -a
    return -math.expm1(a * math.log(w)) / d


@lru_cache(maxsize=1 << 17)
def fbm_profile(H: float, r: float) -> float:
    """g(t, s) / (c_H s^{H-1/2}) as a function of r = t / s > 1."""
    a = H - 0.5
    if a == 0.0:
        return 1.0
    if r <= 1.0:
        return 0.0 if a > 0 else math.inf
    head = (r - 1.0) ** a
    val, _ = integrate.quad(
        _fbm_q, 1.0, r, args=(a,), weight="alg", wvar=(a, 0.0), epsrel=1e-8, epsabs=1e-12, limit=200
    )
    return head - a * val


def _fbm_scalar(H: float, c: float, t: float, s: float) -> float:
    if s <= 0.0:
        return math.inf
    return c * s ** (H - 0.5) * fbm_profile(H, t / s)


def make_fbm_kernel(H: float, Q=None, c_H: float = 1.0) -> OperatorKernel:
    """Volterra kernel of fractional Brownian motion with Hurst index H.

    The kernel is a multiple of the identity on R^K2 with K2 from the
    shape of ``Q``; the factor Q^{1/2} belongs to sigma and is returned by
    :func:`symmetric_sqrt`.
    """
    if not 0.0 < H < 1.0:
        raise ValueError("Hurst index must lie in (0, 1)")
    dim = 1 if Q is None else np.atleast_2d(np.asarray(Q, dtype=float)).shape[0]
    eye = np.eye(dim)
    H = float(H)
    c = float(c_H)

    def func(t, s):
        return _fbm_scalar(H, c, t, s) * eye

    def table(ts, ss):
        vals = np.array([_fbm_scalar(H, c, t, s) for t, s in zip(ts, ss)])
        return vals[:, None, None] * eye

    def density(t, s):
        if H == 0.5:
            return 0.0 * eye
        return c * (H - 0.5) * (t - s) ** (H - 1.5) * (s / t) ** (0.5 - H) * eye

    return OperatorKernel(
        func=func,
        shape=(dim, dim),
        diagonal="defined" if H >= 0.5 else "singular",
        density=density,
        table=table,
        anchor=0.5,
        name="fbm",
        params={"H": H, "c_H": c, **({} if Q is None else {"Q": np.asarray(Q, float).tolist()})},
    )


def fbm_variance_quadrature(H: float, t: float = 1.0, c_H: float = 1.0) -> float:
    """int_0^t g(t, s)^2 ds by adaptive quadrature (scalar kernel)."""
    a = H - 0.5

    def integrand(s):
        return _fbm_scalar(H, c_H, t, s) ** 2

    # g(t, s)^2 ~ s^{-2|a|} near 0 and ~ (t - s)^{2a} near t
    pts = [t * x for x in (1e-6, 1e-3, 0.1, 0.5, 0.9, 0.999)]
    val, _ = integrate.quad(integrand, 0.0, t, points=pts, epsrel=1e-10, epsabs=1e-14, limit=400)
    return val


def calibrate_fbm(H: float, t: float = 1.0) -> float:
    """c_H with int_0^t g(t, s)^2 ds = t^{2H} in the continuum."""
    return (t ** (2 * H) / fbm_variance_quadrature(H, t, 1.0)) ** 0.5


def symmetric_sqrt(Q) -> np.ndarray:
    """Q^{1/2} of a symmetric nonnegative matrix, eigenvalues floored at 0."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if not np.allclose(Q, Q.T, atol=1e-12):
        raise ValueError("matrix must be symmetric")
    w, V = np.linalg.eigh(0.5 * (Q + Q.T))
    if np.min(w, initial=0.0) < -1e-10 * max(1.0, np.max(np.abs(w))):
        raise ValueError("matrix must be nonnegative")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def make_function_kernel(func, dim: int = 1, density=None, diagonal: str = "defined",
                         shift=None, anchor: float = 0.0, name: str = "function") -> OperatorKernel:
    """Wrap a callable g(t, s) returning scalars or dim x dim matrices."""
    def f(t, s):
        return np.asarray(func(t, s), dtype=float) * (np.eye(dim) if np.ndim(func(t, s)) == 0 else 1.0)

    dens = None
    if density is not None:
        def dens(t, s):
            v = np.asarray(density(t, s), dtype=float)
            return v * np.eye(dim) if v.ndim == 0 else v

    sh = None
    if shift is not None:
        def sh(tau):
            v = np.asarray(shift(tau), dtype=float)
            return v * np.eye(dim) if v.ndim == 0 else v

    return OperatorKernel(func=f, shape=(dim, dim), diagonal=diagonal, density=dens, shift=sh,
                          anchor=anchor, name=name)


def make_table_kernel(rows, decimals: int = 12) -> OperatorKernel:
    """Kernel from records (t, s, row, col, value) on a dense (t, s) grid."""
    data: dict = {}
    dim = 0
    for t, s, r, c, v in rows:
        r, c = int(r), int(c)
        key = (round(float(t), decimals), round(float(s), decimals))
        data.setdefault(key, {})[(r, c)] = float(v)
        dim = max(dim, r + 1, c + 1)
    if not data:
        raise ValueError("empty kernel table")
    tables = {}
    for key, entries in data.items():
        m = np.zeros((dim, dim))
        for (r, c), v in entries.items():
            m[r, c] = v
        tables[key] = m
    has_diag = any(t == s for t, s in tables)

    def func(t, s):
        key = (round(float(t), decimals), round(float(s), decimals))
        try:
            return tables[key]
        except KeyError:
            raise ValueError(f"kernel table has no entry for (t={t}, s={s})") from None

    return OperatorKernel(func=func, shape=(dim, dim), diagonal="defined" if has_diag else "singular",
                          name="custom-table", params={"entries": len(tables)})


def load_table_kernel(source) -> OperatorKernel:
    """Read a CSV with header ``t,s,row,col,value``."""
    if isinstance(source, (str, FsPath)) and FsPath(source).exists():
        text = FsPath(source).read_text()
    else:
        text = str(source)
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["t", "s", "row", "col", "value"]:
        raise ValueError("kernel table needs header 't,s,row,col,value'")
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != 5:
            raise ValueError(f"line {lineno}: expected 5 fields")
        try:
            rows.append((float(rec[0]), float(rec[1]), int(rec[2]), int(rec[3]), float(rec[4])))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return make_table_kernel(rows)


def kernel_from_descriptor(desc: Mapping, dim: int = 1, base_dir=None) -> OperatorKernel:
    """Build a kernel from ``{type: exp|fbm|identity|custom-table, params}``."""
    kind = desc.get("type")
    params = dict(desc.get("params") or {})
    if kind == "identity":
        return make_identity_kernel(int(params.get("dim", dim)), float(params.get("scale", 1.0)))
    if kind == "exp":
        A = params.get("A", params.get("a", 1.0))
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if A.size == 1 and dim > 1:
            A = A[0, 0] * np.eye(dim)
        return make_exp_kernel(A)
    if kind == "fbm":
        H = float(params["H"])
        Q = params.get("Q")
        if Q is None and dim > 1:
            Q = np.eye(dim)
        c = params.get("c_H", 1.0)
        if c == "calibrate":
            c = calibrate_fbm(H)
        return make_fbm_kernel(H, Q, float(c))
    if kind == "custom-table":
        src = params["path"]
        if base_dir is not None and not FsPath(src).is_absolute():
            src = FsPath(base_dir) / src
        return load_table_kernel(src)
    raise ValueError(f"unknown kernel type {kind!r}")


# ---------------------------------------------------------------------------
# Integration


def stieltjes_integrate(g: OperatorKernel, s: float, f, t: float, points=None, n: int = 64,
                        use_density: bool = False) -> np.ndarray:
    """Left-point sum of f(u) g(du, s) over (s, t].

    ``f`` is a callable of u or an array of values at the partition points
    (the last one is not used).  On a singular diagonal the first cell
    starts from s + du/2.
    """
    if not s < t:
        raise ValueError("need s < t")
    u = np.linspace(s, t, n + 1) if points is None else np.asarray(points, dtype=float)
    if u[0] != s or u[-1] != t or np.any(np.diff(u) <= 0):
        raise ValueError("partition must increase from s to t")
    if callable(f):
        fv = [np.asarray(f(x), dtype=float) for x in u[:-1]]
    else:
        fv = [np.asarray(x, dtype=float) for x in list(f)[: len(u) - 1]]
        if len(fv) != len(u) - 1:
            raise ValueError("f needs a value at every partition point")
    total = None
    for j in range(len(u) - 1):
        if use_density:
            start = u[j] if (j > 0 or g.regular) else u[j] + 0.5 * (u[1] - u[0])
            w = g.phi(start, s) * (u[j + 1] - u[j]) if start > s or g.regular else None
            if w is None:
                w = g.eval(u[j + 1], s) - g.eval(start, s)
        else:
            lo = g.eval(u[0], s) if g.regular else g.eval(u[0] + 0.5 * (u[1] - u[0]), s)
            lo = lo if j == 0 else g.eval(u[j], s)
            w = g.eval(u[j + 1], s) - lo
        term = fv[j] @ w if fv[j].ndim >= 1 and w.ndim == 2 and fv[j].shape[-1] == w.shape[0] else fv[j] * w
        total = term if total is None else total + term
    return total


def box_increment(func: Callable[[np.ndarray], float], a, b) -> float:
    """Alternating corner sum of ``func`` over the box [a, b]."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("corners must be matching vectors")
    d = a.size
    if d > 8:
        raise ValueError("box dimension above 8 is not supported")
    if np.any(a > b):
        raise ValueError("need a <= b coordinatewise")
    total = 0.0
    for corner in itertools.product((0, 1), repeat=d):
        x = np.where(np.array(corner, dtype=bool), b, a)
        sign = -1.0 if (d - sum(corner)) % 2 else 1.0
        total += sign * float(func(x))
    return total


# ---------------------------------------------------------------------------
# Kernel operator


@dataclass
class KernelOperator:
    """K_g(h)(t_n, s_i) for the cells i < n.

    ``coeffs[key, i]`` holds the chaos coefficients of cell i; a
    deterministic operator has the single key ().
    """

    basis: NoiseBasis
    n: int
    variant: str
    keys: list
    coeffs: np.ndarray
    truncated: bool = False

    @property
    def t(self) -> float:
        return float(self.basis.time_grid[self.n])

    @property
    def value_shape(self) -> tuple:
        return self.coeffs.shape[2:]

    @property
    def is_deterministic(self) -> bool:
        return self.keys == [()]

    def element(self, i: int) -> ChaosElement:
        return unstack(self.basis, self.keys, self.coeffs[:, i], truncated=self.truncated)

    def elements(self) -> list:
        return [self.element(i) for i in range(self.n)]

    def values(self) -> np.ndarray:
        """Deterministic values, shape (n, *value_shape)."""
        if not self.is_deterministic:
            raise ValueError("kernel operator is random")
        return self.coeffs[0]

    def eval(self, s: float) -> ChaosElement:
        """Value on the cell containing s."""
        idx = int(np.searchsorted(self.basis.time_grid, s, side="right")) - 1
        if not 0 <= idx < self.n:
            raise ValueError(f"s={s} outside [0, t)")
        return self.element(idx)


def _slot(Lc: np.ndarray, Rc: np.ndarray, slot: str) -> np.ndarray:
    if slot == "left":
        return Lc
    if slot == "right":
        return Rc
    if slot == "mid":
        return 0.5 * (Lc + Rc)
    raise ValueError(f"unknown slot {slot!r}")


def _assemble(kg: KernelGrid, L: np.ndarray, S: np.ndarray, n: int, variant: str) -> np.ndarray:
    # L, S: (keys, N, a, b); returns (keys, n, a, c)
    G = kg.G
    kernel = kg.kernel
    cells = np.arange(n)
    if variant == "general":
        # Abel-summed Stieltjes sum: exact for constant and step integrands
        out = np.einsum("kiab,ibc->kiac", S[:, :n], G[cells + 1, cells])
        if n >= 2:
            head = cells[:-1]
            out[:, head] = np.einsum("kiab,ibc->kiac", S[:, head] - L[:, head + 1], G[head + 1, head])
            out[:, head] += np.einsum("kab,ibc->kiac", L[:, n - 1], G[n, head])
            if n >= 3:
                D = L[:, 1:n] - L[:, : n - 1]
                Gm = G[1:n, :n].copy()
                Gm[~np.tril(np.ones((n - 1, n), dtype=bool), -1)] = 0.0
                out -= np.einsum("kjab,jibc->kiac", D, Gm)
        return out
    if variant == "regular":
        if not kernel.regular:
            raise ValueError("regular variant needs a defined diagonal")
        diag = kg.diag[:n]
        W = G[1 : n + 1, :n] - G[:n, :n]
        W[cells, cells] = G[cells + 1, cells] - diag
        # first cell carries the slot value, later cells the left value
        out = np.einsum("kiab,ibc->kiac", S[:, :n], diag + W[cells, cells])
        Wl = W.copy()
        Wl[cells, cells] = 0.0
        out += np.einsum("kjab,jibc->kiac", L[:, :n], Wl)
        return out
    if variant == "ac":
        if kernel.density is None:
            raise ValueError("absolutely continuous variant needs a density")
        Phi = kg.phi()[:n, :n]
        dt = kg.basis.dt[:n]
        out = np.einsum("kiab,ibc->kiac", S[:, :n], G[n, :n])
        Pw = Phi * dt[:, None, None, None]
        out += np.einsum("kjab,jibc->kiac", L[:, :n], Pw)
        out -= np.einsum("kiab,ibc->kiac", S[:, :n], Pw.sum(axis=0))
        return out
    if variant == "shift":
        if kernel.shift is None:
            raise ValueError("shift variant needs a shift-invariant kernel")
        t = kg.basis.time_grid
        s = kg.anchors
        prof = np.zeros((n + 1, n) + kernel.shape)
        for i in range(n):
            for j in range(i + 1, n + 1):
                prof[j, i] = kernel.shift(t[j] - s[i])
        out = np.einsum("kiab,ibc->kiac", S[:, :n], prof[n])
        W = prof[1:] - prof[:-1]
        W[cells, cells] = 0.0
        out += np.einsum("kjab,jibc->kiac", L[:, :n], W)
        out -= np.einsum("kiab,ibc->kiac", S[:, :n], W.sum(axis=0))
        return out
    raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")


def assemble_Kg(g: OperatorKernel, h: Path, t: float, variant: str = "general", slot: str = "left") -> KernelOperator:
    """K_g(h)(t, s_i) = h(s) g(t, s) + sum of (h(u) - h(s)) g(du, s) on the grid.

    ``slot`` selects which value of h on the cell of s multiplies g: the
    left end (h(s)), the right end, or their mean.
    """
    basis = h.basis
    n = basis.index_of(t)
    if len(h.value_shape) != 2 or h.value_shape[1] != g.shape[0]:
        raise ValueError(f"h values {h.value_shape} do not compose with kernel {g.shape}")
    keys, L, R = h.dense()
    S = _slot(L, R, slot)
    if n == 0:
        coeffs = np.zeros((len(keys), 0, h.value_shape[0], g.shape[1]))
    else:
        coeffs = _assemble(g.grid(basis), L, S, n, variant)
    return KernelOperator(basis, n, variant, keys, coeffs, h.truncated)
