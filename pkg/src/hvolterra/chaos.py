"""Finite Wiener chaos on a time grid.

Random elements are polynomials in the Gaussian increments dB_{i,k} of a
discretized cylindrical Wiener process.  They are stored as coefficients
over tensor products of orthonormal probabilists' Hermite polynomials

    h_n(x) = He_n(x) / sqrt(n!),    x = dB_{i,k} / sqrt(dt_i),

so the expectation is the coefficient of the empty multi-index and the
L2 inner product is the coefficient dot product.  In this basis the
Malliavin derivative D_{i,k} = d/d(dB_{i,k}) lowers one degree and the
Skorohod integral raises one degree; both are exact.

A multi-index is a sorted tuple of ``(var, deg)`` pairs with
``var = i * noise_dim + k`` and ``deg >= 1``.
"""
from __future__ import annotations

import itertools
import json
import math
from functools import lru_cache
from typing import Callable, Iterable, Mapping

import numpy as np

__all__ = [
    "NoiseBasis",
    "ChaosElement",
    "MalliavinField",
    "make_increment",
    "brownian",
    "multiply",
    "expectation",
    "inner_expectation",
    "malliavin_derivative",
    "derivative",
    "skorohod",
    "duality_gap",
    "commutator_gap",
    "trace_noise",
    "hibp_gap",
    "product_rule_gap",
    "chain_rule_gap",
    "sample",
    "evaluate",
    "to_record",
    "from_record",
    "dumps",
    "loads",
    "skorohod_dense",
    "trace_dense",
    "accumulate",
    "random_element",
    "random_field",
]


class NoiseBasis:
    """Time grid and noise dimension of the discretized Wiener process.

    Parameters
    ----------
    time_grid : array_like
        Strictly increasing grid ``0 = t_0 < ... < t_N = T``.
    noise_dim : int
        Number of independent Brownian components ``K1``.
    d_max : int
        Truncation order of the chaos expansion.
    """

    __slots__ = ("time_grid", "noise_dim", "d_max", "dt", "sqrt_dt", "_hash")

    def __init__(self, time_grid, noise_dim: int = 1, d_max: int = 4):
        grid = np.asarray(time_grid, dtype=float)
        if grid.ndim != 1 or grid.size < 2:
            raise ValueError("time grid needs at least two points")
        if grid[0] != 0.0:
            raise ValueError("time grid must start at 0")
        dt = np.diff(grid)
        if np.any(dt <= 0):
            raise ValueError("time grid must be strictly increasing")
        if int(noise_dim) < 1:
            raise ValueError("noise_dim must be >= 1")
        if int(d_max) < 1:
            raise ValueError("d_max must be >= 1")
        grid.setflags(write=False)
        dt.setflags(write=False)
        self.time_grid = grid
        self.noise_dim = int(noise_dim)
        self.d_max = int(d_max)
        self.dt = dt
        self.sqrt_dt = np.sqrt(dt)
        self.sqrt_dt.setflags(write=False)
        self._hash = hash((grid.tobytes(), self.noise_dim, self.d_max))

    @classmethod
    def uniform(cls, N: int, T: float = 1.0, noise_dim: int = 1, d_max: int = 4) -> "NoiseBasis":
        if int(N) < 1:
            raise ValueError("N must be >= 1")
        return cls(np.linspace(0.0, T, int(N) + 1), noise_dim, d_max)

    @property
    def N(self) -> int:
        return self.dt.size

    @property
    def T(self) -> float:
        return float(self.time_grid[-1])

    @property
    def n_vars(self) -> int:
        return self.N * self.noise_dim

    def var(self, i: int, k: int) -> int:
        if not (0 <= i < self.N and 0 <= k < self.noise_dim):
            raise IndexError(f"increment ({i}, {k}) out of range for N={self.N}, K1={self.noise_dim}")
        return i * self.noise_dim + k

    def cell(self, var: int) -> tuple[int, int]:
        return divmod(var, self.noise_dim)

    def index_of(self, t: float, tol: float = 1e-12) -> int:
        """Grid index of time ``t``; raises if ``t`` is not a grid point."""
        n = int(np.argmin(np.abs(self.time_grid - t)))
        if abs(self.time_grid[n] - t) > tol * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not on the grid")
        return n

    def with_d_max(self, d_max: int) -> "NoiseBasis":
        return NoiseBasis(self.time_grid, self.noise_dim, d_max)

    def __eq__(self, other) -> bool:
        if self is other:
            return True
        if not isinstance(other, NoiseBasis):
            return NotImplemented
        return (
            self.noise_dim == other.noise_dim
            and self.d_max == other.d_max
            and np.array_equal(self.time_grid, other.time_grid)
        )

    def __hash__(self) -> int:
        return self._hash

    def __repr__(self) -> str:
        return f"NoiseBasis(N={self.N}, T={self.T:g}, K1={self.noise_dim}, d_max={self.d_max})"


# ---------------------------------------------------------------------------
# Hermite algebra


@lru_cache(maxsize=None)
def _hermite_product(m: int, n: int) -> tuple[tuple[int, float], ...]:
    """Linearization h_m h_n = sum_r c_r h_{m+n-2r} for orthonormal Hermite."""
    out = []
    for r in range(min(m, n) + 1):
        deg = m + n - 2 * r
        c = (
            math.comb(m, r)
            * math.comb(n, r)
            * math.factorial(r)
            * math.sqrt(math.factorial(deg) / (math.factorial(m) * math.factorial(n)))
        )
        out.append((deg, c))
    return tuple(out)


@lru_cache(maxsize=1 << 18)
def _key_product(ka: tuple, kb: tuple) -> tuple[tuple[tuple, float], ...]:
    if not ka:
        return ((kb, 1.0),)
    if not kb:
        return ((ka, 1.0),)
    da = dict(ka)
    db = dict(kb)
    shared = [v for v in db if v in da]
    if not shared:
        return ((tuple(sorted(ka + kb)), 1.0),)
    fixed = [p for p in ka if p[0] not in db] + [p for p in kb if p[0] not in da]
    options = [[(v, deg, c) for deg, c in _hermite_product(da[v], db[v])] for v in shared]
    out = []
    for combo in itertools.product(*options):
        items = list(fixed)
        coef = 1.0
        for v, deg, c in combo:
            coef *= c
            if deg:
                items.append((v, deg))
        out.append((tuple(sorted(items)), coef))
    return tuple(out)


def _total_degree(key: tuple) -> int:
    return sum(d for _, d in key)


_EMPTY: tuple = ()


class ChaosElement:
    """A polynomial random element with values in R^value_shape.

    ``coeffs`` maps multi-indices to arrays of shape ``value_shape``.  The
    ``truncated`` flag records that some operation dropped terms above
    ``basis.d_max``.
    """

    __slots__ = ("basis", "value_shape", "coeffs", "truncated")
    __array_ufunc__ = None  # let numpy defer to the reflected operators

    def __init__(self, basis: NoiseBasis, coeffs: Mapping | None = None, value_shape=(), truncated: bool = False):
        self.basis = basis
        self.value_shape = tuple(int(s) for s in value_shape)
        self.coeffs: dict = {}
        self.truncated = bool(truncated)
        if coeffs:
            for key, val in coeffs.items():
                arr = np.array(val, dtype=float)
                if arr.shape != self.value_shape:
                    arr = np.broadcast_to(arr, self.value_shape).copy()
                self.coeffs[tuple(key)] = arr

    # -- construction -----------------------------------------------------
    @classmethod
    def constant(cls, basis: NoiseBasis, value) -> "ChaosElement":
        arr = np.array(value, dtype=float)
        return cls._raw(basis, arr.shape, {_EMPTY: arr})

    @classmethod
    def zero(cls, basis: NoiseBasis, value_shape=()) -> "ChaosElement":
        return cls._raw(basis, tuple(value_shape), {})

    @classmethod
    def _raw(cls, basis, value_shape, coeffs, truncated=False) -> "ChaosElement":
        obj = cls.__new__(cls)
        obj.basis = basis
        obj.value_shape = value_shape
        obj.coeffs = coeffs
        obj.truncated = truncated
        return obj

    def copy(self) -> "ChaosElement":
        return ChaosElement._raw(
            self.basis, self.value_shape, {k: v.copy() for k, v in self.coeffs.items()}, self.truncated
        )

    # -- inspection -------------------------------------------------------
    @property
    def degree(self) -> int:
        return max((_total_degree(k) for k, v in self.coeffs.items() if np.any(v)), default=0)

    def degrees(self, tol: float = 0.0) -> set[int]:
        return {_total_degree(k) for k, v in self.coeffs.items() if np.max(np.abs(v), initial=0.0) > tol}

    def is_deterministic(self) -> bool:
        return all(not k or not np.any(v) for k, v in self.coeffs.items())

    def expectation(self) -> np.ndarray:
        c = self.coeffs.get(_EMPTY)
        return np.zeros(self.value_shape) if c is None else c.copy()

    def second_moment(self) -> float:
        return float(sum(np.sum(v * v) for v in self.coeffs.values()))

    def variance(self) -> np.ndarray:
        """Componentwise variance."""
        out = np.zeros(self.value_shape)
        for k, v in self.coeffs.items():
            if k:
                out = out + v * v
        return out

    def l2_norm(self) -> float:
        return math.sqrt(self.second_moment())

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(v), initial=0.0)) for v in self.coeffs.values()), default=0.0)

    def chaos_projection(self, degree: int) -> "ChaosElement":
        return ChaosElement._raw(
            self.basis,
            self.value_shape,
            {k: v.copy() for k, v in self.coeffs.items() if _total_degree(k) == degree},
            self.truncated,
        )

    def component(self, index) -> "ChaosElement":
        coeffs = {k: np.asarray(v[index], dtype=float) for k, v in self.coeffs.items()}
        shape = next(iter(coeffs.values())).shape if coeffs else np.zeros(self.value_shape)[index].shape
        return ChaosElement._raw(self.basis, tuple(shape), coeffs, self.truncated)

    def reshape(self, shape) -> "ChaosElement":
        shape = tuple(shape)
        return ChaosElement._raw(
            self.basis, shape, {k: v.reshape(shape) for k, v in self.coeffs.items()}, self.truncated
        )

    def allclose(self, other: "ChaosElement", rtol: float = 1e-12, atol: float = 1e-12) -> bool:
        if self.value_shape != other.value_shape:
            return False
        scale = max(self.max_abs(), other.max_abs(), 1.0)
        return (self - other).max_abs() <= atol + rtol * scale

    def prune(self, tol: float = 0.0) -> "ChaosElement":
        return ChaosElement._raw(
            self.basis,
            self.value_shape,
            {k: v for k, v in self.coeffs.items() if np.max(np.abs(v), initial=0.0) > tol},
            self.truncated,
        )

    # -- arithmetic -------------------------------------------------------
    def _check(self, other: "ChaosElement") -> None:
        if other.basis is not self.basis and other.basis != self.basis:
            raise ValueError("chaos elements live on different noise bases")

    def __add__(self, other):
        if not isinstance(other, ChaosElement):
            other = ChaosElement.constant(self.basis, np.broadcast_to(np.asarray(other, float), self.value_shape))
        self._check(other)
        if other.value_shape != self.value_shape:
            raise ValueError(f"shape mismatch {self.value_shape} vs {other.value_shape}")
        out = {k: v.copy() for k, v in self.coeffs.items()}
        for k, v in other.coeffs.items():
            cur = out.get(k)
            if cur is None:
                out[k] = v.copy()
            else:
                out[k] = cur + v
        return ChaosElement._raw(self.basis, self.value_shape, out, self.truncated or other.truncated)

    __radd__ = __add__

    def __neg__(self):
        return ChaosElement._raw(self.basis, self.value_shape, {k: -v for k, v in self.coeffs.items()}, self.truncated)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, ChaosElement):
            return multiply(self, other)
        c = np.asarray(other, dtype=float)
        coeffs = {k: v * c for k, v in self.coeffs.items()}
        shape = np.broadcast_shapes(self.value_shape, c.shape)
        return ChaosElement._raw(self.basis, tuple(shape), coeffs, self.truncated)

    def __rmul__(self, other):
        c = np.asarray(other, dtype=float)
        coeffs = {k: c * v for k, v in self.coeffs.items()}
        shape = np.broadcast_shapes(c.shape, self.value_shape)
        return ChaosElement._raw(self.basis, tuple(shape), coeffs, self.truncated)

    def __truediv__(self, other):
        return self * (1.0 / np.asarray(other, dtype=float))

    def __matmul__(self, matrix):
        """Right action by a deterministic array: value @ matrix."""
        m = np.asarray(matrix, dtype=float)
        coeffs = {k: v @ m for k, v in self.coeffs.items()}
        shape = (np.zeros(self.value_shape) @ m).shape
        return ChaosElement._raw(self.basis, tuple(shape), coeffs, self.truncated)

    def __rmatmul__(self, matrix):
        m = np.asarray(matrix, dtype=float)
        coeffs = {k: m @ v for k, v in self.coeffs.items()}
        shape = (m @ np.zeros(self.value_shape)).shape
        return ChaosElement._raw(self.basis, tuple(shape), coeffs, self.truncated)

    def __repr__(self) -> str:
        return (
            f"ChaosElement(shape={self.value_shape}, terms={len(self.coeffs)}, "
            f"degree={self.degree}, truncated={self.truncated})"
        )


def _value_product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim == 0 or b.ndim == 0:
        return a * b
    return a @ b


def accumulate(basis: NoiseBasis, value_shape, terms: Iterable[tuple[float, ChaosElement]]) -> ChaosElement:
    """sum_j c_j x_j for scalar (or broadcastable array) weights c_j."""
    out: dict = {}
    truncated = False
    for c, x in terms:
        truncated = truncated or x.truncated
        for k, v in x.coeffs.items():
            cur = out.get(k)
            if cur is None:
                out[k] = c * v
            else:
                out[k] = cur + c * v
    return ChaosElement._raw(basis, tuple(value_shape), out, truncated)


def multiply(a: ChaosElement, b: ChaosElement) -> ChaosElement:
    """Exact product of two chaos elements, truncated at ``d_max``.

    Values combine as scalar times anything, or by matrix product
    (operator applied to vector, or operator composition).
    """
    a._check(b)
    va0 = np.zeros(a.value_shape)
    vb0 = np.zeros(b.value_shape)
    try:
        shape = _value_product(va0, vb0).shape
    except ValueError as exc:
        raise ValueError(f"cannot compose values of shape {a.value_shape} and {b.value_shape}") from exc
    d_max = a.basis.d_max
    out: dict = {}
    truncated = a.truncated or b.truncated
    scalar = a.value_shape == () or b.value_shape == ()
    for ka, va in a.coeffs.items():
        for kb, vb in b.coeffs.items():
            prod = va * vb if scalar else va @ vb
            for key, c in _key_product(ka, kb):
                if _total_degree(key) > d_max:
                    if np.any(prod):
                        truncated = True
                    continue
                cur = out.get(key)
                if cur is None:
                    out[key] = c * prod
                else:
                    out[key] = cur + c * prod
    return ChaosElement._raw(a.basis, shape, out, truncated)


def expectation(x: ChaosElement) -> np.ndarray:
    return x.expectation()


def inner_expectation(a: ChaosElement, b: ChaosElement) -> float:
    """E[<a, b>] with the Euclidean pairing of values."""
    if len(a.coeffs) > len(b.coeffs):
        a, b = b, a
    total = 0.0
    for k, v in a.coeffs.items():
        w = b.coeffs.get(k)
        if w is not None:
            total += float(np.sum(v * w))
    return total


def make_increment(basis: NoiseBasis, i: int, k: int = 0) -> ChaosElement:
    """The Gaussian increment dB_{i,k} as a degree-one element."""
    v = basis.var(i, k)
    return ChaosElement._raw(basis, (), {((v, 1),): np.array(basis.sqrt_dt[i])})


def brownian(basis: NoiseBasis, n: int, k: int = 0) -> ChaosElement:
    """B_k(t_n) = sum of the first n increments."""
    coeffs = {((basis.var(i, k), 1),): np.array(basis.sqrt_dt[i]) for i in range(n)}
    return ChaosElement._raw(basis, (), coeffs)


class MalliavinField:
    """A map (i, k) -> ChaosElement on one basis.

    Used both for Malliavin derivatives D_{i,k}F and for Skorohod
    integrands u_{i,k}; missing entries are zero.
    """

    __slots__ = ("basis", "value_shape", "entries")

    def __init__(self, basis: NoiseBasis, entries: Mapping | None = None, value_shape=()):
        self.basis = basis
        self.value_shape = tuple(value_shape)
        self.entries: dict = {}
        for (i, k), x in (entries or {}).items():
            basis.var(i, k)
            if x.value_shape != self.value_shape:
                raise ValueError(f"entry {(i, k)} has shape {x.value_shape}, expected {self.value_shape}")
            self.entries[(i, k)] = x

    @classmethod
    def from_cells(cls, basis: NoiseBasis, cells: Mapping[int, ChaosElement] | list) -> "MalliavinField":
        """Integrand from per-cell elements whose last value axis runs over k."""
        items = cells.items() if isinstance(cells, Mapping) else enumerate(cells)
        entries = {}
        shape = None
        for i, x in items:
            if x is None:
                continue
            if not x.value_shape or x.value_shape[-1] != basis.noise_dim:
                raise ValueError("cell values need a trailing noise axis of length K1")
            for k in range(basis.noise_dim):
                entries[(i, k)] = x.component((..., k))
            shape = x.value_shape[:-1]
        return cls(basis, entries, shape if shape is not None else ())

    def entry(self, i: int, k: int) -> ChaosElement:
        x = self.entries.get((i, k))
        return ChaosElement.zero(self.basis, self.value_shape) if x is None else x

    def items(self):
        return self.entries.items()

    def map(self, func: Callable[[ChaosElement], ChaosElement]) -> "MalliavinField":
        entries = {ik: func(x) for ik, x in self.entries.items()}
        shape = next(iter(entries.values())).value_shape if entries else self.value_shape
        return MalliavinField(self.basis, entries, shape)

    @property
    def truncated(self) -> bool:
        return any(x.truncated for x in self.entries.values())

    def max_abs(self) -> float:
        return max((x.max_abs() for x in self.entries.values()), default=0.0)

    def __sub__(self, other: "MalliavinField") -> "MalliavinField":
        keys = set(self.entries) | set(other.entries)
        return MalliavinField(self.basis, {ik: self.entry(*ik) - other.entry(*ik) for ik in keys}, self.value_shape)

    def __add__(self, other: "MalliavinField") -> "MalliavinField":
        keys = set(self.entries) | set(other.entries)
        return MalliavinField(self.basis, {ik: self.entry(*ik) + other.entry(*ik) for ik in keys}, self.value_shape)


def derivative(x: ChaosElement, i: int, k: int = 0) -> ChaosElement:
    """D_{i,k} x: exact partial derivative in dB_{i,k}."""
    basis = x.basis
    v = basis.var(i, k)
    inv = 1.0 / basis.sqrt_dt[i]
    out: dict = {}
    for key, val in x.coeffs.items():
        for pos, (w, deg) in enumerate(key):
            if w == v:
                new = key[:pos] + key[pos + 1:] if deg == 1 else key[:pos] + ((v, deg - 1),) + key[pos + 1:]
                out[new] = math.sqrt(deg) * inv * val
                break
            if w > v:
                break
    return ChaosElement._raw(basis, x.value_shape, out, x.truncated)


def malliavin_derivative(x: ChaosElement) -> MalliavinField:
    basis = x.basis
    buckets: dict = {}
    for key, val in x.coeffs.items():
        for pos, (v, deg) in enumerate(key):
            new = key[:pos] + key[pos + 1:] if deg == 1 else key[:pos] + ((v, deg - 1),) + key[pos + 1:]
            i, k = basis.cell(v)
            bucket = buckets.setdefault((i, k), {})
            contrib = (math.sqrt(deg) / basis.sqrt_dt[i]) * val
            cur = bucket.get(new)
            if cur is None:
                bucket[new] = contrib
            else:
                bucket[new] = cur + contrib
    entries = {ik: ChaosElement._raw(basis, x.value_shape, c, x.truncated) for ik, c in buckets.items()}
    return MalliavinField(basis, entries, x.value_shape)


def _raise_into(out: dict, key: tuple, v: int, factor: float, val: np.ndarray) -> None:
    # multiply key by the creation operator in variable v
    for pos, (w, deg) in enumerate(key):
        if w == v:
            new = key[:pos] + ((v, deg + 1),) + key[pos + 1:]
            c = math.sqrt(deg + 1)
            break
        if w > v:
            new = key[:pos] + ((v, 1),) + key[pos:]
            c = 1.0
            break
    else:
        new = key + ((v, 1),)
        c = 1.0
    contrib = (factor * c) * val
    cur = out.get(new)
    if cur is None:
        out[new] = contrib
    else:
        out[new] = cur + contrib


def skorohod(u: MalliavinField | Mapping) -> ChaosElement:
    """Divergence of an integrand, the exact adjoint of D.

    delta(G 1_{i,k}) = G dB_{i,k} - D_{i,k}G dt_i, i.e. the creation
    operator sqrt(dt_i) sqrt(n+1) h_{n+1} in each variable.  Terms above
    ``d_max`` are dropped and flagged.
    """
    if not isinstance(u, MalliavinField):
        items = list(u.items())
        if not items:
            raise ValueError("empty integrand mapping; pass a MalliavinField to fix the basis")
        first = items[0][1]
        u = MalliavinField(first.basis, dict(items), first.value_shape)
    basis = u.basis
    d_max = basis.d_max
    out: dict = {}
    truncated = False
    for (i, k), g in u.entries.items():
        v = basis.var(i, k)
        sd = basis.sqrt_dt[i]
        truncated = truncated or g.truncated
        for key, val in g.coeffs.items():
            if _total_degree(key) + 1 > d_max:
                if np.any(val):
                    truncated = True
                continue
            _raise_into(out, key, v, sd, val)
    return ChaosElement._raw(basis, u.value_shape, out, truncated)


def duality_gap(F: ChaosElement, u: MalliavinField) -> float:
    """E[sum_{i,k} <D_{i,k}F, u_{i,k}> dt_i] - E[<F, delta(u)>]."""
    lhs = 0.0
    for (i, k), g in u.entries.items():
        lhs += u.basis.dt[i] * inner_expectation(derivative(F, i, k), g)
    return lhs - inner_expectation(F, skorohod(u))


def commutator_gap(u: MalliavinField, i: int, k: int = 0) -> ChaosElement:
    """D_{i,k} delta(u) - u_{i,k} - delta(D_{i,k} u)."""
    du = u.map(lambda x: derivative(x, i, k))
    return derivative(skorohod(u), i, k) - u.entry(i, k) - skorohod(du)


def trace_noise(A, noise_dim: int | None = None) -> ChaosElement:
    """sum_k of the k-th component of A(e_k).

    ``A`` is a mapping (or list) k -> ChaosElement whose last value axis
    has length K1, or a single element with trailing shape (K1, K1) read
    as a matrix in the noise indices.
    """
    if isinstance(A, ChaosElement):
        if len(A.value_shape) < 2 or A.value_shape[-1] != A.value_shape[-2]:
            raise ValueError("operator-valued element needs square trailing axes")
        n = A.value_shape[-1]
        return accumulate(A.basis, A.value_shape[:-2], [(1.0, A.component((..., j, j))) for j in range(n)])
    items = A.items() if isinstance(A, Mapping) else enumerate(A)
    parts = []
    for k, col in items:
        n = col.value_shape[-1] if col.value_shape else None
        if n is None or (noise_dim is not None and n != noise_dim) or not 0 <= k < n:
            raise ValueError("trace needs columns with a trailing noise axis")
        parts.append(col.component((..., k)))
    if not parts:
        raise ValueError("empty operator")
    return accumulate(parts[0].basis, parts[0].value_shape, [(1.0, p) for p in parts])


def hibp_gap(A: ChaosElement, u: MalliavinField) -> ChaosElement:
    """delta(A u) - [A delta(u) - sum_{i,k} D_{i,k}(A) u_{i,k} dt_i]."""
    Au = u.map(lambda x: multiply(A, x))
    dt = u.basis.dt
    corr = [(dt[i], multiply(derivative(A, i, k), x)) for (i, k), x in u.entries.items()]
    shape = (np.zeros(A.value_shape) @ np.zeros(u.value_shape)).shape if A.value_shape and u.value_shape else (
        np.zeros(A.value_shape) * np.zeros(u.value_shape)
    ).shape
    correction = accumulate(A.basis, shape, corr)
    return skorohod(Au) - (multiply(A, skorohod(u)) - correction)


def product_rule_gap(G: ChaosElement, F: ChaosElement) -> float:
    """max over (i,k) of |D(GF) - (DG)F - G DF| coefficientwise."""
    gf = malliavin_derivative(multiply(G, F))
    dg = malliavin_derivative(G)
    df = malliavin_derivative(F)
    keys = set(gf.entries) | set(dg.entries) | set(df.entries)
    worst = 0.0
    for i, k in keys:
        rhs = multiply(dg.entry(i, k), F) + multiply(G, df.entry(i, k))
        lhs = gf.entries.get((i, k), ChaosElement.zero(G.basis, rhs.value_shape))
        worst = max(worst, (lhs - rhs).max_abs())
    return worst


def _poly_eval(coefs: Iterable[float], x: ChaosElement) -> ChaosElement:
    # Horner in chaos arithmetic
    coefs = list(coefs)
    out = ChaosElement.constant(x.basis, np.full(x.value_shape, coefs[-1]))
    for c in reversed(coefs[:-1]):
        out = multiply(out, x) + c
    return out


def chain_rule_gap(coefs, F: ChaosElement) -> float:
    """Gap in D phi(F) = phi'(F) DF for the polynomial phi = sum c_j x^j."""
    if F.value_shape != ():
        raise ValueError("chain rule check is scalar")
    coefs = [float(c) for c in coefs]
    dcoefs = [j * c for j, c in enumerate(coefs)][1:] or [0.0]
    lhs = malliavin_derivative(_poly_eval(coefs, F))
    dphi = _poly_eval(dcoefs, F)
    df = malliavin_derivative(F)
    worst = 0.0
    for ik in set(lhs.entries) | set(df.entries):
        gap = lhs.entry(*ik) - multiply(dphi, df.entry(*ik))
        worst = max(worst, gap.max_abs())
    return worst


# ---------------------------------------------------------------------------
# Monte Carlo evaluation


def _hermite_table(xi: np.ndarray, n_max: int) -> np.ndarray:
    table = np.empty((n_max + 1,) + xi.shape)
    table[0] = 1.0
    if n_max >= 1:
        table[1] = xi
    for n in range(1, n_max):
        table[n + 1] = (xi * table[n] - math.sqrt(n) * table[n - 1]) / math.sqrt(n + 1)
    return table


def evaluate(x: ChaosElement, increments: np.ndarray) -> np.ndarray:
    """Evaluate ``x`` on realizations of dB, array of shape (M, N, K1)."""
    basis = x.basis
    inc = np.asarray(increments, dtype=float)
    if inc.ndim != 3 or inc.shape[1:] != (basis.N, basis.noise_dim):
        raise ValueError("increments must have shape (M, N, K1)")
    xi = (inc / basis.sqrt_dt[None, :, None]).reshape(inc.shape[0], -1)
    table = _hermite_table(xi, max(basis.d_max, x.degree))
    out = np.zeros((inc.shape[0],) + x.value_shape)
    for key, val in x.coeffs.items():
        w = np.ones(inc.shape[0])
        for v, deg in key:
            w = w * table[deg, :, v]
        out += w.reshape((-1,) + (1,) * len(x.value_shape)) * val
    return out


def sample(x: ChaosElement, seed: int | np.random.Generator | None = 0, size: int = 1) -> np.ndarray:
    """Monte Carlo draws of ``x``; deterministic for a given seed."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    basis = x.basis
    inc = rng.standard_normal((size, basis.N, basis.noise_dim)) * basis.sqrt_dt[None, :, None]
    return evaluate(x, inc)


# ---------------------------------------------------------------------------
# Serialization


def to_record(x: ChaosElement) -> dict:
    basis = x.basis
    coeffs = []
    for key in sorted(x.coeffs):
        alpha = [[*basis.cell(v), d] for v, d in key]
        coeffs.append({"alpha": alpha, "value": [float(c) for c in np.ravel(x.coeffs[key])]})
    return {
        "basis": {"grid": [float(t) for t in basis.time_grid], "K1": basis.noise_dim, "d_max": basis.d_max},
        "value_shape": list(x.value_shape),
        "truncated": x.truncated,
        "coeffs": coeffs,
    }


def from_record(record: Mapping, basis: NoiseBasis | None = None) -> ChaosElement:
    b = record["basis"]
    if basis is None:
        basis = NoiseBasis(b["grid"], b["K1"], b.get("d_max", 4))
    shape = tuple(record.get("value_shape", ()))
    coeffs = {}
    for term in record["coeffs"]:
        key = tuple(sorted((basis.var(int(i), int(k)), int(d)) for i, k, d in term["alpha"]))
        coeffs[key] = np.array(term["value"], dtype=float).reshape(shape)
    return ChaosElement._raw(basis, shape, coeffs, bool(record.get("truncated", False)))


def dumps(x: ChaosElement) -> str:
    return json.dumps(to_record(x))


def loads(text: str, basis: NoiseBasis | None = None) -> ChaosElement:
    return from_record(json.loads(text), basis)


# ---------------------------------------------------------------------------
# Random inputs for identity checks


def random_element(basis: NoiseBasis, max_degree: int, rng: np.random.Generator, value_shape=(),
                   n_terms: int = 4) -> ChaosElement:
    """Element with a constant and ``n_terms`` random keys of degree <= max_degree."""
    value_shape = tuple(value_shape)
    coeffs = {(): rng.normal(size=value_shape)}
    for _ in range(n_terms):
        deg = int(rng.integers(1, max_degree + 1))
        parts: dict = {}
        for v in rng.integers(0, basis.n_vars, size=deg):
            parts[int(v)] = parts.get(int(v), 0) + 1
        key = tuple(sorted(parts.items()))
        cur = coeffs.get(key)
        val = rng.normal(size=value_shape)
        coeffs[key] = val if cur is None else cur + val
    return ChaosElement._raw(basis, value_shape, {k: np.asarray(v, dtype=float) for k, v in coeffs.items()})


def random_field(basis: NoiseBasis, max_degree: int, rng: np.random.Generator, value_shape=(),
                 density: float = 0.5) -> MalliavinField:
    """Integrand with random entries on a random subset of (cell, component) pairs."""
    entries = {}
    for i in range(basis.N):
        for k in range(basis.noise_dim):
            if rng.random() < density:
                entries[(i, k)] = random_element(basis, max_degree, rng, value_shape, n_terms=2)
    if not entries:
        entries[(0, 0)] = random_element(basis, max_degree, rng, value_shape, n_terms=2)
    return MalliavinField(basis, entries, tuple(value_shape))


# ---------------------------------------------------------------------------
# Dense cell stacks


def skorohod_dense(basis: NoiseBasis, keys: list, U: np.ndarray) -> ChaosElement:
    """delta of the integrand u_{i,k} = sum_a U[a, i, ..., k] h_{keys[a]}.

    ``U`` has shape (n_keys, n_cells, *value_shape, K1) for cells 0..n-1.
    """
    K1 = basis.noise_dim
    if U.shape[-1] != K1:
        raise ValueError("integrand needs a trailing noise axis of length K1")
    vshape = U.shape[2:-1]
    d_max = basis.d_max
    flat = U.reshape(U.shape[0], U.shape[1], -1, K1)
    nz = np.abs(flat).max(axis=2) > 0.0
    out: dict = {}
    truncated = False
    for a, i, k in zip(*np.nonzero(nz)):
        key = keys[a]
        if _total_degree(key) + 1 > d_max:
            truncated = True
            continue
        _raise_into(out, key, int(i) * K1 + int(k), basis.sqrt_dt[i], flat[a, i, :, k].reshape(vshape))
    return ChaosElement._raw(basis, tuple(vshape), out, truncated)


def trace_dense(basis: NoiseBasis, keys: list, M: np.ndarray) -> ChaosElement:
    """sum_{i,k} D_{i,k}(M_i[..., k]) dt_i for M_i = sum_a M[a, i] h_{keys[a]}."""
    K1 = basis.noise_dim
    n = M.shape[1]
    vshape = M.shape[2:-1]
    out: dict = {}
    for a, key in enumerate(keys):
        for pos, (v, deg) in enumerate(key):
            i, k = divmod(v, K1)
            if i >= n:
                continue
            val = M[a, i, ..., k]
            if not np.any(val):
                continue
            new = key[:pos] + key[pos + 1:] if deg == 1 else key[:pos] + ((v, deg - 1),) + key[pos + 1:]
            contrib = (math.sqrt(deg) * basis.sqrt_dt[i]) * val
            cur = out.get(new)
            out[new] = contrib if cur is None else cur + contrib
    return ChaosElement._raw(basis, tuple(vshape), out, False)
