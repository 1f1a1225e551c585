"""Grid paths with (possibly random) operator values.

A path assigns to every grid cell [t_i, t_{i+1}) a left value (the value
at t_i) and a right value (the limit at t_{i+1}).  Step paths have equal
left and right values; paths sampled at the nodes have left_i = Y(t_i)
and right_i = Y(t_{i+1}).
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .chaos import ChaosElement, NoiseBasis, brownian, multiply

__all__ = ["Path", "stack_elements", "unstack", "as_element"]


def as_element(basis: NoiseBasis, value, shape=None) -> ChaosElement:
    if isinstance(value, ChaosElement):
        x = value
    else:
        x = ChaosElement.constant(basis, np.asarray(value, dtype=float))
    if shape is not None and x.value_shape != tuple(shape):
        if int(np.prod(x.value_shape, dtype=int)) == int(np.prod(shape, dtype=int)):
            x = x.reshape(shape)
        else:
            x = x * np.ones(shape)
    return x


def stack_elements(elements: Sequence[ChaosElement], shape) -> tuple[list, np.ndarray]:
    """Dense coefficients C[key, position, ...] over the union of keys."""
    shape = tuple(shape)
    index: dict = {}
    for x in elements:
        for k in x.coeffs:
            if k not in index:
                index[k] = len(index)
    keys = sorted(index, key=lambda k: (sum(d for _, d in k), k))
    index = {k: n for n, k in enumerate(keys)}
    C = np.zeros((max(len(keys), 1), len(elements)) + shape)
    for pos, x in enumerate(elements):
        for k, v in x.coeffs.items():
            C[index[k], pos] = v
    if not keys:
        keys = [()]
    return keys, C


def unstack(basis: NoiseBasis, keys: list, C: np.ndarray, tol: float = 0.0, truncated: bool = False) -> ChaosElement:
    """Inverse of :func:`stack_elements` for one position, C[key, ...]."""
    shape = C.shape[1:]
    coeffs = {}
    for n, k in enumerate(keys):
        v = C[n]
        if np.max(np.abs(v), initial=0.0) > tol:
            coeffs[k] = np.array(v)
    return ChaosElement._raw(basis, tuple(shape), coeffs, truncated)


class Path:
    """Cellwise left/right values on ``basis.time_grid``."""

    __slots__ = ("basis", "value_shape", "left", "right", "_dense")

    def __init__(self, basis: NoiseBasis, left: Sequence, right: Sequence | None = None, value_shape=None):
        if len(left) != basis.N or (right is not None and len(right) != basis.N):
            raise ValueError(f"path needs {basis.N} cell values")
        if value_shape is None:
            first = left[0]
            value_shape = first.value_shape if isinstance(first, ChaosElement) else np.shape(first)
        self.basis = basis
        self.value_shape = tuple(value_shape)
        self.left = [as_element(basis, v, self.value_shape) for v in left]
        if right is None:
            self.right = self.left
        else:
            self.right = [as_element(basis, v, self.value_shape) for v in right]
        self._dense = None

    # -- constructors -----------------------------------------------------
    @classmethod
    def constant(cls, basis: NoiseBasis, value) -> "Path":
        x = as_element(basis, value)
        return cls(basis, [x] * basis.N, value_shape=x.value_shape)

    @classmethod
    def identity(cls, basis: NoiseBasis, dim: int) -> "Path":
        return cls.constant(basis, np.eye(dim))

    @classmethod
    def step(cls, basis: NoiseBasis, values: Sequence) -> "Path":
        return cls(basis, list(values))

    @classmethod
    def from_nodes(cls, basis: NoiseBasis, nodes: Sequence) -> "Path":
        if len(nodes) != basis.N + 1:
            raise ValueError(f"need {basis.N + 1} node values")
        first = nodes[0]
        shape = first.value_shape if isinstance(first, ChaosElement) else np.shape(first)
        return cls(basis, list(nodes[:-1]), list(nodes[1:]), value_shape=shape)

    @classmethod
    def from_function(cls, basis: NoiseBasis, func: Callable[[float], np.ndarray]) -> "Path":
        return cls.from_nodes(basis, [np.asarray(func(float(t)), dtype=float) for t in basis.time_grid])

    @classmethod
    def brownian(cls, basis: NoiseBasis, k: int = 0, shape=(1, 1)) -> "Path":
        nodes = [brownian(basis, n, k).reshape(()) * np.ones(shape) for n in range(basis.N + 1)]
        return cls.from_nodes(basis, nodes)

    @classmethod
    def indicator(cls, basis: NoiseBasis, u: float, v: float, value=1.0) -> "Path":
        """value * 1_{[u, v)} as a step path; u and v must be grid times."""
        a, b = basis.index_of(u), basis.index_of(v)
        if a > b:
            raise ValueError("indicator needs u <= v")
        x = as_element(basis, value)
        zero = ChaosElement.zero(basis, x.value_shape)
        return cls(basis, [x if a <= i < b else zero for i in range(basis.N)], value_shape=x.value_shape)

    # -- queries ----------------------------------------------------------
    @property
    def N(self) -> int:
        return self.basis.N

    @property
    def is_deterministic(self) -> bool:
        return all(x.is_deterministic() for x in self.left) and all(x.is_deterministic() for x in self.right)

    @property
    def is_step(self) -> bool:
        return self.right is self.left or all(
            a is b or (a - b).max_abs() == 0.0 for a, b in zip(self.left, self.right)
        )

    @property
    def truncated(self) -> bool:
        return any(x.truncated for x in self.left) or any(x.truncated for x in self.right)

    def node(self, n: int) -> ChaosElement:
        """Value at grid node t_n (right limit of the previous cell)."""
        if n == 0:
            return self.left[0]
        return self.right[n - 1]

    def mid(self, i: int) -> ChaosElement:
        if self.right is self.left or self.left[i] is self.right[i]:
            return self.left[i]
        return 0.5 * (self.left[i] + self.right[i])

    def deterministic_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.is_deterministic:
            raise ValueError("path is random")
        L = np.stack([x.expectation() for x in self.left])
        R = L if self.right is self.left else np.stack([x.expectation() for x in self.right])
        return L, R

    def dense(self) -> tuple[list, np.ndarray, np.ndarray]:
        """(keys, L, R) with L[key, i, ...] the left coefficients of cell i."""
        if self._dense is None:
            keys, C = stack_elements(self.left + self.right, self.value_shape)
            self._dense = (keys, C[:, : self.N], C[:, self.N:])
        return self._dense

    # -- algebra ----------------------------------------------------------
    def _new(self, left, right) -> "Path":
        return Path(self.basis, left, right)

    def __add__(self, other: "Path") -> "Path":
        return self._new(
            [a + b for a, b in zip(self.left, other.left)],
            [a + b for a, b in zip(self.right, other.right)],
        )

    def __sub__(self, other: "Path") -> "Path":
        return self + other.scale(-1.0)

    def scale(self, c: float) -> "Path":
        return self._new([c * a for a in self.left], [c * a for a in self.right])

    def product(self, other: "Path") -> "Path":
        """Cellwise chaos product self(s) * other(s) on both cell ends."""
        left = [multiply(a, b) for a, b in zip(self.left, other.left)]
        if self.right is self.left and other.right is other.left:
            return Path(self.basis, left)
        return self._new(left, [multiply(a, b) for a, b in zip(self.right, other.right)])

    def pull(self, Z: ChaosElement | np.ndarray) -> "Path":
        """Left multiplication Z * Y(s) by a fixed random operator."""
        Z = as_element(self.basis, Z)
        left = [multiply(Z, a) for a in self.left]
        right = left if self.right is self.left else [multiply(Z, a) for a in self.right]
        return Path(self.basis, left, right)

    def times_matrix(self, M) -> "Path":
        M = np.asarray(M, dtype=float)
        left = [a @ M for a in self.left]
        right = left if self.right is self.left else [a @ M for a in self.right]
        return Path(self.basis, left, right)

    def restrict(self, n: int) -> "Path":
        """Y * 1_{[0, t_n)}."""
        zero = ChaosElement.zero(self.basis, self.value_shape)
        left = [x if i < n else zero for i, x in enumerate(self.left)]
        right = [x if i < n else zero for i, x in enumerate(self.right)]
        return Path(self.basis, left, right)

    def __repr__(self) -> str:
        kind = "deterministic" if self.is_deterministic else "random"
        return f"Path(N={self.N}, shape={self.value_shape}, {kind})"
