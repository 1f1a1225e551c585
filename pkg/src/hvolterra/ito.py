"""Anticipating Ito formulas and the Ornstein-Uhlenbeck convolution, as residuals.

Every operation returns the chaos element "left side minus right side" of
an Ito-type identity on the grid.  Functionals act on chaos elements, so
they are restricted to polynomials of degree at most two; arbitrary
smooth functionals are supported for probe checks on plain arrays.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, linalg

from .chaos import (
    ChaosElement,
    MalliavinField,
    NoiseBasis,
    accumulate,
    derivative,
    multiply,
    skorohod,
    skorohod_dense,
)
from .paths import Path, stack_elements
from .xintegral import VolterraSpec, X_path, _as_operator_path, _require_regular, simulate_X, x_integral

__all__ = [
    "SmoothFunctional",
    "QuadraticFunctional",
    "check_derivatives",
    "ItoDecomposition",
    "ito_decomposition",
    "reassemble",
    "ito_general_residual",
    "ito_apply_residual",
    "ito_X_residual",
    "alos_nualart_residual",
    "dR_ds",
    "z_squared_residual",
    "OUSpec",
    "ou_solve",
    "ou_path",
    "ou_residual",
    "ou_condition_check",
]


@dataclass
class SmoothFunctional:
    """F: R^d -> R with analytic first and second derivatives."""

    F: Callable[[np.ndarray], float]
    dF: Callable[[np.ndarray], np.ndarray]
    d2F: Callable[[np.ndarray], np.ndarray]
    dim: int

    def value(self, x) -> float:
        return float(self.F(np.asarray(x, dtype=float)))

    def grad(self, x) -> np.ndarray:
        return np.asarray(self.dF(np.asarray(x, dtype=float)), dtype=float)

    def hess(self, x) -> np.ndarray:
        return np.asarray(self.d2F(np.asarray(x, dtype=float)), dtype=float)


class QuadraticFunctional(SmoothFunctional):
    """F(x) = <M x, x> + <c, x> + c0, exact in chaos arithmetic."""

    def __init__(self, M, c=None, c0: float = 0.0):
        M = np.atleast_2d(np.asarray(M, dtype=float))
        d = M.shape[0]
        self.M = M
        self.c = np.zeros(d) if c is None else np.asarray(c, dtype=float).reshape(d)
        self.c0 = float(c0)
        S = M + M.T
        super().__init__(
            F=lambda x: float(x @ M @ x + self.c @ x + self.c0),
            dF=lambda x: S @ x + self.c,
            d2F=lambda x: S,
            dim=d,
        )

    @classmethod
    def square(cls, dim: int = 1) -> "QuadraticFunctional":
        """|x|^2."""
        return cls(np.eye(dim))

    @classmethod
    def linear(cls, c, c0: float = 0.0) -> "QuadraticFunctional":
        c = np.atleast_1d(np.asarray(c, dtype=float))
        return cls(np.zeros((c.size, c.size)), c, c0)

    @property
    def hessian(self) -> np.ndarray:
        return self.M + self.M.T

    def on_chaos(self, x: ChaosElement) -> ChaosElement:
        x = x.reshape((self.dim,))
        quad = multiply(x.reshape((1, self.dim)) @ self.M, x).reshape(())
        return quad + x @ self.c + self.c0

    def grad_on_chaos(self, x: ChaosElement) -> ChaosElement:
        """F'(x) as a 1 x d row operator."""
        x = x.reshape((self.dim,))
        return (self.hessian @ x + self.c).reshape((1, self.dim))

    def second_order(self, h: np.ndarray | ChaosElement, k: np.ndarray | ChaosElement):
        """F''(h, k) for vectors (or chaos vectors) h, k."""
        if isinstance(h, ChaosElement) or isinstance(k, ChaosElement):
            if not isinstance(h, ChaosElement):
                h, k = k, h
            hM = h.reshape((1, self.dim)) @ self.hessian
            if isinstance(k, ChaosElement):
                return multiply(hM, k.reshape((self.dim,))).reshape(())
            return (hM @ np.asarray(k, dtype=float)).reshape(())
        return float(np.asarray(h) @ self.hessian @ np.asarray(k))


def check_derivatives(F: SmoothFunctional, probes: int = 10, seed: int = 0, step: float = 1e-4) -> float:
    """Worst relative mismatch of F', F'' against central differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(probes):
        x = rng.standard_normal(F.dim)
        v = rng.standard_normal(F.dim)
        fd1 = (F.value(x + step * v) - F.value(x - step * v)) / (2 * step)
        an1 = float(F.grad(x) @ v)
        fd2 = (F.value(x + step * v) - 2 * F.value(x) + F.value(x - step * v)) / step**2
        an2 = float(v @ F.hess(x) @ v)
        for fd, an in ((fd1, an1), (fd2, an2)):
            worst = max(worst, abs(fd - an) / max(1.0, abs(an)))
    return worst


def _require_quadratic(F) -> QuadraticFunctional:
    if not isinstance(F, QuadraticFunctional):
        raise TypeError("chaos residuals need a QuadraticFunctional (polynomial of degree <= 2)")
    return F


# ---------------------------------------------------------------------------
# General anticipating Ito formula


def ito_general_residual(F, V0, A_path, C_path, t: float, basis: NoiseBasis | None = None) -> ChaosElement:
    """F(V(t)) minus the five-term right side for V = V0 + sum A dt + delta(C).

    ``A_path[i]`` is a (K,) element and ``C_path[i]`` a (K, K1) element on
    cell i.  First-order terms use the cell mean of V; the pairing term
    uses D^-V_i = 2 D_i V(t_i) + D_i A_i dt_i + delta(D_i C_i 1_i).
    """
    F = _require_quadratic(F)
    if basis is None:
        found = [x for x in [V0, *A_path, *C_path] if isinstance(x, ChaosElement)]
        if not found:
            raise ValueError("pass the noise basis when all inputs are arrays")
        basis = found[0].basis
    K = F.dim
    K1 = basis.noise_dim
    n = basis.index_of(t)
    V0 = V0 if isinstance(V0, ChaosElement) else ChaosElement.constant(basis, np.asarray(V0, float).reshape(K))
    A = [a if isinstance(a, ChaosElement) else ChaosElement.constant(basis, np.asarray(a, float).reshape(K))
         for a in A_path]
    C = [c if isinstance(c, ChaosElement) else ChaosElement.constant(basis, np.asarray(c, float).reshape(K, K1))
         for c in C_path]
    dt = basis.dt

    def cell_delta(i: int, Ci: ChaosElement) -> ChaosElement:
        return skorohod(MalliavinField(basis, {(i, k): Ci.component((..., k)) for k in range(K1)}, (K,)))

    V = [V0]
    for i in range(n):
        V.append(V[-1] + A[i] * dt[i] + cell_delta(i, C[i]))
    rhs_terms = [(1.0, F.on_chaos(V0))]
    entries = {}
    for i in range(n):
        Vbar = 0.5 * (V[i] + V[i + 1])
        grad = F.grad_on_chaos(Vbar)
        rhs_terms.append((dt[i], multiply(grad, A[i]).reshape(())))
        gc = multiply(grad, C[i]).reshape((K1,))
        for k in range(K1):
            entries[(i, k)] = gc.component(k)
        for k in range(K1):
            Ck = C[i].component((..., k))
            DV = derivative(V[i], i, k)
            DA = derivative(A[i], i, k)
            DC = derivative(C[i], i, k)
            Dminus = 2.0 * DV + DA * dt[i] + cell_delta(i, DC)
            rhs_terms.append((0.5 * dt[i], F.second_order(Dminus, Ck)))
            rhs_terms.append((0.5 * dt[i], F.second_order(Ck, Ck)))
    if entries:
        rhs_terms.append((1.0, skorohod(MalliavinField(basis, entries, ()))))
    rhs = accumulate(basis, (), [(c, x if isinstance(x, ChaosElement) else ChaosElement.constant(basis, x))
                                 for c, x in rhs_terms])
    return F.on_chaos(V[n]) - rhs


# ---------------------------------------------------------------------------
# Ito formula for Z = int Y dX


@dataclass
class ItoDecomposition:
    """Cellwise C = b and A = delta(a) + tr b_D + tr sum a_D dt of Z = int Y dX.

    ``b[i]`` is the new-noise coefficient on cell i; ``a_part``, ``bD_trace``
    and ``aD_trace`` are drift rates, so the increment of Z over cell i is
    delta(b[i] 1_i) + A_path[i] dt_i.
    """

    b: list
    a_part: list
    bD_trace: list
    aD_trace: list

    @property
    def C_path(self) -> list:
        return self.b

    @property
    def A_path(self) -> list:
        return [x + y + z for x, y, z in zip(self.a_part, self.bD_trace, self.aD_trace)]


def ito_decomposition(Y: Path, spec: VolterraSpec, t: float, form: str = "grid") -> ItoDecomposition:
    """b = Y g(s,s) sigma, a(s,u) = Y(s) phi(s,u) sigma(u) and their D-traces on the grid.

    ``form="grid"`` replaces g(s_i, s_i) by g(t_{i+1}, s_i) and phi(s_m, s_j)
    dt_m by g(t_{m+1}, s_j) - g(t_m, s_j); summed over cells this rebuilds
    both parts of x_integral exactly.  ``form="density"`` evaluates g(s, s)
    and phi at the cell anchors, as in the continuum display.
    """
    if form not in ("grid", "density"):
        raise ValueError("form must be 'grid' or 'density'")
    _require_regular(spec)
    if form == "density" and spec.g.density is None:
        raise ValueError("the density form needs a kernel density")
    basis = spec.basis
    K1, K2 = spec.dims
    Y = _as_operator_path(Y, K2)
    K3 = Y.value_shape[0]
    n = basis.index_of(t)
    kg = spec.g.grid(basis)
    G = kg.G
    dt = basis.dt
    if form == "grid":
        diag = [G[m + 1, m] for m in range(n)]
        drift = lambda m, j: (G[m + 1, j] - G[m, j]) / dt[m]  # noqa: E731
    else:
        phi = kg.phi_at_anchors()
        diag = kg.diag
        drift = lambda m, j: phi[m, j]  # noqa: E731
    sig = spec.sigma_elements()
    b, a_part, bD, aD = [], [], [], []
    for m in range(n):
        Ym = Y.mid(m) if form == "density" else Y.left[m]
        b.append(multiply(Y.mid(m) @ diag[m], sig[m]))
        entries = {}
        at = []
        for j in range(m):
            W = drift(m, j)
            amj = multiply(Ym @ W, sig[j])
            for k in range(K1):
                entries[(j, k)] = amj.component((..., k))
                dY = derivative(Ym, j, k)
                if dY.coeffs:
                    at.append((dt[j], multiply(dY @ W, sig[j]).component((..., k))))
        a_part.append(skorohod(MalliavinField(basis, entries, (K3,))) if entries else ChaosElement.zero(basis, (K3,)))
        bt = []
        for k in range(K1):
            dY = derivative(Y.right[m], m, k)
            if dY.coeffs:
                bt.append((1.0, multiply(dY @ diag[m], sig[m]).component((..., k))))
        bD.append(accumulate(basis, (K3,), bt))
        aD.append(accumulate(basis, (K3,), at))
    return ItoDecomposition(b, a_part, bD, aD)


def reassemble(dec: ItoDecomposition, basis: NoiseBasis) -> ChaosElement:
    """sum_i delta(C_i 1_i) + A_i dt_i."""
    K1 = basis.noise_dim
    shape = dec.b[0].value_shape[:-1] if dec.b else ()
    entries = {}
    for i, C in enumerate(dec.b):
        for k in range(K1):
            entries[(i, k)] = C.component((..., k))
    mart = skorohod(MalliavinField(basis, entries, shape)) if entries else ChaosElement.zero(basis, shape)
    return mart + accumulate(basis, shape, [(basis.dt[i], A) for i, A in enumerate(dec.A_path)])


def _z_nodes(Y: Path, spec: VolterraSpec, n: int) -> list:
    basis = spec.basis
    return [x_integral(Y, spec, float(basis.time_grid[m])).value for m in range(n + 1)]


def ito_apply_residual(F, Y: Path, spec: VolterraSpec, t: float) -> ChaosElement:
    """F(Z(t)) - F(0) - int F'(Z) Y dX + 1/2 sum tr F''(Z)(b_i)(b_i) dt_i."""
    F = _require_quadratic(F)
    _require_regular(spec)
    basis = spec.basis
    K1, K2 = spec.dims
    Y = _as_operator_path(Y, K2)
    K3 = Y.value_shape[0]
    if F.dim != K3:
        raise ValueError(f"functional acts on R^{F.dim}, Z takes values in R^{K3}")
    n = basis.index_of(t)
    Z = _z_nodes(Y, spec, n)
    Z += [Z[-1]] * (basis.N - n)
    grads = Path.from_nodes(basis, [F.grad_on_chaos(z) for z in Z])
    FY = grads.product(Y)
    stoch = x_integral(FY, spec, t).value.reshape(())
    kg = spec.g.grid(basis)
    sig = spec.sigma_elements()
    corr = []
    for i in range(n):
        bi = multiply(Y.mid(i) @ kg.diag[i], sig[i])
        for k in range(K1):
            bk = bi.component((..., k))
            val = F.second_order(bk, bk)
            corr.append((0.5 * basis.dt[i], val if isinstance(val, ChaosElement) else ChaosElement.constant(basis, val)))
    correction = accumulate(basis, (), corr)
    F0 = F.value(np.zeros(K3))
    return F.on_chaos(Z[n]) - F0 - stoch + correction


def ito_X_residual(F, spec: VolterraSpec, t: float) -> ChaosElement:
    """The Y = Id case: F(X(t)) - F(0) - int F'(X) dX + the diagonal correction."""
    K2 = spec.dims[1]
    return ito_apply_residual(F, Path.identity(spec.basis, K2), spec, t)


def dR_ds(spec: VolterraSpec, s: float) -> float:
    """g(s,s)^2 + 2 int_0^s g(s,u) phi(s,u) du for a scalar kernel."""
    g = spec.g
    if g.shape != (1, 1):
        raise ValueError("scalar kernel required")
    if s == 0.0:
        return float(g.diag(0.0)[0, 0] ** 2)
    val, _ = integrate.quad(lambda u: float(g.eval(s, u)[0, 0] * g.phi(s, u)[0, 0]), 0.0, s,
                            epsrel=1e-11, epsabs=1e-13, limit=200)
    return float(g.diag(s)[0, 0] ** 2 + 2.0 * val)


def alos_nualart_residual(F, spec: VolterraSpec, t: float) -> ChaosElement:
    """F(X(t)) - F(0) - delta(K_g(F'(X)) sigma) - 1/2 sum F''(X) R'(s_i) dt_i.

    One-dimensional reduction with sigma = 1: the Ito correction is carried
    by the variance function R(s) = int_0^s g(s, r)^2 dr.
    """
    F = _require_quadratic(F)
    _require_regular(spec)
    basis = spec.basis
    if spec.dims != (1, 1) or not spec.deterministic_sigma or not np.allclose(spec.sigma_cells(), 1.0):
        raise ValueError("the one-dimensional reduction needs K1 = K2 = 1 and sigma = 1")
    n = basis.index_of(t)
    X = X_path(spec)
    grads = Path.from_nodes(basis, [F.grad_on_chaos(x) for x in X])
    sk = x_integral(grads, spec, t).skorohod_part.reshape(())
    kg = spec.g.grid(basis)
    hess = float(F.hessian[0, 0])
    corr = 0.5 * hess * sum(dR_ds(spec, float(kg.anchors[i])) * basis.dt[i] for i in range(n))
    return F.on_chaos(X[n]) - F.value(np.zeros(1)) - sk - corr


def z_squared_residual(Y: Path, spec: VolterraSpec, t: float) -> ChaosElement:
    """1/2 Z(t)^2 - int Z dZ - tr sum D_i(Z(t_{i+1})) b_i dt_i + 1/2 sum |b_i|^2 dt_i.

    int Z dZ = delta(Zbar b) + sum Zbar_i A_i dt_i with the decomposition of
    :func:`ito_decomposition`; Z is scalar.
    """
    _require_regular(spec)
    basis = spec.basis
    K1, K2 = spec.dims
    Y = _as_operator_path(Y, K2)
    if Y.value_shape[0] != 1:
        raise ValueError("Z must be scalar (Y has one row)")
    n = basis.index_of(t)
    Z = [z.reshape(()) for z in _z_nodes(Y, spec, n)]
    dec = ito_decomposition(Y, spec, t, "density")
    A = dec.A_path
    lhs = 0.5 * multiply(Z[n], Z[n])
    entries = {}
    drift = []
    corr = []
    for i in range(n):
        Zbar = 0.5 * (Z[i] + Z[i + 1])
        bi = dec.b[i].reshape((K1,))
        zb = multiply(Zbar, bi)
        for k in range(K1):
            entries[(i, k)] = zb.component(k)
        drift.append((basis.dt[i], multiply(Zbar, A[i].reshape(()))))
        for k in range(K1):
            dZ = derivative(Z[i + 1], i, k)
            bk = bi.component(k)
            corr.append((basis.dt[i], multiply(dZ, bk)))
            corr.append((-0.5 * basis.dt[i], multiply(bk, bk)))
    zdz = skorohod(MalliavinField(basis, entries, ())) + accumulate(basis, (), drift)
    return lhs - zdz - accumulate(basis, (), corr)


# ---------------------------------------------------------------------------
# Ornstein-Uhlenbeck


@dataclass
class OUSpec:
    """dY = -A Y dt + F dX with A (K3 x K3) and F (K3 x K2)."""

    A_gen: np.ndarray
    F_op: np.ndarray
    spec: VolterraSpec
    _semigroup: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.A_gen = np.atleast_2d(np.asarray(self.A_gen, dtype=float))
        self.F_op = np.atleast_2d(np.asarray(self.F_op, dtype=float))
        K3 = self.A_gen.shape[0]
        if self.A_gen.shape != (K3, K3):
            raise ValueError("generator must be square")
        if self.F_op.shape != (K3, self.spec.dims[1]):
            raise ValueError(f"F must be {K3} x {self.spec.dims[1]}")

    def semigroup(self, tau: float) -> np.ndarray:
        key = float(tau)
        S = self._semigroup.get(key)
        if S is None:
            S = linalg.expm(-tau * self.A_gen)
            self._semigroup[key] = S
        return S


def ou_solve(ou: OUSpec, t: float) -> ChaosElement:
    """Y(t) = int_0^t exp(-(t - u) A) F dX(u)."""
    basis = ou.spec.basis
    n = basis.index_of(t)
    tn = float(basis.time_grid[n])
    h = Path.from_function(basis, lambda u: ou.semigroup(max(tn - u, 0.0)) @ ou.F_op)
    return x_integral(h, ou.spec, tn).value


def ou_path(ou: OUSpec, t: float | None = None) -> list:
    basis = ou.spec.basis
    n = basis.N if t is None else basis.index_of(t)
    return [ou_solve(ou, float(basis.time_grid[m])) for m in range(n + 1)]


def ou_residual(ou: OUSpec, t: float) -> ChaosElement:
    """Y(t) + sum_i A Y(t_i) dt_i - F X(t)."""
    basis = ou.spec.basis
    n = basis.index_of(t)
    Ys = ou_path(ou, t)
    drift = accumulate(basis, Ys[0].value_shape, [(basis.dt[i], ou.A_gen @ Ys[i]) for i in range(n)])
    return Ys[n] + drift - ou.F_op @ simulate_X(ou.spec, t)


def ou_condition_check(ou: OUSpec, offsets: int = 4, tol: float = 1e-12) -> dict:
    """Trend of sup_s |(Id - exp(-d A)) g(s + d, s)| over the finest offsets d."""
    basis = ou.spec.basis
    g = ou.spec.g
    kg = g.grid(basis)
    t = basis.time_grid
    values = []
    deltas = []
    K3 = ou.A_gen.shape[0]
    for k in range(1, offsets + 1):
        worst = 0.0
        for i in range(basis.N - k + 1):
            d = t[i + k] - kg.anchors[i]
            M = (np.eye(K3) - ou.semigroup(d)) @ ou.F_op @ kg.G[i + k, i]
            worst = max(worst, float(np.linalg.norm(M, 2)))
        values.append(worst)
        deltas.append(float(k * basis.dt.min()))
    v = np.array(values)
    if np.all(v <= tol):
        slope = math.inf
    else:
        slope = float(np.polyfit(np.log(deltas), np.log(np.maximum(v, tol)), 1)[0])
    vanishing = bool(slope > 0.05)
    second = ou_solve(ou, basis.T).second_moment()
    report = {
        "offsets": deltas,
        "values": values,
        "slope": slope,
        "trend": "vanishing" if vanishing else "non-vanishing",
        "second_moment": second,
        "finite_second_moment": bool(np.isfinite(second)),
        "warning": None if vanishing else "weighted semigroup condition does not decay on the finest offsets",
    }
    if not vanishing:
        warnings.warn(report["warning"], RuntimeWarning, stacklevel=2)
    return report
