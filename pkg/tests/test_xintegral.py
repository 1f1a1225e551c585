import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hvolterra.chaos import ChaosElement, NoiseBasis, brownian, multiply, random_element
from hvolterra.kernels import make_exp_kernel, make_fbm_kernel, make_identity_kernel
from hvolterra.paths import Path
from hvolterra.xintegral import (
    VolterraSpec,
    X_path,
    continuity_bound,
    integrand_norm,
    semimartingale_decompose,
    semimartingale_integral,
    simple_integral,
    simulate_X,
    smg_correction,
    summary_rows,
    x_dx_identity_gap,
    x_integral,
)


def exp_spec(N=8, a=1.0, T=1.0, K=1):
    basis = NoiseBasis.uniform(N, T, K)
    return VolterraSpec.build(make_exp_kernel(a * np.eye(K)), basis)


# -- oracles -----------------------------------------------------------------

def test_brownian_self_integral_coefficients():
    # int B dX with g = sigma = 1:  mean t, second chaos (B^2 - t)/2
    basis = NoiseBasis.uniform(8, 1.0)
    spec = VolterraSpec.build(make_identity_kernel(1), basis)
    for n, t in enumerate(basis.time_grid):
        val = x_integral(Path.brownian(basis), spec, float(t)).value.reshape(())
        B = brownian(basis, n)
        assert val.expectation() == pytest.approx(float(t), abs=1e-12)
        wick = 0.5 * (multiply(B, B) - float(t))
        assert (val.chaos_projection(2) - wick.chaos_projection(2)).max_abs() < 1e-12
        assert val.chaos_projection(1).max_abs() < 1e-12


def test_gaussian_X_variance_is_kernel_square_sum():
    spec = exp_spec(16, 2.0)
    kg = spec.g.grid(spec.basis)
    X = simulate_X(spec, 1.0)
    assert set(X.degrees()) == {1}
    expected = float(np.sum(kg.G[16, :16, 0, 0] ** 2 * spec.basis.dt))
    assert float(X.variance()[0]) == pytest.approx(expected, rel=1e-12)


def test_semimartingale_parts_for_flat_kernel():
    spec = VolterraSpec.build(make_identity_kernel(1), NoiseBasis.uniform(8, 1.0))
    M, A = semimartingale_decompose(spec, 1.0)
    assert (M[-1] - simulate_X(spec, 1.0)).max_abs() < 1e-14
    assert A[-1].max_abs() == 0.0


def test_brownian_correction_is_elapsed_time():
    basis = NoiseBasis.uniform(8, 1.0)
    spec = VolterraSpec.build(make_identity_kernel(1), basis)
    corr = smg_correction(Path.brownian(basis), spec, 1.0)
    assert float(np.squeeze(corr.expectation())) == pytest.approx(1.0)
    assert (corr - corr.chaos_projection(0)).max_abs() < 1e-14


def test_quadratic_variation_identity():
    spec = VolterraSpec.build(make_identity_kernel(1), NoiseBasis.uniform(16, 1.0))
    assert x_dx_identity_gap(spec, 1.0) < 1e-12
    coarse, fine = (x_dx_identity_gap(exp_spec(N), 1.0) for N in (16, 32))
    assert 1.6 < coarse / fine < 2.5


# -- properties --------------------------------------------------------------

@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.2, 3.0))
def test_linear_in_the_integrand(a, b, rate):
    spec = exp_spec(6, rate)
    basis = spec.basis
    Y1 = Path.brownian(basis)
    Y2 = Path.from_function(basis, lambda u: np.array([[math.cos(u)]]))
    lhs = x_integral(Y1.scale(a) + Y2.scale(b), spec, 1.0).value
    rhs = a * x_integral(Y1, spec, 1.0).value + b * x_integral(Y2, spec, 1.0).value
    assert (lhs - rhs).max_abs() < 1e-12


@given(st.integers(1, 2), st.integers(0, 10**6))
def test_constant_integrand_matches_simulated_X(K, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(K, K))
    A = A @ A.T + 0.1 * np.eye(K)
    basis = NoiseBasis.uniform(5, 1.0, K)
    spec = VolterraSpec.build(make_exp_kernel(A), basis, rng.normal(size=(K, K)))
    M = rng.normal(size=(2, K))
    lhs = x_integral(Path.constant(basis, M), spec, 1.0).value
    assert (lhs - M @ simulate_X(spec, 1.0)).max_abs() < 1e-12


@given(st.integers(0, 10**6))
def test_continuity_bound(seed):
    rng = np.random.default_rng(seed)
    spec = exp_spec(6, float(rng.uniform(0.2, 2.0)))
    c = rng.normal(size=3)
    B = Path.brownian(spec.basis)
    Y = B.scale(c[0]) + Path.from_function(spec.basis, lambda u: np.array([[c[1] + c[2] * u]]))
    lhs, bound = continuity_bound(Y, spec, 1.0)
    assert lhs <= bound + 1e-12
    assert integrand_norm(Y, spec, 1.0) >= 0.0


def test_simple_integral_with_adapted_values():
    spec = exp_spec(8)
    basis = spec.basis
    B = brownian(basis, 4)
    Z = [ChaosElement.constant(basis, np.ones((1, 1))), B.reshape((1, 1))]
    cells = [Z[0] if i < 4 else Z[1] for i in range(8)]
    lhs = x_integral(Path.step(basis, cells), spec, 1.0).value
    assert (lhs - simple_integral(Z, [0.0, 0.5, 1.0], spec, 1.0)).max_abs() < 1e-12
    with pytest.raises(ValueError):
        simple_integral(Z, [0.0, 1.0], spec, 1.0)
    with pytest.raises(ValueError):
        simple_integral(Z, [0.0, 0.7, 0.5], spec, 1.0)


def test_semimartingale_integral_agrees_for_predictable_step():
    spec = exp_spec(16)
    basis = spec.basis
    cells = [brownian(basis, 8).reshape((1, 1)) if i >= 8 else ChaosElement.constant(basis, np.ones((1, 1)))
             for i in range(16)]
    Y = Path.step(basis, cells)
    diff = x_integral(Y, spec, 1.0).value - semimartingale_integral(Y, spec, 1.0)
    assert diff.max_abs() < 1e-12


def test_singular_kernel_gives_finite_X():
    spec = VolterraSpec.build(make_fbm_kernel(0.3), NoiseBasis.uniform(16, 1.0))
    X = simulate_X(spec, 1.0)
    assert np.isfinite(X.second_moment())
    with pytest.raises(ValueError):
        semimartingale_decompose(spec, 1.0)


def test_domain_report_and_shape_errors():
    spec = exp_spec(4)
    res = x_integral(Path.brownian(spec.basis), spec, 1.0)
    assert res.domain_report["in_domain"]
    assert (res.value - res.skorohod_part - res.trace_part).max_abs() < 1e-15
    other = NoiseBasis.uniform(5, 1.0)
    with pytest.raises(ValueError):
        x_integral(Path.brownian(other), spec, 1.0)
    with pytest.raises(ValueError):
        x_integral(Path.constant(spec.basis, np.ones((1, 3))), spec, 1.0)
    zero = x_integral(Path.brownian(spec.basis), spec, 0.0).value
    assert zero.max_abs() == 0.0


def test_summary_rows():
    spec = exp_spec(4)
    xs = X_path(spec)
    rows = summary_rows({float(t): x for t, x in zip(spec.basis.time_grid, xs)})
    assert [r["t"] for r in rows] == list(spec.basis.time_grid)
    assert rows[0]["Var"] == 0.0 and rows[-1]["Var"] > 0.0


def test_anticipating_single_cell_is_product_form():
    # Z = B_T over [0, T] with g = sigma = 1: delta(B_T) + int D_s B_T ds = B_T^2 - T + T
    basis = NoiseBasis.uniform(6, 1.0)
    spec = VolterraSpec.build(make_identity_kernel(1), basis)
    BT = brownian(basis, 6)
    lhs = simple_integral([BT], [0.0, 1.0], spec, 1.0).reshape(())
    assert (lhs - multiply(BT, BT)).max_abs() < 1e-12
    via_path = x_integral(Path.step(basis, [BT.reshape((1, 1))] * 6), spec, 1.0).value.reshape(())
    assert (via_path - multiply(BT, BT)).max_abs() < 1e-12


def test_locality():
    spec = exp_spec(8)
    basis = spec.basis
    Y = Path.brownian(basis).product(Path.indicator(basis, 0.5, 1.0, np.ones((1, 1))))
    assert x_integral(Y, spec, 0.5).value.max_abs() == 0.0


@pytest.mark.parametrize("kernel", ["exp", "fbm"])
def test_restriction(kernel):
    basis = NoiseBasis.uniform(8, 1.0)
    g = make_exp_kernel(1.3) if kernel == "exp" else make_fbm_kernel(0.3)
    spec = VolterraSpec.build(g, basis)
    Y = Path.brownian(basis) + Path.from_function(basis, lambda u: np.array([[math.cos(2 * u)]]))
    for t in (0.25, 0.5, 0.75):
        cut = Y.product(Path.indicator(basis, 0.0, t, np.ones((1, 1))))
        assert (x_integral(cut, spec, 1.0).value - x_integral(Y, spec, t).value).max_abs() < 1e-10


@given(st.integers(0, 10**6))
def test_pull_out_of_random_factor(seed):
    rng = np.random.default_rng(seed)
    spec = exp_spec(6, float(rng.uniform(0.3, 2.0)))
    basis = spec.basis
    Z = random_element(basis, 1, rng)
    Y = Path.step(basis, [ChaosElement.constant(basis, np.array([[v]])) for v in rng.normal(size=6)])
    lhs = x_integral(Y.pull(Z), spec, 1.0).value
    assert (lhs - Z * x_integral(Y, spec, 1.0).value).max_abs() < 1e-9
