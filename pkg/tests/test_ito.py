import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hvolterra.chaos import NoiseBasis, random_element
from hvolterra.ito import (
    OUSpec,
    QuadraticFunctional,
    SmoothFunctional,
    alos_nualart_residual,
    check_derivatives,
    dR_ds,
    ito_apply_residual,
    ito_decomposition,
    ito_general_residual,
    ito_X_residual,
    ou_condition_check,
    ou_residual,
    ou_solve,
    z_squared_residual,
)
from hvolterra.kernels import make_exp_kernel, make_function_kernel, make_identity_kernel
from hvolterra.paths import Path
from hvolterra.xintegral import VolterraSpec


def spec_for(g, N=16, T=1.0):
    return VolterraSpec.build(g, NoiseBasis.uniform(N, T))


# -- functionals -------------------------------------------------------------

def test_quadratic_derivatives_check_out():
    F = QuadraticFunctional(np.array([[1.0, 2.0], [0.0, -1.0]]), [0.5, 1.0], 2.0)
    assert check_derivatives(F) < 1e-6
    assert F.value([1.0, 1.0]) == pytest.approx(1 + 2 - 1 + 1.5 + 2)


def test_wrong_derivative_is_caught():
    bad = SmoothFunctional(F=lambda x: float(np.sum(x**3)), dF=lambda x: 2 * x, d2F=lambda x: np.eye(x.size), dim=2)
    assert check_derivatives(bad) > 0.1


def test_residuals_need_quadratic_functional():
    F = SmoothFunctional(F=lambda x: 0.0, dF=lambda x: x * 0, d2F=lambda x: np.zeros((1, 1)), dim=1)
    with pytest.raises(TypeError):
        ito_X_residual(F, spec_for(make_exp_kernel(1.0), 4), 1.0)


# -- exact discrete formulas --------------------------------------------------

@given(st.integers(0, 10**6), st.integers(1, 2))
def test_general_ito_formula_is_exact_for_quadratics(seed, K):
    rng = np.random.default_rng(seed)
    basis = NoiseBasis.uniform(5, 1.0, K)
    F = QuadraticFunctional(rng.normal(size=(K, K)), rng.normal(size=K), float(rng.normal()))
    A = [random_element(basis, 1, rng, (K,)) for _ in range(5)]
    C = [random_element(basis, 1, rng, (K, K)) for _ in range(5)]
    V0 = rng.normal(size=K)
    assert ito_general_residual(F, V0, A, C, 1.0).max_abs() < 1e-10


def test_general_formula_needs_a_basis_for_arrays():
    F = QuadraticFunctional.square(1)
    with pytest.raises(ValueError):
        ito_general_residual(F, np.zeros(1), [np.ones(1)], [np.ones((1, 1))], 1.0)


def test_flat_kernel_has_exact_ito_formula():
    # with g = 1 X is Brownian motion and the midpoint formula is exact
    spec = spec_for(make_identity_kernel(1), 8)
    F = QuadraticFunctional.square(1)
    assert ito_X_residual(F, spec, 1.0).max_abs() < 1e-12
    assert alos_nualart_residual(F, spec, 1.0).max_abs() < 1e-12


def test_variance_function_derivative():
    # R(s) = (1 - e^{-2as}) / 2a for g = e^{-a(t-s)}
    spec = spec_for(make_exp_kernel(2.0))
    for s in (0.0, 0.25, 0.5):
        assert dR_ds(spec, s) == pytest.approx(math.exp(-4.0 * s), rel=1e-10)


def test_decomposition_parts_have_expected_shapes():
    spec = spec_for(make_exp_kernel(1.0), 6)
    dec = ito_decomposition(Path.brownian(spec.basis), spec, 1.0)
    assert len(dec.C_path) == len(dec.A_path) == 6
    assert dec.C_path[0].value_shape == (1, 1)


@pytest.mark.parametrize("residual", ["X", "apply", "z2"])
def test_residuals_shrink_first_order(residual):
    F = QuadraticFunctional.square(1)
    vals = []
    for N in (16, 32):
        spec = spec_for(make_exp_kernel(1.0), N)
        b = spec.basis
        if residual == "X":
            r = ito_X_residual(F, spec, 1.0)
        elif residual == "apply":
            r = ito_apply_residual(F, Path.from_function(b, lambda u: np.array([[math.cos(u)]])), spec, 1.0)
        else:
            r = z_squared_residual(Path.from_function(b, lambda u: np.array([[1.0 + u]])), spec, 1.0)
        vals.append(r.l2_norm())
    assert 1.5 < vals[0] / vals[1] < 3.0


def test_shape_guards():
    spec = spec_for(make_exp_kernel(1.0), 4)
    with pytest.raises(ValueError):
        ito_apply_residual(QuadraticFunctional.square(2), Path.identity(spec.basis, 1), spec, 1.0)
    with pytest.raises(ValueError):
        z_squared_residual(Path.constant(spec.basis, np.ones((2, 1))), spec, 1.0)
    sig2 = VolterraSpec.build(make_exp_kernel(1.0), spec.basis, 2.0 * np.eye(1))
    with pytest.raises(ValueError):
        alos_nualart_residual(QuadraticFunctional.square(1), sig2, 1.0)


# -- Ornstein-Uhlenbeck --------------------------------------------------------

def test_ou_variance_matrix_for_diagonal_generator():
    basis = NoiseBasis.uniform(64, 1.0, 2)
    spec = VolterraSpec.build(make_identity_kernel(2), basis)
    a = np.array([0.5, 2.0])
    Y = ou_solve(OUSpec(np.diag(a), np.eye(2), spec), 1.0)
    exact = (1 - np.exp(-2 * a)) / (2 * a)
    assert np.allclose(Y.variance(), exact, rtol=0.02)


def test_ou_residual_refines():
    res = []
    for N in (16, 32):
        spec = spec_for(make_identity_kernel(1), N)
        res.append(ou_residual(OUSpec(np.eye(1), np.eye(1), spec), 1.0).l2_norm())
    assert 1.6 < res[0] / res[1] < 2.5


def test_ou_shape_validation():
    spec = spec_for(make_identity_kernel(1), 4)
    with pytest.raises(ValueError):
        OUSpec(np.ones((2, 3)), np.eye(2), spec)
    with pytest.raises(ValueError):
        OUSpec(np.eye(2), np.eye(2), spec)


def test_condition_check_on_regular_kernel():
    spec = spec_for(make_identity_kernel(1))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        report = ou_condition_check(OUSpec(np.eye(1), np.eye(1), spec))
    assert report["trend"] == "vanishing" and report["warning"] is None


def test_condition_check_warns_on_blow_up():
    g = make_function_kernel(lambda t, s: 1.0 / (t - s), diagonal="singular")
    ou = OUSpec(np.eye(1), np.eye(1), spec_for(g))
    with pytest.warns(RuntimeWarning, match="does not decay"):
        report = ou_condition_check(ou)
    assert report["trend"] == "non-vanishing"
    assert report["finite_second_moment"]


# -- decomposition and linear functionals -----------------------------------------

from hvolterra.chaos import brownian  # noqa: E402
from hvolterra.ito import reassemble  # noqa: E402
from hvolterra.xintegral import x_integral  # noqa: E402


@pytest.mark.parametrize("integrand", ["cos", "brownian", "brownian_sq"])
@pytest.mark.parametrize("random_sigma", [False, True])
def test_grid_decomposition_rebuilds_the_integral(integrand, random_sigma):
    basis = NoiseBasis.uniform(8, 1.0)
    sigma = Path.step(basis, [(1 + 0.3 * brownian(basis, i)) * np.eye(1) for i in range(8)]) if random_sigma else None
    spec = VolterraSpec.build(make_exp_kernel(1.0), basis, sigma)
    B = Path.brownian(basis)
    Y = {"cos": Path.from_function(basis, lambda u: np.array([[math.cos(u)]])), "brownian": B,
         "brownian_sq": B.product(B)}[integrand]
    dec = ito_decomposition(Y, spec, 1.0)
    assert (reassemble(dec, basis) - x_integral(Y, spec, 1.0).value).max_abs() < 1e-9


def test_density_decomposition_is_first_order_close():
    errs = []
    for N in (16, 32):
        spec = spec_for(make_exp_kernel(1.0), N)
        Y = Path.from_function(spec.basis, lambda u: np.array([[math.cos(u)]]))
        dec = ito_decomposition(Y, spec, 1.0, "density")
        errs.append((reassemble(dec, spec.basis) - x_integral(Y, spec, 1.0).value).l2_norm())
    assert 1.6 < errs[0] / errs[1] < 2.5
    with pytest.raises(ValueError):
        ito_decomposition(Y, spec, 1.0, "spline")


def test_general_formula_on_grid_decomposition_is_exact():
    spec = spec_for(make_exp_kernel(1.0), 16)
    Y = Path.from_function(spec.basis, lambda u: np.array([[math.cos(u)]]))
    dec = ito_decomposition(Y, spec, 1.0)
    F = QuadraticFunctional.square(1)
    A = [a.reshape((1,)) for a in dec.A_path]
    assert ito_general_residual(F, np.zeros(1), A, dec.C_path, 1.0).max_abs() < 1e-10


def test_anticipating_drift_example():
    # V(t) = B_T t: C = 0, A = B_T on every cell
    basis = NoiseBasis.uniform(6, 1.0)
    BT = brownian(basis, 6).reshape((1,))
    zero = np.zeros((1, 1))
    res = ito_general_residual(QuadraticFunctional.square(1), np.zeros(1), [BT] * 6, [zero] * 6, 1.0)
    assert res.max_abs() < 1e-12


@pytest.mark.parametrize("kernel", [make_exp_kernel(1.0), make_identity_kernel(1)])
def test_linear_functional_residuals_vanish(kernel):
    spec = spec_for(kernel, 8)
    L = QuadraticFunctional.linear([2.0], 1.0)
    Y = Path.from_function(spec.basis, lambda u: np.array([[math.cos(u)]]))
    assert ito_X_residual(L, spec, 1.0).max_abs() < 1e-10
    assert ito_apply_residual(L, Y, spec, 1.0).max_abs() < 1e-10
    assert alos_nualart_residual(L, spec, 1.0).max_abs() < 1e-10


def test_zero_integrand_z_squared():
    spec = spec_for(make_exp_kernel(1.0), 8)
    assert z_squared_residual(Path.constant(spec.basis, np.zeros((1, 1))), spec, 1.0).max_abs() == 0.0


def test_ou_trivial_cases():
    spec = spec_for(make_identity_kernel(1), 8)
    from hvolterra.xintegral import simulate_X

    assert (ou_solve(OUSpec(np.zeros((1, 1)), np.eye(1), spec), 1.0) - simulate_X(spec, 1.0)).max_abs() < 1e-14
    assert ou_residual(OUSpec(np.zeros((1, 1)), np.eye(1), spec), 1.0).max_abs() < 1e-14
    assert ou_residual(OUSpec(np.eye(1), np.zeros((1, 1)), spec), 1.0).max_abs() == 0.0
