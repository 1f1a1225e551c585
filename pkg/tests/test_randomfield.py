import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from hvolterra.chaos import ChaosElement, multiply
from hvolterra.paths import Path
from hvolterra.randomfield import (
    BallQuadrature4,
    HomogeneousNoiseSpec,
    SphereQuadrature,
    field_increment,
    field_measure,
    field_path,
    function_field_kernel,
    h_inner,
    heat_box_half_width,
    heat_derivative_bound,
    heat_field_kernel,
    heat_kernel,
    heat_kernel_dtdx,
    heat_kernel_dx,
    hilbert_equivalence_gap,
    rf_X,
    rf_skorohod,
    rf_x_integral,
    transform_integrand,
    walsh_norm0,
    wave3d_Kg,
    wave3d_rho,
    wave4d_Kg,
    wave4d_phi,
    wave_moment_check,
    write_field_snapshot,
)

ONE = lambda y: 1.0  # noqa: E731

# int_0^1 int_0^1 phi(x - y) dx dy for the standard normal density phi
GAUSS_UNIT_SQUARE = 0.3687463803725073


# -- noise and inner products ---------------------------------------------------

def test_gaussian_inner_product_matches_double_quadrature():
    noise = HomogeneousNoiseSpec.uniform(2, 1.0, 1.0, 2, 1, "gaussian", 1.0)
    f = noise.cell_mask(0.0, 1.0)
    direct, _ = integrate.dblquad(lambda y, x: math.exp(-0.5 * (x - y) ** 2) / math.sqrt(2 * math.pi),
                                  0.0, 1.0, 0.0, 1.0)
    assert direct == pytest.approx(GAUSS_UNIT_SQUARE, rel=1e-10)
    assert h_inner(f, f, noise) == pytest.approx(GAUSS_UNIT_SQUARE, rel=1e-12)


def test_laplace_inner_product_matches_double_quadrature():
    noise = HomogeneousNoiseSpec.uniform(2, 1.0, 1.0, 4, 1, "exponential", 0.7)
    f = noise.cell_mask(-1.0, 0.0)
    h = noise.cell_mask(0.5, 1.0)
    direct, _ = integrate.dblquad(lambda y, x: math.exp(-abs(x - y) / 0.7) / 1.4, -1.0, 0.0, 0.5, 1.0)
    assert h_inner(f, h, noise) == pytest.approx(direct, rel=1e-9)


def test_white_noise_inner_product_is_l2():
    noise = HomogeneousNoiseSpec.uniform(2, 1.0, 1.0, 8)
    f = np.arange(8.0)
    assert h_inner(f, f, noise) == pytest.approx(np.sum(f * f) * 0.25)


@given(st.sampled_from(["gaussian", "exponential"]), st.floats(0.05, 3.0), st.integers(2, 12))
def test_gram_is_psd_and_factored(gamma, width, cells):
    noise = HomogeneousNoiseSpec.uniform(2, 1.0, 1.0, cells, 1, gamma, width)
    assert noise.eigenvalues.min() >= 0.0
    assert np.allclose(noise.S @ noise.S.T, noise.gram, atol=1e-10 * noise.eigenvalues[0])
    assert noise.rank_report()["rank"] == noise.rank


def test_noise_spec_validation():
    with pytest.raises(ValueError, match="unknown"):
        HomogeneousNoiseSpec.uniform(2, gamma="cauchy")
    with pytest.raises(ValueError):
        HomogeneousNoiseSpec(np.linspace(0, 1, 3), (0.0,), (0.0,), 4)
    with pytest.raises(ValueError):
        HomogeneousNoiseSpec(np.linspace(0, 1, 3), (0.0, 0.0), (1.0, 2.0), 4)


def test_two_dimensional_cells():
    noise = HomogeneousNoiseSpec.uniform(2, 1.0, 1.0, 3, 2, "gaussian", 0.5)
    assert noise.n_cells == 9 and noise.centers().shape == (9, 2)
    assert noise.flat(np.ones((3, 3))).shape == (9,)
    with pytest.raises(ValueError):
        noise.flat(np.ones(4))


# -- Walsh integral ---------------------------------------------------------------

@given(st.sampled_from(["dirac", "gaussian", "exponential"]), st.integers(0, 10**6))
def test_walsh_isometry(gamma, seed):
    noise = HomogeneousNoiseSpec.uniform(4, 1.0, 1.0, 6, 1, gamma, 0.4)
    f = np.random.default_rng(seed).normal(size=(4, 6))
    assert float(rf_skorohod(f, noise).variance()) == pytest.approx(walsh_norm0(f, noise), rel=1e-10, abs=1e-14)


def test_field_measure_variance():
    noise = HomogeneousNoiseSpec.uniform(8, 2.0, 1.0, 8, 1, "gaussian", 0.5)
    mask = noise.cell_mask(-0.5, 0.5)
    M = field_measure(noise, 1.0, mask)
    assert float(M.variance()) == pytest.approx(1.0 * mask @ noise.gram @ mask)
    inc = field_increment(noise, 0, 3)
    assert float(inc.variance()) == pytest.approx(noise.gram[3, 3] * 0.25)


def test_field_path_forms():
    noise = HomogeneousNoiseSpec.uniform(4, 1.0, 1.0, 3)
    assert field_path(noise, np.ones(3)).is_deterministic
    assert field_path(noise, np.ones((4, 3))).is_step
    assert field_path(noise, np.ones((5, 3))).N == 4
    with pytest.raises(ValueError):
        field_path(noise, np.ones((7, 3)))
    with pytest.raises(ValueError):
        field_path(noise, Path.constant(noise.basis, np.ones(2)))
    u = transform_integrand(np.ones((4, 3)), noise)
    assert len(u.entries) == 4 * noise.rank


def test_anticipating_duality():
    # E[F delta(u)] = E <DF, u> with F = M_T(A)^2 and u anticipating
    noise = HomogeneousNoiseSpec.uniform(4, 1.0, 1.0, 4, 1, "gaussian", 0.5)
    MT = field_measure(noise, 1.0, np.ones(4))
    F = MT * MT
    u = field_path(noise, Path.constant(noise.basis, np.ones(4)).pull(MT))
    lhs = float(np.sum((F * rf_skorohod(u, noise)).expectation()))
    rhs = 2.0 * float(np.sum(MT.variance())) * float(np.sum(noise.gram)) * 1.0
    assert lhs == pytest.approx(rhs, rel=1e-12)


# -- heat kernel -----------------------------------------------------------------

@pytest.mark.parametrize("t", [0.05, 0.5, 2.0])
def test_heat_kernel_is_normalized(t):
    val, _ = integrate.quad(lambda x: heat_kernel(t, x), -np.inf, np.inf)
    assert val == pytest.approx(1.0, abs=1e-10)
    with pytest.raises(ValueError):
        heat_kernel(0.0, 1.0)


def test_heat_derivatives_match_finite_differences():
    t, x, h = 0.3, np.array([0.4, -0.2]), 1e-6
    dx = heat_kernel_dx(t, x[0])
    assert dx == pytest.approx((heat_kernel(t, x[0] + h) - heat_kernel(t, x[0] - h)) / (2 * h), rel=1e-6)
    mixed = heat_kernel_dtdx(t, x[0])
    assert mixed == pytest.approx((heat_kernel_dx(t + h, x[0]) - heat_kernel_dx(t - h, x[0])) / (2 * h), rel=1e-5)
    g2 = heat_kernel_dx(t, x, 2)
    fd = [(heat_kernel(t, x + h * e, 2) - heat_kernel(t, x - h * e, 2)) / (2 * h) for e in np.eye(2)]
    assert np.allclose(g2, fd, rtol=1e-6)


def test_heat_derivative_bound_dominates():
    t = np.linspace(0.01, 2.0, 60)[:, None]
    x = np.linspace(-3.0, 3.0, 61)[None, :]
    assert np.all(np.abs(heat_kernel_dx(t, x)) <= heat_derivative_bound(t, x, 0.25, 0) + 1e-15)
    assert np.all(np.abs(heat_kernel_dtdx(t, x)) <= heat_derivative_bound(t, x, 0.125, 1) * 8 + 1e-15)


def test_heat_weights_conserve_mass():
    noise = HomogeneousNoiseSpec.uniform(4, 1.0, heat_box_half_width(1.0), 40)
    W = heat_field_kernel().weights(noise, 1.0, 0.5)
    # z-increments over a column telescope to the difference of the edge values
    y = noise.centers()[:, 0]
    e = noise.edges()
    assert np.allclose(W.sum(axis=0), heat_kernel(0.5, e[-1] - y) - heat_kernel(0.5, e[0] - y), atol=1e-15)


def test_small_box_warns():
    noise = HomogeneousNoiseSpec.uniform(4, 1.0, 1.0, 8, 1, "gaussian", 0.5)
    g = heat_field_kernel()
    with pytest.warns(RuntimeWarning, match="boundary mass"):
        assert g.check_domain(noise) > 0.1


# -- random-field integral ---------------------------------------------------------

def heat_case(N=8, cells=16):
    noise = HomogeneousNoiseSpec.uniform(N, 1.0, heat_box_half_width(1.0), cells, 1, "gaussian", 0.5)
    x = noise.centers()[:, 0]
    Y = np.array([np.exp(-0.1 * x * x) * (1 + t) for t in noise.time_grid])
    return noise, Y, 1.0 + 0.5 * np.cos(x)


def test_hilbert_route_agrees():
    noise, Y, sigma = heat_case()
    assert hilbert_equivalence_gap(Y, heat_field_kernel(), noise, 1.0, sigma) < 1e-10


def test_rf_integral_report_and_sigma_guard():
    noise, Y, sigma = heat_case(4, 8)
    res = rf_x_integral(Y, heat_field_kernel(), noise, 1.0, sigma)
    assert res.domain_report["rank"] == noise.rank
    assert res.domain_report["boundary_mass"] < 1e-4
    rnd = Path.constant(noise.basis, np.ones(noise.n_cells)).pull(field_measure(noise, 1.0, np.ones(8)))
    with pytest.raises(ValueError):
        rf_x_integral(Y, heat_field_kernel(), noise, 1.0, rnd)


def test_linear_kernel_weights_are_cell_width():
    # g = z has spatial measure dz, so each row of W is the cell width
    noise = HomogeneousNoiseSpec.uniform(4, 1.0, 1.0, 4)
    g = function_field_kernel(lambda t, s, z, y: float(z[0]), "linear")
    W = g.weights(noise, 1.0, 0.0)
    assert np.allclose(W, noise.dx)


# -- wave kernels ---------------------------------------------------------------

@pytest.mark.parametrize("v", [0.5, 1.0, 3.0])
def test_sphere_mass(v):
    assert wave3d_rho(v, ONE) == pytest.approx(4 * math.pi * v * v, rel=1e-12)


def test_sphere_rule_integrates_polynomials():
    nodes, w = SphereQuadrature().rule
    assert w @ nodes[:, 2] ** 2 == pytest.approx(4 * math.pi / 3, rel=1e-12)
    assert abs(wave3d_rho(1.0, lambda y: y[:, 0] ** 3)) < 1e-12
    with pytest.raises(ValueError):
        wave3d_rho(-1.0, ONE)


def test_ball_rule_weighted_mass():
    # int_{B4} (1 - |y|^2)^{-1/2} dy = 4 pi^2 / 3
    nodes, w = BallQuadrature4().rule
    assert w.sum() == pytest.approx(4 * math.pi ** 2 / 3, rel=1e-12)
    assert wave4d_phi(2.0, ONE) == pytest.approx(8 * 4 * math.pi ** 2 / 3, rel=1e-12)


@pytest.mark.parametrize("t,s", [(1.0, 0.0), (1.5, 0.25)])
def test_wave3d_closed_form(t, s):
    closed = 4 * math.pi * (t - s) * t - 2 * math.pi * (t - s) ** 2
    assert wave3d_Kg(lambda v: v, t, s, ONE) == pytest.approx(closed, rel=1e-6)


def test_wave4d_constant_integrand():
    # Y = 1: only g(tau) f = Phi'(tau) / tau = 4 pi^2 tau survives
    val = wave4d_Kg(lambda v: 1.0, 1.0, 0.0, ONE, lambda v: 0.0, lambda v: 0.0)
    assert val == pytest.approx(4 * math.pi ** 2, rel=1e-8)


def test_wave_rejections():
    with pytest.raises(ValueError):
        wave4d_Kg(lambda v: -1 / v, 1.0, 0.0, ONE, lambda v: v ** -2, lambda v: -2 * v ** -3)
    with pytest.raises(ValueError):
        wave3d_Kg(lambda v: -1 / v, 1.0, 0.0, ONE, dY=lambda v: v ** -2)
    with pytest.raises(ValueError):
        wave3d_Kg(lambda v: v, 1.0, 1.0, ONE)


# -- moment check and snapshots ----------------------------------------------------

def lognormal_case(vol, seed=3):
    rng = np.random.default_rng(seed)
    x = np.linspace(-1, 1, 9)
    Y = np.exp(-x * x)[None, None, :] * np.ones((32, 3, 1))
    sig = np.exp(vol * rng.normal(size=(4096, 9)) - 0.5 * vol * vol)
    return wave_moment_check(Y, sig, p=2.0, dx=x[1] - x[0])


def test_moment_check_flags_heavy_lognormal():
    assert lognormal_case(2.0)["status"] == "flagged"
    light = lognormal_case(0.3)
    assert light["status"] == "pass" and light["q"] == 2.0
    with pytest.raises(ValueError):
        wave_moment_check(np.ones((2, 2, 2)), np.ones((2, 2)), p=1.0)


def test_snapshot_csv(tmp_path):
    noise = HomogeneousNoiseSpec.uniform(2, 1.0, 1.0, 2, 2)
    target = tmp_path / "snap.csv"
    text = write_field_snapshot(target, noise, [(0.5, np.arange(4.0)), (1.0, np.zeros((2, 2)))])
    assert target.read_text() == text
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["t", "x1", "x2", "value"]
    assert len(rows) == 9
    assert [float(v) for v in rows[2]] == [0.5, -0.5, 0.5, 1.0]


@pytest.mark.parametrize("gamma", ["dirac", "exponential"])
def test_hilbert_route_other_correlations(gamma):
    noise = HomogeneousNoiseSpec.uniform(6, 1.0, heat_box_half_width(1.0), 16, 1, gamma, 0.5)
    x = noise.centers()[:, 0]
    Y = np.array([np.exp(-0.1 * x * x) * (1 + t) for t in noise.time_grid])
    assert hilbert_equivalence_gap(Y, heat_field_kernel(), noise, 1.0, 1.0 + 0.5 * np.cos(x)) < 1e-10


@pytest.mark.filterwarnings("ignore")
def test_hilbert_route_in_two_dimensions():
    noise = HomogeneousNoiseSpec.uniform(4, 0.5, heat_box_half_width(0.5), 6, 2, "gaussian", 0.5)
    c = noise.centers()
    Y = np.array([np.exp(-0.1 * (c**2).sum(1)) for _ in noise.time_grid])
    assert hilbert_equivalence_gap(Y, heat_field_kernel(), noise, 0.5, 1.0) < 1e-10


def test_scalar_sigma_is_a_constant_field():
    noise = HomogeneousNoiseSpec.uniform(3, 1.0, 1.0, 4)
    p = field_path(noise, 2.0)
    assert np.array_equal(p.left[0].expectation(), np.full(4, 2.0))
    assert set(p.left[0].degrees()) == {0}


def test_elementary_adapted_integrand_pulls_out():
    N = 8
    noise = HomogeneousNoiseSpec.uniform(N, 1.0, heat_box_half_width(1.0), 12)
    g, basis = heat_field_kernel(), noise.basis
    x = noise.centers()[:, 0]
    sigma = 1.0 + 0.5 * np.cos(x)
    A = noise.cell_mask(-1.0, 1.0)
    ia, ib = 2, 6
    ta, tb = float(noise.time_grid[ia]), float(noise.time_grid[ib])
    Z = field_measure(noise, ta, noise.cell_mask(0.0, 2.0)) + 1.0
    zero = ChaosElement.zero(basis, (noise.n_cells,))
    Y = Path.step(basis, [Z * A if ia <= i < ib else zero for i in range(N)])
    for t in (0.125, 0.5, 1.0):
        lhs = rf_x_integral(Y, g, noise, t, sigma).value
        rhs = multiply(Z, (rf_X(g, noise, min(t, tb), sigma) - rf_X(g, noise, min(t, ta), sigma)) @ A)
        assert (lhs - rhs).max_abs() < 1e-10


def test_rho_scales_with_radius_squared():
    assert wave3d_rho(2.0, ONE) == pytest.approx(4.0 * wave3d_rho(1.0, ONE), rel=1e-12)
    assert wave3d_rho(0.0, ONE) == 0.0
