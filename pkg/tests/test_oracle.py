import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from imchaos.covariance import GFFSquare, MollifyConvolution, PureLog, Regularized, SpectralTruncation, regularized_matrix
from imchaos.errors import InfeasibleDimension, NonConverged
from imchaos.estimator import REGULARIZED, UNIT, EstimatorConfig, stencil_for, support_indices
from imchaos.grid import TestFunction, build_grid
from imchaos.oracle import (
    OracleCache,
    QuadratureSpec,
    bilinear_form,
    cross_term_discrete,
    cross_term_quadrature,
    derivative_variance,
    derivative_variance_discrete,
    four_point_E,
    girsanov_three_point,
    girsanov_two_point,
    offdiag_covariance_quadrature,
    second_moment_H_discrete,
    second_moment_H_quadrature,
)

pts = st.tuples(st.floats(0.1, 0.9), st.floats(0.1, 0.9))


def test_four_point_trivial_shifts():
    K = GFFSquare()
    assert four_point_E(K, (0.3, 0.4), (0.6, 0.5), (0, 0), (0, 0), 1.3) == 1.0
    assert four_point_E(K, (0.3, 0.4), (0.6, 0.5), (0.05, 0), (0.02, 0.01), 0.0) == 1.0


@given(pts, pts, st.floats(-0.05, 0.05), st.floats(-0.05, 0.05), st.floats(0.1, 1.4))
def test_four_point_swap_symmetry(x, y, a, b, beta):
    # (x, u) <-> (y, v) leaves the exponent unchanged
    K = PureLog(2)
    u, v = (a, b), (b, -a)
    if min(np.hypot(*np.subtract(x, y)), np.hypot(*np.subtract(np.subtract(x, u), np.subtract(y, v)))) < 1e-3:
        return
    if min(np.hypot(*np.subtract(x, np.subtract(y, v))), np.hypot(*np.subtract(y, np.subtract(x, u)))) < 1e-3:
        return
    e1 = four_point_E(K, x, y, u, v, beta)
    e2 = four_point_E(K, y, x, v, u, beta)
    assert e1 == pytest.approx(e2, rel=1e-12)


def test_girsanov_against_gaussian_sampling():
    # sample the three-point Gaussian vector exactly and average
    Kd = Regularized(PureLog(2), MollifyConvolution(0.05))
    P = np.array([[0.4, 0.5], [0.52, 0.47], [0.45, 0.6]])
    C = Kd.matrix(P)
    beta = 0.9
    rng = np.random.default_rng(4)
    G = rng.multivariate_normal(np.zeros(3), C, size=400_000)
    mu = np.exp(1j * beta * G + 0.5 * beta**2 * np.diag(C))
    for vals, ref in (
        (mu[:, 0] * np.conj(mu[:, 1]), girsanov_two_point(Kd, P[0], P[1], beta)),
        (mu[:, 0] * np.conj(mu[:, 1]) * G[:, 2], girsanov_three_point(Kd, P[0], P[1], P[2], beta)),
    ):
        se = np.std(vals) / np.sqrt(len(vals))
        assert abs(vals.mean() - ref) < 4 * se


def test_girsanov_three_point_vanishes_on_the_diagonal():
    Kd = Regularized(GFFSquare(), SpectralTruncation(16))
    assert girsanov_three_point(Kd, (0.4, 0.4), (0.4, 0.4), (0.6, 0.5), 1.0) == 0


def test_girsanov_three_point_vanishes_for_equidistant_y():
    Kd = Regularized(PureLog(2), MollifyConvolution(0.05))
    assert girsanov_three_point(Kd, (0.4, 0.5), (0.6, 0.5), (0.5, 0.8), 1.0) == pytest.approx(0, abs=1e-14)


def test_second_moment_stays_bounded_as_eta_halves():
    tf = TestFunction((0.5, 0.5), 0.09)
    reg = SpectralTruncation(32)
    v = [float(second_moment_H_quadrature(GFFSquare(), tf, eta, 1.0, reg=reg, n=64)) for eta in (0.25, 0.125)]
    assert 0.5 <= v[1] / v[0] <= 2


def test_derivative_variance_matches_fourier_identity():
    # radial f, kernel -log|x - y| in the plane: E <d_1 Gamma, f>^2 = pi ||f||_2^2
    tf = TestFunction((0.5, 0.5), 0.1)
    g = build_grid(2, 2048)
    l2 = np.sum(tf.on_grid(g) ** 2) * g.h**2
    v = derivative_variance(PureLog(2), tf, quad=QuadratureSpec(256, 1e-3))
    assert float(v) == pytest.approx(np.pi * l2, rel=5e-5)
    assert v.change < 1e-3


def test_derivative_variance_scaling_and_symmetry():
    tf = TestFunction((0.5, 0.5), 0.1)
    quad = QuadratureSpec(96, 1e-3)
    v1 = float(derivative_variance(GFFSquare(), tf, 1, quad=quad))
    v2 = float(derivative_variance(GFFSquare(), tf, 2, quad=quad))
    assert v1 == pytest.approx(v2, rel=1e-10)
    big = TestFunction((0.5, 0.5), 0.1, 3.0)
    assert float(derivative_variance(GFFSquare(), big, quad=quad)) == pytest.approx(9 * v1, rel=1e-10)
    assert float(derivative_variance(GFFSquare(), TestFunction((0.5, 0.5), 0.1, 0.0))) == 0.0


def test_spectral_variance_by_integration_by_parts():
    # <d_1 f, e_jl> = -pi j int f cos(pi j x) sin(pi l y), summed against 2 / (pi (j^2 + l^2))
    tf = TestFunction((0.45, 0.55), 0.12)
    J = 24
    g = build_grid(2, 1024)
    f = tf.on_grid(g)
    x = g.axis
    j = np.arange(1, J + 1)
    Cx = np.sqrt(2) * np.cos(np.pi * np.outer(x, j))
    Sy = np.sqrt(2) * np.sin(np.pi * np.outer(x, j))
    P = -np.pi * j[:, None] * (Cx.T @ f @ Sy) * g.h**2
    lam = 2.0 / (np.pi * (j[:, None] ** 2 + j[None, :] ** 2))
    ref = np.sum(lam * P**2)
    got = float(derivative_variance(GFFSquare(), tf, reg=SpectralTruncation(J), quad=QuadratureSpec(256, 1e-3)))
    assert got == pytest.approx(ref, rel=1e-6)


def test_truncated_variance_approaches_full_kernel():
    tf = TestFunction((0.5, 0.5), 0.1)
    quad = QuadratureSpec(128, 2e-3)
    full = float(derivative_variance(GFFSquare(), tf, quad=quad))
    errs = [abs(float(derivative_variance(GFFSquare(), tf, reg=SpectralTruncation(J), quad=quad)) - full) for J in (16, 64)]
    assert errs[1] < errs[0] and errs[1] < 2e-3 * full


def test_bilinear_form_regularized_wrapper():
    tf = TestFunction((0.5, 0.5), 0.1)
    grad = lambda g: tf.grad_on_grid(g, 1)
    reg = MollifyConvolution(0.03)
    a = bilinear_form(PureLog(2), grad, grad, 96, 2, reg)
    b = bilinear_form(Regularized(PureLog(2), reg), grad, grad, 96, 2)
    assert a == b


def test_cross_term_tends_to_minus_beta2_variance():
    tf = TestFunction((0.5, 0.5), 0.1)
    beta = 0.8
    quad = QuadratureSpec(256, 5e-3)
    var = float(derivative_variance(PureLog(2), tf, quad=quad))
    gaps = [abs(float(cross_term_quadrature(PureLog(2), tf, eta, beta, quad=quad)) / (-(beta**2) * var) - 1) for eta in (0.1, 0.05, 0.025)]
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 0.1
    assert float(cross_term_quadrature(PureLog(2), tf, 0.05, 0.0)) == 0.0


def test_nonconvergence_is_reported():
    tf = TestFunction((0.5, 0.5), 0.1)
    with pytest.raises(NonConverged):
        derivative_variance(PureLog(2), tf, quad=QuadratureSpec(8, 1e-12))
    with pytest.raises(NonConverged):
        second_moment_H_quadrature(GFFSquare(), tf, 0.05, 1.0, reg=SpectralTruncation(16), n=64)


# ---------------------------------------------------------------- discrete oracles, brute force

N_SMALL = 32
TF_SMALL = TestFunction((0.5, 0.5), 0.1)
REG = MollifyConvolution(0.05)


def _pairs(grid, cfg, eta):
    """All (x, u, amplitude) triples of the estimator sum, amplitude = F(x) k(x - u)."""
    sidx = support_indices(grid, cfg.tf)
    offs, kv = stencil_for(grid, cfg, eta)
    P = grid.points
    xs, us, amp = [], [], []
    for s in sidx:
        fx = cfg.tf(P[tuple(s)]) * grid.h ** (2 * grid.d)
        for o, kk in zip(offs, kv):
            xs.append(P[tuple(s)])
            us.append(P[tuple(s - o)])
            amp.append(fx * kk)
    return np.array(xs), np.array(us), np.array(amp)


def _weight(K, x, u, beta, weight):
    if weight == UNIT:
        return np.ones(len(x))
    c = np.array([regularized_matrix(K, REG, a[None], b[None])[0, 0] for a, b in zip(x, u)])
    return np.exp(-(beta**2) * c)


@pytest.mark.parametrize("weight", [REGULARIZED, UNIT])
def test_second_moment_discrete_brute_force(weight):
    g = build_grid(2, N_SMALL)
    K, beta, eta = PureLog(2), 0.9, 0.125
    cfg = EstimatorConfig(beta, TF_SMALL, (eta,), weight=weight, min_eta_cells=4)
    x, u, a = _pairs(g, cfg, eta)
    a = a * _weight(K, x, u, beta, weight)
    C = lambda p, q: regularized_matrix(K, REG, p, q)
    # E mu(x) conj mu(u) conj mu(y) mu(v) by the variance of the Gaussian exponent
    expo = np.diag(C(x, u))[:, None] + np.diag(C(x, u))[None, :] + C(x, x) + C(u, u) - C(x, u) - C(u, x)
    ref = float(a @ np.exp(beta**2 * expo) @ a)
    got = second_moment_H_discrete(g, K, REG, cfg, eta)
    assert got == pytest.approx(ref, rel=1e-9)


def test_cross_term_discrete_brute_force():
    g = build_grid(2, N_SMALL)
    K, beta, eta = PureLog(2), 0.7, 0.125
    cfg = EstimatorConfig(beta, TF_SMALL, (eta,), weight=REGULARIZED, min_eta_cells=4)
    x, u, a = _pairs(g, cfg, eta)
    df = TF_SMALL.grad_on_grid(g, 1)
    yi = np.argwhere(df != 0)
    y = g.points[tuple(yi.T)]
    wy = -df[tuple(yi.T)] * g.h**2  # T = sum_y wy Gamma(y)
    # E[H T] = sum a W E[mu(x) conj mu(u) Gamma(y)] wy, and W cancels the Girsanov factor
    D = regularized_matrix(K, REG, x, y) - regularized_matrix(K, REG, u, y)
    EHT = np.sum(a * 1j * beta * (D @ wy))
    ref = (-1j * beta * EHT).real
    assert cross_term_discrete(g, K, REG, cfg, eta) == pytest.approx(ref, rel=1e-9)


def test_variance_discrete_brute_force():
    g = build_grid(2, N_SMALL)
    df = TF_SMALL.grad_on_grid(g, 2)
    idx = np.argwhere(df != 0)
    y = g.points[tuple(idx.T)]
    w = df[tuple(idx.T)] * g.h**2
    ref = w @ regularized_matrix(PureLog(2), REG, y) @ w
    assert derivative_variance_discrete(g, PureLog(2), REG, TF_SMALL, 2) == pytest.approx(ref, rel=1e-12)


def test_zero_coupling_second_moment_vanishes():
    # beta = 0: mu = 1 and the stencil sums to zero, so H = 0 identically
    g = build_grid(2, N_SMALL)
    cfg = EstimatorConfig(0.0, TF_SMALL, (0.125,), weight=REGULARIZED, min_eta_cells=4)
    assert abs(second_moment_H_discrete(g, PureLog(2), REG, cfg, 0.125)) < 1e-25
    assert cross_term_discrete(g, PureLog(2), REG, cfg, 0.125) == 0.0


def test_offdiagonal_and_dimension_guards():
    tf = TestFunction((0.5, 0.5), 0.08)
    reg = SpectralTruncation(16)
    same = offdiag_covariance_quadrature(GFFSquare(), tf, 0.2, 0.2, 1.0, reg=reg, n=64)
    diag = second_moment_H_quadrature(GFFSquare(), tf, 0.2, 1.0, reg=reg, n=64)
    assert float(same) == pytest.approx(float(diag), rel=1e-12)
    with pytest.raises(ValueError):
        offdiag_covariance_quadrature(GFFSquare(), tf, 0.15, 0.2, 1.0, reg=reg, n=64)
    tf3 = TestFunction((0.5,) * 3, 0.1)
    with pytest.raises(InfeasibleDimension):
        second_moment_H_quadrature(PureLog(3), tf3, 0.2, 1.0, reg=REG)
    cfg3 = EstimatorConfig(1.0, tf3, (0.2,), min_eta_cells=3)
    with pytest.raises(InfeasibleDimension):
        second_moment_H_discrete(build_grid(3, 16), PureLog(3), REG, cfg3, 0.2)


def test_oracle_cache_round_trip(tmp_path):
    path = tmp_path / "cache.json"
    calls = []

    def fn():
        calls.append(1)
        return 2.5

    c = OracleCache(path)
    assert c.get_or_compute("var", fn, J=64, beta=1.0) == 2.5
    assert c.get_or_compute("var", fn, J=64, beta=1.0) == 2.5
    assert OracleCache(path).get_or_compute("var", fn, J=64, beta=1.0) == 2.5
    assert len(calls) == 1
    OracleCache(path).get_or_compute("var", fn, J=32, beta=1.0)
    assert len(calls) == 2
