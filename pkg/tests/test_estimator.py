import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from imchaos.chaos import build_chaos
from imchaos.covariance import GFFSquare, MollifyConvolution, PureLog, SpectralTruncation
from imchaos.errors import ConfigError, ScaleUnresolved, SupportViolation
from imchaos.estimator import (
    DIRECT,
    EXACT,
    FAST,
    FROZEN,
    REGULARIZED,
    UNIT,
    EstimatorConfig,
    Geometric,
    HEstimator,
    HOperator,
    PaperDoubleExp,
    compute_A_N,
    compute_H_eta,
    compute_H_eta_fast,
    make_records,
    reconstruction_error,
    residual_correlation,
    write_records_csv,
)
from imchaos.grid import TestFunction, build_grid
from imchaos.sampler import replica_streams, sample_gff_spectral

G = build_grid(2, 64)
TF = TestFunction((0.5, 0.5), 0.12)


@pytest.fixture(scope="module")
def chaos():
    f = sample_gff_spectral(G, 32, replica_streams(3, 0, 8))
    return build_chaos(f, 1.0)


class SumTF:
    """Sum of two bumps, duck-typed like TestFunction."""

    def __init__(self, a, b):
        self.a, self.b = a, b
        self.d = a.d

    def __call__(self, x):
        return self.a(x) + self.b(x)

    def on_grid(self, grid):
        return self.a.on_grid(grid) + self.b.on_grid(grid)


def test_scale_rules():
    assert PaperDoubleExp(2).scales(3) == (0.25, 0.0625, 0.00390625)
    np.testing.assert_allclose(Geometric(0.5, 0.2).scales(3), (0.2, 0.1, 0.05))
    with pytest.raises(ConfigError):
        Geometric(1.5).scales(2)
    cfg = EstimatorConfig.from_rule(1.0, TF, Geometric(0.5, 0.2), 2)
    assert cfg.scales == (0.2, 0.1) and isinstance(cfg.scale_rule, Geometric)


@pytest.mark.parametrize(
    "kw",
    [
        {"scales": (0.1, 0.2)},
        {"scales": (0.1, 0.1)},
        {"scales": ()},
        {"scales": (-0.1,)},
        {"weight": "Nope"},
        {"path": "Nope"},
        {"k": 3},
        {"stencil": "nope"},
    ],
)
def test_config_rejects(kw):
    base = dict(beta=1.0, tf=TF, scales=(0.2,))
    base.update(kw)
    with pytest.raises(ConfigError):
        EstimatorConfig(**base)


def test_config_aliases_and_validation():
    assert EstimatorConfig(1.0, TF, (0.2,), weight="RegularizedCδ").weight == REGULARIZED
    with pytest.raises(ScaleUnresolved):
        EstimatorConfig(1.0, TestFunction((0.5, 0.5), 0.05), (0.1,)).validate(G)
    with pytest.raises(ConfigError):
        EstimatorConfig(1.0, TestFunction((0.5, 0.5), 0.05), (0.2,), weight=EXACT).validate(build_grid(2, 128), MollifyConvolution(0.02))
    with pytest.raises(ConfigError):
        EstimatorConfig(1.0, TF, (0.2,)).validate(G)  # 0.38 from the boundary < 2 * 0.2
    EstimatorConfig(1.0, TestFunction((0.5, 0.5), 0.05), (0.2,)).validate(G)


def test_A_N():
    H = np.array([[1 + 2j, 3.0, 5.0], [4.0, 4.0, 4.0]])
    assert compute_A_N(H, 1)[0] == 1 + 2j
    assert np.all(compute_A_N(H, 3)[1] == 4.0)
    assert compute_A_N(H, 2)[0] == 2 + 1j
    with pytest.raises(ValueError):
        compute_A_N(H, 4)


def test_unit_weight_on_constant_chaos_vanishes():
    cfg = EstimatorConfig(1.0, TF, (0.2,), weight=UNIT)
    H = HOperator(G, GFFSquare(), None, cfg, 0.2).apply(np.ones(G.shape, complex))
    l1 = np.sum(np.abs(TF.on_grid(G))) * G.h**2
    assert abs(H) <= 10 * G.h**2 * l1 / 0.2
    assert abs(H) < 1e-15


def test_fast_kernel_is_odd():
    cfg = EstimatorConfig(1.0, TF, (0.2,), weight=EXACT, path=FAST)
    op = HOperator(G, PureLog(2), None, cfg, 0.2)
    ker = op.kernel
    np.testing.assert_allclose(ker, -ker[::-1, :], atol=1e-12)
    np.testing.assert_allclose(ker, ker[:, ::-1], atol=1e-12)
    assert abs(op.apply(np.ones(G.shape, complex))) < 1e-12


@pytest.mark.parametrize("weight,K", [(EXACT, PureLog(2)), (FROZEN, GFFSquare()), (UNIT, GFFSquare())])
@pytest.mark.parametrize("k", [1, 2])
def test_direct_and_fast_paths_agree(chaos, weight, K, k):
    cfg = EstimatorConfig(1.0, TF, (0.2,), weight=weight, k=k)
    hd = compute_H_eta(chaos, K, cfg, 0.2)
    hf = compute_H_eta_fast(chaos, K, cfg, 0.2)
    assert np.max(np.abs(hd - hf)) <= 1e-10 * np.max(np.abs(hd))


def test_fast_path_rejects_position_dependent_weights(chaos):
    cfg = EstimatorConfig(1.0, TF, (0.2,), weight=EXACT)
    with pytest.raises(ValueError):
        compute_H_eta_fast(chaos, GFFSquare(), cfg, 0.2)
    with pytest.raises(ValueError):
        compute_H_eta_fast(chaos, GFFSquare(), EstimatorConfig(1.0, TF, (0.2,), weight=REGULARIZED), 0.2, reg=SpectralTruncation(32))


def test_linearity_in_f(chaos):
    f1 = TestFunction((0.45, 0.5), 0.08)
    f2 = TestFunction((0.56, 0.52), 0.06, -2.0)
    K = GFFSquare()
    h = lambda tf: HOperator(G, K, None, EstimatorConfig(1.0, tf, (0.15,), weight=FROZEN), 0.15).apply(chaos.values)
    lhs = h(SumTF(f1, f2))
    assert np.max(np.abs(lhs - h(f1) - h(f2))) <= 1e-12 * max(1.0, np.max(np.abs(lhs)))


def test_conjugation_symmetry(chaos):
    reg = SpectralTruncation(32)
    cfg = EstimatorConfig(1.0, TF, (0.2,), weight=REGULARIZED)
    op = HOperator(G, GFFSquare(), reg, cfg, 0.2)
    assert np.array_equal(op.apply(chaos.conj().values), np.conj(op.apply(chaos.values)))


def test_annulus_locality(chaos):
    cfg = EstimatorConfig(1.0, TF, (0.2,), weight=REGULARIZED)
    op = HOperator(G, GFFSquare(), SpectralTruncation(32), cfg, 0.2)
    used = np.zeros(G.size, bool)
    used[op.u_flat] = True
    used[op.s_flat] = True
    mu = chaos.values.reshape(len(chaos.values), -1).copy()
    mu[:, ~used] = 1e6
    base = op.apply(chaos.values)
    np.testing.assert_allclose(op.apply(mu.reshape(chaos.values.shape)), base, rtol=1e-12, atol=0)
    r = np.linalg.norm(op.offsets, axis=1) * G.h
    slack = 0.5 * np.sqrt(2) * G.h
    assert np.all((r > 0.1 - slack) & (r < 0.2 + slack))


def test_support_violations(chaos):
    near_edge = TestFunction((0.2, 0.5), 0.1)
    cfg = EstimatorConfig(1.0, near_edge, (0.2,), weight=UNIT)
    with pytest.raises(SupportViolation):
        HOperator(G, GFFSquare(), None, cfg, 0.2)
    mask = np.zeros(G.shape, bool)
    mask[26:38, 26:38] = True
    cfg = EstimatorConfig(1.0, TestFunction((0.5, 0.5), 0.05), (0.2,), weight=UNIT)
    with pytest.raises(SupportViolation):
        HOperator(G, GFFSquare(), None, cfg, 0.2, mask=mask)
    op = HOperator(G, GFFSquare(), None, cfg, 0.2)
    mu = chaos.values.copy()
    mu[:, 22, 32] = np.nan
    with pytest.raises(SupportViolation):
        op.apply(mu)
    with pytest.raises(ScaleUnresolved):
        HOperator(G, GFFSquare(), None, cfg, 0.1)


def test_estimator_shared_covariance_matches_fresh_build(chaos):
    tf = TestFunction((0.5, 0.5), 0.08)
    reg = SpectralTruncation(32)
    cfg = EstimatorConfig(1.0, tf, (0.2, 0.15), weight=REGULARIZED)
    est = HEstimator(G, GFFSquare(), reg, cfg)
    H = est(chaos)
    assert H.shape == (8, 2)
    for i, eta in enumerate(cfg.scales):
        np.testing.assert_allclose(H[:, i], compute_H_eta(chaos, GFFSquare(), cfg, eta, reg=reg), rtol=1e-11)


def test_regularized_fast_path_on_pure_log():
    g = build_grid(2, 48)
    tf = TestFunction((0.5, 0.5), 0.06)
    reg = MollifyConvolution(0.05)
    cfg = EstimatorConfig(1.0, tf, (0.2,), weight=REGULARIZED, min_eta_cells=4)
    mu = np.exp(1j * np.random.default_rng(1).standard_normal((2,) + g.shape))
    hd = HOperator(g, PureLog(2), reg, cfg, 0.2, path=DIRECT).apply(mu)
    hf = HOperator(g, PureLog(2), reg, cfg, 0.2, path=FAST).apply(mu)
    np.testing.assert_allclose(hd, hf, rtol=1e-10)


def test_reconstruction_error_edge_cases(rng):
    T = rng.standard_normal(200)
    beta = 0.8
    s = reconstruction_error(-1j * beta * T, T, beta)
    assert s.rel_L2 == 0 and s.stderr == 0 and s.batches >= 10
    s = reconstruction_error(np.zeros(200), T, beta)
    assert s.rel_L2 == pytest.approx(1.0) and s.stderr < 1e-12
    single = reconstruction_error(np.array([0.1]), np.array([1.0]), 1.0)
    assert single.stderr is None and single.replicas == 1


def test_reconstruction_error_stderr_is_calibrated():
    # rel_L2 of pure noise residuals: spread over independent runs vs reported stderr
    est, ses = [], []
    for seed in range(30):
        r = np.random.default_rng(seed)
        T = r.standard_normal(400)
        H = -1j * T + 0.5 * (r.standard_normal(400) + 1j * r.standard_normal(400))
        s = reconstruction_error(H, T, 1.0, n_batches=20)
        est.append(s.rel_L2)
        ses.append(s.stderr)
    assert 0.6 < np.std(est) / np.mean(ses) < 1.5


@given(st.integers(2, 40), st.floats(0.1, 2.0))
def test_residual_correlation_properties(R, beta):
    r = np.random.default_rng(R)
    H = r.standard_normal((R, 3)) + 1j * r.standard_normal((R, 3))
    T = r.standard_normal(R)
    C = residual_correlation(H, T, beta)
    np.testing.assert_allclose(np.diag(C), 1.0)
    np.testing.assert_allclose(C, C.T)
    assert np.all(C <= 1 + 1e-12)


def test_records_and_csv(tmp_path):
    H = np.array([[1.0 + 1j, 3.0], [2.0, 2.0j]])
    T = np.array([0.5, -0.5])
    recs = make_records(H, T, 1.0)
    assert recs[0].A[1] == compute_A_N(H[0], 2)
    assert recs[1].residual[0] == 2.0 - 0.5j
    path = tmp_path / "rec.csv"
    write_records_csv(path, recs, (0.2, 0.1), "geometric")
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["replica", "eta", "H_re", "H_im", "T", "scale_rule"]
    assert len(rows) == 5 and rows[2][:4] == ["0", "0.1", "3.0", "0.0"]
