import struct

import numpy as np
import pytest
from scipy import stats

from imchaos.covariance import ConstantKernel, GFFSquare, MollifyConvolution, PureLog, regularized_matrix
from imchaos.errors import FactorizationFailure
from imchaos.grid import TestFunction, build_grid
from imchaos.sampler import (
    CholeskySampler,
    FieldSample,
    GridWindowSampler,
    SeedStream,
    ball_mask,
    gff_grid_covariance,
    gff_variance_profile,
    grad_pairing,
    pairing,
    read_field,
    replica_streams,
    sample_cholesky,
    sample_gff_spectral,
    sine_synthesis,
    write_field,
)

G64 = build_grid(2, 64)


def test_sine_synthesis_matches_direct_sum(rng):
    J, n = 7, 16
    coef = rng.standard_normal((J, J))
    g = build_grid(2, n)
    E = GFFSquare(J).eigenfeatures(g.points.reshape(-1, 2)) / np.sqrt(GFFSquare(J).coefficients.ravel())
    direct = (E @ coef.ravel()).reshape(n, n)
    np.testing.assert_allclose(sine_synthesis(coef, n), direct, atol=1e-12)


def test_grid_covariance_and_variance_profile():
    J = 16
    pts = G64.points.reshape(-1, 2)[[5, 700, 2100]]
    C = gff_grid_covariance(G64, J, pts).reshape(3, -1)
    np.testing.assert_allclose(C, GFFSquare(J).matrix(pts, G64.points.reshape(-1, 2)), atol=1e-12)
    np.testing.assert_allclose(gff_variance_profile(G64, J), GFFSquare(J).variance(G64.points), atol=1e-12)


def test_spectral_sampling_is_deterministic_and_order_free():
    a = sample_gff_spectral(G64, 32, replica_streams(3, 0, 6))
    b = sample_gff_spectral(G64, 32, replica_streams(3, 4, 6))
    c = sample_gff_spectral(G64, 32, SeedStream(3, 5))
    assert np.array_equal(a.values[4:], b.values)
    assert np.array_equal(a.values[5], c.values)
    assert not np.array_equal(a.values[0], a.values[1])
    assert np.all(np.isfinite(a.values))


def test_spectral_sampling_rejects_bad_setups():
    with pytest.raises(ValueError):
        sample_gff_spectral(G64, 33, SeedStream(0))
    with pytest.raises(ValueError):
        sample_gff_spectral(build_grid(3, 16), 4, SeedStream(0))


def test_spectral_moments():
    J, R = 32, 10_000
    f = sample_gff_spectral(G64, J, replica_streams(12, 0, R))
    v = f.values.reshape(R, -1)
    idx = [G64.index_of(p) for p in [(0.5, 0.5), (0.3, 0.6), (0.7, 0.2), (0.52, 0.55), (0.1, 0.9)]]
    flat = [np.ravel_multi_index(i, G64.shape) for i in idx]
    sig = np.sqrt(f.variance.reshape(-1)[flat])
    assert np.all(np.abs(v[:, flat].mean(0)) <= 3 * sig / 100 + 4 * sig / np.sqrt(R))
    K = GFFSquare(J)
    pts = G64.points.reshape(-1, 2)
    for a, b in [(flat[0], flat[3]), (flat[0], flat[1]), (flat[2], flat[4])]:
        prod = v[:, a] * v[:, b]
        z = (prod.mean() - K(pts[a], pts[b])) / (prod.std() / np.sqrt(R))
        assert abs(z) < 4
    # Gaussianity smoke test at one point
    x = v[:, flat[0]] / sig[0]
    assert abs(stats.skew(x)) <= 0.1 and abs(stats.kurtosis(x)) <= 0.2


def test_cholesky_single_point_variance():
    K = ConstantKernel(2, 4.0)
    vals, s = sample_cholesky(np.array([[0.5, 0.5]]), K, MollifyConvolution(0.05), replica_streams(1, 0, 10_000))
    var = vals[:, 0].var()
    se = 4.0 * np.sqrt(2 / 10_000)
    assert abs(var - 4.0) < 3 * se
    assert s.rank == 1


def test_cholesky_duplicate_points_are_identical():
    p = np.array([[0.4, 0.4], [0.6, 0.5], [0.4, 0.4]])
    vals, s = sample_cholesky(p, PureLog(2), MollifyConvolution(0.05), replica_streams(2, 0, 50))
    assert np.max(np.abs(vals[:, 0] - vals[:, 2])) < 1e-8
    assert s.rank == 2


def test_cholesky_covariance_frobenius():
    ax = np.linspace(0.35, 0.65, 8)
    p = np.stack(np.meshgrid(ax, ax, indexing="ij"), -1).reshape(-1, 2)
    reg = MollifyConvolution(0.05)
    vals, _ = sample_cholesky(p, PureLog(2), reg, replica_streams(4, 0, 10_000))
    C = regularized_matrix(PureLog(2), reg, p)
    emp = np.cov(vals.T, bias=True)
    assert np.linalg.norm(emp - C) / np.linalg.norm(C) <= 0.05


def test_cholesky_limits_and_failure():
    with pytest.raises(ValueError):
        CholeskySampler(np.zeros((10, 2)), PureLog(2), MollifyConvolution(0.05), max_points=5)
    wide = np.stack(np.meshgrid(*(np.linspace(0, 3, 10),) * 2, indexing="ij"), -1).reshape(-1, 2)
    with pytest.raises(FactorizationFailure):
        CholeskySampler(wide, PureLog(2), MollifyConvolution(0.02))


def test_window_sampler_marks_unsampled_points():
    g = build_grid(2, 32)
    mask = ball_mask(g, (0.5, 0.5), 0.2)
    ws = GridWindowSampler(g, mask, PureLog(2), MollifyConvolution(0.125))
    f = ws.sample(replica_streams(0, 0, 3))
    assert f.batched and np.all(np.isnan(f.values[:, ~mask])) and np.all(np.isfinite(f.values[:, mask]))
    np.testing.assert_allclose(f.variance[mask], regularized_matrix(PureLog(2), MollifyConvolution(0.125), g.points[mask]).diagonal())


def test_pairings():
    tf = TestFunction((0.5, 0.5), 0.2)
    const = FieldSample(G64, np.full(G64.shape, 2.5), None, None, None)
    assert abs(grad_pairing(const, tf, 1)) <= 10 * G64.h**2
    f = sample_gff_spectral(G64, 16, replica_streams(5, 0, 2))
    f1, f2 = f.replica(0), f.replica(1)
    assert abs(grad_pairing(f1 + f2, tf, 2) - grad_pairing(f1, tf, 2) - grad_pairing(f2, tf, 2)) < 1e-12
    assert abs(pairing(f1 + f2, tf) - pairing(f1, tf) - pairing(f2, tf)) < 1e-12
    np.testing.assert_allclose(grad_pairing(f, tf), [grad_pairing(f1, tf), grad_pairing(f2, tf)], rtol=1e-13)


def test_field_file_roundtrip(tmp_path):
    f = sample_gff_spectral(G64, 16, SeedStream(9, 4))
    path = tmp_path / "f.imcf"
    write_field(path, f)
    raw = path.read_bytes()
    magic, version, d, n = struct.unpack_from("<4sIII", raw)
    assert (magic, version, d, n) == (b"IMCF", 1, 2, 64)
    back = read_field(path)
    assert np.array_equal(back.values, f.values) and np.array_equal(back.variance, f.variance)
    assert back.reg == f.reg and back.seed == f.seed
    with pytest.raises(ValueError):
        write_field(path, sample_gff_spectral(G64, 16, replica_streams(0, 0, 2)))
