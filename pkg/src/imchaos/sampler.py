"""Samplers for the regularised field on a grid.

Every replica draws from its own counter-based stream derived from
``(master_seed, replica)``, so a replica's values do not depend on which worker
produced it or in which order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import fft as sfft
from scipy.linalg import lapack

from .covariance import (
    MollifyConvolution,
    SpectralTruncation,
    gff_coefficients,
    regularized_matrix,
    sine_features,
)
from .errors import FactorizationFailure
from .grid import Grid, TestFunction


@dataclass(frozen=True)
class SeedStream:
    master: int
    replica: int = 0

    def rng(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.master), spawn_key=(int(self.replica),))
        return np.random.Generator(np.random.Philox(ss))


def replica_streams(master: int, start: int, stop: int) -> list[SeedStream]:
    return [SeedStream(master, r) for r in range(start, stop)]


def _as_streams(seed) -> tuple[list[SeedStream], bool]:
    if isinstance(seed, SeedStream):
        return [seed], False
    return list(seed), True


@dataclass
class FieldSample:
    """Field values on ``grid``; a leading axis indexes replicas when batched.

    ``mask`` marks the grid points that were actually sampled (``None`` means
    all of them); other entries hold NaN.
    """

    grid: Grid
    values: np.ndarray
    variance: np.ndarray | None
    reg: object
    seed: object
    mask: np.ndarray | None = None

    @property
    def batched(self) -> bool:
        return self.values.ndim == self.grid.d + 1

    def replica(self, i: int) -> "FieldSample":
        if not self.batched:
            raise ValueError("not a batched sample")
        return FieldSample(self.grid, self.values[i], self.variance, self.reg, self.seed[i], self.mask)

    def negated(self) -> "FieldSample":
        return FieldSample(self.grid, -self.values, self.variance, self.reg, self.seed, self.mask)

    def __add__(self, other: "FieldSample") -> "FieldSample":
        return FieldSample(self.grid, self.values + other.values, None, self.reg, None, self.mask)


# --------------------------------------------------------------------------
# spectral sampling of the square GFF


def sine_synthesis(coef: np.ndarray, n: int) -> np.ndarray:
    """``sum_{j,l} coef[.., j-1, l-1] * 2 sin(pi j x1) sin(pi l x2)`` on cell centres.

    Uses a type-III DST along each axis; ``coef`` is zero padded to ``n`` modes.
    """
    J = coef.shape[-1]
    if J >= n:
        raise ValueError("need fewer modes than grid cells per side")
    pad = np.zeros(coef.shape[:-2] + (n, n))
    pad[..., :J, :J] = coef
    out = sfft.dst(pad, type=3, axis=-1)
    out = sfft.dst(out, type=3, axis=-2)
    return 0.5 * out


def gff_variance_profile(grid: Grid, J: int) -> np.ndarray:
    s2 = sine_features(grid.axis, J) ** 2
    return 4.0 * s2 @ gff_coefficients(J) @ s2.T


def gff_grid_covariance(grid: Grid, J: int, points, chunk: int = 64) -> np.ndarray:
    """``C_J(p, y)`` for every listed point ``p`` and every grid point ``y``.

    One sine synthesis per point; returns shape ``(len(points),) + grid.shape``.
    """
    points = np.asarray(points, dtype=float)
    c = gff_coefficients(J)
    out = np.empty((len(points),) + grid.shape)
    for i in range(0, len(points), chunk):
        p = points[i : i + chunk]
        s1 = sine_features(p[:, 0], J)
        s2 = sine_features(p[:, 1], J)
        coef = 2.0 * c * s1[:, :, None] * s2[:, None, :]
        out[i : i + chunk] = sine_synthesis(coef, grid.n)
    return out


def sample_gff_spectral(grid: Grid, J: int, seed_stream) -> FieldSample:
    """Truncated sine series ``sum_{j,l<=J} Y_jl e_jl`` with ``Y_jl ~ N(0, 2/(pi(j^2+l^2)))``."""
    if grid.d != 2:
        raise ValueError("spectral GFF sampling needs d = 2")
    if grid.L != 1.0:
        raise ValueError("spectral GFF sampling lives on the unit square")
    if J > grid.n // 2:
        raise ValueError(f"J={J} exceeds n/2={grid.n // 2}; modes would be unresolved")
    streams, batched = _as_streams(seed_stream)
    sd = np.sqrt(gff_coefficients(J))
    Y = np.stack([s.rng().standard_normal((J, J)) for s in streams]) * sd
    vals = sine_synthesis(Y, grid.n)
    var = gff_variance_profile(grid, J)
    seed = streams if batched else streams[0]
    return FieldSample(grid, vals if batched else vals[0], var, SpectralTruncation(J), seed)


# --------------------------------------------------------------------------
# Cholesky sampling


class CholeskySampler:
    """Correlated Gaussian vectors with covariance ``C_delta(p_i, p_j)``.

    The factor is computed once (pivoted Cholesky, so exactly rank deficient
    matrices such as repeated points are handled) and reused for every replica.
    If the factor does not reproduce the matrix, ``1e-10 * trace / n`` is
    added to the diagonal once; a second failure raises
    :class:`FactorizationFailure`.
    """

    def __init__(self, points, kernel, reg, *, max_points=4096, matrix=None):
        self.points = np.asarray(points, dtype=float)
        if self.points.ndim != 2:
            raise ValueError("points must have shape (N, d)")
        if len(self.points) > max_points:
            raise ValueError(f"{len(self.points)} points exceeds the dense limit of {max_points}")
        self.kernel = kernel
        self.reg = reg
        if matrix is None:
            matrix = regularized_matrix(kernel, reg, self.points)
        self.variance = np.diag(matrix).copy()
        self.jitter = 0.0
        self.factor = self._factorize(matrix)

    @property
    def npoints(self):
        return len(self.points)

    def _factorize(self, M):
        n = len(M)
        scale = float(np.max(np.abs(self.variance)))
        probe = np.random.default_rng(12345).standard_normal((n, 2))
        Mprobe = M @ probe
        diag0 = np.diag(M).copy()
        backup = M.copy() if n <= 4096 else None
        F = _pivoted_factor(M, diag0, probe, Mprobe, scale)
        if F is not None:
            return F
        if backup is None:
            raise FactorizationFailure("matrix not numerically PSD (too large to retry with jitter)")
        self.jitter = 1e-10 * float(np.sum(diag0)) / n
        backup[np.diag_indices(n)] += self.jitter
        F = _pivoted_factor(backup, diag0 + self.jitter, probe, Mprobe + self.jitter * probe, scale)
        if F is None:
            raise FactorizationFailure("matrix not numerically PSD even after diagonal jitter")
        return F

    @property
    def rank(self):
        return self.factor[0].shape[1]

    def sample_values(self, streams: Sequence[SeedStream]) -> np.ndarray:
        L, perm = self.factor
        Z = np.stack([s.rng().standard_normal(L.shape[1]) for s in streams])
        out = np.empty((len(streams), len(perm)))
        out[:, perm] = Z @ L.T
        return out


def _pivoted_factor(M, diag0, probe, Mprobe, scale):
    """Pivoted Cholesky ``M[perm][:, perm] = L L^T`` computed in place.

    Returns ``(L, perm)`` or ``None`` when the factor misses part of ``M``.
    """
    n = len(M)
    # M is symmetric, so M.T is a Fortran-ordered view and dpstrf works in place
    c, piv, rank, info = lapack.dpstrf(M.T, lower=1, tol=1e-13 * scale, overwrite_a=1)
    if info < 0:
        raise FactorizationFailure(f"dpstrf argument error {info}")
    L = c[:, :rank]
    for j in range(1, rank):
        L[:j, j] = 0.0
    perm = piv - 1
    tol = 1e-8 * scale
    if np.max(np.abs(diag0[perm] - np.einsum("ij,ij->i", L, L))) > tol:
        return None
    if np.max(np.abs(Mprobe[perm] - L @ (L.T @ probe[perm]))) > 10 * tol * np.sqrt(n):
        return None
    return L, perm


def sample_cholesky(points, K, spec, seed_stream, *, sampler: CholeskySampler | None = None):
    """Sample at arbitrary points; returns ``(values, sampler)`` for reuse of the factor."""
    sampler = sampler or CholeskySampler(points, K, spec)
    streams, batched = _as_streams(seed_stream)
    vals = sampler.sample_values(streams)
    return (vals if batched else vals[0]), sampler


class GridWindowSampler:
    """Cholesky sampling restricted to a masked window of a grid."""

    def __init__(self, grid: Grid, mask: np.ndarray, kernel, reg, *, max_points=4096):
        self.grid = grid
        self.mask = np.asarray(mask, dtype=bool)
        self.sampler = CholeskySampler(grid.points[self.mask], kernel, reg, max_points=max_points)
        var = np.full(grid.shape, np.nan)
        var[self.mask] = self.sampler.variance
        self.variance = var

    def sample(self, seed_stream) -> FieldSample:
        streams, batched = _as_streams(seed_stream)
        vals = self.sampler.sample_values(streams)
        out = np.full((len(streams),) + self.grid.shape, np.nan)
        out[:, self.mask] = vals
        seed = streams if batched else streams[0]
        return FieldSample(self.grid, out if batched else out[0], self.variance, self.sampler.reg, seed, self.mask)


def ball_mask(grid: Grid, center, radius) -> np.ndarray:
    diff = grid.points - np.asarray(center, dtype=float)
    return np.sqrt(np.sum(diff**2, axis=-1)) <= radius


# --------------------------------------------------------------------------
# pairings against test functions


def _support_values(field: FieldSample, w: np.ndarray):
    sel = w != 0
    vals = field.values[..., sel]
    return np.sum(vals * w[sel], axis=-1) * field.grid.h**field.grid.d


def pairing(field: FieldSample, tf: TestFunction):
    return _support_values(field, tf.on_grid(field.grid))


def grad_pairing(field: FieldSample, tf: TestFunction, k: int = 1):
    """Ground truth ``<d_k Gamma, f> = -int Gamma d_k f``."""
    return -_support_values(field, tf.grad_on_grid(field.grid, k))


# --------------------------------------------------------------------------
# binary cache format

_MAGIC = b"IMCF"
_HEADER = struct.Struct("<4sIIIBxxxdQQ")  # magic, version, d, n, reg kind, reg value, seed, replica
_VERSION = 1


def write_field(path, field: FieldSample):
    """Little-endian dump: header, row-major values, row-major variance profile."""
    if field.batched:
        raise ValueError("dump one replica at a time")
    if isinstance(field.reg, SpectralTruncation):
        kind, value = 0, float(field.reg.J)
    elif isinstance(field.reg, MollifyConvolution):
        kind, value = 1, float(field.reg.delta)
    else:
        kind, value = 255, 0.0
    seed = field.seed if isinstance(field.seed, SeedStream) else SeedStream(0, 0)
    var = field.variance if field.variance is not None else np.full(field.grid.shape, np.nan)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, field.grid.d, field.grid.n, kind, value, seed.master, seed.replica))
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(var, dtype="<f8").tobytes())


def read_field(path, L: float = 1.0) -> FieldSample:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, d, n, kind, value, master, replica = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC or version != _VERSION:
        raise ValueError("not an imchaos field file")
    grid = Grid(d, n, L)
    count = n**d
    off = _HEADER.size
    vals = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(grid.shape).copy()
    var = np.frombuffer(raw, dtype="<f8", count=count, offset=off + 8 * count).reshape(grid.shape).copy()
    reg = SpectralTruncation(int(value)) if kind == 0 else MollifyConvolution(value) if kind == 1 else None
    mask = None if not np.isnan(vals).any() else ~np.isnan(vals)
    return FieldSample(grid, vals, var, reg, SeedStream(master, replica), mask)
