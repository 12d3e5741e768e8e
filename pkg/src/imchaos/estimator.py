"""Gradient reconstruction from the chaos.

For a test function ``f`` and scale ``eta`` the estimator is the double sum

    H_eta = h^{2d} sum_x sum_u f(x) mu(x) conj(mu(u)) W(x, u) d_k phi_eta(x - u)

whose L2 limit is ``-i beta <d_k Gamma, f>``. Only pairs with
``eta/2 < |x - u| < eta`` contribute, so the singular weight is never evaluated
near the diagonal.

Weight modes:

* ``ExactC``            ``W = exp(-beta^2 C(x, u))``
* ``RegularizedCdelta`` ``W = exp(-beta^2 C_delta(x, u))``; makes
  ``E mu(x) conj(mu(u)) W = 1`` exact at finite regularisation
* ``FrozenG``           ``W = |x - u|^{beta^2} exp(-beta^2 g(x, x))``
* ``Unit``              ``W = 1`` (test stub)

Two evaluation paths exist. ``Direct`` assembles the weighted stencil as a
matrix from the halo to the support of ``f``. ``FastConvolution`` applies a
translation invariant stencil by FFT and is only allowed when the weight does
not depend on the absolute position of the pair.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import signal, sparse

from .covariance import (
    GFFSquare,
    MollifyConvolution,
    PureLog,
    SpectralTruncation,
    mollified_log,
    regularized_matrix,
)
from .errors import ConfigError, ScaleUnresolved, SupportViolation
from .grid import Grid, TestFunction
from .mollifier import derivative_stencil

EXACT = "ExactC"
REGULARIZED = "RegularizedCdelta"
FROZEN = "FrozenG"
UNIT = "Unit"
WEIGHT_MODES = (EXACT, REGULARIZED, FROZEN, UNIT)

DIRECT = "Direct"
FAST = "FastConvolution"
PATHS = (DIRECT, FAST)

_ALIASES = {"RegularizedCδ": REGULARIZED, "RegularizedC": REGULARIZED}


# --------------------------------------------------------------------------
# scale rules


@dataclass(frozen=True)
class PaperDoubleExp:
    """``eps_n = 2^(-K^n)``, n = 1, 2, ..."""

    K: int = 2

    def scales(self, N: int) -> tuple:
        return tuple(2.0 ** -(float(self.K) ** n) for n in range(1, N + 1))


@dataclass(frozen=True)
class Geometric:
    """``eta_n = eta0 * rho^(n-1)``."""

    rho: float = 0.5
    eta0: float = 0.2

    def scales(self, N: int) -> tuple:
        if not 0 < self.rho < 1:
            raise ConfigError("geometric ratio must lie in (0, 1)")
        return tuple(self.eta0 * self.rho**n for n in range(N))


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class EstimatorConfig:
    beta: float
    tf: TestFunction
    scales: tuple
    k: int = 1
    weight: str = EXACT
    path: str = DIRECT
    scale_rule: object = None
    # resolution guards; see validate()
    min_eta_cells: float = 8.0
    min_eta_over_delta: float = 20.0
    halo_factor: float = 2.0
    stencil: str = "cell"

    def __post_init__(self):
        object.__setattr__(self, "weight", _ALIASES.get(self.weight, self.weight))
        object.__setattr__(self, "scales", tuple(float(e) for e in self.scales))
        if self.weight not in WEIGHT_MODES:
            raise ConfigError(f"unknown weight mode {self.weight!r}")
        if self.path not in PATHS:
            raise ConfigError(f"unknown path {self.path!r}")
        if not self.scales:
            raise ConfigError("empty scale list")
        if any(e <= 0 for e in self.scales):
            raise ConfigError("scales must be positive")
        if any(b >= a for a, b in zip(self.scales, self.scales[1:])):
            raise ConfigError("scales must be strictly decreasing")
        if not 1 <= self.k <= self.tf.d:
            raise ConfigError(f"coordinate k={self.k} out of range")
        if self.stencil not in ("cell", "point"):
            raise ConfigError(f"unknown stencil {self.stencil!r}")

    @classmethod
    def from_rule(cls, beta, tf, rule, N, **kw):
        return cls(beta=beta, tf=tf, scales=rule.scales(N), scale_rule=rule, **kw)

    def validate(self, grid: Grid, reg=None):
        """Cross-module invariants.

        ``eta >= min_eta_cells * h`` for every scale; for weights built on the
        unregularised covariance also ``eta >= min_eta_over_delta * delta``;
        and ``dist(supp f, boundary) > halo_factor * max(eta)``.
        """
        h = grid.h
        for eta in self.scales:
            if eta < self.min_eta_cells * h * (1 - 1e-12):
                raise ScaleUnresolved(f"eta={eta} below {self.min_eta_cells} cells (h={h})")
        if reg is not None and self.weight in (EXACT, FROZEN):
            delta = reg.delta
            if min(self.scales) < self.min_eta_over_delta * delta * (1 - 1e-12):
                raise ConfigError(
                    f"eta={min(self.scales)} below {self.min_eta_over_delta} x delta={delta} for weight {self.weight}"
                )
        dist = self.tf.boundary_distance(grid)
        if dist <= self.halo_factor * max(self.scales):
            raise ConfigError(
                f"support of f is {dist:.4g} from the boundary; need more than {self.halo_factor} x eta={max(self.scales)}"
            )


# --------------------------------------------------------------------------
# stencils and supports


def support_indices(grid: Grid, tf: TestFunction) -> np.ndarray:
    """Integer indices (N, d) of grid points where f is non-zero."""
    fv = tf.on_grid(grid)
    return np.argwhere(fv != 0)


def _flat(idx, n):
    return np.ravel_multi_index(tuple(idx.T), (n,) * idx.shape[1])


def _check_halo(grid: Grid, sidx, offs, mask=None):
    """Raise unless every ``x - o`` (x in supp f, o in the stencil) is a usable grid point."""
    lo = sidx.min(axis=0) - offs.max(axis=0)
    hi = sidx.max(axis=0) - offs.min(axis=0)
    inside = np.all(lo >= 0) and np.all(hi < grid.n)
    if mask is None and inside:
        return
    u = sidx[:, None, :] - offs[None, :, :]
    if np.any(u < 0) or np.any(u >= grid.n):
        raise SupportViolation("stencil around supp f leaves the grid")
    if mask is not None:
        if not np.all(mask[tuple(sidx.T)]):
            raise SupportViolation("supp f is not inside the sampled window")
        if not np.all(mask[tuple(np.moveaxis(u, -1, 0))]):
            raise SupportViolation("stencil around supp f leaves the sampled window")


def stencil_for(grid: Grid, cfg: EstimatorConfig, eta: float):
    return derivative_stencil(grid.d, eta, grid.h, cfg.k, cfg.stencil)


def _translation_weight(K, reg, weight, beta, z):
    """``W`` as a function of the separation ``z`` (translation invariant modes)."""
    r = np.sqrt(np.sum(z**2, axis=-1))
    if weight == UNIT:
        return np.ones_like(r)
    if weight in (EXACT, FROZEN):
        return r ** (beta**2)
    if weight == REGULARIZED:
        if not isinstance(reg, MollifyConvolution):
            raise ValueError("translation invariant regularised weight needs MollifyConvolution")
        return np.exp(-(beta**2) * mollified_log(K.d, reg.delta, r))
    raise ValueError(weight)


def fast_path_allowed(K, weight) -> bool:
    if weight in (UNIT, FROZEN):
        return True
    return isinstance(K, PureLog)


def _pair_weight(K, reg, weight, beta, X, U, cov=None):
    """``W(x, u)`` on matched arrays of points (or on a full block when ``cov`` is given)."""
    if weight == UNIT:
        return np.ones(X.shape[:-1])
    if weight == EXACT:
        return np.exp(-(beta**2) * K(X, U))
    if weight == FROZEN:
        r = np.sqrt(np.sum((X - U) ** 2, axis=-1))
        return r ** (beta**2) * np.exp(-(beta**2) * K.g_diag(X))
    if weight == REGULARIZED:
        if cov is not None:
            return np.exp(-(beta**2) * cov)
        if reg is None:
            raise ValueError("regularised weight needs a regularisation spec")
        from .covariance import regularized_covariance

        return np.exp(-(beta**2) * regularized_covariance(K, reg, X, U))
    raise ValueError(weight)


# --------------------------------------------------------------------------
# operators


class HOperator:
    """The linear-in-``conj(mu)`` part of ``H_eta`` for one scale.

    ``apply(mu)`` accepts grid arrays with an optional leading replica axis and
    returns ``H_eta`` for each replica. Construction validates resolution and
    support; the stencil and weights are then reused for every replica.
    """

    def __init__(
        self,
        grid: Grid,
        K,
        reg,
        cfg: EstimatorConfig,
        eta: float,
        *,
        path: str | None = None,
        mask=None,
        halo_cov=None,
    ):
        self.grid, self.K, self.reg, self.cfg, self.eta = grid, K, reg, cfg, float(eta)
        self.path = path or cfg.path
        self.beta = cfg.beta
        d, h = grid.d, grid.h
        if eta < cfg.min_eta_cells * h * (1 - 1e-12):
            raise ScaleUnresolved(f"eta={eta} is below {cfg.min_eta_cells} grid cells (h={h})")
        sidx = support_indices(grid, cfg.tf)
        if len(sidx) == 0:
            raise ValueError("test function vanishes on every grid point")
        self.sidx = sidx
        self.s_flat = _flat(sidx, grid.n)
        xs = grid.points[tuple(sidx.T)]
        fvals = cfg.tf(xs)
        if cfg.weight == FROZEN:
            fvals = fvals * np.exp(-(self.beta**2) * K.g_diag(xs))
        self.F = fvals * h ** (2 * d)
        self.offsets, self.kvals = stencil_for(grid, cfg, eta)
        _check_halo(grid, sidx, self.offsets, mask)
        if self.path == FAST:
            if not fast_path_allowed(K, cfg.weight):
                raise ValueError(f"fast path needs a translation invariant weight, not {cfg.weight} on {K!r}")
            self._build_fast()
        else:
            self._build_direct(xs, halo_cov)

    # direct --------------------------------------------------------------

    def _build_direct(self, xs, halo_cov):
        g, d, n = self.grid, self.grid.d, self.grid.n
        uidx = self.sidx[:, None, :] - self.offsets[None, :, :]
        u_flat = _flat(uidx.reshape(-1, d), n).reshape(uidx.shape[:2])
        halo, inv = np.unique(u_flat, return_inverse=True)
        inv = inv.reshape(u_flat.shape)
        self.u_flat = halo
        rows = np.repeat(np.arange(len(self.sidx)), len(self.offsets))
        cols = inv.ravel()
        cfg, beta = self.cfg, self.beta
        if cfg.weight == REGULARIZED:
            if halo_cov is None:
                upts = g.points.reshape(-1, d)[halo]
                cov = regularized_matrix(self.K, self.reg, xs, upts)
            else:
                cov = halo_cov(self.s_flat, halo)
            W = np.exp(-(beta**2) * cov[rows, cols])
        elif cfg.weight == FROZEN:
            W = np.tile(_translation_weight(self.K, self.reg, FROZEN, beta, self.offsets * g.h), len(self.sidx))
        else:
            upts = g.points.reshape(-1, d)[halo]
            W = _pair_weight(self.K, self.reg, cfg.weight, beta, xs[rows], upts[cols])
        vals = W * np.tile(self.kvals, len(self.sidx))
        shape = (len(self.sidx), len(halo))
        if shape[0] * shape[1] <= 60_000_000:
            M = np.zeros(shape)
            M[rows, cols] = vals
            self.M = M
        else:
            self.M = sparse.csr_matrix((vals, (rows, cols)), shape=shape)

    def _apply_direct(self, mu):
        mu_s = mu[:, self.s_flat]
        mu_u = mu[:, self.u_flat]
        if not np.all(np.isfinite(mu_u)):
            raise SupportViolation("chaos is undefined on part of the annulus halo")
        M = self.M
        # real weights: two real products instead of one complex one
        re = np.ascontiguousarray(mu_u.real.T)  # strided views would bypass BLAS
        im = np.ascontiguousarray(mu_u.imag.T)
        inner = (M @ re) - 1j * (M @ im)
        return np.einsum("s,rs,sr->r", self.F, mu_s, inner)

    # fast ----------------------------------------------------------------

    def _build_fast(self):
        g, d = self.grid, self.grid.d
        m = int(np.max(np.abs(self.offsets)))
        z = self.offsets * g.h
        w = _translation_weight(self.K, self.reg, self.cfg.weight, self.beta, z)
        ker = np.zeros((2 * m + 1,) * d)
        ker[tuple((self.offsets + m).T)] = w * self.kvals
        self.kernel = ker
        self.m = m
        lo = self.sidx.min(axis=0)
        hi = self.sidx.max(axis=0)
        self.box = tuple(slice(a - m, b + m + 1) for a, b in zip(lo, hi))
        self.inner = tuple(slice(a, b + 1) for a, b in zip(lo, hi))
        Fb = np.zeros(tuple(hi - lo + 1))
        Fb[tuple((self.sidx - lo).T)] = self.F
        self.Fbox = Fb

    def _apply_fast(self, mu_grid):
        d = self.grid.d
        box = mu_grid[(slice(None),) + self.box]
        box = np.where(np.isfinite(box), box, 0.0)
        axes = tuple(range(1, d + 1))
        ker = self.kernel[None]
        conv = signal.fftconvolve(np.conj(box), ker, mode="valid", axes=axes)
        mu_in = mu_grid[(slice(None),) + self.inner]
        prod = np.where(self.Fbox != 0, self.Fbox * mu_in * conv, 0.0)
        return prod.reshape(len(prod), -1).sum(axis=1)

    # public --------------------------------------------------------------

    def apply(self, mu):
        mu = np.asarray(mu)
        g = self.grid
        single = mu.ndim == g.d
        grid_vals = mu[None] if single else mu
        if self.path == FAST:
            out = self._apply_fast(grid_vals)
        else:
            out = self._apply_direct(grid_vals.reshape(len(grid_vals), -1))
        return out[0] if single else out


def _chaos_values(chaos):
    return chaos.values if hasattr(chaos, "values") else np.asarray(chaos)


def compute_H_eta(chaos, K, cfg: EstimatorConfig, eta: float, *, reg=None, path=None, mask=None):
    """``H_eta`` for one chaos sample (or a batch along the leading axis)."""
    grid = chaos.grid
    reg = reg if reg is not None else getattr(chaos, "reg", None)
    mask = mask if mask is not None else getattr(chaos, "mask", None)
    op = HOperator(grid, K, reg, cfg, eta, path=path or DIRECT, mask=mask)
    return op.apply(_chaos_values(chaos))


def compute_H_eta_fast(chaos, K, cfg: EstimatorConfig, eta: float, *, reg=None, mask=None):
    if not fast_path_allowed(K, cfg.weight):
        raise ValueError(f"weight {cfg.weight} on {K!r} is not translation invariant")
    return compute_H_eta(chaos, K, cfg, eta, reg=reg, path=FAST, mask=mask)


class HEstimator:
    """All scales of one configuration; operators are built once and reused."""

    def __init__(self, grid, K, reg, cfg: EstimatorConfig, *, mask=None, validate=True):
        if validate:
            cfg.validate(grid, reg)
        self.grid, self.K, self.reg, self.cfg = grid, K, reg, cfg
        halo_cov = None
        if cfg.weight == REGULARIZED and cfg.path == DIRECT:
            halo_cov = _shared_cov(grid, K, reg, cfg)
        self.ops = [HOperator(grid, K, reg, cfg, eta, mask=mask, halo_cov=halo_cov) for eta in cfg.scales]

    @property
    def scales(self):
        return self.cfg.scales

    def __call__(self, mu) -> np.ndarray:
        """Per-scale values, shape ``(replicas, scales)`` (or ``(scales,)``)."""
        mu = _chaos_values(mu)
        return np.stack([op.apply(mu) for op in self.ops], axis=-1)


def _shared_cov(grid, K, reg, cfg):
    """Covariance between supp f and the largest halo, computed once for all scales."""
    d = grid.d
    sidx = support_indices(grid, cfg.tf)
    s_flat = _flat(sidx, grid.n)
    pts = grid.points.reshape(-1, d)
    if isinstance(K, GFFSquare) and isinstance(reg, SpectralTruncation) and grid.L == 1.0 and reg.J < grid.n:
        from .sampler import gff_grid_covariance

        full = gff_grid_covariance(grid, reg.J, pts[s_flat]).reshape(len(s_flat), -1)
        where = np.arange(grid.size)
    else:
        offs, _ = stencil_for(grid, cfg, max(cfg.scales))
        lo = np.maximum(sidx.min(axis=0) - offs.max(axis=0), 0)
        hi = np.minimum(sidx.max(axis=0) - offs.min(axis=0), grid.n - 1)
        axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
        box = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d)
        b_flat = _flat(box, grid.n)
        full = regularized_matrix(K, reg, pts[s_flat], pts[b_flat])
        where = np.full(grid.size, -1)
        where[b_flat] = np.arange(len(b_flat))

    def lookup(rows_flat, cols_flat):
        ri = np.searchsorted(s_flat, rows_flat)
        ci = where[cols_flat]
        if np.any(ci < 0) or np.any(s_flat[ri] != rows_flat):
            raise SupportViolation("pair outside the precomputed covariance block")
        return full[np.ix_(ri, ci)]

    return lookup

# --------------------------------------------------------------------------
# averaging and error metrics


def compute_A_N(values, N: int):
    """Mean of the first ``N`` per-scale values (last axis)."""
    values = np.asarray(values)
    if not 1 <= N <= values.shape[-1]:
        raise ValueError(f"N={N} but only {values.shape[-1]} scales available")
    return values[..., :N].sum(axis=-1) / N


@dataclass
class EstimateRecord:
    replica: int
    H: np.ndarray  # per scale
    A: np.ndarray  # A_N for N = 1..len(H)
    T: float
    beta: float

    @property
    def residual(self):
        return self.H + 1j * self.beta * self.T


def make_records(H, T, beta, replicas=None) -> list[EstimateRecord]:
    H = np.atleast_2d(H)
    T = np.atleast_1d(T)
    idx = range(len(H)) if replicas is None else replicas
    out = []
    for i, r in enumerate(idx):
        A = np.array([compute_A_N(H[i], N) for N in range(1, H.shape[1] + 1)])
        out.append(EstimateRecord(int(r), H[i], A, float(T[i]), beta))
    return out


RECORD_COLUMNS = ("replica", "eta", "H_re", "H_im", "T", "scale_rule")


def write_records_csv(path, records, scales, scale_rule="explicit"):
    """One row per (replica, scale)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for rec in records:
            for eta, h in zip(scales, rec.H):
                w.writerow([rec.replica, repr(float(eta)), repr(float(h.real)), repr(float(h.imag)), repr(rec.T), scale_rule])


@dataclass
class ErrorSummary:
    rel_L2: float
    stderr: float | None
    replicas: int
    batches: int


def reconstruction_error(H, T, beta: float, n_batches: int = 10) -> ErrorSummary:
    """``rel_L2^2 = mean|H + i beta T|^2 / (beta^2 mean T^2)`` with a batch-means stderr.

    Replicas are split into ``n_batches`` contiguous batches (in replica
    order); the standard error of the ratio uses the delta method on the batch
    means. With fewer than two replicas the stderr is ``None``; when
    ``beta T`` vanishes identically the ratio is undefined and comes back NaN.
    """
    H = np.asarray(H, dtype=complex).ravel()
    T = np.asarray(T, dtype=float).ravel()
    R = len(H)
    if R != len(T):
        raise ValueError("H and T must have one entry per replica")
    if R == 0:
        raise ValueError("no replicas")
    a = np.abs(H + 1j * beta * T) ** 2
    b = beta**2 * T**2
    A, B = a.mean(), b.mean()
    if B == 0:
        return ErrorSummary(math.nan, None, R, 0)
    q = A / B
    rel = float(np.sqrt(q))
    if R < 2:
        return ErrorSummary(rel, None, R, 0)
    nb = min(max(n_batches, 10), R) if R >= 10 else R
    edges = np.linspace(0, R, nb + 1).round().astype(int)
    ab = np.array([a[s:e].mean() for s, e in zip(edges[:-1], edges[1:])])
    bb = np.array([b[s:e].mean() for s, e in zip(edges[:-1], edges[1:])])
    lin = (ab - q * bb) / B
    se_q = float(np.std(lin, ddof=1) / np.sqrt(nb))
    se = se_q / (2 * rel) if rel > 0 else 0.0
    return ErrorSummary(rel, se, R, nb)


def residual_correlation(H, T, beta) -> np.ndarray:
    """Modulus of the complex correlation between residuals of every pair of scales."""
    res = np.asarray(H) + 1j * beta * np.asarray(T)[:, None]
    res = res - res.mean(axis=0)
    cov = res.T @ np.conj(res)
    sd = np.sqrt(np.real(np.diag(cov)))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.abs(cov) / np.outer(sd, sd)
