"""Reference values for the moment identities checked by Monte Carlo.

Two flavours live here. Continuum quadratures (``derivative_variance``,
``cross_term_quadrature``) approximate integrals of the covariance against
smooth test functions and carry a refinement check. Discrete oracles
(``*_discrete``) evaluate the exact expectation of the discretised estimator on
a given grid, so Monte Carlo averages of that estimator must match them up to
sampling error alone.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, signal

from .covariance import (
    GFFSquare,
    MollifyConvolution,
    OffsetKernel,
    PureLog,
    Regularized,
    SpectralTruncation,
    gff_coefficients,
    mollified_log,
    regularized_matrix,
    sine_features,
)
from .errors import InfeasibleDimension, NonConverged
from .estimator import (
    REGULARIZED,
    EstimatorConfig,
    _check_halo,
    _flat,
    _pair_weight,
    stencil_for,
    support_indices,
)
from .grid import Grid, TestFunction, build_grid
from .mollifier import Mollifier


@dataclass(frozen=True)
class QuadratureSpec:
    n: int = 256  # cells per side of the quadrature grid
    tol: float = 1e-3  # relative change allowed under one refinement
    refine: bool = True


@dataclass
class OracleValue:
    value: float
    n: int
    change: float | None = None  # relative change under refinement

    def __float__(self):
        return float(self.value)


def _refined(fn, spec: QuadratureSpec, what: str, atol: float = 0.0, order: int | None = None) -> OracleValue:
    """Evaluate at ``n`` and ``2n``; with ``order`` set, Richardson-extrapolate the pair.

    The reported change is the error estimate of the returned value's
    unextrapolated counterpart, ``|v(2n) - v(n)| / (2^order - 1)``.
    """
    v0 = fn(spec.n)
    if not spec.refine:
        return OracleValue(v0, spec.n)
    v1 = fn(2 * spec.n)
    gap = abs(v1 - v0)
    value = v1
    if order:
        gap /= 2**order - 1
        value = v1 + (v1 - v0) / (2**order - 1)
    change = gap / max(abs(v1), atol, 1e-300)
    if gap > spec.tol * abs(v1) + atol:
        raise NonConverged(f"{what}: {v0!r} -> {v1!r} under refinement (rel change {change:.2e})")
    return OracleValue(value, 2 * spec.n, change)


# --------------------------------------------------------------------------
# covariance helpers


def _cov(K, x, y):
    return K(x, y)


def four_point_E(K, x, y, u, v, beta: float = 1.0) -> float:
    """``exp(b^2 [C(x,y) + C(x-u, y-v) - C(x, y-v) - C(y, x-u)])``."""
    x, y, u, v = (np.asarray(a, dtype=float) for a in (x, y, u, v))
    b2 = beta**2
    expo = _cov(K, x, y) + _cov(K, x - u, y - v) - _cov(K, x, y - v) - _cov(K, y, x - u)
    return np.exp(b2 * expo)


def girsanov_two_point(Kd, x, u, beta: float) -> float:
    """``E mu(x) conj(mu(u)) = exp(beta^2 C_delta(x, u))``."""
    return np.exp(beta**2 * _cov(Kd, x, u))


def girsanov_three_point(Kd, x, u, y, beta: float) -> complex:
    """``E mu(x) conj(mu(u)) Gamma(y) = i b exp(b^2 C(x,u)) (C(x,y) - C(u,y))`` for ``C = C_delta``."""
    return 1j * beta * np.exp(beta**2 * _cov(Kd, x, u)) * (_cov(Kd, x, y) - _cov(Kd, u, y))


# --------------------------------------------------------------------------
# bilinear forms  int int a(x) b(y) C(x, y) dx dy  on a quadrature grid


def _cell_log_mean(o, d):
    """Mean of ``-log|o + s - t|`` for s, t uniform in the unit cube (cell units)."""
    o = np.asarray(o, dtype=float)
    if np.all(o == 0):
        return _cell_log_self(d)
    x, w = np.polynomial.legendre.leggauss(16)
    # split [-1, 1] at 0 (weight kink) and at -o_i (log kink) per axis
    nodes, weights = [], []
    for oi in o:
        cuts = sorted({-1.0, 0.0, 1.0, float(np.clip(-oi, -1, 1))})
        zs, ws = [], []
        for a, b in zip(cuts[:-1], cuts[1:]):
            if b > a:
                zs.append(0.5 * (b - a) * x + 0.5 * (a + b))
                ws.append(0.5 * (b - a) * w)
        z, wz = np.concatenate(zs), np.concatenate(ws)
        nodes.append(z)
        weights.append(wz * (1 - np.abs(z)))
    grids = np.meshgrid(*nodes, indexing="ij")
    wgt = np.ones_like(grids[0])
    for i, wi in enumerate(weights):
        shape = [1] * d
        shape[i] = -1
        wgt = wgt * wi.reshape(shape)
    r2 = sum((g + oi) ** 2 for g, oi in zip(grids, o))
    return float(np.sum(wgt * -0.5 * np.log(r2)))


@lru_cache(maxsize=None)
def _cell_log_self(d: int) -> float:
    f2 = lambda b, a: (1 - a) * (1 - b) * -0.5 * np.log(a * a + b * b)
    if d == 2:
        val, _ = integrate.dblquad(f2, 0, 1, 0, 1, epsabs=1e-12, epsrel=1e-10)
        return 4 * val
    f3 = lambda c, b, a: (1 - a) * (1 - b) * (1 - c) * -0.5 * np.log(a * a + b * b + c * c)
    val, _ = integrate.tplquad(f3, 0, 1, 0, 1, 0, 1, epsabs=1e-10, epsrel=1e-8)
    return 8 * val


@lru_cache(maxsize=None)
def _log_stencil(d: int, n: int, h: float, reach: int, near: int) -> np.ndarray:
    """``-log|o h|`` on offsets up to ``reach`` cells, with exact cell averages near 0."""
    rng = np.arange(-reach, reach + 1)
    mesh = np.stack(np.meshgrid(*([rng] * d), indexing="ij"), -1)
    r = np.sqrt(np.sum(mesh.astype(float) ** 2, axis=-1))
    with np.errstate(divide="ignore"):
        ker = -np.log(r * h)
    cache = {}
    for o in np.argwhere(np.max(np.abs(mesh), axis=-1) <= near):
        off = mesh[tuple(o)]
        key = tuple(sorted(np.abs(off)))
        if key not in cache:
            cache[key] = _cell_log_mean(np.array(key), d)
        ker[tuple(o)] = cache[key] - np.log(h)
    return ker


def _box(grid: Grid, fields):
    """Bounding box of the joint support of the given grid arrays."""
    nz = np.argwhere(np.any([f != 0 for f in fields], axis=0))
    lo, hi = nz.min(axis=0), nz.max(axis=0)
    return tuple(slice(a, b + 1) for a, b in zip(lo, hi))


def bilinear_form(K, a_fn, b_fn, n: int, d: int, reg=None, L: float = 1.0) -> float:
    """``int int a(x) b(y) C(x, y)`` by midpoint quadrature on an ``n^d`` grid.

    ``a_fn(grid)`` and ``b_fn(grid)`` return grid arrays. The log singularity
    uses exact cell-pair averages on nearby cells; smooth parts use the plain
    midpoint rule, which is spectrally accurate for compactly supported
    smooth integrands. Pairing cell averages of the log with point values of
    the integrand leaves an O(h^2) error overall.
    """
    grid = build_grid(d, n, L)
    a, b = a_fn(grid), b_fn(grid)
    h = grid.h
    if isinstance(K, OffsetKernel):
        tot_a = a.sum() * h**d
        tot_b = b.sum() * h**d
        return bilinear_form(K.base, a_fn, b_fn, n, d, reg, L) + K.offset * tot_a * tot_b
    if isinstance(K, Regularized):
        return bilinear_form(K.base, a_fn, b_fn, n, d, K.spec, L)
    if isinstance(reg, SpectralTruncation) or (isinstance(K, GFFSquare) and K.J is not None):
        J = reg.J if isinstance(reg, SpectralTruncation) else K.J
        if d != 2 or L != 1.0:
            raise ValueError("spectral quadrature lives on the unit square")
        S = sine_features(grid.axis, J)
        Pa = 2 * h * h * S.T @ a @ S
        Pb = 2 * h * h * S.T @ b @ S
        return float(np.sum(gff_coefficients(J) * Pa * Pb))
    box = _box(grid, [a, b])
    ab, bb = a[box], b[box]
    reach = max(s.stop - s.start for s in box)
    rng = np.arange(-reach, reach + 1)
    mesh = np.stack(np.meshgrid(*([rng] * d), indexing="ij"), -1) * h
    total = 0.0
    if isinstance(reg, MollifyConvolution):
        if not isinstance(K, PureLog):
            sub = Regularized(K, reg)
            return _dense_bilinear(sub, grid, ab, bb, box)
        ker = mollified_log(d, reg.delta, np.sqrt(np.sum(mesh**2, axis=-1)))
        return _conv_pair(ab, bb, ker, h, d)
    if K.singular:
        ker = _log_stencil(d, n, h, reach, 2 if d == 2 else 1)
        total += _conv_pair(ab, bb, ker, h, d)
    if not isinstance(K, PureLog):
        total += _g_bilinear(K, a_fn, b_fn, min(n, 192), d, L)
    return float(total)


def _conv_pair(ab, bb, ker, h, d):
    """``h^{2d} sum_x sum_y a(x) b(y) ker(x - y)`` for arrays on a common box."""
    full = signal.fftconvolve(bb, ker, mode="full")
    # full[i + reach] = sum_y b(y) ker(i - y)
    reach = (ker.shape[0] - 1) // 2
    sl = tuple(slice(reach, reach + s) for s in ab.shape)
    return float(np.sum(ab * full[sl]) * h ** (2 * d))


def _g_bilinear(K, a_fn, b_fn, n, d, L):
    grid = build_grid(d, n, L)
    a, b = a_fn(grid), b_fn(grid)
    pts = grid.points
    ia, ib = np.argwhere(a != 0), np.argwhere(b != 0)
    pa, pb = pts[tuple(ia.T)], pts[tuple(ib.T)]
    va, vb = a[tuple(ia.T)], b[tuple(ib.T)]
    total = 0.0
    for i in range(0, len(pa), 512):
        G = K.g(pa[i : i + 512, None, :], pb[None, :, :])
        total += float(va[i : i + 512] @ G @ vb)
    return total * grid.h ** (2 * d)


def _dense_bilinear(K, grid, ab, bb, box):
    pts = grid.points[box]
    ia, ib = np.argwhere(ab != 0), np.argwhere(bb != 0)
    pa, pb = pts[tuple(ia.T)], pts[tuple(ib.T)]
    va, vb = ab[tuple(ia.T)], bb[tuple(ib.T)]
    total = 0.0
    for i in range(0, len(pa), 512):
        total += float(va[i : i + 512] @ K.matrix(pa[i : i + 512], pb) @ vb)
    return total * grid.h ** (2 * grid.d)


# --------------------------------------------------------------------------
# continuum oracles


def _order(K, reg):
    """Convergence order of ``bilinear_form``: 2 on the raw log singularity, else spectral."""
    base = K.base if isinstance(K, OffsetKernel) else K
    if isinstance(base, Regularized) or reg is not None:
        return None
    if isinstance(base, GFFSquare) and base.J is not None:
        return None
    return 2 if base.singular else None


def derivative_variance(K, tf: TestFunction, k: int = 1, *, reg=None, quad: QuadratureSpec | None = None) -> OracleValue:
    """``E <d_k Gamma, f>^2 = int int d_k f(x) d_k f(y) C(x, y)``."""
    quad = quad or QuadratureSpec()
    if tf.amplitude == 0:
        return OracleValue(0.0, quad.n, 0.0)
    grad = lambda g: tf.grad_on_grid(g, k)
    fn = lambda n: bilinear_form(K, grad, grad, n, tf.d, reg)
    return _refined(fn, quad, "derivative_variance", order=_order(K, reg))


def _smoothed_grad(tf, eta, k, subdiv: int = 8):
    """Grid function ``int d_k f(x) phi_eta(x - u) dx`` evaluated at grid points u."""

    def fn(grid):
        a = tf.grad_on_grid(grid, k)
        m = int(np.ceil(eta / grid.h)) + 1
        rng = np.arange(-m, m + 1)
        mesh = np.stack(np.meshgrid(*([rng] * grid.d), indexing="ij"), -1) * grid.h
        # cell averages of phi_eta, rescaled to unit mass: point samples lose
        # most of the mass once eta spans only a few cells
        sub = ((np.arange(subdiv) + 0.5) / subdiv - 0.5) * grid.h
        nodes = np.stack(np.meshgrid(*([sub] * grid.d), indexing="ij"), -1).reshape(-1, grid.d)
        mol = Mollifier(grid.d)
        ker = sum(mol.phi_eta(eta, mesh + s) for s in nodes)
        ker /= ker.sum()
        return signal.fftconvolve(a, ker, mode="same")

    return fn


def cross_term_quadrature(K, tf: TestFunction, eta: float, beta: float, k: int = 1, *, reg=None, quad=None) -> OracleValue:
    """``b^2 int f(x) d f(y) d_1 C(u, y) phi_eta(x - u)``, written as ``-b^2 int d(f*phi_eta)(u) d f(y) C(u, y)``.

    Tends to ``-beta^2 * derivative_variance`` as ``eta -> 0``.
    """
    quad = quad or QuadratureSpec()
    if beta == 0 or tf.amplitude == 0:
        return OracleValue(0.0, quad.n, 0.0)
    grad = lambda g: tf.grad_on_grid(g, k)
    sm = _smoothed_grad(tf, eta, k)
    fn = lambda n: -(beta**2) * bilinear_form(K, sm, grad, n, tf.d, reg)
    return _refined(fn, quad, "cross_term_quadrature", order=_order(K, reg))


# --------------------------------------------------------------------------
# discrete oracles (exact expectations of the grid estimator)


class _GridCov:
    """Covariance between grid points (flat indices), C_J by features or C_delta."""

    def __init__(self, grid, K, reg):
        self.grid, self.K, self.reg = grid, K, reg
        self.pts = grid.points.reshape(-1, grid.d)

    def __call__(self, ia, ib):
        K, reg = self.K, self.reg
        if reg is None:
            return K.matrix(self.pts[ia], self.pts[ib])
        return regularized_matrix(K, reg, self.pts[ia], self.pts[ib])


def derivative_variance_discrete(grid: Grid, K, reg, tf: TestFunction, k: int = 1) -> float:
    """Exact ``Var`` of the grid pairing ``-h^d sum Gamma d_k f``."""
    a = tf.grad_on_grid(grid, k)
    idx = np.argwhere(a != 0)
    fl = _flat(idx, grid.n)
    va = a[tuple(idx.T)]
    C = _GridCov(grid, K, reg)(fl, fl)
    return float(va @ C @ va) * grid.h ** (2 * grid.d)


def cross_term_discrete(grid: Grid, K, reg, cfg: EstimatorConfig, eta: float) -> float:
    """``-i beta E[H_eta T]`` for the grid estimator with regularised weights.

    Equals ``-beta^2 h^{2d} sum_x sum_u F(x) k(x - u) (v(x) - v(u))`` with
    ``v(p) = h^d sum_y d_k f(y) C_delta(p, y)``.
    """
    if cfg.weight != REGULARIZED:
        raise ValueError("the discrete cross term is exact only for regularised weights")
    h, d, n = grid.h, grid.d, grid.n
    sidx = support_indices(grid, cfg.tf)
    offs, kv = stencil_for(grid, cfg, eta)
    _check_halo(grid, sidx, offs)
    F = cfg.tf(grid.points[tuple(sidx.T)])
    a = cfg.tf.grad_on_grid(grid, cfg.k)
    aidx = np.argwhere(a != 0)
    a_fl = _flat(aidx, n)
    va = a[tuple(aidx.T)]
    u = sidx[:, None, :] - offs[None, :, :]
    u_fl = _flat(u.reshape(-1, d), n)
    s_fl = _flat(sidx, n)
    pts = np.unique(np.concatenate([u_fl, s_fl]))
    C = _GridCov(grid, K, reg)(pts, a_fl)
    v = (C @ va) * h**d
    pos = np.searchsorted(pts, u_fl).reshape(u.shape[:2])
    vx = v[np.searchsorted(pts, s_fl)]
    X = np.sum(F[:, None] * kv[None, :] * (vx[:, None] - v[pos])) * h ** (2 * d)
    return float(-(cfg.beta**2) * X)


def _two_scale_moment(grid: Grid, K, reg, cfg: EstimatorConfig, eta1: float, eta2: float, weight_cov=None) -> complex:
    """``E H_{eta1} conj(H_{eta2})`` for the grid estimator fed with ``mu_delta``.

    ``E mu(x) conj(mu(u)) conj(mu(y)) mu(v) = exp(b^2 [C(x,u) + C(y,v) + C(x,y) + C(u,v) - C(x,v) - C(u,y)])``
    with ``C = C_delta``. Multiplying by the weights ``W(x,u) W(y,v)`` leaves
    ``Wt = W exp(b^2 C_delta)`` per pair, which is identically one for the
    regularised weight. The quadruple sum runs over supp f and the two annuli.
    """
    h, d, n = grid.h, grid.d, grid.n
    b2 = cfg.beta**2
    sidx = support_indices(grid, cfg.tf)
    s_fl = _flat(sidx, n)
    xs = grid.points[tuple(sidx.T)]
    F = cfg.tf(xs) * h ** (2 * d)
    o1, k1 = stencil_for(grid, cfg, eta1)
    o2, k2 = stencil_for(grid, cfg, eta2)
    _check_halo(grid, sidx, o1)
    _check_halo(grid, sidx, o2)
    u1 = _flat((sidx[:, None, :] - o1[None]).reshape(-1, d), n).reshape(len(sidx), -1)
    u2 = _flat((sidx[:, None, :] - o2[None]).reshape(-1, d), n).reshape(len(sidx), -1)
    halo = np.unique(np.concatenate([u1.ravel(), u2.ravel(), s_fl]))
    cov = _GridCov(grid, K, reg)
    Chh = cov(halo, halo)
    G = np.exp(b2 * Chh)
    Gi = np.exp(-b2 * Chh)
    p_s = np.searchsorted(halo, s_fl)
    p1 = np.searchsorted(halo, u1)
    p2 = np.searchsorted(halo, u2)

    def wt(oo, pu, eta):
        if cfg.weight == REGULARIZED:
            return np.ones(pu.shape)
        U = grid.points.reshape(-1, d)[halo[pu]]
        W = _pair_weight(K, reg, cfg.weight, cfg.beta, xs[:, None, :], U)
        return W * np.exp(b2 * Chh[p_s[:, None], pu])

    Wt1 = wt(o1, p1, eta1)
    Wt2 = wt(o2, p2, eta2)
    # B[y, v] = F(y) k2(y - v) Wt2(y, v), scattered onto the halo columns
    B = np.zeros((len(sidx), len(halo)))
    np.add.at(B, (np.repeat(np.arange(len(sidx)), p2.shape[1]), p2.ravel()), (F[:, None] * k2[None] * Wt2).ravel())
    G_s = G[p_s]  # (x or y, halo)
    Gi_s = Gi[p_s]
    total = 0.0
    for ix in range(len(sidx)):
        pu = p1[ix]
        a = F[ix] * k1 * Wt1[ix]
        Bx = B * G_s[ix][p_s][:, None] * Gi_s[ix][None, :]  # F(y)G(x,y) ... Gi(x,v)
        # sum_u a(u) sum_{y,v} Gi(u,y) Bx[y,v] G(u,v)
        Q = Gi[np.ix_(pu, p_s)]  # (u, y)
        T1 = Q @ Bx  # (u, v)
        total += float(a @ np.sum(T1 * G[pu], axis=1))
    return total


def second_moment_H_discrete(grid: Grid, K, reg, cfg: EstimatorConfig, eta: float) -> float:
    if grid.d != 2:
        raise InfeasibleDimension("the quadruple sum is only run in d = 2")
    return _two_scale_moment(grid, K, reg, cfg, eta, eta)


def second_moment_H_quadrature(
    K, tf: TestFunction, eta: float, beta: float, *, reg=None, n: int = 128, k: int = 1, weight: str = REGULARIZED, refine: bool = False, tol: float = 1e-3
) -> OracleValue:
    """``E |H_eta|^2`` as a quadrature over supp f and the two annuli (d = 2 only)."""
    if tf.d != 2:
        raise InfeasibleDimension("E|H_eta|^2 quadrature needs d = 2; use Monte Carlo in d = 3")
    if weight == REGULARIZED and reg is None:
        raise ValueError("regularised weight needs a regularisation spec")

    def fn(m):
        grid = build_grid(2, m)
        if eta < 8 * grid.h:
            raise NonConverged(f"eta={eta} under 8 quadrature cells at n={m}")
        cfg = EstimatorConfig(beta, tf, (eta,), k=k, weight=weight)
        return second_moment_H_discrete(grid, K, reg, cfg, eta)

    return _refined(fn, QuadratureSpec(n, tol, refine), "second_moment_H_quadrature", atol=1e-12)


def offdiag_covariance_quadrature(
    K, tf: TestFunction, eta1: float, eta2: float, beta: float, *, reg=None, n: int = 128, k: int = 1, weight: str = REGULARIZED, refine: bool = False, tol: float = 1e-3
) -> OracleValue:
    """``E H_{eta1} conj(H_{eta2})``; real part returned (the imaginary part is zero by reflection)."""
    if tf.d != 2:
        raise InfeasibleDimension("two-scale quadrature needs d = 2")
    if eta1 > eta2 / 2 and eta1 != eta2:
        raise ValueError("need eta1 <= eta2 / 2 (or equal scales)")

    def fn(m):
        grid = build_grid(2, m)
        cfg = EstimatorConfig(beta, tf, (eta1,), k=k, weight=weight)
        return _two_scale_moment(grid, K, reg, cfg, eta1, eta2)

    return _refined(fn, QuadratureSpec(n, tol, refine), "offdiag_covariance_quadrature", atol=1e-12)


# --------------------------------------------------------------------------
# result cache


class OracleCache:
    """JSON file of oracle values keyed by their defining parameters."""

    def __init__(self, path):
        self.path = os.fspath(path)
        self._data = {}
        if os.path.exists(self.path):
            with open(self.path) as fh:
                self._data = json.load(fh)

    @staticmethod
    def key(name, **params) -> str:
        blob = json.dumps({"name": name, **{k: repr(v) for k, v in params.items()}}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:24]

    def get_or_compute(self, name, fn, **params):
        k = self.key(name, **params)
        if k in self._data:
            return self._data[k]["value"]
        value = float(fn())
        self._data[k] = {"name": name, "params": {p: repr(v) for p, v in params.items()}, "value": value}
        tmp = self.path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(self._data, fh, indent=1, sort_keys=True)
        os.replace(tmp, self.path)
        return value
