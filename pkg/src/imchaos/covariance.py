"""Log-correlated covariance kernels ``C(x, y) = -log|x - y| + g(x, y)``.

Three kinds are provided:

* :class:`PureLog` -- ``g = 0``; a covariance only on sets of diameter below one.
* :class:`GFFSquare` -- zero-boundary GFF on the unit square, normalised so that
  ``C(x, y) = -log|x - y| + O(1)``. With ``J`` set it is the truncated sine
  series ``C_J``; with ``J=None`` it is the exact Green's function written with
  Jacobi theta functions (method of images on the lattice ``2Z + 2iZ``).
* :class:`LogPlusG` -- user supplied smooth ``g`` with closed-form partials.

Regularised covariances come from :class:`SpectralTruncation` (GFF only) or
:class:`MollifyConvolution` (double convolution with the annulus mollifier).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import linalg
from scipy.interpolate import CubicSpline

from .errors import DiagonalSingularity, NotPositiveSemiDefinite
from .mollifier import Mollifier

# --------------------------------------------------------------------------
# helpers


def _pts(x, d):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != d:
        raise ValueError(f"expected points with last axis of size {d}, got {x.shape}")
    return x


def _dist(x, y):
    return np.sqrt(np.sum((x - y) ** 2, axis=-1))


def _check_offdiag(r):
    if np.any(r == 0):
        raise DiagonalSingularity("log kernel evaluated on the diagonal x == y")


# --------------------------------------------------------------------------
# kernels


class CovarianceKernel:
    """Base class. Subclasses implement ``g``, ``g_partial`` and friends."""

    kind = "abstract"
    d = 2
    singular = True  # has a -log|x-y| part
    translation_invariant = False

    def __call__(self, x, y):
        x, y = _pts(x, self.d), _pts(y, self.d)
        r = _dist(x, y)
        if not self.singular:
            return self.g(x, y)
        _check_offdiag(r)
        return -np.log(r) + self.g(x, y)

    def partial(self, x, y, which="x", k=1):
        x, y = _pts(x, self.d), _pts(y, self.d)
        diff = x - y
        r2 = np.sum(diff**2, axis=-1)
        out = self.g_partial(x, y, which, k)
        if self.singular:
            _check_offdiag(r2)
            sign = 1.0 if which == "x" else -1.0
            out = out - sign * diff[..., k - 1] / r2
        return out

    def g(self, x, y):
        raise NotImplementedError

    def g_partial(self, x, y, which="x", k=1):
        raise NotImplementedError

    def g_diag(self, x):
        x = _pts(x, self.d)
        return self.g(x, x)

    def matrix(self, pa, pb=None):
        """Dense covariance matrix between two point sets (N, d) x (M, d)."""
        pa = _pts(pa, self.d)
        pb = pa if pb is None else _pts(pb, self.d)
        return self(pa[:, None, :], pb[None, :, :])


class PureLog(CovarianceKernel):
    kind = "PureLog"
    translation_invariant = True

    def __init__(self, d=2):
        self.d = int(d)

    def __repr__(self):
        return f"PureLog(d={self.d})"

    def g(self, x, y):
        return np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1]))

    def g_partial(self, x, y, which="x", k=1):
        return self.g(x, y)


class LogPlusG(CovarianceKernel):
    """``-log|x-y| + g(x, y)`` with user supplied smooth ``g`` and its partials.

    ``g_dx(x, y, k)`` and ``g_dy(x, y, k)`` must return the exact partials along
    coordinate ``k``; no numerical differentiation happens downstream.
    """

    kind = "LogPlusG"

    def __init__(self, d: int, g: Callable, g_dx: Callable, g_dy: Callable | None = None):
        self.d = int(d)
        self._g = g
        self._gx = g_dx
        self._gy = g_dy if g_dy is not None else (lambda x, y, k: g_dx(y, x, k))

    def __repr__(self):
        return f"LogPlusG(d={self.d}, g={getattr(self._g, '__name__', self._g)!r})"

    def g(self, x, y):
        return np.broadcast_to(self._g(x, y), np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1]))

    def g_partial(self, x, y, which="x", k=1):
        fn = self._gx if which == "x" else self._gy
        return fn(x, y, k)


class OffsetKernel(CovarianceKernel):
    """Kernel ``C + c``; used for fault injection (a deliberately wrong ``g``)."""

    def __init__(self, base: CovarianceKernel, offset: float):
        self.base = base
        self.offset = float(offset)
        self.d = base.d
        self.singular = base.singular
        self.translation_invariant = base.translation_invariant
        self.kind = base.kind

    def __repr__(self):
        return f"OffsetKernel({self.base!r}, {self.offset})"

    def __call__(self, x, y):
        return self.base(x, y) + self.offset

    def partial(self, x, y, which="x", k=1):
        return self.base.partial(x, y, which, k)

    def g(self, x, y):
        return self.base.g(x, y) + self.offset

    def g_partial(self, x, y, which="x", k=1):
        return self.base.g_partial(x, y, which, k)

    def matrix(self, pa, pb=None):
        return self.base.matrix(pa, pb) + self.offset

    def __getattr__(self, name):
        return getattr(self.base, name)


class ConstantKernel(CovarianceKernel):
    """Non-singular stub ``C = c``; useful to sanity check regularisation."""

    kind = "Constant"
    singular = False
    translation_invariant = True

    def __init__(self, d=2, value=1.0):
        self.d = int(d)
        self.value = float(value)

    def g(self, x, y):
        return np.full(np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1]), self.value)

    def g_partial(self, x, y, which="x", k=1):
        return np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1]))


# --------------------------------------------------------------------------
# zero boundary GFF on the unit square

_Q = np.exp(-np.pi)
_NTHETA = 8
_THETA_N = np.arange(_NTHETA)
_THETA_C = 2.0 * (-1.0) ** _THETA_N * _Q ** ((_THETA_N + 0.5) ** 2)
_THETA_M = 2 * _THETA_N + 1
THETA1_PRIME0 = float(np.sum(_THETA_C * _THETA_M))


def theta1(v):
    v = np.asarray(v, dtype=complex)[..., None]
    return np.sum(_THETA_C * np.sin(_THETA_M * v), axis=-1)


def theta1_prime(v):
    v = np.asarray(v, dtype=complex)[..., None]
    return np.sum(_THETA_C * _THETA_M * np.cos(_THETA_M * v), axis=-1)


def _theta1_over_v(v):
    """theta1(v) / v, regular at v = 0."""
    v = np.asarray(v, dtype=complex)
    small = np.abs(v) < 1e-6
    safe = np.where(small, 1.0, v)
    val = theta1(safe) / safe
    vs = v[..., None]
    # sin(m v) / v ~ m (1 - m^2 v^2 / 6)
    series = np.sum(_THETA_C * _THETA_M * (1 - (_THETA_M * vs) ** 2 / 6), axis=-1)
    return np.where(small, series, val)


def gff_coefficients(J: int) -> np.ndarray:
    j = np.arange(1, J + 1)
    return 2.0 / (np.pi * (j[:, None] ** 2 + j[None, :] ** 2))


def sine_features(x, J):
    """``sin(pi j x)`` for j = 1..J, shape ``x.shape + (J,)``."""
    j = np.arange(1, J + 1)
    return np.sin(np.pi * np.asarray(x, dtype=float)[..., None] * j)


class GFFSquare(CovarianceKernel):
    """Zero-boundary GFF on [0, 1]^2 with ``C = 2 pi G`` (``G`` the Dirichlet Green's function).

    Eigen-expansion: ``sum_{j,l} 2 / (pi (j^2 + l^2)) e_jl(x) e_jl(y)`` with
    ``e_jl = 2 sin(pi j x1) sin(pi l x2)``.
    """

    kind = "GFFSquare"
    d = 2

    def __init__(self, J: int | None = None):
        if J is not None and J < 1:
            raise ValueError("J must be a positive integer or None")
        self.J = None if J is None else int(J)
        self.singular = self.J is None

    def __repr__(self):
        return f"GFFSquare(J={self.J})"

    @property
    def coefficients(self):
        return gff_coefficients(self.J)

    # exact kernel ------------------------------------------------------

    @staticmethod
    def _args(x, y):
        z = x[..., 0] + 1j * x[..., 1]
        w = y[..., 0] + 1j * y[..., 1]
        h = np.pi / 2
        return h * (z - w), h * (z + w), h * (z - np.conj(w)), h * (z + np.conj(w))

    def _exact_g(self, x, y):
        a, b, c, e = self._args(x, y)
        return (
            -np.log(np.abs(_theta1_over_v(a)))
            - np.log(np.pi / 2)
            - np.log(np.abs(theta1(b)))
            + np.log(np.abs(theta1(c)))
            + np.log(np.abs(theta1(e)))
        )

    def _exact_partial(self, x, y, which, k):
        a, b, c, e = self._args(x, y)
        h = np.pi / 2
        unit = 1.0 if k == 1 else 1j
        if which == "x":
            coef = (h * unit, h * unit, h * unit, h * unit)
        else:
            # derivatives of w and conj(w) along y_k
            dw, dwb = unit, np.conj(unit)
            coef = (-h * dw, h * dw, -h * dwb, h * dwb)
        signs = (-1.0, -1.0, 1.0, 1.0)
        out = 0.0
        for s, v, cf in zip(signs, (a, b, c, e), coef):
            out = out + s * np.real(theta1_prime(v) / theta1(v) * cf)
        return out

    # truncated series --------------------------------------------------

    def _series(self, x, y, dx=None, dy=None):
        J = self.J
        j = np.arange(1, J + 1) * np.pi
        sx1, sx2 = sine_features(x[..., 0], J), sine_features(x[..., 1], J)
        sy1, sy2 = sine_features(y[..., 0], J), sine_features(y[..., 1], J)
        if dx is not None:
            cx = np.cos(np.pi * x[..., dx - 1][..., None] * np.arange(1, J + 1)) * j
            if dx == 1:
                sx1 = cx
            else:
                sx2 = cx
        if dy is not None:
            cy = np.cos(np.pi * y[..., dy - 1][..., None] * np.arange(1, J + 1)) * j
            if dy == 1:
                sy1 = cy
            else:
                sy2 = cy
        P = sx1 * sy1
        Q = sx2 * sy2
        return 4.0 * np.einsum("...j,jl,...l->...", P, self.coefficients, Q)

    # public ------------------------------------------------------------

    def __call__(self, x, y):
        x, y = _pts(x, 2), _pts(y, 2)
        if self.J is not None:
            return self._series(x, y)
        r = _dist(x, y)
        _check_offdiag(r)
        return -np.log(r) + self._exact_g(x, y)

    def partial(self, x, y, which="x", k=1):
        x, y = _pts(x, 2), _pts(y, 2)
        if self.J is not None:
            return self._series(x, y, dx=k if which == "x" else None, dy=k if which == "y" else None)
        _check_offdiag(_dist(x, y))
        return self._exact_partial(x, y, which, k)

    def g(self, x, y):
        x, y = _pts(x, 2), _pts(y, 2)
        if self.J is not None:
            return self._series(x, y) + np.log(_dist(x, y))
        return self._exact_g(x, y)

    def g_partial(self, x, y, which="x", k=1):
        x, y = _pts(x, 2), _pts(y, 2)
        diff = x - y
        r2 = np.sum(diff**2, axis=-1)
        sign = 1.0 if which == "x" else -1.0
        return self.partial(x, y, which, k) + sign * diff[..., k - 1] / r2

    def eigenfeatures(self, p):
        """Matrix ``E[p, (j, l)] = sqrt(c_jl) e_jl(p)`` so ``C_J = E E^T``."""
        p = _pts(p, 2)
        s1 = sine_features(p[..., 0], self.J)
        s2 = sine_features(p[..., 1], self.J)
        E = 2.0 * s1[..., :, None] * s2[..., None, :] * np.sqrt(self.coefficients)
        return E.reshape(p.shape[:-1] + (self.J * self.J,))

    def matrix(self, pa, pb=None):
        if self.J is None:
            return super().matrix(pa, pb)
        Ea = self.eigenfeatures(pa)
        Eb = Ea if pb is None else self.eigenfeatures(pb)
        return Ea @ Eb.T

    def variance(self, p):
        """Exact ``C_J(p, p)``."""
        if self.J is None:
            raise DiagonalSingularity("exact GFF has infinite pointwise variance")
        p = _pts(p, 2)
        s1 = sine_features(p[..., 0], self.J) ** 2
        s2 = sine_features(p[..., 1], self.J) ** 2
        return 4.0 * np.einsum("...j,jl,...l->...", s1, self.coefficients, s2)


# --------------------------------------------------------------------------
# regularisation


@dataclass(frozen=True)
class SpectralTruncation:
    J: int

    @property
    def delta(self) -> float:
        return 1.0 / self.J


@dataclass(frozen=True)
class MollifyConvolution:
    delta: float


def _gauss_on(a, b, n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (b - a) * x + 0.5 * (b + a), 0.5 * (b - a) * w


def _sphere_mean_log(c, rho, d):
    """Mean of ``-log|c e - rho w|`` over unit vectors ``w`` in R^d."""
    if d == 2:
        return -np.log(np.maximum(c, rho))
    c = np.asarray(c, dtype=float)
    rho = np.asarray(rho, dtype=float)
    p, m = c + rho, np.abs(c - rho)
    with np.errstate(divide="ignore", invalid="ignore"):
        tm = np.where(m > 0, m**2 * (np.log(m**2) - 1.0), 0.0)
        val = -(p**2 * (np.log(p**2) - 1.0) - tm) / (8.0 * c * rho)
    # c -> 0 limit (and rho -> 0 by symmetry)
    small = c < 1e-9 * rho
    return np.where(small, -np.log(rho), val)


@lru_cache(maxsize=None)
def _mollified_log_table(d: int):
    """Spline for ``L(a) = E[-log|a e1 - S + T|]``, S, T iid ~ phi (unit scale)."""
    m = Mollifier(d)
    nr, nt = 40, 24
    r, wr = _gauss_on(0.5, 1.0, nr)
    wr = wr * m.radial_density(r)
    R1, R2 = np.meshgrid(r, r, indexing="ij")
    W12 = np.outer(wr, wr)

    def value(a):
        if a == 0.0:
            return float(np.sum(W12 * _sphere_mean_log(R1, R2, d)))
        # angle variable: t = cos(angle) in 3d (uniform), angle theta in 2d
        if d == 3:
            lo, hi = -1.0, 1.0
            to_c = lambda t: np.sqrt(np.maximum(a * a + R1[..., None] ** 2 - 2 * a * R1[..., None] * t, 0.0))
            kink = (a * a + R1**2 - R2**2) / (2 * a * R1)
            dens = 0.5
        else:
            lo, hi = 0.0, np.pi
            to_c = lambda t: np.sqrt(np.maximum(a * a + R1[..., None] ** 2 - 2 * a * R1[..., None] * np.cos(t), 0.0))
            ck = np.clip((a * a + R1**2 - R2**2) / (2 * a * R1), -1.0, 1.0)
            kink = np.arccos(ck)
            dens = 1.0 / np.pi
        kink = np.clip(kink, lo, hi)
        x, w = np.polynomial.legendre.leggauss(nt)
        total = np.zeros_like(R1)
        for left, right in ((np.full_like(kink, lo), kink), (kink, np.full_like(kink, hi))):
            half = 0.5 * (right - left)
            t = left[..., None] + half[..., None] * (x + 1.0)
            f = _sphere_mean_log(to_c(t), R2[..., None], d)
            total += np.sum(f * w, axis=-1) * half
        return float(np.sum(W12 * total * dens))

    near = np.linspace(0.0, 2.5, 501)
    vals = np.array([value(a) for a in near])
    near_spline = CubicSpline(near, vals, bc_type=((1, 0.0), "not-a-knot"))
    far = np.geomspace(2.5, 4.0e3, 160)
    if d == 2:
        far_corr = np.zeros_like(far)  # log is harmonic in 2d: exact beyond the support
    else:
        far_corr = np.array([value(a) for a in far]) + np.log(far)
    far_spline = CubicSpline(np.log(far), far_corr)
    return near_spline, far_spline, far[-1], far_corr[-1]


def mollified_log(d: int, delta: float, r):
    """``E[-log|r - S + T|]`` with S, T iid ~ phi_delta, as a function of ``|r|``."""
    near, far, amax, tail = _mollified_log_table(d)
    a = np.asarray(r, dtype=float) / delta
    out = np.empty_like(a)
    m_near = a <= 2.5
    out[m_near] = near(a[m_near])
    m_far = ~m_near
    af = a[m_far]
    corr = np.where(af < amax, far(np.log(np.minimum(af, amax))), tail * (amax / np.maximum(af, amax)) ** 2)
    out[m_far] = -np.log(af) + corr
    return out - np.log(delta)


def _smoothing_offsets(d, delta):
    """Symmetric 2d-point rule matching the second moments of phi_delta."""
    m = Mollifier(d)
    r, w = _gauss_on(0.5, 1.0, 64)
    second = np.sum(w * m.radial_density(r) * r**2)
    rad = delta * np.sqrt(second)
    offs = np.concatenate([np.eye(d), -np.eye(d)]) * rad
    return offs, np.full(2 * d, 1.0 / (2 * d))


def regularized_covariance(K: CovarianceKernel, spec, x, y):
    """``C_delta(x, y)``; finite on the diagonal."""
    if isinstance(K, OffsetKernel):
        return regularized_covariance(K.base, spec, x, y) + K.offset
    x, y = _pts(x, K.d), _pts(y, K.d)
    if isinstance(spec, SpectralTruncation):
        if not isinstance(K, GFFSquare):
            raise ValueError("spectral truncation is only defined for GFFSquare")
        return GFFSquare(spec.J)(x, y)
    if isinstance(spec, MollifyConvolution):
        delta = spec.delta
        out = 0.0
        if K.singular:
            out = mollified_log(K.d, delta, _dist(x, y))
        if not isinstance(K, PureLog):
            offs, w = _smoothing_offsets(K.d, delta)
            acc = 0.0
            for si, wi in zip(offs, w):
                for ti, wj in zip(offs, w):
                    acc = acc + wi * wj * K.g(x + si, y + ti)
            out = out + acc
        return out + np.zeros(np.broadcast_shapes(x.shape[:-1], y.shape[:-1]))
    raise TypeError(f"unknown regularisation {spec!r}")


def regularized_matrix(K, spec, pa, pb=None):
    pa = _pts(pa, K.d)
    if isinstance(spec, SpectralTruncation) and isinstance(K, GFFSquare):
        return GFFSquare(spec.J).matrix(pa, pb)
    if isinstance(K, OffsetKernel):
        return regularized_matrix(K.base, spec, pa, pb) + K.offset
    pb = pa if pb is None else _pts(pb, K.d)
    if isinstance(K, PureLog) and isinstance(spec, MollifyConvolution):
        out = np.empty((len(pa), len(pb)))
        step = max(1, 2_000_000 // max(len(pb), 1))
        for i in range(0, len(pa), step):
            r = _dist(pa[i : i + step, None, :], pb[None, :, :])
            out[i : i + step] = mollified_log(K.d, spec.delta, r)
        return out
    return regularized_covariance(K, spec, pa[:, None, :], pb[None, :, :])


class Regularized(CovarianceKernel):
    """``C_delta`` as a kernel in its own right (finite on the diagonal)."""

    singular = False

    def __init__(self, base: CovarianceKernel, spec):
        self.base = base
        self.spec = spec
        self.d = base.d
        self.kind = f"Regularized[{base.kind}]"

    def __repr__(self):
        return f"Regularized({self.base!r}, {self.spec!r})"

    def __call__(self, x, y):
        return regularized_covariance(self.base, self.spec, x, y)

    def matrix(self, pa, pb=None):
        return regularized_matrix(self.base, self.spec, pa, pb)


# --------------------------------------------------------------------------
# public operations


def kernel_eval(K: CovarianceKernel, x, y):
    return K(x, y)


def kernel_partial(K: CovarianceKernel, x, y, which="x", k=1):
    if which not in ("x", "y"):
        raise ValueError("which must be 'x' or 'y'")
    return K.partial(x, y, which, k)


@dataclass
class PSDReport:
    min_eigenvalue: float
    max_eigenvalue: float
    passed: bool


def psd_validate(K, spec, points, *, raise_on_fail=True) -> PSDReport:
    points = np.asarray(points, dtype=float)
    if len(points) > 4096:
        raise ValueError("psd_validate supports at most 4096 points")
    M = regularized_matrix(K, spec, points) if spec is not None else K.matrix(points)
    ev = linalg.eigvalsh(M)
    lo, hi = float(ev[0]), float(ev[-1])
    ok = lo >= -1e-8 * max(abs(hi), 1e-300)
    rep = PSDReport(lo, hi, ok)
    if not ok and raise_on_fail:
        raise NotPositiveSemiDefinite(f"min eigenvalue {lo:.3e} vs max {hi:.3e}")
    return rep
