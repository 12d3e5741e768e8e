"""Annulus-supported radial mollifier and its rescalings.

The profile ``p(rho) = exp(-1 / ((rho - 1/2)(1 - rho)))`` vanishes identically on
``|x| <= 1/2`` and ``|x| >= 1``. The inner hole keeps ``|x - u| >= eta/2`` in the
estimator so the singular weight never touches the diagonal.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy import integrate
from scipy.special import gamma

_INNER, _OUTER = 0.5, 1.0


def sphere_area(d: int) -> float:
    """Surface area of the unit sphere in R^d."""
    return 2 * np.pi ** (d / 2) / gamma(d / 2)


def radial_profile(rho):
    rho = np.asarray(rho, dtype=float)
    q = (rho - _INNER) * (_OUTER - rho)
    out = np.zeros_like(rho)
    inside = q > 0
    out[inside] = np.exp(-1.0 / q[inside])
    return out


def radial_profile_deriv(rho):
    rho = np.asarray(rho, dtype=float)
    q = (rho - _INNER) * (_OUTER - rho)
    out = np.zeros_like(rho)
    inside = q > 0
    qi = q[inside]
    out[inside] = np.exp(-1.0 / qi) * (1.5 - 2.0 * rho[inside]) / qi**2
    return out


@lru_cache(maxsize=None)
def _mass(d: int) -> float:
    val, _ = integrate.quad(
        lambda r: float(radial_profile(r)) * r ** (d - 1),
        _INNER,
        _OUTER,
        epsabs=1e-15,
        epsrel=1e-13,
        limit=500,
    )
    return sphere_area(d) * val


class Mollifier:
    """phi(x) = p(|x|) / Z with unit mass in R^d."""

    def __init__(self, d: int):
        if d < 1:
            raise ValueError("dimension must be positive")
        self.d = int(d)
        self.Z = _mass(self.d)

    def __repr__(self):
        return f"Mollifier(d={self.d})"

    def _norm(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.d:
            raise ValueError(f"expected points of dimension {self.d}")
        return x, np.sqrt(np.sum(x**2, axis=-1))

    def phi(self, x):
        _, rho = self._norm(x)
        return radial_profile(rho) / self.Z

    def dphi(self, x, k: int = 1):
        """Analytic partial derivative along coordinate ``k`` (1-based)."""
        x, rho = self._norm(x)
        dp = radial_profile_deriv(rho)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(rho > 0, dp * x[..., k - 1] / rho, 0.0)
        return out / self.Z

    def phi_eta(self, eta: float, x):
        if eta <= 0:
            raise ValueError("eta must be positive")
        return eta ** (-self.d) * self.phi(np.asarray(x, dtype=float) / eta)

    def dphi_eta(self, eta: float, x, k: int = 1):
        if eta <= 0:
            raise ValueError("eta must be positive")
        return eta ** (-self.d - 1) * self.dphi(np.asarray(x, dtype=float) / eta, k)

    def radial_density(self, rho):
        """Density of |X| for X ~ phi; integrates to one over (1/2, 1)."""
        rho = np.asarray(rho, dtype=float)
        return sphere_area(self.d) * rho ** (self.d - 1) * radial_profile(rho) / self.Z


def phi_eval(m: Mollifier, x):
    return m.phi(x)


def dphi_eval(m: Mollifier, x, k: int = 1):
    return m.dphi(x, k)


def phi_eta_eval(m: Mollifier, eta: float, x):
    return m.phi_eta(eta, x)


def dphi_eta_eval(m: Mollifier, eta: float, x, k: int = 1):
    return m.dphi_eta(eta, x, k)


def annulus_offsets(d: int, eta: float, h: float) -> np.ndarray:
    """Integer lattice offsets ``o`` with ``eta/2 < |o| h < eta``.

    These are the only offsets where ``phi_eta`` is non-zero.
    """
    m = int(np.ceil(eta / h))
    rng = np.arange(-m, m + 1)
    mesh = np.stack(np.meshgrid(*([rng] * d), indexing="ij"), axis=-1).reshape(-1, d)
    dist = np.sqrt(np.sum((mesh * h) ** 2, axis=1))
    keep = (dist > eta * _INNER) & (dist < eta * _OUTER)
    return mesh[keep]


def derivative_stencil(d: int, eta: float, h: float, k: int = 1, mode: str = "cell", subdiv: int = 8):
    """Lattice offsets ``o`` and weights approximating ``d_k phi_eta(o h)``.

    ``mode="point"`` samples the kernel at cell centres. ``mode="cell"``
    averages it over each lattice cell with ``subdiv^d`` midpoint nodes, which
    keeps the discrete first moment close to ``-1`` even when ``eta`` spans
    only a few cells. Offsets with zero weight are dropped.
    """
    m = Mollifier(d)
    if mode == "point":
        offs = annulus_offsets(d, eta, h)
        return offs, m.dphi_eta(eta, offs * h, k)
    if mode != "cell":
        raise ValueError(f"unknown stencil mode {mode!r}")
    reach = int(np.ceil(eta / h + 0.5 * np.sqrt(d)))
    rng = np.arange(-reach, reach + 1)
    offs = np.stack(np.meshgrid(*([rng] * d), indexing="ij"), axis=-1).reshape(-1, d)
    # only cells that can touch the annulus
    dist = np.sqrt(np.sum((offs * h) ** 2, axis=1))
    slack = 0.5 * np.sqrt(d) * h
    offs = offs[(dist > eta * _INNER - slack) & (dist < eta * _OUTER + slack)]
    sub = (np.arange(subdiv) + 0.5) / subdiv - 0.5
    nodes = np.stack(np.meshgrid(*([sub] * d), indexing="ij"), axis=-1).reshape(-1, d)
    acc = np.zeros(len(offs))
    for s in nodes:
        acc += m.dphi_eta(eta, (offs + s) * h, k)
    acc /= len(nodes)
    # the profile is below 1e-13 of its peak near both rims; drop those cells
    keep = np.abs(acc) > 1e-13 * np.max(np.abs(acc))
    offs, acc = offs[keep], acc[keep]
    # enforce exact oddness in coordinate k (rounding differs between mirror cells)
    mirror = offs.copy()
    mirror[:, k - 1] *= -1
    pos = {tuple(o): i for i, o in enumerate(offs)}
    j = np.array([pos[tuple(o)] for o in mirror])
    acc = 0.5 * (acc - acc[j])
    return offs, acc
