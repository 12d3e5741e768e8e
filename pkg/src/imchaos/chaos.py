"""Imaginary chaos of a sampled field, and the dyadic imaginary cascade.

The chaos is normalised with the exact pointwise variance of the regularised
field, ``mu(x) = exp(i beta Gamma(x) + beta^2 sigma^2(x) / 2)``, so that
``E mu(x) = 1`` at every point.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .grid import TestFunction
from .sampler import FieldSample, SeedStream, grad_pairing


@dataclass(frozen=True)
class ChaosParams:
    beta: float
    allow_out_of_range: bool = False

    def check(self, d: int):
        """Warn (or raise) when beta leaves the window ``0 < beta < sqrt(d)``."""
        if 0 < self.beta < np.sqrt(d):
            return
        msg = f"beta={self.beta} outside (0, sqrt({d}))"
        if not self.allow_out_of_range:
            raise ValueError(msg + "; set allow_out_of_range to experiment anyway")
        warnings.warn(msg, RuntimeWarning, stacklevel=3)


@dataclass
class ChaosSample:
    grid: object
    values: np.ndarray  # complex; leading replica axis when batched
    beta: float
    reg: object
    seed: object
    mask: np.ndarray | None = None

    @property
    def batched(self) -> bool:
        return self.values.ndim == self.grid.d + 1

    def conj(self) -> "ChaosSample":
        return ChaosSample(self.grid, np.conj(self.values), -self.beta, self.reg, self.seed, self.mask)


def chaos_values(values, variance, beta):
    return np.exp(1j * beta * values + 0.5 * beta**2 * variance)


def build_chaos(field: FieldSample, params: ChaosParams | float) -> ChaosSample:
    if not isinstance(params, ChaosParams):
        params = ChaosParams(float(params), allow_out_of_range=True)
    if params.beta != 0:
        params.check(field.grid.d)
    if field.variance is None:
        raise ValueError("field has no variance profile; cannot renormalise the chaos")
    mu = chaos_values(field.values, field.variance, params.beta)
    return ChaosSample(field.grid, mu, params.beta, field.reg, field.seed, field.mask)


# --------------------------------------------------------------------------
# dyadic cascade on [0, 1]


@dataclass(frozen=True)
class CascadeRealization:
    """Weights ``X[l][i]`` for the dyadic interval ``[i 2^-l, (i+1) 2^-l)``, l = 0..levels.

    ``M`` and ``A`` live on the ``2^levels`` finest cells.
    """

    levels: int
    beta: float
    sigma_c: float
    weights: tuple
    M: np.ndarray
    A: np.ndarray


def _assemble(weights, beta):
    M = np.exp(1j * beta * weights[0])
    A = weights[0].copy()
    for X in weights[1:]:
        M = np.repeat(M, 2) * np.exp(1j * beta * X)
        A = np.repeat(A, 2) + X
    return M, A


def _from_weights(levels, beta, sigma_c, weights) -> CascadeRealization:
    weights = tuple(np.asarray(w, dtype=float) for w in weights)
    M, A = _assemble(weights, beta)
    return CascadeRealization(levels, beta, sigma_c, weights, M, A)


def build_cascade(levels: int, sigma_c: float = 1.0, beta: float = 1.0, seed=0) -> CascadeRealization:
    if not 0 <= levels <= 24:
        raise ValueError("levels must lie in 0..24")
    stream = seed if isinstance(seed, SeedStream) else SeedStream(int(seed), 0)
    rng = stream.rng()
    weights = [sigma_c * rng.standard_normal(2**lev) for lev in range(levels + 1)]
    return _from_weights(levels, beta, sigma_c, weights)


def shift_cascade_weight(c: CascadeRealization, interval, amount: float) -> CascadeRealization:
    """New realization with ``X_I += amount`` for ``interval = (level, index)``."""
    level, index = interval
    if not (0 <= level <= c.levels and 0 <= index < 2**level):
        raise IndexError(f"no dyadic interval {interval} at depth {c.levels}")
    weights = [w.copy() for w in c.weights]
    weights[level][index] += amount
    return _from_weights(c.levels, c.beta, c.sigma_c, weights)


def cell_span(level: int, index: int, levels: int) -> slice:
    """Finest cells covered by the interval ``(level, index)``."""
    span = 2 ** (levels - level)
    return slice(index * span, (index + 1) * span)


# --------------------------------------------------------------------------
# reflection witness


@dataclass
class ReflectionReport:
    max_real_diff: float
    max_imag_sum: float
    pairing: np.ndarray | float  # one entry per replica when batched
    pairing_reflected: np.ndarray | float

    @property
    def antisymmetry_gap(self) -> float:
        return float(np.max(np.abs(np.asarray(self.pairing) + np.asarray(self.pairing_reflected))))


def reflection_witness(field: FieldSample, params, tf: TestFunction, k: int = 1) -> ReflectionReport:
    """``Re mu`` is blind to ``Gamma -> -Gamma`` while the gradient pairing flips sign."""
    mu = build_chaos(field, params).values
    mu_ref = build_chaos(field.negated(), params).values
    t = grad_pairing(field, tf, k)
    t_ref = grad_pairing(field.negated(), tf, k)
    fin = np.isfinite(mu)
    return ReflectionReport(
        max_real_diff=float(np.max(np.abs(mu.real[fin] - mu_ref.real[fin]))),
        max_imag_sum=float(np.max(np.abs(mu.imag[fin] + mu_ref.imag[fin]))),
        pairing=t,
        pairing_reflected=t_ref,
    )
