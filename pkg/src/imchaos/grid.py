"""Uniform cell-centred lattices, bump test functions and Riemann quadrature."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class Grid:
    """Cell-centred lattice on the box [0, L]^d.

    Arrays living on the grid use ``indexing="ij"``, so ``values[i, j]`` sits at
    ``((i + 1/2) h, (j + 1/2) h)``.
    """

    d: int
    n: int
    L: float = 1.0

    @property
    def h(self) -> float:
        return self.L / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def size(self) -> int:
        return self.n**self.d

    @cached_property
    def axis(self) -> np.ndarray:
        return (np.arange(self.n) + 0.5) * self.h

    @cached_property
    def points(self) -> np.ndarray:
        """Coordinates with shape ``shape + (d,)``."""
        mesh = np.meshgrid(*([self.axis] * self.d), indexing="ij")
        return np.stack(mesh, axis=-1)

    def index_of(self, x) -> tuple[int, ...]:
        """Index of the cell containing ``x``."""
        idx = np.floor(np.asarray(x, dtype=float) / self.h).astype(int)
        return tuple(int(i) for i in np.clip(idx, 0, self.n - 1))

    def __repr__(self):
        return f"Grid(d={self.d}, n={self.n}, L={self.L})"


def build_grid(d: int, n: int, L: float = 1.0) -> Grid:
    if d not in (2, 3):
        raise ValueError(f"unsupported dimension d={d}; only d in {{2, 3}}")
    if n < 8:
        raise ValueError(f"n={n} too coarse, need at least 8 cells per side")
    if not L > 0:
        raise ValueError("side length must be positive")
    return Grid(d=int(d), n=int(n), L=float(L))


@dataclass(frozen=True)
class TestFunction:
    """Smooth bump ``a * exp(-1 / (1 - |x-c|^2 / r^2))`` supported on B(c, r)."""

    __test__ = False  # not a pytest class

    center: tuple
    radius: float
    amplitude: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    @property
    def d(self) -> int:
        return len(self.center)

    def _s(self, x):
        x = np.asarray(x, dtype=float)
        diff = x - np.asarray(self.center)
        return diff, np.sum(diff**2, axis=-1) / self.radius**2

    def __call__(self, x):
        _, s = self._s(x)
        inside = s < 1.0
        out = np.zeros(np.shape(s))
        si = s[inside] if np.ndim(s) else s
        val = self.amplitude * np.exp(-1.0 / (1.0 - si))
        if np.ndim(s):
            out[inside] = val
            return out
        return float(val) if inside else 0.0

    def grad(self, x, k: int):
        """Closed-form partial derivative in coordinate ``k`` (1-based)."""
        if not 1 <= k <= self.d:
            raise ValueError(f"coordinate k={k} out of range 1..{self.d}")
        diff, s = self._s(x)
        inside = s < 1.0
        f = self(x)
        comp = diff[..., k - 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            g = -2.0 * f * comp / (self.radius**2 * (1.0 - s) ** 2)
        return np.where(inside, g, 0.0) if np.ndim(s) else (float(g) if inside else 0.0)

    def boundary_distance(self, grid: Grid) -> float:
        """Distance from the closed support to the boundary of the grid's box."""
        c = np.asarray(self.center)
        return float(min(np.min(c), np.min(grid.L - c)) - self.radius)

    def on_grid(self, grid: Grid) -> np.ndarray:
        return self(grid.points)

    def grad_on_grid(self, grid: Grid, k: int) -> np.ndarray:
        return self.grad(grid.points, k)


def bump_eval(tf: TestFunction, x) -> float:
    return tf(x)


def bump_grad_eval(tf: TestFunction, x, k: int) -> float:
    return tf.grad(x, k)


def quadrature(values, grid: Grid):
    """Riemann sum ``h^d * sum(values)`` over the trailing grid axes.

    Leading axes (e.g. a replica axis) are kept.
    """
    values = np.asarray(values)
    axes = tuple(range(values.ndim - grid.d, values.ndim))
    return values.sum(axis=axes) * grid.h**grid.d
