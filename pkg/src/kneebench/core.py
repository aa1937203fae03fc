"""Unit-square normalisation, signed curvature and orientation transforms."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateSeries, NonMonotone


@dataclass(frozen=True)
class Series:
    xs: np.ndarray
    ys: np.ndarray

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=np.float64)
        ys = np.asarray(self.ys, dtype=np.float64)
        if xs.ndim != 1 or xs.shape != ys.shape:
            raise ValueError(f"xs and ys must be 1-D of equal length, got {xs.shape} and {ys.shape}")
        if xs.size < 3:
            raise ValueError("a series needs at least 3 points")
        if np.any(np.diff(xs) <= 0):
            raise DegenerateSeries("xs must be strictly increasing")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    def __len__(self):
        return self.xs.size


@dataclass(frozen=True)
class NormalizationParams:
    """Affine maps ``x = a_x * x~ + b_x`` and ``y = a_y * y~ + b_y``."""

    a_x: float
    b_x: float
    a_y: float
    b_y: float

    def __post_init__(self):
        if not (self.a_x > 0 and self.a_y > 0):
            raise DegenerateSeries(f"scale factors must be positive, got a_x={self.a_x}, a_y={self.a_y}")


IDENTITY = NormalizationParams(1.0, 0.0, 1.0, 0.0)


@dataclass(frozen=True)
class NormalizedSeries:
    xs: np.ndarray
    ys: np.ndarray
    params: NormalizationParams = IDENTITY

    def __post_init__(self):
        object.__setattr__(self, "xs", np.asarray(self.xs, dtype=np.float64))
        object.__setattr__(self, "ys", np.asarray(self.ys, dtype=np.float64))
        if self.xs.shape != self.ys.shape:
            raise ValueError("xs and ys must have equal length")

    def __len__(self):
        return self.xs.size


@dataclass(frozen=True)
class CurvatureProfile:
    values: np.ndarray
    valid_range: tuple[int, int]  # inclusive index bounds

    @property
    def valid(self) -> np.ndarray:
        lo, hi = self.valid_range
        return self.values[lo:hi + 1]

    def argmin(self) -> int:
        """Index of the minimum curvature on the valid range (ties -> smallest)."""
        lo, _ = self.valid_range
        return lo + int(np.argmin(self.valid))


def normalize(s: Series) -> NormalizedSeries:
    xs, ys = s.xs, s.ys
    x_min, x_max = xs.min(), xs.max()
    y_min, y_max = ys.min(), ys.max()
    if x_max == x_min:
        raise DegenerateSeries("x range is empty")
    if y_max == y_min:
        raise DegenerateSeries("series is flat: y_max == y_min")
    params = NormalizationParams(float(x_max - x_min), float(x_min), float(y_max - y_min), float(y_min))
    return NormalizedSeries((xs - x_min) / (x_max - x_min), (ys - y_min) / (y_max - y_min), params)


def denormalize(n: NormalizedSeries) -> Series:
    p = n.params
    return Series(p.a_x * n.xs + p.b_x, p.a_y * n.ys + p.b_y)


def analytic_curvature(first_deriv: float, second_deriv: float) -> float:
    return second_deriv / (1.0 + first_deriv * first_deriv) ** 1.5


def normalized_analytic_curvature(
    first_deriv_of_f: Callable,
    second_deriv_of_f: Callable,
    params: NormalizationParams,
    x_tilde,
):
    """Curvature of the unit-square image of ``f`` at normalised abscissa ``x_tilde``.

    The derivatives of ``f`` are evaluated at the raw abscissa
    ``a_x * x_tilde + b_x`` and rescaled by the chain rule, so
    ``y~' = (a_x / a_y) f'`` and ``y~'' = (a_x**2 / a_y) f''``.
    Works elementwise on arrays.
    """
    x = params.a_x * np.asarray(x_tilde, dtype=np.float64) + params.b_x
    d1 = params.a_x / params.a_y * first_deriv_of_f(x)
    d2 = params.a_x ** 2 / params.a_y * second_deriv_of_f(x)
    return d2 / (1.0 + d1 * d1) ** 1.5


def derivatives(xs, ys):
    """Three-point Lagrange estimates of y' and y'' on a possibly non-uniform grid.

    Interior points use the centred stencil; the two end points use the
    one-sided stencil through their two nearest neighbours.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.size < 3:
        raise ValueError("need at least 3 points")
    h = np.diff(xs)
    if np.any(h == 0):
        raise DegenerateSeries("repeated abscissa")
    h1, h2 = h[:-1], h[1:]
    y0, y1, y2 = ys[:-2], ys[1:-1], ys[2:]
    s = h1 + h2

    d1 = np.empty_like(ys)
    d2 = np.empty_like(ys)
    d1[1:-1] = -h2 / (h1 * s) * y0 + (h2 - h1) / (h1 * h2) * y1 + h1 / (h2 * s) * y2
    d2[1:-1] = 2.0 * (y0 / (h1 * s) - y1 / (h1 * h2) + y2 / (h2 * s))

    a, b = h[0], h[1]
    d1[0] = -(2 * a + b) / (a * (a + b)) * ys[0] + (a + b) / (a * b) * ys[1] - a / (b * (a + b)) * ys[2]
    d2[0] = d2[1]
    a, b = h[-2], h[-1]
    d1[-1] = b / (a * (a + b)) * ys[-3] - (a + b) / (a * b) * ys[-2] + (a + 2 * b) / (b * (a + b)) * ys[-1]
    d2[-1] = d2[-2]
    return d1, d2


def curvature(xs, ys) -> CurvatureProfile:
    """Signed curvature ``y'' / (1 + y'^2)^(3/2)`` of raw discrete points."""
    d1, d2 = derivatives(xs, ys)
    return CurvatureProfile(d2 / (1.0 + d1 * d1) ** 1.5, (1, len(d1) - 2))


def discrete_curvature(n: NormalizedSeries) -> CurvatureProfile:
    return curvature(n.xs, n.ys)


def flip_concavity(s: Series) -> Series:
    """Reflect through the centre of the bounding box, turning an elbow into a knee.

    Coordinates map to ``x_max - x`` and ``y_max - y`` shifted back by the
    minima, which keeps the range and makes the map its own inverse.
    """
    xs = s.xs.max() + s.xs.min() - s.xs
    ys = s.ys.max() + s.ys.min() - s.ys
    return Series(xs[::-1], ys[::-1])


def flip_antidiagonal(n: NormalizedSeries) -> NormalizedSeries:
    """Mirror a monotone unit-square sample across the line ``y = 1 - x``."""
    if np.any(np.diff(n.ys) < 0):
        raise NonMonotone("anti-diagonal flip needs a non-decreasing sample")
    return NormalizedSeries((1.0 - n.ys)[::-1], (1.0 - n.xs)[::-1], n.params)
