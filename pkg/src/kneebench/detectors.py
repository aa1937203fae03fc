"""Classical knee/elbow detectors and their preprocessing.

All detectors take the abscissae and ordinates of one (normalised) curve and
return a :class:`Detection`.  Single-knee methods (L, DFDT, AL, S) return one
index; Kneedle may return any number.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import core, kernels
from .errors import DegenerateInput, DegenerateSeries, NoConvergence

REFINE_CAP = 50


@dataclass
class Detection:
    indices: list
    scores: Optional[list] = None
    method: str = ""
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.indices = [int(i) for i in self.indices]
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ValueError("detection indices must be strictly increasing")


# ---------------------------------------------------------------------------
# smoothing

SMOOTHING_MODES = ("center_of_mass", "span", "half_life", "alpha")


@dataclass(frozen=True)
class SmoothingConfig:
    mode: str
    value: float

    def __post_init__(self):
        if self.mode not in SMOOTHING_MODES:
            raise ValueError(f"unknown smoothing mode {self.mode!r}")

    @property
    def alpha(self) -> float:
        v = self.value
        if self.mode == "alpha":
            return v
        if self.mode == "span":
            return 2.0 / (v + 1.0)
        if self.mode == "center_of_mass":
            return 1.0 / (1.0 + v)
        return 1.0 - 2.0 ** (-1.0 / v)


def _steps(lo, hi, step):
    n = int(round((hi - lo) / step)) + 1
    return [round(lo + k * step, 10) for k in range(n)]


def smoothing_grid() -> list:
    """The attempted EWM configurations, in a fixed order."""
    grid = [SmoothingConfig("center_of_mass", v) for v in _steps(0.2, 10.0, 0.2)]
    grid += [SmoothingConfig("span", v) for v in _steps(1.2, 10.0, 0.2)]
    grid += [SmoothingConfig("half_life", v) for v in _steps(0.2, 10.0, 0.2)]
    grid += [SmoothingConfig("alpha", v) for v in _steps(0.1, 0.9, 0.2)]
    return grid


TABLE2_GRID = tuple(smoothing_grid())


def ewm_smooth(ys, cfg: SmoothingConfig) -> np.ndarray:
    ys = np.asarray(ys, dtype=np.float64)
    return kernels.ewm_batch(ys, np.array([cfg.alpha]))[0]


def select_smooth_config(y_noisy, y_clean, grid=TABLE2_GRID) -> SmoothingConfig:
    """Grid entry whose smoothed curve has the lowest MSE against the clean one."""
    grid = list(grid)
    y_noisy = np.asarray(y_noisy, dtype=np.float64)
    smoothed = kernels.ewm_batch(y_noisy, np.array([g.alpha for g in grid]))
    mse = np.mean((smoothed - np.asarray(y_clean, dtype=np.float64)) ** 2, axis=1)
    return grid[int(np.argmin(mse))]


# ---------------------------------------------------------------------------
# Kneedle


@dataclass(frozen=True)
class KneedleConfig:
    zeta: float = 1.0
    transform: str = "projection"

    def __post_init__(self):
        if not self.zeta > 0:
            raise ValueError("zeta must be positive")
        if self.transform not in ("projection", "rotation"):
            raise ValueError(f"unknown transform {self.transform!r}")


def difference_curve(xs, ys, transform="projection"):
    """Abscissa and distance-to-diagonal curve used by Kneedle."""
    if transform == "projection":
        return xs, ys - xs
    r = math.sqrt(0.5)
    return (xs + ys) * r, (ys - xs) * r


def local_maxima(d) -> np.ndarray:
    d = np.asarray(d)
    i = np.arange(1, d.size - 1)
    return i[(d[i] > d[i - 1]) & (d[i] >= d[i + 1])]


def kneedle(xs, ys, cfg: KneedleConfig = KneedleConfig(), smooth: Optional[SmoothingConfig] = None) -> Detection:
    """Kneedle on a knee-oriented (concave increasing) curve.

    Each local maximum of the difference curve gets the threshold
    ``d_i - zeta * mean(step of the abscissa)``; it is a knee when the curve
    drops below that threshold before the next local maximum.
    """
    ys = np.asarray(ys, dtype=np.float64)
    if smooth is not None:
        ys = ewm_smooth(ys, smooth)
    conf = {"zeta": cfg.zeta, "transform": cfg.transform,
            "smoothing": None if smooth is None else (smooth.mode, smooth.value)}
    try:
        n = core.normalize(core.Series(xs, ys))
    except DegenerateSeries:
        return Detection([], [], "kneedle", conf)
    ax, d = difference_curve(n.xs, n.ys, cfg.transform)
    maxima = local_maxima(d)
    if maxima.size == 0:
        return Detection([], [], "kneedle", conf)
    thresholds = d[maxima] - cfg.zeta * np.mean(np.diff(ax))
    hit = kernels.kneedle_scan(d, maxima, thresholds)
    knees = maxima[hit]
    return Detection(knees.tolist(), d[knees].tolist(), "kneedle", conf)


# ---------------------------------------------------------------------------
# line-fit methods


def _fit_code(fit):
    try:
        return kernels.FIT_CODES[fit]
    except KeyError:
        raise ValueError(f"unknown fit {fit!r}; expected one of {sorted(kernels.FIT_CODES)}") from None


def _prep(xs, ys, min_len):
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    if xs.size < min_len:
        raise DegenerateInput(f"need at least {min_len} points, got {xs.size}")
    return xs, ys


def two_line_rmse(xs, ys, fit="best_fit"):
    """Size-weighted RMSE of the two-line fit for each split index 1..L-2.

    Returns ``(rmse, left_slope, right_slope)``; entry ``k`` belongs to split
    index ``k + 1``.
    """
    L = xs.size
    sl, sr, ml, mr = kernels.two_line_fits(xs, ys, _fit_code(fit))
    c = np.arange(1, L - 1)
    nl, nr = c + 1.0, L - c
    rmse = (nl * np.sqrt(sl / nl) + nr * np.sqrt(sr / nr)) / L
    return rmse, ml, mr


def l_method(xs, ys) -> Detection:
    xs, ys = _prep(xs, ys, 4)
    rmse, _, _ = two_line_rmse(xs, ys, "best_fit")
    k = int(np.argmin(rmse))
    return Detection([k + 1], [float(rmse[k])], "l")


def _minmax(v):
    span = v.max() - v.min()
    if span == 0:
        return np.zeros_like(v)
    return (v - v.min()) / span


def angle_score(left_slope, right_slope):
    theta = np.degrees(np.abs(np.arctan(left_slope) - np.arctan(right_slope)))
    return (90.0 - theta) ** 2


def _al_once(xs, ys, fit):
    rmse, ml, mr = two_line_rmse(xs, ys, fit)
    score = _minmax(rmse) + _minmax(angle_score(ml, mr))
    k = int(np.argmin(score))
    return k + 1, float(score[k])


def _s_once(xs, ys, fit, stride):
    L = xs.size
    cand = np.arange(1, L - 1, stride, dtype=np.int64)
    if cand[-1] != L - 2:
        cand = np.append(cand, L - 2)
    scores = kernels.three_line_scores(xs, ys, cand, _fit_code(fit))
    p, q = np.unravel_index(int(np.argmin(scores)), scores.shape)
    return int(cand[p]), int(cand[q]), float(scores[p, q])


def _tail_cut(xs, ys, once, min_len):
    """Re-run ``once`` on the prefix up to twice the last answer until it repeats."""
    L = xs.size
    cutoff = L
    prev = None
    for _ in range(REFINE_CAP):
        k = once(xs[:cutoff], ys[:cutoff])
        if k == prev:
            return k
        prev = k
        cutoff = min(L, max(2 * k + 1, min_len))
    raise NoConvergence(f"tail-cutting refinement did not settle in {REFINE_CAP} iterations")


def al_method(xs, ys, fit="linear_fit", refine=False) -> Detection:
    xs, ys = _prep(xs, ys, 4)
    if refine:
        k = _tail_cut(xs, ys, lambda a, b: _al_once(a, b, fit)[0], min_len=20)
        return Detection([k], None, "al", {"fit": fit, "refine": True})
    k, score = _al_once(xs, ys, fit)
    return Detection([k], [score], "al", {"fit": fit, "refine": False})


def s_method(xs, ys, fit="linear_fit", stride=None, refine=False, report="head") -> Detection:
    """Three-line fit; reports one junction of the best (head, middle, tail) split.

    ``report="head"`` returns the head/middle junction, ``"tail"`` the
    middle/tail junction.  ``stride`` defaults to ``max(1, L // 128)``.
    """
    xs, ys = _prep(xs, ys, 6)
    if stride is None:
        stride = max(1, xs.size // 128)
    pick = 0 if report == "head" else 1

    def once(a, b):
        return _s_once(a, b, fit, stride)[pick]

    conf = {"fit": fit, "stride": stride, "refine": refine, "report": report}
    if refine:
        k = _tail_cut(xs, ys, once, min_len=20)
        return Detection([k], None, "s", conf)
    i, j, score = _s_once(xs, ys, fit, stride)
    conf.update(i=i, j=j)
    return Detection([(i, j)[pick]], [score], "s", conf)


# ---------------------------------------------------------------------------
# DFDT


def isodata_threshold(values, tol=1e-9, max_iter=500) -> float:
    """Iterative mean-of-group-means threshold."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise DegenerateInput("need at least two values")
    if np.all(v == v[0]):
        raise DegenerateInput("all values are equal")
    t = float(v.mean())
    for _ in range(max_iter):
        low, high = v[v <= t], v[v > t]
        t_new = 0.5 * (low.mean() + high.mean())
        if abs(t_new - t) < tol:
            return float(t_new)
        t = float(t_new)
    return t


def _dfdt_once(xs, ys):
    d1, _ = core.derivatives(xs, ys)
    if np.ptp(d1) <= 1e-12 * max(1.0, float(np.abs(d1).max())):
        # constant slope: every derivative equals the threshold
        return 1
    t = isodata_threshold(d1)
    return int(np.argmin(np.abs(d1 - t)))


def dfdt(xs, ys, refine=False) -> Detection:
    xs, ys = _prep(xs, ys, 4)
    k = _dfdt_once(xs, ys)
    if not refine:
        return Detection([k], None, "dfdt", {"refine": False})
    prev = k
    for _ in range(REFINE_CAP):
        start = prev // 2
        if xs.size - start < 4:
            break
        k = start + _dfdt_once(xs[start:], ys[start:])
        if k == prev:
            return Detection([k], None, "dfdt", {"refine": True})
        prev = k
    raise NoConvergence(f"DFDT refinement did not settle in {REFINE_CAP} iterations")


def concavity_preprocess(xs, ys):
    """Map a knee-shaped curve to the elbow orientation ``(x, 1 - y)``."""
    return np.asarray(xs, dtype=np.float64), 1.0 - np.asarray(ys, dtype=np.float64)
