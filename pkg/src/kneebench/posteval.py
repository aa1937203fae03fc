"""Turning scores into knees, and scoring knees against labels.

:func:`nms` converts a per-index probability vector into a sparse set of
detections.  :func:`f1_at_tolerance` compares detections with ground truth
allowing an index error ``E``.  :func:`evaluate` runs a method over a dataset
and collects an :class:`EvalReport`, which :func:`write_report` stores as CSV
or as an SVG chart of F1 against tolerance.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from . import detectors as det
from . import kernels
from . import unetconv
from .errors import KneeBenchError

DEFAULT_TOLERANCES = (1, 2, 3, 4, 5, 6)
CSV_COLUMNS = ("method", "test_set", "tolerance", "mean_f1", "n", "tp", "fp", "fn", "failures")


@dataclass(frozen=True)
class NmsConfig:
    delta: float = 0.5
    radius: int = 10

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.radius < 0:
            raise ValueError(f"radius must be non-negative, got {self.radius}")


def nms(probs, cfg: NmsConfig = NmsConfig()) -> List[int]:
    """Greedy non-maximum suppression.

    Indices below ``delta`` are dropped.  The highest survivor is kept (ties go
    to the smaller index) and every survivor within ``radius`` of it is
    removed; repeat until nothing is left.  Returns sorted indices.
    """
    p = np.ascontiguousarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("nms expects a 1-D probability vector")
    return kernels.nms(p, float(cfg.delta), int(cfg.radius)).tolist()


# ---------------------------------------------------------------------------
# F1 with an allowable index error


def match_counts(pred: Sequence[int], truth: Sequence[int], tolerance: int):
    """One-to-one matching within ``tolerance``; returns ``(tp, fp, fn)``.

    Both lists are walked in sorted order and each prediction takes the
    earliest unmatched truth it can reach.  For equal-width windows on a line
    this greedy pass gives a maximum matching.
    """
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    p, t = sorted(pred), sorted(truth)
    i = j = tp = 0
    while i < len(p) and j < len(t):
        if t[j] < p[i] - tolerance:
            j += 1
        elif p[i] < t[j] - tolerance:
            i += 1
        else:
            tp += 1
            i += 1
            j += 1
    return tp, len(p) - tp, len(t) - tp


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def f1_at_tolerance(pred: Sequence[int], truth: Sequence[int], tolerance: int) -> float:
    """F1 where a prediction within ``tolerance`` indices of a knee is a hit.

    Examples
    --------
    >>> f1_at_tolerance([3], [5, 7], 2)
    0.6666666666666666
    >>> f1_at_tolerance([], [], 0)
    1.0
    """
    return f1_from_counts(*match_counts(pred, truth, tolerance))


# ---------------------------------------------------------------------------
# method handles
#
# A method has a ``name`` and ``predict(samples)`` returning one entry per
# sample: a list of indices, or None when the method failed on that sample.


SMOOTH_AUTO = "auto"


def _smoothing_for(sample, smoothing):
    if smoothing is None or smoothing == "none":
        return None
    if smoothing == SMOOTH_AUTO:
        return det.select_smooth_config(sample.y_noisy, sample.y_clean)
    return smoothing


@dataclass(frozen=True)
class ClassicalMethod:
    """One of the classical detectors with its evaluation preprocessing.

    ``smoothing`` is ``"auto"`` (the grid entry closest to the clean curve, as
    on synthetic data), ``"none"``, or a fixed :class:`SmoothingConfig`.
    DFDT and the AL-method see the concavity-translated curve.
    """

    method: str
    zeta: float = 0.01
    transform: str = "projection"
    fit: str = "linear_fit"
    refine: bool = False
    stride: Optional[int] = None
    smoothing: object = SMOOTH_AUTO
    threads: int = 1

    NAMES = ("kneedle", "l", "dfdt", "al", "s")

    def __post_init__(self):
        if self.method not in self.NAMES:
            raise ValueError(f"unknown method {self.method!r}; expected one of {self.NAMES}")

    @property
    def name(self) -> str:
        return self.method

    def detect(self, sample) -> List[int]:
        cfg = _smoothing_for(sample, self.smoothing)
        x = np.asarray(sample.x, dtype=np.float64)
        if self.method == "kneedle":
            kcfg = det.KneedleConfig(self.zeta, self.transform)
            return det.kneedle(x, sample.y_noisy, kcfg, smooth=cfg).indices
        y = np.asarray(sample.y_noisy, dtype=np.float64)
        if cfg is not None:
            y = det.ewm_smooth(y, cfg)
        if self.method == "l":
            return det.l_method(x, y).indices
        if self.method == "s":
            return det.s_method(x, y, fit=self.fit, stride=self.stride, refine=self.refine).indices
        x, y = det.concavity_preprocess(x, y)
        if self.method == "dfdt":
            return det.dfdt(x, y, refine=self.refine).indices
        return det.al_method(x, y, fit=self.fit, refine=self.refine).indices

    def _safe(self, sample):
        try:
            return list(self.detect(sample))
        except KneeBenchError:
            return None

    def predict(self, samples) -> List[Optional[List[int]]]:
        if self.threads > 1 and len(samples) > 1:
            with ProcessPoolExecutor(self.threads) as pool:
                return list(pool.map(self._safe, samples, chunksize=max(1, len(samples) // (4 * self.threads))))
        return [self._safe(s) for s in samples]


@dataclass
class UnetMethod:
    """Trained network followed by NMS."""

    model: unetconv.Model
    nms_cfg: NmsConfig = NmsConfig()
    batch_size: int = 64
    name: str = "unet"

    def predict(self, samples) -> List[Optional[List[int]]]:
        L_model = self.model.config.length
        out = []
        for start in range(0, len(samples), self.batch_size):
            chunk = samples[start:start + self.batch_size]
            probs = unetconv.predict(self.model, unetconv.encode_samples(chunk, L_model))
            for s, p in zip(chunk, probs):
                idx = nms(p, self.nms_cfg)
                if s.L != L_model:
                    scale = (s.L - 1) / (L_model - 1)
                    idx = sorted({int(round(i * scale)) for i in idx})
                out.append(idx)
        return out


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalRow:
    method: str
    test_set: str
    tolerance: int
    mean_f1: float
    n: int
    tp: int
    fp: int
    fn: int
    failures: int


@dataclass
class EvalReport:
    rows: List[EvalRow] = field(default_factory=list)
    meta: Dict[str, object] = field(default_factory=dict)

    def extend(self, other: "EvalReport"):
        self.rows.extend(other.rows)
        self.meta.update(other.meta)
        return self

    def lookup(self, method: str, test_set: str, tolerance: int) -> EvalRow:
        for r in self.rows:
            if (r.method, r.test_set, r.tolerance) == (method, test_set, tolerance):
                return r
        raise KeyError((method, test_set, tolerance))


def score_predictions(preds, truths, tolerances, method="", test_set="") -> EvalReport:
    """Aggregate per-sample predictions into report rows.

    A ``None`` prediction is a failed run: it scores F1 = 0 and counts every
    true knee as missed.
    """
    failures = sum(p is None for p in preds)
    rows = []
    for E in tolerances:
        f1s, tp, fp, fn = [], 0, 0, 0
        for p, t in zip(preds, truths):
            if p is None:
                f1s.append(0.0)
                fn += len(t)
                continue
            a, b, c = match_counts(p, t, E)
            tp, fp, fn = tp + a, fp + b, fn + c
            f1s.append(f1_from_counts(a, b, c))
        mean = float(np.mean(f1s)) if f1s else 0.0
        rows.append(EvalRow(method, test_set, int(E), mean, len(preds), tp, fp, fn, failures))
    return EvalReport(rows, {f"failures/{method}/{test_set}": failures})


def evaluate(method, dataset, tolerances=DEFAULT_TOLERANCES, test_set: Optional[str] = None) -> EvalReport:
    """Mean F1 of ``method`` on ``dataset`` at each tolerance."""
    samples = dataset.samples
    name = test_set if test_set is not None else dataset.split
    preds = method.predict(samples)
    return score_predictions(preds, [s.knee_indices for s in samples], tolerances, method.name, name)


def zeta_sweep(dataset, zetas, transform="projection", tolerances=DEFAULT_TOLERANCES,
               smoothing=SMOOTH_AUTO, threads: int = 1):
    """Pick the Kneedle sensitivity with the best tolerance-averaged F1.

    Returns ``(best_zeta, table)`` where ``table`` maps each ζ to its score.
    Ties go to the smallest ζ.
    """
    zetas = sorted(float(z) for z in zetas)
    if not zetas:
        raise ValueError("zeta grid is empty")
    samples = dataset.samples
    if smoothing == SMOOTH_AUTO:
        # choose each sample's smoothing once rather than once per zeta
        chosen = [det.select_smooth_config(s.y_noisy, s.y_clean) for s in samples]
    else:
        chosen = [smoothing] * len(samples)
    table = {}
    for z in zetas:
        cfg = det.KneedleConfig(z, transform)
        preds = [det.kneedle(s.x, s.y_noisy, cfg, smooth=c).indices for s, c in zip(samples, chosen)]
        rep = score_predictions(preds, [s.knee_indices for s in samples], tolerances)
        table[z] = float(np.mean([r.mean_f1 for r in rep.rows]))
    best = zetas[0]
    for z in zetas[1:]:
        if table[z] > table[best]:
            best = z
    return best, table


# ---------------------------------------------------------------------------
# report files


def _csv_cell(v):
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def write_report(report: EvalReport, path, fmt: Optional[str] = None) -> None:
    """Write ``report`` as ``csv`` or ``svg`` (picked from the suffix if unset)."""
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    if fmt == "csv":
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in report.rows:
                w.writerow([_csv_cell(getattr(r, c)) for c in CSV_COLUMNS])
    elif fmt == "svg":
        path.write_text(render_svg(report))
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def read_report(path) -> EvalReport:
    rows = []
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(EvalRow(rec["method"], rec["test_set"], int(rec["tolerance"]), float(rec["mean_f1"]),
                                int(rec["n"]), int(rec["tp"]), int(rec["fp"]), int(rec["fn"]),
                                int(rec["failures"])))
    return EvalReport(rows)


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def render_svg(report: EvalReport, width: int = 960, height: int = 480) -> str:
    """One F1-versus-tolerance chart per test set, stacked vertically."""
    sets = list(dict.fromkeys(r.test_set for r in report.rows))
    methods = list(dict.fromkeys(r.method for r in report.rows))
    left, right, top, bottom = 70, 160, 40, 50
    pw, ph = width - left - right, height - top - bottom
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height * max(1, len(sets))}">']
    for k, ts in enumerate(sets):
        oy = k * height
        rows = [r for r in report.rows if r.test_set == ts]
        tols = sorted({r.tolerance for r in rows})
        t0, t1 = tols[0], tols[-1]

        def px(t):
            return left + (pw * (t - t0) / (t1 - t0) if t1 > t0 else pw / 2)

        def py(f):
            return oy + top + ph * (1.0 - f)

        parts.append(f'<g id="chart-{escape(ts)}">')
        parts.append(f'<text x="{width / 2}" y="{oy + 24}" text-anchor="middle" font-size="16">'
                     f'{escape(ts)}</text>')
        parts.append(f'<rect x="{left}" y="{oy + top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>')
        for f in (0.0, 0.25, 0.5, 0.75, 1.0):
            parts.append(f'<text x="{left - 8}" y="{py(f) + 4:.1f}" text-anchor="end" font-size="11">{f:.2f}</text>')
        for t in tols:
            parts.append(f'<text x="{px(t):.1f}" y="{oy + top + ph + 18}" text-anchor="middle" '
                         f'font-size="11">{t}</text>')
        parts.append(f'<text x="{left + pw / 2}" y="{oy + height - 8}" text-anchor="middle" '
                     f'font-size="12">allowable index error</text>')
        for m_i, m in enumerate(methods):
            pts = sorted((r.tolerance, r.mean_f1) for r in rows if r.method == m)
            if not pts:
                continue
            colour = PALETTE[m_i % len(PALETTE)]
            coords = " ".join(f"{px(t):.1f},{py(f):.1f}" for t, f in pts)
            parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="2" points="{coords}"/>')
            ly = oy + top + 16 * (m_i + 1)
            parts.append(f'<text x="{left + pw + 12}" y="{ly}" fill="{colour}" font-size="12">{escape(m)}</text>')
        parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def trial_summary(reports: Sequence[EvalReport]):
    """Mean and standard deviation of mean F1 across repeated trials.

    Returns rows ``(method, test_set, tolerance, mean, std, trials)``.
    """
    acc: Dict[tuple, list] = {}
    for rep in reports:
        for r in rep.rows:
            acc.setdefault((r.method, r.test_set, r.tolerance), []).append(r.mean_f1)
    out = []
    for key, vals in acc.items():
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out.append((*key, float(np.mean(vals)), std if math.isfinite(std) else 0.0, len(vals)))
    return out
