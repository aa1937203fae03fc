"""Inner loops of the classical detectors and of NMS.

Every kernel has a numba loop (``*_nb``) and a numpy formulation (``*_np``).
The public name is bound to one of them according to :mod:`kneebench._accel`.
Both must return identical results; ``tests/test_kernels.py`` checks that and
``benchmarks/bench_kernels.py`` times them.
"""

import numpy as np

from ._accel import USE_NUMBA, njit

BEST_FIT = 0
LINEAR_FIT = 1

FIT_CODES = {"best_fit": BEST_FIT, "linear_fit": LINEAR_FIT}


def prefix_sums(x, y):
    """Stacked prefix sums of x, y, x², xy, y² with a leading zero row."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = np.zeros((5, x.size + 1))
    np.cumsum(x, out=out[0, 1:])
    np.cumsum(y, out=out[1, 1:])
    np.cumsum(x * x, out=out[2, 1:])
    np.cumsum(x * y, out=out[3, 1:])
    np.cumsum(y * y, out=out[4, 1:])
    return out


# ---------------------------------------------------------------------------
# exponentially weighted mean (adjust=True form), many decay rates at once


@njit
def ewm_batch_nb(values, alphas):
    n = values.shape[0]
    out = np.empty((alphas.shape[0], n))
    for a in range(alphas.shape[0]):
        keep = 1.0 - alphas[a]
        num = 0.0
        den = 0.0
        for t in range(n):
            num = values[t] + keep * num
            den = 1.0 + keep * den
            out[a, t] = num / den
    return out


def ewm_batch_np(values, alphas):
    values = np.asarray(values, dtype=np.float64)
    keep = 1.0 - np.asarray(alphas, dtype=np.float64)
    out = np.empty((keep.size, values.size))
    num = np.zeros(keep.size)
    den = np.zeros(keep.size)
    for t in range(values.size):
        num = values[t] + keep * num
        den = 1.0 + keep * den
        out[:, t] = num / den
    return out


# ---------------------------------------------------------------------------
# straight-line fits on index ranges [a, b] (inclusive) from prefix sums


@njit
def _segment_nb(pre, x, y, a, b, fit):
    n = b - a + 1.0
    sx = pre[0, b + 1] - pre[0, a]
    sy = pre[1, b + 1] - pre[1, a]
    sxx = pre[2, b + 1] - pre[2, a]
    sxy = pre[3, b + 1] - pre[3, a]
    syy = pre[4, b + 1] - pre[4, a]
    if fit == BEST_FIT:
        cxx = sxx - sx * sx / n
        cxy = sxy - sx * sy / n
        cyy = syy - sy * sy / n
        if cxx <= 0.0:
            return 0.0, 0.0
        slope = cxy / cxx
        sse = cyy - cxy * slope
    else:
        xa = x[a]
        ya = y[a]
        slope = (y[b] - ya) / (x[b] - xa)
        dyy = syy - 2.0 * ya * sy + n * ya * ya
        dxy = sxy - xa * sy - ya * sx + n * xa * ya
        dxx = sxx - 2.0 * xa * sx + n * xa * xa
        sse = dyy - 2.0 * slope * dxy + slope * slope * dxx
    if sse < 0.0:
        sse = 0.0
    return sse, slope


def _segment_np(pre, x, y, a, b, fit):
    a = np.asarray(a)
    b = np.asarray(b)
    n = b - a + 1.0
    sx = pre[0, b + 1] - pre[0, a]
    sy = pre[1, b + 1] - pre[1, a]
    sxx = pre[2, b + 1] - pre[2, a]
    sxy = pre[3, b + 1] - pre[3, a]
    syy = pre[4, b + 1] - pre[4, a]
    with np.errstate(divide="ignore", invalid="ignore"):
        if fit == BEST_FIT:
            cxx = sxx - sx * sx / n
            cxy = sxy - sx * sy / n
            cyy = syy - sy * sy / n
            slope = np.where(cxx > 0.0, cxy / cxx, 0.0)
            sse = np.where(cxx > 0.0, cyy - cxy * slope, 0.0)
        else:
            xa, ya = x[a], y[a]
            slope = (y[b] - ya) / (x[b] - xa)
            dyy = syy - 2.0 * ya * sy + n * ya * ya
            dxy = sxy - xa * sy - ya * sx + n * xa * ya
            dxx = sxx - 2.0 * xa * sx + n * xa * xa
            sse = dyy - 2.0 * slope * dxy + slope * slope * dxx
    return np.maximum(sse, 0.0), slope


@njit
def two_line_fits_nb(x, y, fit):
    """Left/right SSE and slopes for every split index c in 1..L-2."""
    pre = prefix_sums_nb(x, y)
    n = x.shape[0]
    m = n - 2
    out = np.empty((4, m))
    for k in range(m):
        c = k + 1
        sl, ml = _segment_nb(pre, x, y, 0, c, fit)
        sr, mr = _segment_nb(pre, x, y, c, n - 1, fit)
        out[0, k] = sl
        out[1, k] = sr
        out[2, k] = ml
        out[3, k] = mr
    return out


def two_line_fits_np(x, y, fit):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pre = prefix_sums(x, y)
    n = x.size
    c = np.arange(1, n - 1)
    sl, ml = _segment_np(pre, x, y, np.zeros_like(c), c, fit)
    sr, mr = _segment_np(pre, x, y, c, np.full_like(c, n - 1), fit)
    return np.vstack([sl, sr, ml, mr])


@njit
def prefix_sums_nb(x, y):
    n = x.shape[0]
    out = np.zeros((5, n + 1))
    for t in range(n):
        out[0, t + 1] = out[0, t] + x[t]
        out[1, t + 1] = out[1, t] + y[t]
        out[2, t + 1] = out[2, t] + x[t] * x[t]
        out[3, t + 1] = out[3, t] + x[t] * y[t]
        out[4, t + 1] = out[4, t] + y[t] * y[t]
    return out


@njit
def three_line_scores_nb(x, y, cand, fit):
    """Weighted RMSE of the head/middle/tail fit for every candidate pair.

    ``scores[p, q]`` belongs to breakpoints ``(cand[p], cand[q])``; pairs with
    ``p >= q`` are ``inf``.
    """
    pre = prefix_sums_nb(x, y)
    n = x.shape[0]
    m = cand.shape[0]
    head = np.empty(m)
    tail = np.empty(m)
    for p in range(m):
        c = cand[p]
        s, _ = _segment_nb(pre, x, y, 0, c, fit)
        head[p] = (c + 1) * np.sqrt(s / (c + 1))
        s, _ = _segment_nb(pre, x, y, c, n - 1, fit)
        tail[p] = (n - c) * np.sqrt(s / (n - c))
    scores = np.full((m, m), np.inf)
    for p in range(m):
        i = cand[p]
        for q in range(p + 1, m):
            j = cand[q]
            s, _ = _segment_nb(pre, x, y, i, j, fit)
            k = j - i + 1
            scores[p, q] = (head[p] + k * np.sqrt(s / k) + tail[q]) / n
    return scores


def three_line_scores_np(x, y, cand, fit):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    cand = np.asarray(cand)
    pre = prefix_sums(x, y)
    n = x.size
    nh = cand + 1.0
    nt = n - cand
    sh, _ = _segment_np(pre, x, y, np.zeros_like(cand), cand, fit)
    st, _ = _segment_np(pre, x, y, cand, np.full_like(cand, n - 1), fit)
    head = nh * np.sqrt(sh / nh)
    tail = nt * np.sqrt(st / nt)
    i = cand[:, None]
    j = cand[None, :]
    upper = j > i
    jj = np.where(upper, j, i + 1)
    sm, _ = _segment_np(pre, x, y, np.broadcast_to(i, jj.shape), jj, fit)
    k = jj - i + 1.0
    scores = (head[:, None] + k * np.sqrt(sm / k) + tail[None, :]) / n
    return np.where(upper, scores, np.inf)


# ---------------------------------------------------------------------------
# greedy non-maximum suppression


@njit
def nms_nb(p, delta, radius):
    n = p.shape[0]
    order = np.argsort(-p, kind="mergesort")
    alive = np.ones(n, dtype=np.bool_)
    keep = np.zeros(n, dtype=np.bool_)
    for t in range(n):
        i = order[t]
        if p[i] < delta:
            break
        if not alive[i]:
            continue
        keep[i] = True
        lo = max(0, i - radius)
        hi = min(n, i + radius + 1)
        for j in range(lo, hi):
            alive[j] = False
    return np.nonzero(keep)[0]


def nms_np(p, delta, radius):
    p = np.asarray(p, dtype=np.float64)
    score = np.where(p >= delta, p, -np.inf)
    kept = []
    while True:
        i = int(np.argmax(score))
        if score[i] == -np.inf:
            break
        kept.append(i)
        score[max(0, i - radius): i + radius + 1] = -np.inf
    return np.array(sorted(kept), dtype=np.int64)


# ---------------------------------------------------------------------------
# Kneedle: does the difference curve drop below each maximum's threshold
# before the next local maximum?


@njit
def kneedle_scan_nb(d, maxima, thresholds):
    n = d.shape[0]
    m = maxima.shape[0]
    hit = np.zeros(m, dtype=np.bool_)
    for k in range(m):
        stop = maxima[k + 1] if k + 1 < m else n
        t = thresholds[k]
        for j in range(maxima[k] + 1, stop):
            if d[j] < t:
                hit[k] = True
                break
    return hit


def kneedle_scan_np(d, maxima, thresholds):
    d = np.asarray(d, dtype=np.float64)
    maxima = np.asarray(maxima, dtype=np.int64)
    if maxima.size == 0:
        return np.zeros(0, dtype=bool)
    # minimum of d over the open interval (maxima[k], maxima[k+1]), per k
    starts = np.minimum(maxima + 1, d.size)
    stops = np.append(maxima[1:], d.size)
    padded = np.append(d, np.inf)
    bounds = np.empty(2 * maxima.size, dtype=np.int64)
    bounds[0::2] = starts
    bounds[1::2] = stops
    mins = np.minimum.reduceat(padded, bounds)[0::2]
    return (stops > starts) & (mins < thresholds)


if USE_NUMBA:
    ewm_batch = ewm_batch_nb
    two_line_fits = two_line_fits_nb
    three_line_scores = three_line_scores_nb
    nms = nms_nb
    kneedle_scan = kneedle_scan_nb
else:
    ewm_batch = ewm_batch_np
    two_line_fits = two_line_fits_np
    three_line_scores = three_line_scores_np
    nms = nms_np
    kneedle_scan = kneedle_scan_np
