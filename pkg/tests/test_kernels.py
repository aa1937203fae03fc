"""Both kernel paths against each other and against brute-force oracles."""

import numpy as np
import pytest

from kneebench import kernels
from kneebench._accel import backend


@pytest.fixture
def curve():
    rng = np.random.default_rng(11)
    x = np.cumsum(rng.uniform(0.2, 1.0, 60))
    y = np.sqrt(x) + rng.normal(0, 0.05, x.size)
    return x, y


def ewm_oracle(values, alpha):
    out = []
    for t in range(values.size):
        w = (1 - alpha) ** np.arange(t, -1, -1)
        out.append(np.dot(w, values[: t + 1]) / w.sum())
    return np.array(out)


def line_sse(x, y, fit):
    if fit == kernels.BEST_FIT:
        slope, icpt = np.polyfit(x, y, 1)
    else:
        slope = (y[-1] - y[0]) / (x[-1] - x[0])
        icpt = y[0] - slope * x[0]
    return np.sum((y - slope * x - icpt) ** 2), slope


def test_backend_name():
    assert backend() in ("numba", "numpy")


def test_ewm_paths_match_weighted_sum():
    v = np.random.default_rng(0).normal(size=40)
    alphas = np.array([0.1, 0.5, 1.0])
    nb = kernels.ewm_batch_nb(v, alphas)
    npy = kernels.ewm_batch_np(v, alphas)
    np.testing.assert_allclose(nb, npy, rtol=1e-13)
    for a, row in zip(alphas, npy):
        np.testing.assert_allclose(row, ewm_oracle(v, a), rtol=1e-12)


@pytest.mark.parametrize("fit", [kernels.BEST_FIT, kernels.LINEAR_FIT])
def test_two_line_fits_against_polyfit(curve, fit):
    x, y = curve
    nb = kernels.two_line_fits_nb(x, y, fit)
    npy = kernels.two_line_fits_np(x, y, fit)
    np.testing.assert_allclose(nb, npy, rtol=1e-9, atol=1e-10)
    for c in (1, 7, 30, x.size - 2):
        sl, ml = line_sse(x[: c + 1], y[: c + 1], fit)
        sr, mr = line_sse(x[c:], y[c:], fit)
        np.testing.assert_allclose(npy[:, c - 1], [sl, sr, ml, mr], rtol=1e-7, atol=1e-9)


@pytest.mark.parametrize("fit", [kernels.BEST_FIT, kernels.LINEAR_FIT])
def test_three_line_scores_against_brute_force(curve, fit):
    x, y = curve
    L = x.size
    cand = np.arange(1, L - 1, 3)
    nb = kernels.three_line_scores_nb(x, y, cand, fit)
    npy = kernels.three_line_scores_np(x, y, cand, fit)
    np.testing.assert_allclose(nb, npy, rtol=1e-9, atol=1e-12)
    for p, q in [(0, 1), (2, 9), (5, cand.size - 1)]:
        i, j = cand[p], cand[q]
        parts = [(0, i), (i, j), (j, L - 1)]
        total = 0.0
        for a, b in parts:
            sse, _ = line_sse(x[a: b + 1], y[a: b + 1], fit)
            n = b - a + 1
            total += n * np.sqrt(sse / n)
        assert npy[p, q] == pytest.approx(total / L, rel=1e-6, abs=1e-9)
    assert np.all(np.isinf(npy[np.tril_indices(cand.size)]))


def nms_rescan(p, delta, radius):
    p = list(p)
    kept = []
    blocked = set()
    while True:
        best = None
        for i, v in enumerate(p):
            if v >= delta and i not in blocked and (best is None or v > p[best]):
                best = i
        if best is None:
            return sorted(kept)
        kept.append(best)
        blocked.update(range(best - radius, best + radius + 1))


def test_nms_paths_match_rescan_oracle():
    rng = np.random.default_rng(5)
    for _ in range(200):
        p = rng.random(rng.integers(1, 80))
        if rng.random() < 0.3:
            p = np.round(p, 1)  # force ties
        want = nms_rescan(p, 0.5, 10)
        assert kernels.nms_nb(p, 0.5, 10).tolist() == want
        assert kernels.nms_np(p, 0.5, 10).tolist() == want


def scan_oracle(d, maxima, thresholds):
    out = []
    for k, m in enumerate(maxima):
        stop = maxima[k + 1] if k + 1 < len(maxima) else len(d)
        out.append(any(d[j] < thresholds[k] for j in range(m + 1, stop)))
    return out


def test_kneedle_scan_paths_match_oracle():
    rng = np.random.default_rng(3)
    for _ in range(200):
        d = rng.normal(size=rng.integers(3, 60))
        i = np.arange(1, d.size - 1)
        maxima = i[(d[i] > d[i - 1]) & (d[i] >= d[i + 1])]
        thr = d[maxima] - rng.uniform(0, 2, maxima.size)
        want = scan_oracle(d, maxima, thr)
        assert kernels.kneedle_scan_nb(d, maxima, thr).tolist() == want
        assert kernels.kneedle_scan_np(d, maxima, thr).tolist() == want


def test_prefix_sums_paths_match():
    x = np.arange(5.0)
    y = x ** 2
    np.testing.assert_allclose(kernels.prefix_sums_nb(x, y), kernels.prefix_sums(x, y))
    assert kernels.prefix_sums(x, y)[0].tolist() == [0, 0, 1, 3, 6, 10]
