"""Synthetic knee benchmark: generating families, labels, noise and persistence."""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, ndtr

from . import core
from .errors import (
    CompositionFailed,
    DegenerateSeries,
    DomainError,
    FormatError,
    LabelingFailed,
    RejectionExhausted,
)

GENERATOR_VERSION = "kneebench-synth/1"

SINGLE_KNEE = ("FT1", "FT2", "FT3", "FT4", "FT5", "FT6", "FT7", "FT8")
MULTI_KNEE = ("FT10", "FT11", "FT12")
FAMILIES = SINGLE_KNEE + ("FT9",) + MULTI_KNEE
FLIPPABLE = frozenset({"FT1", "FT2", "FT3", "FT4", "FT5", "FT6", "FT9"})
SPLITS = ("train", "sknee", "mknee", "ng")

FT2_EXPONENTS = (3, 5, 9, 11)
FT3_ROOTS = (3, 5, 7, 9, 11, 13, 15, 17)
FT7_POWERS = (1, 2, 3, 4, 5)
FT7_SCALES = (10, 20)
FT7_SLOPES = tuple(round(0.1 * k, 1) for k in range(1, 51))
FT9_MU, FT9_SIGMA = 13.0, 5.0
L_PRIME_CHOICES = (1000, 2000, 5000, 10000)

# labelling rule for ground-truth knees
KNEE_THRESHOLD = -3.0
KNEE_FLOOR = -340.0
KNEE_SEPARATION = 20
BOUNDARY_MARGIN = 10
MAX_DRAWS = 1000


@dataclass
class FamilySpec:
    family: str
    params: dict
    x_lb: float
    x_ub: float
    flipped: bool = False
    knees: int = 1

    def to_dict(self) -> dict:
        params = dict(self.params)
        if self.family == "FT12":
            params["parts"] = [p.to_dict() for p in params["parts"]]
        return {"family": self.family, "params": params, "x_lb": self.x_lb, "x_ub": self.x_ub,
                "flipped": self.flipped, "knees": self.knees}

    @classmethod
    def from_dict(cls, d: dict) -> "FamilySpec":
        params = dict(d["params"])
        if d["family"] == "FT12":
            params["parts"] = [cls.from_dict(p) for p in params["parts"]]
        return cls(d["family"], params, float(d["x_lb"]), float(d["x_ub"]),
                   bool(d["flipped"]), int(d.get("knees", 1)))


@dataclass
class Sample:
    id: str
    spec: FamilySpec
    x: np.ndarray
    y_noisy: np.ndarray
    y_clean: np.ndarray
    knee_indices: list
    L_prime: int
    seed: int

    @property
    def L(self) -> int:
        return int(self.x.size)

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.id == other.id and self.spec.to_dict() == other.spec.to_dict()
                and np.array_equal(self.x, other.x) and np.array_equal(self.y_noisy, other.y_noisy)
                and np.array_equal(self.y_clean, other.y_clean)
                and list(self.knee_indices) == list(other.knee_indices)
                and self.L_prime == other.L_prime and self.seed == other.seed)


@dataclass
class Dataset:
    samples: list
    split: str
    generator_version: str = GENERATOR_VERSION
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def L(self):
        return self.samples[0].L if self.samples else 0


# ---------------------------------------------------------------------------
# random streams


def rng_for(seed: int, stream: int) -> np.random.Generator:
    """Counter-based generator for one (sample seed, purpose) pair."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(dataset_seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence(entropy=int(dataset_seed), spawn_key=(SPLITS.index(split), int(index)))
    return int(ss.generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# generating functions


def _odd_root(x, m):
    return np.sign(x) * np.abs(x) ** (1.0 / m)


def _ft12_layout(spec):
    p = spec.params
    widths = np.asarray(p["widths"], dtype=np.float64)
    heights = np.asarray(p["heights"], dtype=np.float64)
    edges = np.concatenate([[0.0], np.cumsum(widths)])
    edges[-1] = 1.0
    bases = np.concatenate([[0.0], np.cumsum(heights)[:-1]])
    return edges, bases, heights


def _unit_part(part: FamilySpec, u):
    """Part function rescaled to [0, 1] on both axes (parts are monotone)."""
    x = part.x_lb + u * (part.x_ub - part.x_lb)
    lo = float(eval_family(part, part.x_lb))
    hi = float(eval_family(part, part.x_ub))
    return (eval_family(part, x) - lo) / (hi - lo)


def eval_family(spec: FamilySpec, x):
    """Evaluate the generating function of ``spec`` at raw abscissa ``x``.

    Accepts scalars or arrays.  The ``flipped`` flag is not applied here; it
    acts on the normalised sample in :func:`gen_clean`.
    """
    x = np.asarray(x, dtype=np.float64)
    p = spec.params
    f = spec.family
    if f == "FT1":
        if np.any(x <= 0):
            raise DomainError("FT1 (log) needs x > 0")
        return np.log(x)
    if f == "FT2":
        m = int(p["m"])
        return (-1.0) ** (m + 1) * x ** m
    if f == "FT3":
        return _odd_root(x, int(p["m"]))
    if f == "FT4":
        return expit(x)
    if f == "FT5":
        return -np.logaddexp(0.0, -x)
    if f == "FT6":
        return -np.expm1(-x)
    if f == "FT7":
        if np.any(x < 0):
            raise DomainError("FT7 needs x >= 0")
        s = p["s"]
        u = p["m"] * x / s
        return u ** p["p"] - u ** p["q"] * np.exp(-(x / s) ** p["r"])
    if f == "FT8":
        xb = p["x_break"]
        return np.where(x <= xb, p["m1"] * x, p["m1"] * xb + p["m2"] * (x - xb))
    if f == "FT9":
        return ndtr((x - p.get("mu", FT9_MU)) / p.get("sigma", FT9_SIGMA))
    if f == "FT10":
        c1 = np.asarray(p["c1"])[:, None]
        c2 = np.asarray(p["c2"])[:, None]
        c3 = np.asarray(p["c3"])[:, None]
        return (c1 * expit(c2 * (np.atleast_1d(x)[None, :] - c3))).sum(axis=0).reshape(x.shape)
    if f == "FT11":
        if np.any(x <= 0):
            raise DomainError("FT11 needs x > 0")
        k = int(p["K"])
        i = np.arange(1, k + 1)
        coef = np.array([math.comb(2 * k, k - j) for j in i], dtype=np.float64) / (i * 2.0 ** (2 * k - 1))
        xa = np.atleast_1d(x)
        sines = (coef[:, None] * np.sin(i[:, None] * xa[None, :])).sum(axis=0).reshape(x.shape)
        return sines / p["m"] + (x + p["t"]) * p["q"] * np.log(x)
    if f == "FT12":
        edges, bases, heights = _ft12_layout(spec)
        xa = np.atleast_1d(x)
        if np.any((xa < 0) | (xa > 1)):
            raise DomainError("FT12 is defined on [0, 1]")
        seg = np.clip(np.searchsorted(edges, xa, side="right") - 1, 0, len(heights) - 1)
        out = np.empty_like(xa)
        for k, part in enumerate(spec.params["parts"]):
            sel = seg == k
            if np.any(sel):
                u = (xa[sel] - edges[k]) / (edges[k + 1] - edges[k])
                out[sel] = bases[k] + heights[k] * _unit_part(part, u)
        return out.reshape(x.shape)
    raise ValueError(f"unknown family {f!r}")


# ---------------------------------------------------------------------------
# clean curves, labels, noise


def grid(spec: FamilySpec, L: int) -> np.ndarray:
    j = np.arange(L)
    return spec.x_lb + j / (L - 1) * (spec.x_ub - spec.x_lb)


def gen_clean(spec: FamilySpec, L: int = 512) -> core.NormalizedSeries:
    if L < 32:
        raise ValueError("L must be at least 32")
    xs = grid(spec, L)
    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        ys = eval_family(spec, xs)
    if not np.all(np.isfinite(ys)):
        raise DomainError(f"{spec.family} is not finite on [{spec.x_lb}, {spec.x_ub}]")
    n = core.normalize(core.Series(xs, ys))
    if spec.flipped:
        n = core.flip_antidiagonal(n)
    return n


def inject_noise(y_clean, L_prime: int, seed: int) -> np.ndarray:
    """Noisy ordinates from the empirical CDF of ``L_prime`` uniform draws.

    ``y_hat[j]`` is the fraction of the draws that are ``<= y_clean[j]``; one
    set of draws serves the whole sample, so monotone input stays monotone.
    """
    u = np.sort(rng_for(seed, 1).random(int(L_prime)))
    return np.searchsorted(u, np.asarray(y_clean, dtype=np.float64), side="right") / float(L_prime)


def qualifying_minima(values, valid_range, threshold=KNEE_THRESHOLD, separation=KNEE_SEPARATION,
                      margin=BOUNDARY_MARGIN) -> list:
    """Local curvature minima at or below ``threshold``, strictest first.

    Candidates closer than ``margin`` to either end are ignored, and a
    candidate within ``separation`` indices of a stricter one is dropped.
    """
    k = np.asarray(values)
    L = k.size
    lo = max(valid_range[0], margin, 1)
    hi = min(valid_range[1], L - 1 - margin, L - 2)
    if hi < lo:
        return []
    i = np.arange(lo, hi + 1)
    is_min = (k[i] < k[i - 1]) & (k[i] <= k[i + 1]) & (k[i] <= threshold)
    cand = i[is_min]
    cand = cand[np.argsort(k[cand], kind="stable")]
    chosen = []
    for c in cand:
        if all(abs(int(c) - s) >= separation for s in chosen):
            chosen.append(int(c))
    return chosen


def label_knees(clean: core.NormalizedSeries, spec: FamilySpec) -> list:
    profile = core.discrete_curvature(clean)
    if spec.knees == 1:
        idx = profile.argmin()
        L = len(clean)
        if not (BOUNDARY_MARGIN <= idx <= L - 1 - BOUNDARY_MARGIN):
            raise LabelingFailed(f"knee at index {idx} is within {BOUNDARY_MARGIN} of the boundary")
        return [idx]
    chosen = qualifying_minima(profile.values, profile.valid_range)
    if len(chosen) < spec.knees:
        raise LabelingFailed(f"found {len(chosen)} qualifying minima, need {spec.knees}")
    return sorted(chosen[: spec.knees])


def check_spec(spec: FamilySpec, L: int):
    """Generate, label and validate; returns ``(clean, labels)`` or raises."""
    clean = gen_clean(spec, L)
    if np.any(np.diff(clean.ys) < 0):
        raise LabelingFailed("clean curve is not monotone")
    profile = core.discrete_curvature(clean)
    if not np.all(np.isfinite(profile.valid)):
        raise LabelingFailed("curvature not finite")
    labels = label_knees(clean, spec)
    vals = profile.values[labels]
    if np.any(vals > KNEE_THRESHOLD) or np.any(vals < KNEE_FLOOR):
        raise LabelingFailed(f"knee curvature {vals} outside [{KNEE_FLOOR}, {KNEE_THRESHOLD}]")
    if len(qualifying_minima(profile.values, profile.valid_range)) != spec.knees:
        raise LabelingFailed("number of qualifying minima differs from the knee count")
    return clean, labels


# ---------------------------------------------------------------------------
# parameter draws


def _uniform(rng, lo, hi):
    return float(rng.uniform(lo, hi))


def _draw_single(family: str, rng, L: int) -> FamilySpec:
    p: dict = {}
    if family == "FT1":
        lb, ub = 10 ** _uniform(rng, -4.0, -1.5), _uniform(rng, 5.0, 100.0)
    elif family == "FT2":
        p["m"] = int(rng.choice(FT2_EXPONENTS))
        lb, ub = _uniform(rng, -3.0, -0.5), _uniform(rng, -0.1, 1.0)
    elif family == "FT3":
        p["m"] = int(rng.choice(FT3_ROOTS))
        lb, ub = _uniform(rng, -0.3, 0.0), _uniform(rng, 0.5, 20.0)
    elif family == "FT4":
        lb, ub = _uniform(rng, -40.0, -2.0), _uniform(rng, 2.0, 40.0)
    elif family == "FT5":
        lb, ub = _uniform(rng, -20.0, -1.0), _uniform(rng, 1.0, 40.0)
    elif family == "FT6":
        lb, ub = _uniform(rng, -5.0, 0.0), _uniform(rng, 1.0, 30.0)
    elif family == "FT7":
        p.update(p=int(rng.choice(FT7_POWERS)), q=int(rng.choice(FT7_POWERS)), r=int(rng.choice(FT7_POWERS)),
                 s=int(rng.choice(FT7_SCALES)), m=float(rng.choice(FT7_SLOPES)))
        lb, ub = 0.0, p["s"] * _uniform(rng, 0.5, 5.0)
    elif family == "FT8":
        k = int(rng.integers(2 * BOUNDARY_MARGIN, L - 2 * BOUNDARY_MARGIN))
        m1 = _uniform(rng, 1.0, 10.0)
        p.update(x_break=k / (L - 1), m1=m1, m2=m1 * _uniform(rng, 0.0, 0.5))
        lb, ub = 0.0, 1.0
    elif family == "FT9":
        p.update(mu=FT9_MU, sigma=FT9_SIGMA)
        lb, ub = _uniform(rng, -100.0, -10.0), _uniform(rng, 25.0, 100.0)
    else:
        raise ValueError(f"{family} is not a single-knee family")
    flipped = family in FLIPPABLE and bool(rng.integers(2))
    return FamilySpec(family, p, lb, ub, flipped, 1)


def _draw_ft10(knees: int, rng) -> FamilySpec:
    lo, hi = 0.0, 10.0
    gap = (hi - lo) / (knees + 1) * 0.6
    while True:
        c3 = np.sort(rng.uniform(lo + 0.5, hi - 0.5, size=knees))
        if knees == 1 or np.min(np.diff(c3)) >= gap:
            break
    c2 = rng.uniform(5.0, 50.0, size=knees)
    c1 = rng.uniform(0.5, 2.0, size=knees)
    return FamilySpec("FT10", {"c1": c1.tolist(), "c2": c2.tolist(), "c3": c3.tolist()}, lo, hi, False, knees)


def _ft11_sine_amplitude(K: int) -> float:
    i = np.arange(1, K + 1)
    coef = np.array([math.comb(2 * K, K - j) for j in i], dtype=np.float64) / (i * 2.0 ** (2 * K - 1))
    t = np.linspace(0.0, 2 * np.pi, 2049)
    return float(np.abs((coef[:, None] * np.sin(i[:, None] * t[None, :])).sum(axis=0)).max())


def _draw_ft11(knees: int, rng) -> FamilySpec:
    lb = _uniform(rng, 1.0, 3.0)
    ub = 2 * np.pi * knees + _uniform(rng, 1.0, 3.0)
    p = {"K": knees, "t": _uniform(rng, 0.5, 2.0), "q": _uniform(rng, 0.05, 0.3)}
    p["m"] = _ft11_sine_amplitude(knees)
    return FamilySpec("FT11", p, lb, ub, False, knees)


def junction_indices(spec: FamilySpec, L: int) -> list:
    """First grid index of every FT12 segment after the first."""
    edges, _, _ = _ft12_layout(spec)
    xs = grid(spec, L)
    return [int(np.searchsorted(xs, e, side="left")) for e in edges[1:-1]]


def _junction_slopes_ok(ys, joints) -> bool:
    for j in joints:
        if j < 2 or j + 1 >= ys.size:
            return False
        if ys[j - 1] - ys[j - 2] > ys[j + 1] - ys[j]:
            return False
    return True


def compose_ft12(parts: Sequence[FamilySpec], rng, L: int = 512, max_draws: int = MAX_DRAWS) -> FamilySpec:
    """Concatenate single-knee parts into one multi-knee curve on [0, 1].

    Segment widths and heights are redrawn until every junction obeys the
    slope rule (last step of the existing curve no steeper than the first step
    of the appended part) and the composite has exactly one labelled knee in
    each segment.
    """
    parts = list(parts)
    if not 2 <= len(parts) <= 5:
        raise ValueError("FT12 composes 2 to 5 parts")
    K = len(parts)
    for _ in range(max_draws):
        widths = rng.uniform(0.7, 1.3, size=K)
        widths /= widths.sum()
        heights = rng.uniform(0.5, 1.5, size=K)
        heights /= heights.sum()
        spec = FamilySpec("FT12", {"parts": [FamilySpec.from_dict(p.to_dict()) for p in parts],
                                   "widths": widths.tolist(), "heights": heights.tolist()},
                          0.0, 1.0, False, K)
        try:
            clean, labels = check_spec(spec, L)
        except (LabelingFailed, DegenerateSeries, DomainError):
            continue
        joints = junction_indices(spec, L)
        if not _junction_slopes_ok(clean.ys, joints):
            continue
        bounds = [0] + joints + [L]
        if all(bounds[k] <= labels[k] < bounds[k + 1] for k in range(K)):
            return spec
    raise CompositionFailed(f"no valid FT12 layout for parts {[p.family for p in parts]}")


def _draw_ft12(knees: int, rng, L: int) -> FamilySpec:
    parts = []
    for _ in range(knees):
        fam = SINGLE_KNEE[int(rng.integers(len(SINGLE_KNEE)))]
        part = sample_spec(fam, 1, rng, L=L)
        part.flipped = False
        parts.append(part)
    # a part set that cannot be laid out is cheaper to redraw than to retry
    return compose_ft12(parts, rng, L, max_draws=50)


def sample_spec(family: str, knees: int, rng, L: int = 512) -> FamilySpec:
    """Draw a valid parameter set for ``family`` by rejection sampling.

    A draw is valid when its clean curve at length ``L`` is monotone, has
    exactly ``knees`` qualifying curvature minima away from the boundary, and
    every labelled knee has curvature in the benchmark's range.
    """
    if family in MULTI_KNEE:
        if not 2 <= knees <= 5:
            raise ValueError(f"{family} needs 2..5 knees, got {knees}")
    elif knees != 1:
        raise ValueError(f"{family} is a single-knee family")
    for _ in range(MAX_DRAWS):
        if family == "FT10":
            spec = _draw_ft10(knees, rng)
        elif family == "FT11":
            spec = _draw_ft11(knees, rng)
        elif family == "FT12":
            try:
                return _draw_ft12(knees, rng, L)
            except (CompositionFailed, RejectionExhausted):
                continue
        else:
            spec = _draw_single(family, rng, L)
        try:
            check_spec(spec, L)
        except (LabelingFailed, DegenerateSeries, DomainError):
            continue
        return spec
    raise RejectionExhausted(f"no valid {family} draw with {knees} knee(s) in {MAX_DRAWS} attempts")


# ---------------------------------------------------------------------------
# samples and datasets


def make_sample(family: str, knees: int, L: int, seed: int, sample_id: str) -> Sample:
    rng = rng_for(seed, 0)
    spec = sample_spec(family, knees, rng, L)
    clean, labels = check_spec(spec, L)
    L_prime = int(rng.choice(L_PRIME_CHOICES))
    noisy = inject_noise(clean.ys, L_prime, seed)
    return Sample(sample_id, spec, clean.xs, noisy, clean.ys, labels, L_prime, seed)


def _even_split(n: int, names: Sequence[str]) -> list:
    base, rem = divmod(n, len(names))
    out = []
    for k, name in enumerate(names):
        out += [name] * (base + (1 if k < rem else 0))
    return out


def dataset_plan(split: str, n: int) -> list:
    """Family of every sample index for a split of size ``n``."""
    if split == "train":
        n_single = (n + 1) // 2
        return _even_split(n_single, SINGLE_KNEE) + _even_split(n - n_single, MULTI_KNEE)
    if split == "sknee":
        return _even_split(n, SINGLE_KNEE)
    if split == "mknee":
        return _even_split(n, MULTI_KNEE)
    if split == "ng":
        return ["FT9"] * n
    raise ValueError(f"unknown split {split!r}")


def _make_indexed(args):
    split, family, index, L, dataset_seed = args
    seed = derive_seed(dataset_seed, split, index)
    knees = 1
    if family in MULTI_KNEE:
        knees = int(rng_for(seed, 2).integers(2, 6))
    return make_sample(family, knees, L, seed, f"{split}-{index:05d}-{family}")


def gen_dataset(split: str, n: int, L: int = 512, seed: int = 0, threads: int = 1) -> Dataset:
    if n < 1:
        raise ValueError("n must be positive")
    plan = dataset_plan(split, n)
    jobs = [(split, fam, i, L, seed) for i, fam in enumerate(plan)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(_make_indexed, jobs, chunksize=8))
    else:
        samples = [_make_indexed(j) for j in jobs]
    return Dataset(samples, split, GENERATOR_VERSION, {"seed": seed, "L": L})


# ---------------------------------------------------------------------------
# persistence: one JSON document per line, floats with 17 significant digits


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _array(values) -> str:
    return "[" + ",".join(_fmt(v) for v in values) + "]"


def _params_json(obj) -> str:
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(k)}:{_params_json(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_params_json(v) for v in obj) + "]"
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    return _fmt(obj)


def sample_record(s: Sample) -> str:
    spec = s.spec.to_dict()
    fields = [
        ("id", json.dumps(s.id)),
        ("family", json.dumps(spec["family"])),
        ("params", _params_json(spec["params"])),
        ("x_lb", _fmt(spec["x_lb"])),
        ("x_ub", _fmt(spec["x_ub"])),
        ("flipped", json.dumps(spec["flipped"])),
        ("knees", str(spec["knees"])),
        ("L", str(s.L)),
        ("L_prime", str(s.L_prime)),
        ("seed", str(s.seed)),
        ("x", _array(s.x)),
        ("y_clean", _array(s.y_clean)),
        ("y_noisy", _array(s.y_noisy)),
        ("knee_indices", "[" + ",".join(str(int(i)) for i in s.knee_indices) + "]"),
    ]
    return "{" + ",".join(f'"{k}":{v}' for k, v in fields) + "}"


def dumps_dataset(d: Dataset) -> str:
    header = {"generator_version": d.generator_version, "split": d.split, "L": d.L, "count": len(d)}
    lines = [json.dumps(header)] + [sample_record(s) for s in d.samples]
    return "\n".join(lines) + "\n"


def write_dataset(d: Dataset, path) -> None:
    path = os.fspath(path)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_dataset(d))


_REQUIRED = ("id", "family", "params", "x_lb", "x_ub", "flipped", "L", "L_prime", "seed",
             "x", "y_clean", "y_noisy", "knee_indices")


def parse_sample(rec: dict) -> Sample:
    spec = FamilySpec.from_dict({"family": rec["family"], "params": rec["params"], "x_lb": rec["x_lb"],
                                 "x_ub": rec["x_ub"], "flipped": rec["flipped"],
                                 "knees": rec.get("knees", len(rec["knee_indices"]))})
    return Sample(rec["id"], spec, np.asarray(rec["x"], dtype=np.float64),
                  np.asarray(rec["y_noisy"], dtype=np.float64), np.asarray(rec["y_clean"], dtype=np.float64),
                  [int(i) for i in rec["knee_indices"]], int(rec["L_prime"]), int(rec["seed"]))


def read_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError("empty dataset file", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad header: {exc.msg}", line=1) from None
    for key in ("generator_version", "split", "L", "count"):
        if key not in header:
            raise FormatError(f"header is missing {key!r}", line=1)
    samples = []
    for lineno, text in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"malformed record: {exc.msg}", line=lineno) from None
        missing = [k for k in _REQUIRED if k not in rec]
        if missing:
            raise FormatError(f"record is missing {missing}", line=lineno)
        s = parse_sample(rec)
        if not (s.x.size == s.y_noisy.size == s.y_clean.size == int(rec["L"])):
            raise FormatError("array lengths disagree with L", line=lineno)
        samples.append(s)
    if len(samples) != int(header["count"]):
        raise FormatError(f"header announces {header['count']} records, found {len(samples)}",
                          line=len(lines) + 1)
    return Dataset(samples, header["split"], header["generator_version"], {"L": header["L"]})
