import json

import numpy as np
import pytest
from scipy.special import expit

from kneebench import core, synthgen as sg
from kneebench.errors import DomainError, FormatError, LabelingFailed, RejectionExhausted


def rng(seed=0):
    return sg.rng_for(seed, 0)


# --- generating functions -----------------------------------------------------


def test_eval_family_reference_points():
    assert sg.eval_family(sg.FamilySpec("FT1", {}, 0.5, 2.0), 1.0) == pytest.approx(0.0)
    assert sg.eval_family(sg.FamilySpec("FT4", {}, -1.0, 1.0), 0.0) == pytest.approx(0.5)
    assert sg.eval_family(sg.FamilySpec("FT9", {"mu": 13.0, "sigma": 5.0}, 0.0, 30.0), 13.0) == pytest.approx(0.5)


def test_eval_family_domain_errors():
    with pytest.raises(DomainError):
        sg.eval_family(sg.FamilySpec("FT1", {}, -1.0, 2.0), 0.0)
    with pytest.raises(DomainError):
        sg.eval_family(sg.FamilySpec("FT11", {"K": 2, "m": 1.0, "t": 1.0, "q": 0.1}, 1.0, 5.0), -1.0)


def test_every_family_monotone_on_a_drawn_interval():
    for fam in sg.SINGLE_KNEE + ("FT9",):
        spec = sg.sample_spec(fam, 1, rng(3))
        ys = sg.eval_family(spec, sg.grid(spec, 512))
        assert np.all(np.diff(ys) >= -1e-12), fam
    for fam in sg.MULTI_KNEE:
        spec = sg.sample_spec(fam, 3, rng(3))
        ys = sg.eval_family(spec, sg.grid(spec, 512))
        assert np.all(np.diff(ys) >= -1e-12), fam


# --- parameter draws ----------------------------------------------------------------


def test_sample_spec_parameter_sets():
    for seed in range(10):
        assert sg.sample_spec("FT2", 1, rng(seed)).params["m"] in (3, 5, 9, 11)
        p = sg.sample_spec("FT8", 1, rng(seed)).params
        assert p["m1"] > p["m2"] >= 0
        p = sg.sample_spec("FT7", 1, rng(seed)).params
        assert {p["p"], p["q"], p["r"]} <= {1, 2, 3, 4, 5}
        assert p["s"] in (10, 20) and p["m"] in sg.FT7_SLOPES


def test_ft10_has_one_term_per_knee():
    spec = sg.sample_spec("FT10", 3, rng(1))
    assert len(spec.params["c1"]) == len(spec.params["c2"]) == len(spec.params["c3"]) == 3


def test_sample_spec_knee_count_checked():
    with pytest.raises(ValueError):
        sg.sample_spec("FT4", 2, rng())
    with pytest.raises(ValueError):
        sg.sample_spec("FT10", 1, rng())


def test_only_flippable_families_flip():
    flips = {f: set() for f in ("FT4", "FT7", "FT8")}
    for seed in range(30):
        for f in flips:
            flips[f].add(sg.sample_spec(f, 1, rng(seed)).flipped)
    assert flips["FT4"] == {False, True}
    assert flips["FT7"] == {False} and flips["FT8"] == {False}


def test_rejection_exhausted(monkeypatch):
    bad = sg.FamilySpec("FT4", {}, -1.0, 1.0)  # almost linear, knee too gentle
    monkeypatch.setattr(sg, "_draw_single", lambda family, r, L: bad)
    with pytest.raises(RejectionExhausted):
        sg.sample_spec("FT4", 1, rng())


# --- clean curves and labels ------------------------------------------------------------


def test_gen_clean_is_unit_square():
    spec = sg.sample_spec("FT5", 1, rng(2))
    c = sg.gen_clean(spec, 512)
    assert len(c) == 512
    assert (c.xs.min(), c.xs.max(), c.ys.min(), c.ys.max()) == (0.0, 1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        sg.gen_clean(spec, 16)


def test_interval_changes_the_knee():
    a = sg.FamilySpec("FT4", {}, -40.0, 40.0)
    b = sg.FamilySpec("FT4", {}, -30.0, 10.0)
    ka = sg.label_knees(sg.gen_clean(a, 512), a)
    kb = sg.label_knees(sg.gen_clean(b, 512), b)
    assert ka != kb


def test_ft8_label_is_breakpoint():
    for seed in range(5):
        spec = sg.sample_spec("FT8", 1, rng(seed))
        c = sg.gen_clean(spec, 512)
        brk = int(round(spec.params["x_break"] * 511))
        assert sg.label_knees(c, spec) == [brk]


def test_normalised_label_left_of_raw_knee():
    # unit-square image of 5*sigmoid(10x - 5) on [0, 1] is the sigmoid on [-5, 5]
    spec = sg.FamilySpec("FT4", {}, -5.0, 5.0)
    label = sg.label_knees(sg.gen_clean(spec, 1000), spec)[0]
    x = np.linspace(0, 1, 1000)
    raw = core.curvature(x, 5 * expit(10 * x - 5)).argmin()
    assert label < raw


def test_ft10_labels_match_analytic_curvature():
    spec = sg.FamilySpec("FT10", {"c1": [1.0, 0.8, 1.5], "c2": [20.0, 30.0, 12.0], "c3": [2.0, 5.0, 8.0]},
                         0.0, 10.0, False, 3)
    c = sg.gen_clean(spec, 512)
    labels = sg.label_knees(c, spec)
    c1, c2, c3 = (np.array(spec.params[k])[:, None] for k in ("c1", "c2", "c3"))

    def f1(x):
        s = expit(c2 * (x[None, :] - c3))
        return (c1 * c2 * s * (1 - s)).sum(axis=0)

    def f2(x):
        s = expit(c2 * (x[None, :] - c3))
        return (c1 * c2 ** 2 * s * (1 - s) * (1 - 2 * s)).sum(axis=0)

    xt = np.linspace(0, 1, 5111)  # 10x finer than the sample grid
    kappa = core.normalized_analytic_curvature(f1, f2, c.params, xt)
    i = np.arange(1, xt.size - 1)
    mins = i[(kappa[i] < kappa[i - 1]) & (kappa[i] <= kappa[i + 1]) & (kappa[i] <= -3)]
    mins = sorted(mins[np.argsort(kappa[mins])][:3])
    assert len(labels) == 3
    for lab, m in zip(labels, mins):
        assert abs(lab - m * 511 / 5110) <= 2


def test_label_knees_fails_when_too_few_minima():
    spec = sg.FamilySpec("FT10", {"c1": [1.0, 1.0], "c2": [20.0, 20.0], "c3": [5.0, 5.05]}, 0.0, 10.0, False, 2)
    with pytest.raises(LabelingFailed):
        sg.label_knees(sg.gen_clean(spec, 512), spec)


# --- noise ---------------------------------------------------------------------------------


def test_noise_bounds_and_monotone():
    y = np.linspace(0, 1, 300) ** 2
    for seed in range(20):
        h = sg.inject_noise(y, 1000, seed)
        assert h[0] == 0.0 and h[-1] == 1.0
        assert np.all(np.diff(h) >= 0)
        assert np.all((h >= 0) & (h <= 1))


def test_noise_concentrates_with_many_draws():
    y = np.linspace(0, 1, 512)
    ok = sum(np.max(np.abs(sg.inject_noise(y, 10 ** 6, s) - y)) < 0.005 for s in range(100))
    assert ok >= 99


def test_noise_is_seed_deterministic():
    y = np.linspace(0, 1, 50)
    np.testing.assert_array_equal(sg.inject_noise(y, 2000, 9), sg.inject_noise(y, 2000, 9))
    assert not np.array_equal(sg.inject_noise(y, 2000, 9), sg.inject_noise(y, 2000, 10))


# --- FT12 ------------------------------------------------------------------------------------


def test_compose_ft8_ft1_ft6():
    r = rng(4)
    parts = []
    for fam in ("FT8", "FT1", "FT6"):
        p = sg.sample_spec(fam, 1, r)
        p.flipped = False
        parts.append(p)
    spec = sg.compose_ft12(parts, r)
    clean, labels = sg.check_spec(spec, 512)
    joints = sg.junction_indices(spec, 512)
    bounds = [0] + joints + [512]
    assert len(labels) == 3
    for k, lab in enumerate(labels):
        assert bounds[k] <= lab < bounds[k + 1]
    ys = clean.ys
    for j in joints:
        assert ys[j - 1] - ys[j - 2] <= ys[j + 1] - ys[j]
    # no extra qualifying minimum near a junction
    prof = core.discrete_curvature(clean)
    minima = sg.qualifying_minima(prof.values, prof.valid_range, separation=1)
    for m in minima:
        if any(abs(m - j) <= 5 for j in joints):
            assert m in labels


def test_compose_rejects_bad_part_counts():
    p = sg.sample_spec("FT6", 1, rng())
    with pytest.raises(ValueError):
        sg.compose_ft12([p], rng())


# --- datasets ----------------------------------------------------------------------------------


def test_training_plan_proportions():
    plan = sg.dataset_plan("train", 7000)
    assert sum(f in sg.SINGLE_KNEE for f in plan) == 3500
    assert sum(f in sg.MULTI_KNEE for f in plan) == 3500
    assert plan.count("FT1") == 438 and plan.count("FT8") == 437
    assert plan.count("FT10") == 1167 and plan.count("FT12") == 1166
    assert sg.dataset_plan("sknee", 800).count("FT3") == 100
    assert set(sg.dataset_plan("mknee", 300)) == set(sg.MULTI_KNEE)


def test_ng_split_is_all_ft9():
    d = sg.gen_dataset("ng", 100, 512, seed=1)
    assert len(d) == 100 and {s.spec.family for s in d} == {"FT9"}


@pytest.fixture(scope="module")
def small_train():
    return sg.gen_dataset("train", 24, L=256, seed=5)


def test_sample_invariants(small_train):
    for s in small_train:
        # flipped samples trade axes, so x is only guaranteed to span [0, 1] increasingly
        assert s.x[0] == 0.0 and s.x[-1] == 1.0 and np.all(np.diff(s.x) > 0)
        assert np.all(np.diff(s.y_noisy) >= 0)
        assert np.all((s.y_noisy >= 0) & (s.y_noisy <= 1))
        assert all(sg.BOUNDARY_MARGIN <= k <= s.L - 1 - sg.BOUNDARY_MARGIN for k in s.knee_indices)
        assert s.knee_indices == sorted(s.knee_indices)
        kappa = core.curvature(s.x, s.y_clean).values[s.knee_indices]
        assert np.all((kappa >= sg.KNEE_FLOOR) & (kappa <= sg.KNEE_THRESHOLD))
        assert s.L_prime in sg.L_PRIME_CHOICES
        if s.spec.family in sg.MULTI_KNEE:
            assert 2 <= len(s.knee_indices) <= 5


def test_gen_dataset_deterministic(small_train):
    again = sg.gen_dataset("train", 24, L=256, seed=5)
    assert sg.dumps_dataset(again) == sg.dumps_dataset(small_train)
    other = sg.gen_dataset("train", 24, L=256, seed=6)
    assert sg.dumps_dataset(other) != sg.dumps_dataset(small_train)


def test_threads_do_not_change_output():
    a = sg.gen_dataset("sknee", 8, L=256, seed=2)
    b = sg.gen_dataset("sknee", 8, L=256, seed=2, threads=2)
    assert sg.dumps_dataset(a) == sg.dumps_dataset(b)


def test_round_trip_bit_identical(tmp_path, small_train):
    d = sg.Dataset(small_train.samples[:10], "train")
    path = tmp_path / "d.jsonl"
    sg.write_dataset(d, path)
    back = sg.read_dataset(path)
    assert back.split == "train" and len(back) == 10
    for a, b in zip(d, back):
        assert a == b
        assert a.y_noisy.tobytes() == b.y_noisy.tobytes()
        assert a.x.tobytes() == b.x.tobytes()
    assert path.read_text() == sg.dumps_dataset(back)


def test_header_fields(tmp_path, small_train):
    path = tmp_path / "d.jsonl"
    sg.write_dataset(small_train, path)
    header = json.loads(path.read_text().splitlines()[0])
    assert header == {"generator_version": sg.GENERATOR_VERSION, "split": "train", "L": 256, "count": 24}


def test_truncated_file_names_the_line(tmp_path, small_train):
    path = tmp_path / "d.jsonl"
    sg.write_dataset(sg.Dataset(small_train.samples[:4], "train"), path)
    text = path.read_text()
    path.write_text(text[: len(text) - 200])
    with pytest.raises(FormatError) as err:
        sg.read_dataset(path)
    assert err.value.line == 5
    assert "line 5" in str(err.value)


def test_missing_records_detected(tmp_path, small_train):
    path = tmp_path / "d.jsonl"
    sg.write_dataset(sg.Dataset(small_train.samples[:4], "train"), path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:3]) + "\n")
    with pytest.raises(FormatError):
        sg.read_dataset(path)
