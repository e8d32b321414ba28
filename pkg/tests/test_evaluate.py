import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fusenet.data import SubjectVolume, balanced_sample, extract_patch, make_folds, normalize_subject, stack_samples
from fusenet.evaluate import (
    EvalError, Heatmap, Labelmap, fold_statistics, majority_vote, pixel_accuracy, predict_heatmap,
    predict_labelmap, run_crossval, threshold,
)
from fusenet.nets import BaseConfig, FusionScheme, SchemeError, TrainedNetwork, make_model, train_arrays
from fusenet.phantom import DEFAULT_CONTRAST, Contrast, PhantomConfig, generate_cohort

SMALL = BaseConfig(conv1_filters=4, conv2_filters=6, dense_width=10, epochs=2, batch_size=16)


def test_threshold_is_strict():
    hm = Heatmap("s", np.array([[0.5, 0.5000001], [0.0, 1.0]]))
    np.testing.assert_array_equal(threshold(hm).values, [[0, 1], [0, 1]])
    rng = np.random.default_rng(0)
    vals = rng.random((9, 7))
    for tau in (0.1, 0.5, 0.9):
        assert threshold(Heatmap("s", vals), tau).values.sum() == np.count_nonzero(vals > tau)
    with pytest.raises(EvalError):
        threshold(hm, 1.0)
    with pytest.raises(EvalError):
        Heatmap("s", np.array([[1.5]]))


def lm(*values):
    return [Labelmap("s", np.array([[v]])) for v in values]


def hm(*values):
    return [Heatmap("s", np.array([[v]])) for v in values]


def test_vote_examples():
    assert majority_vote(lm(1, 1, 0)).values[0, 0] == 1
    assert majority_vote(lm(0, 0, 1)).values[0, 0] == 0
    assert majority_vote(lm(1, 1, 0, 0), hm(0.9, 0.8, 0.4, 0.38)).values[0, 0] == 1  # mean 0.62
    assert majority_vote(lm(1, 0), hm(0.6, 0.4)).values[0, 0] == 0  # mean exactly 0.5
    with pytest.raises(EvalError):
        majority_vote(lm(1, 0))
    with pytest.raises(EvalError):
        majority_vote([Labelmap("s", np.zeros((2, 2))), Labelmap("s", np.zeros((2, 3)))])
    with pytest.raises(EvalError):
        majority_vote(lm(1))


def brute_force_vote(labels, probs):
    """Enumerate each pixel's votes in plain Python."""
    h, w = labels[0].shape
    out = np.zeros((h, w), dtype=np.uint8)
    for r in range(h):
        for c in range(w):
            ones = sum(int(m[r, c]) for m in labels)
            zeros = len(labels) - ones
            if ones > zeros:
                out[r, c] = 1
            elif ones == zeros:
                out[r, c] = 1 if sum(p[r, c] for p in probs) / len(probs) > 0.5 else 0
    return out


@pytest.mark.parametrize("k", [2, 3, 4, 5])
@pytest.mark.parametrize("seed", range(5))
def test_vote_matches_brute_force(k, seed):
    rng = np.random.default_rng(100 * k + seed)
    probs = [rng.random((8, 8)) for _ in range(k)]
    labels = [(rng.random((8, 8)) < 0.5).astype(np.uint8) for _ in range(k)]
    got = majority_vote([Labelmap("s", m) for m in labels], [Heatmap("s", p) for p in probs])
    np.testing.assert_array_equal(got.values, brute_force_vote(labels, probs))


@settings(max_examples=40, deadline=None)
@given(k=st.integers(2, 5), seed=st.integers(0, 10**6))
def test_vote_neutral_and_symmetric(k, seed):
    rng = np.random.default_rng(seed)
    base = Labelmap("s", rng.random((5, 6)) < 0.5)
    probs = [Heatmap("s", rng.random((5, 6))) for _ in range(k)]
    assert np.array_equal(majority_vote([base] * k, probs).values, base.values)
    maps = [Labelmap("s", rng.random((5, 6)) < 0.5) for _ in range(k)]
    ref = majority_vote(maps, probs).values
    for perm in itertools.islice(itertools.permutations(range(k)), 6):
        assert np.array_equal(majority_vote([maps[i] for i in perm], [probs[i] for i in perm]).values, ref)


def test_pixel_accuracy():
    rng = np.random.default_rng(1)
    mask = (rng.random((6, 6)) < 0.5).astype(np.uint8)
    assert pixel_accuracy(mask, mask) == 1.0
    assert pixel_accuracy(1 - mask, mask) == 0.0
    a = np.zeros((4, 4), np.uint8)
    b = a.copy()
    b[:2] = 1
    assert pixel_accuracy(a, b) == 0.5 == pixel_accuracy(b, a)
    with pytest.raises(EvalError):
        pixel_accuracy(a, np.zeros((4, 5)))


def quantile_oracle(values, q):
    """Inclusive linear interpolation: position q*(n-1) between sorted order statistics."""
    v = sorted(values)
    pos = q * (len(v) - 1)
    lo = int(pos)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (pos - lo) * (v[hi] - v[lo])


def test_fold_statistics_examples():
    m = fold_statistics([0.9])
    assert (m.min, m.q1, m.median, m.q3, m.max) == (0.9,) * 5
    assert fold_statistics([0.0, 1.0]).median == 0.5
    m = fold_statistics([0.1, 0.2, 0.3, 0.4])
    assert m.q1 == pytest.approx(0.175, abs=1e-12)
    assert m.median == pytest.approx(0.25, abs=1e-12)
    assert m.q3 == pytest.approx(0.325, abs=1e-12)
    with pytest.raises(EvalError):
        fold_statistics([])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_fold_statistics_match_oracle(values):
    m = fold_statistics(values)
    for q, got in ((0.25, m.q1), (0.5, m.median), (0.75, m.q3)):
        assert abs(got - quantile_oracle(values, q)) <= 1e-12
    assert m.min <= m.q1 <= m.median <= m.q3 <= m.max
    assert m.min == min(values) and m.max == max(values)


@pytest.fixture(scope="module")
def trained(small_cohort):
    vols = [normalize_subject(s) for s in small_cohort]
    samples = balanced_sample(vols, 60, seed=0)
    x, y = stack_samples(samples)
    mods = vols[0].modality_names
    return vols, {kind: train_arrays(FusionScheme(kind, ("PET", "T1", "T2")) if kind != "single"
                                     else FusionScheme.single("T2"), x, y, SMALL, mods)
                  for kind in ("type1", "type2", "type3", "single")}


@pytest.mark.parametrize("kind", ["type1", "type2", "single"])
def test_heatmap_matches_pointwise_forward(kind, trained):
    vols, nets = trained
    net, vol = nets[kind], vols[1]
    heat = predict_heatmap(net, vol)
    assert heat.values.shape == vol.shape
    rng = np.random.default_rng(7)
    h, w = vol.shape
    centers = list(zip(rng.integers(0, h, 20), rng.integers(0, w, 20)))
    patches = np.stack([extract_patch(vol, c, net.scheme.modalities) for c in centers])
    direct = net.predict_proba(patches)[:, 1]
    np.testing.assert_allclose([heat.values[c] for c in centers], direct, rtol=0, atol=1e-12)
    # re-running prediction gives the same labelmap
    assert np.array_equal(threshold(heat).values, threshold(predict_heatmap(net, vol)).values)


def test_heatmap_size_for_135_by_145_subject():
    rng = np.random.default_rng(0)
    vol = SubjectVolume("big", {"T2": rng.standard_normal((135, 145))}, np.zeros((135, 145)))
    model = make_model(FusionScheme.single("T2"), SMALL)
    params = model.init_params(0)
    for v in params.tensors.values():
        v[...] = 0.0
    heat = predict_heatmap(TrainedNetwork(FusionScheme.single("T2"), SMALL, params), vol)
    assert heat.values.shape == (135, 145)
    assert np.all(heat.values == 0.5)
    assert threshold(heat).values.sum() == 0


def test_type3_prediction_path(trained):
    vols, nets = trained
    t3, vol = nets["type3"], vols[0]
    with pytest.raises(SchemeError):
        predict_heatmap(t3, vol)
    lab, heat = predict_labelmap(t3, vol)
    member = [predict_heatmap(m, vol) for m in t3.members]
    np.testing.assert_array_equal(lab.values, majority_vote([threshold(h) for h in member], member).values)
    np.testing.assert_allclose(heat.values, np.mean([h.values for h in member], axis=0))


def test_crossval_structure_and_audit():
    cohort = generate_cohort(PhantomConfig(height=48, width=48, cohort_size=10, semi_axes=(5, 8), seed=2))
    plan = make_folds([s.subject_id for s in cohort], 5, seed=0)
    schemes = [FusionScheme("type1", ("PET", "T2")), FusionScheme("type3", ("CT", "PET", "T2")),
               FusionScheme.single("T2"), FusionScheme.single("PET")]
    cfg = BaseConfig(conv1_filters=4, conv2_filters=6, dense_width=10, epochs=1, batch_size=32)
    res = run_crossval(cohort, schemes, cfg, plan, n_per_class=40, keep_models=True)
    assert list(res.summary) == schemes
    assert len(res.rows) == len(schemes) * 10
    for scheme, m in res.summary.items():
        assert len(m.accuracies) == 10 and 0 <= m.min <= m.median <= m.max <= 1
    for fold, sampled, tested in res.audit:
        assert not set(sampled) & set(tested)
        assert set(tested) == set(plan.test_subjects(fold))
    assert res.models[(0, schemes[1])].members[2] is res.models[(0, schemes[2])]
    with pytest.raises(EvalError):
        run_crossval(cohort, [FusionScheme.single("FLAIR")], cfg, plan, 40)
    with pytest.raises(EvalError):
        run_crossval(cohort[:9], schemes, cfg, plan, 40)


def test_crossval_fifty_subjects_ten_folds_has_five_per_fold():
    cohort = generate_cohort(PhantomConfig(height=40, width=40, cohort_size=50, semi_axes=(3, 5), seed=1,
                                           contrast={"T2": DEFAULT_CONTRAST["T2"]}))
    plan = make_folds([s.subject_id for s in cohort], 10, seed=3)
    cfg = BaseConfig(conv1_filters=2, conv2_filters=2, dense_width=4, epochs=1, batch_size=64)
    res = run_crossval(cohort, [FusionScheme.single("T2")], cfg, plan, n_per_class=20)
    for f in range(10):
        assert sum(1 for _, fold, _, _ in res.rows if fold == f) == 5
    for fold, sampled, tested in res.audit:
        assert len(tested) == 5 and not set(sampled) & set(tested)
        assert len(set(plan.train_subjects(fold))) == 45


def test_easy_cohort_single_t2_is_accurate():
    cfg_ph = PhantomConfig(height=64, width=64, cohort_size=5, semi_axes=(6, 12), seed=4,
                           contrast={"T2": Contrast(0.0, 2.0, 2.0, 1.0)})
    cohort = generate_cohort(cfg_ph)
    plan = make_folds([s.subject_id for s in cohort], 5, seed=0)
    res = run_crossval(cohort, [FusionScheme.single("T2")], BaseConfig(epochs=3), plan, n_per_class=300)
    assert res.summary[FusionScheme.single("T2")].median > 0.9
