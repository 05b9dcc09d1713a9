import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import breslow_loglik, breslow_loglik_grid, froc_sweep, greedy_match, pair_count_cindex
from tilscope.detection import Detection
from tilscope.errors import DivergingBetaError, UndefinedMetricError
from tilscope.metrics import (
    SurvivalRecord,
    concordance_counts,
    concordance_index,
    cox_fit_single,
    cox_partial_loglik,
    cox_score,
    detection_f1,
    dice,
    froc_curve,
    froc_score,
    match_detections,
    pearson_r,
    tumor_stroma_dice,
)
from tilscope.raster import Resolution

# ---------------------------------------------------------------- Dice


def test_dice_examples():
    a = np.zeros((10, 10), bool)
    a[:5] = True
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    big_a = np.zeros(200, bool)
    big_a[:100] = True
    big_b = np.zeros(200, bool)
    big_b[50:150] = True
    assert dice(big_a, big_b) == 0.5
    assert dice(np.zeros(5, bool), np.zeros(5, bool)) == 1.0


def test_tumor_stroma_dice_examples():
    gt = np.array([[1, 1, 2, 2]], dtype=np.uint8)
    assert tumor_stroma_dice(gt, gt) == 1.0
    pred = np.array([[1, 1, 0, 0]], dtype=np.uint8)
    assert tumor_stroma_dice(pred, gt) == 0.5
    assert tumor_stroma_dice(np.array([[1, 2, 0]], np.uint8), np.full((1, 3), 255, np.uint8)) == 1.0


def test_ignore_label_excluded():
    gt = np.array([[1, 255, 2]], dtype=np.uint8)
    pred = np.array([[1, 2, 2]], dtype=np.uint8)
    assert tumor_stroma_dice(pred, gt) == 1.0


labels = hnp.arrays(np.uint8, (6, 6), elements=st.sampled_from([0, 1, 2, 255]))


@given(labels, labels)
def test_dice_symmetric_and_bounded(a, b):
    assert dice(a == 1, b == 1) == dice(b == 1, a == 1)
    assert 0.0 <= tumor_stroma_dice(a, b) <= 1.0


# ---------------------------------------------------------------- matching / F1


def test_matching_examples():
    m = match_detections([], [])
    assert (m.tp, m.fp, m.fn) == (0, 0, 0)
    m = match_detections([Detection(5, 5, 0.5)], [(5, 5)])
    assert (m.tp, m.fp, m.fn) == (1, 0, 0)
    # 2 um = 4 px, 1 um = 2 px at 0.5 mpp
    preds = [Detection(14, 10, 0.9), Detection(12, 10, 0.8)]
    m = match_detections(preds, [(10, 10)], 4.0, Resolution())
    assert m.tp_pairs == [(0, 0)] and m.false_positives == [1]


def test_hit_radius_inclusive():
    m = match_detections([Detection(18, 10, 1.0)], [(10, 10)], 4.0, Resolution())
    assert m.tp == 1
    m = match_detections([Detection(18.01, 10, 1.0)], [(10, 10)], 4.0, Resolution())
    assert m.tp == 0


def test_f1_examples():
    assert detection_f1(match_detections([Detection(1, 1)], [(1, 1)])) == 1.0
    m = match_detections([Detection(1, 1, 0.9), Detection(50, 50, 0.8)], [(1, 1)])
    assert (m.tp, m.fp, m.fn) == (1, 1, 0)
    assert detection_f1(m) == 2 / 3
    assert detection_f1(match_detections([], [(1, 1), (9, 9)])) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_matching_equals_oracle(seed):
    rng = np.random.default_rng(seed)
    gt = [tuple(p) for p in (rng.random((15, 2)) * 60).tolist()]
    pred = [(float(x), float(y), float(p)) for (x, y), p in zip(rng.random((20, 2)) * 60, rng.random(20))]
    m = match_detections([Detection(*p) for p in pred], gt, 4.0, Resolution())
    assert (m.tp, m.fp, m.fn) == greedy_match(pred, gt, 8.0)


# ---------------------------------------------------------------- FROC


def froc_instance(seed=0):
    """20 ground-truth points; hits, near-duplicates, far false positives and tied probabilities."""
    rng = np.random.default_rng(seed)
    gt = [(float(x), float(y)) for x, y in rng.uniform(20, 480, size=(20, 2))]
    pred = []
    for i, (x, y) in enumerate(gt):
        if i % 5 == 4:
            continue  # missed
        jitter = rng.uniform(-3, 3, size=2)
        pred.append((x + jitter[0], y + jitter[1], round(float(rng.uniform(0.3, 1.0)), 2)))
        if i % 3 == 0:
            pred.append((x - jitter[0], y - jitter[1], round(float(rng.uniform(0.3, 1.0)), 2)))
    for x, y in rng.uniform(0, 500, size=(12, 2)):
        pred.append((float(x), float(y), round(float(rng.uniform(0.3, 1.0)), 1)))
    return pred, gt


@pytest.mark.parametrize("seed", range(5))
def test_froc_equals_sweep_oracle(seed):
    pred, gt = froc_instance(seed)
    area = 0.0625
    rates = (10.0, 20.0, 50.0, 100.0, 200.0, 300.0)
    got = froc_score([[Detection(*p) for p in pred]], [gt], [area], rates, 4.0)
    assert abs(got - froc_sweep(pred, gt, area, rates, 8.0)) <= 1e-12


def test_froc_examples():
    gt = [(10, 10), (50, 50)]
    assert froc_score([[Detection(10, 10, 1.0), Detection(50, 50, 1.0)]], [gt], [1.0]) == 1.0
    assert froc_score([[]], [gt], [1.0]) == 0.0


def test_froc_needs_ground_truth():
    with pytest.raises(UndefinedMetricError):
        froc_score([[Detection(1, 1)]], [[]], [1.0])


def test_froc_curve_monotone_and_pooled():
    pred, gt = froc_instance(1)
    half = len(pred) // 2
    curve = froc_curve([[Detection(*p) for p in pred[:half]], [Detection(*p) for p in pred[half:]]],
                       [gt, gt], [0.03, 0.03])
    assert np.all(np.diff(curve.sensitivity) >= 0)
    assert np.all(np.diff(curve.fp_per_mm2) >= 0)
    assert curve.thresholds[0] == np.inf


# ---------------------------------------------------------------- Pearson


def test_pearson_examples():
    x = np.arange(10.0)
    assert pearson_r(x, 2 * x + 3) == pytest.approx(1.0, abs=1e-15)
    assert pearson_r(x, -x) == pytest.approx(-1.0, abs=1e-15)
    assert pearson_r([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(UndefinedMetricError):
        pearson_r([1, 1, 1], [1, 2, 3])


@given(st.integers(0, 10**6), st.floats(0.1, 10), st.floats(-10, 10))
def test_pearson_affine_invariant(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.random(30), rng.random(30)
    assert abs(pearson_r(a * x + b, y) - pearson_r(x, y)) < 1e-12


# ---------------------------------------------------------------- C-index


def cohort(seed, n, beta=0.8, tie_round=None):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    t_event = rng.exponential(1.0 / np.exp(beta * x))
    t_cens = rng.exponential(2.0, size=n)
    time = np.minimum(t_event, t_cens)
    if tie_round is not None:
        time = np.round(time, tie_round) + 10.0 ** -tie_round
    event = t_event <= t_cens
    return x, time, event


def records(x, time, event):
    return [SurvivalRecord(float(a), float(b), bool(c)) for a, b, c in zip(x, time, event)]


def test_cindex_examples():
    recs = [SurvivalRecord(3, 1, True), SurvivalRecord(2, 2, True), SurvivalRecord(1, 3, True)]
    assert concordance_index(recs) == 1.0
    recs = [SurvivalRecord(0, t, True) for t in (1, 2, 3)]
    assert concordance_index(recs) == 0.5


@pytest.mark.parametrize("seed,tie_round", [(0, None), (1, 1), (2, 0), (3, 2)])
def test_cindex_counts_equal_pair_oracle(seed, tie_round):
    x, time, event = cohort(seed, 200, tie_round=tie_round)
    x = np.round(x, 1)  # risk ties as well
    assert concordance_counts(records(x, time, event)) == pair_count_cindex(x, time, event)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["exp", "cube", "affine", "arctan"]))
def test_cindex_invariant_under_monotone_maps(seed, kind):
    x, time, event = cohort(seed, 80, tie_round=1)
    x = np.round(x, 1)
    f = {"exp": np.exp, "cube": lambda v: v ** 3, "affine": lambda v: 3 * v - 7, "arctan": np.arctan}[kind]
    assert concordance_index(records(f(x), time, event)) == concordance_index(records(x, time, event))


def test_cindex_sanity_positive_effect():
    x, time, event = cohort(42, 500, beta=1.0)
    beta = cox_fit_single(records(x, time, event)).beta
    assert concordance_index(records(np.sign(beta) * x, time, event)) >= 0.5


def test_cindex_without_comparable_pairs():
    with pytest.raises(UndefinedMetricError):
        concordance_index([SurvivalRecord(1, 1, False), SurvivalRecord(2, 2, False)])


# ---------------------------------------------------------------- Cox


def test_cox_constant_covariate():
    x, time, event = cohort(0, 30)
    fit = cox_fit_single(records(np.full(30, 2.5), time, event))
    assert fit.beta == 0.0


def test_cox_two_subject_separation():
    recs = [SurvivalRecord(1.0, 1.0, True), SurvivalRecord(0.0, 2.0, True)]
    with pytest.raises(DivergingBetaError):
        cox_fit_single(recs)


def test_cox_loglik_matches_direct_sum():
    x, time, event = cohort(5, 60, tie_round=1)
    recs = records(x, time, event)
    for beta in (-1.3, 0.0, 0.4, 2.0):
        assert cox_partial_loglik(beta, recs) == pytest.approx(breslow_loglik(beta, x, time, event), rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_cox_matches_grid_oracle(seed):
    x, time, event = cohort(seed, 100, tie_round=2)
    recs = records(x, time, event)
    fit = cox_fit_single(recs)
    grid = np.round(np.arange(-50000, 50001) * 1e-4, 4)
    best = grid[np.argmax(breslow_loglik_grid(grid, x, time, event))]
    assert abs(fit.beta - best) <= 1e-4
    assert abs(cox_score(fit.beta, recs)) < 1e-6


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.floats(-2, 2))
def test_cox_score_matches_finite_difference(seed, beta):
    x, time, event = cohort(seed, 50, tie_round=1)
    recs = records(x, time, event)
    h = 1e-5
    fd = (cox_partial_loglik(beta + h, recs) - cox_partial_loglik(beta - h, recs)) / (2 * h)
    s = cox_score(beta, recs)
    assert abs(s - fd) <= 1e-5 * max(1.0, abs(s))


def test_cox_needs_events():
    with pytest.raises(UndefinedMetricError):
        cox_fit_single([SurvivalRecord(1, 1, False), SurvivalRecord(2, 2, False)])
