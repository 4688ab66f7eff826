import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mlsgm.metrics import (
    EvalBatch,
    UndefinedMetricError,
    average_precision,
    classification_report,
    full_report,
    mean_average_precision,
)
from mlsgm.rng import SplitMix64

from oracles import enumerate_average_precision


# ----------------------------------------------------------------------- AP

def test_ap_perfect_ranking():
    assert average_precision(np.array([0.9, 0.8, 0.2, 0.1]), np.array([1, 1, -1, -1])) == 1.0


def test_ap_worked_example():
    ap = average_precision(np.array([0.9, 0.8, 0.7, 0.6]), np.array([1, -1, 1, -1]))
    assert abs(ap - (1.0 + 2.0 / 3.0) / 2.0) < 1e-12


def test_ap_single_positive_sample():
    assert average_precision(np.array([0.4]), np.array([1])) == 1.0


def test_ap_no_positive_raises():
    with pytest.raises(UndefinedMetricError):
        average_precision(np.array([0.4, 0.2]), np.array([-1, -1]))


def test_ap_tie_breaks_toward_smaller_index():
    # equal scores: sample order decides ranks, so positive-first wins
    hi = average_precision(np.array([0.5, 0.5]), np.array([1, -1]))
    lo = average_precision(np.array([0.5, 0.5]), np.array([-1, 1]))
    assert hi == 1.0 and lo == 0.5


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.integers(2, 20))
def test_ap_matches_enumeration_oracle(seed, n):
    rng = SplitMix64(seed)
    scores = rng.fill_uniform((n,), 0.0, 1.0)
    truth = np.array([1 if rng.next_below(2) else -1 for _ in range(n)])
    if not (truth == 1).any():
        truth[0] = 1
    assert abs(average_precision(scores, truth)
               - enumerate_average_precision(scores, truth)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32))
def test_ap_invariant_under_monotone_transform(seed):
    rng = SplitMix64(seed)
    scores = rng.fill_uniform((12,), 0.0, 1.0)
    truth = np.array([1 if rng.next_below(2) else -1 for _ in range(12)])
    if not (truth == 1).any():
        truth[3] = 1
    a = average_precision(scores, truth)
    b = average_precision(np.exp(3.0 * scores) + 7.0, truth)
    assert abs(a - b) < 1e-12


# -------------------------------------------------------------------- report

def _batch(scores, truth):
    return EvalBatch(scores=np.asarray(scores, float), truth=np.asarray(truth))


def test_report_perfect_predictions():
    scores = np.array([[0.9, 0.1], [0.2, 0.8]])
    truth = np.array([[1, -1], [-1, 1]])
    rep = classification_report(_batch(scores, truth))
    assert all(rep[k] == 1.0 for k in ("CP", "CR", "CF1", "OP", "OR", "OF1"))


def test_report_hand_counts():
    # one image, truth {c0, c2} of 4 classes, predictions {c0, c1}
    scores = np.array([[0.9, 0.8, 0.1, 0.2]])
    truth = np.array([[1, -1, 1, -1]])
    rep = classification_report(_batch(scores, truth))
    assert rep["OP"] == 0.5 and rep["OR"] == 0.5 and rep["OF1"] == 0.5


def test_top3_with_three_classes_has_full_recall():
    rng = SplitMix64(3)
    scores = rng.fill_uniform((6, 3), 0.0, 1.0)
    truth = np.array([[1 if rng.next_below(2) else -1 for _ in range(3)] for _ in range(6)])
    rep = classification_report(_batch(scores, truth), mode="top3")
    assert rep["OR"] == 1.0


def test_top3_tie_prefers_smaller_class_index():
    scores = np.array([[0.5, 0.5, 0.5, 0.5, 0.4]])
    truth = np.array([[1, 1, 1, -1, -1]])
    rep = classification_report(_batch(scores, truth), mode="top3")
    assert rep["OR"] == 1.0 and rep["OP"] == 1.0


def test_unknowns_excluded_from_counts():
    scores = np.array([[0.9, 0.9], [0.9, 0.1]])
    truth = np.array([[1, 0], [0, 0]])
    rep = classification_report(_batch(scores, truth))
    # only the (0,0) cell is known: TP=1, FP=FN=0
    assert rep["OP"] == 1.0 and rep["OR"] == 1.0


def test_threshold_is_strict():
    scores = np.array([[0.5]])
    truth = np.array([[1]])
    rep = classification_report(_batch(scores, truth))
    assert rep["OR"] == 0.0  # 0.5 is not > 0.5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32))
def test_report_permutation_invariant_over_samples(seed):
    rng = SplitMix64(seed)
    scores = rng.fill_uniform((8, 4), 0.0, 1.0)
    truth = np.array([[1 if rng.next_below(2) else -1 for _ in range(4)] for _ in range(8)])
    perm = list(range(8))
    rng.shuffle(perm)
    a = classification_report(_batch(scores, truth))
    b = classification_report(_batch(scores[perm], truth[perm]))
    assert a == b


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32))
def test_of1_between_op_and_or(seed):
    rng = SplitMix64(seed)
    scores = rng.fill_uniform((6, 5), 0.0, 1.0)
    truth = np.array([[1 if rng.next_below(3) == 0 else -1 for _ in range(5)] for _ in range(6)])
    rep = classification_report(_batch(scores, truth))
    assert min(rep["OP"], rep["OR"]) - 1e-12 <= rep["OF1"] <= max(rep["OP"], rep["OR"]) + 1e-12


# ---------------------------------------------------------------------- mAP

def test_map_skips_classes_without_positives():
    scores = np.array([[0.9, 0.4], [0.1, 0.6]])
    truth = np.array([[1, -1], [-1, -1]])
    mAP, per_class = mean_average_precision(_batch(scores, truth))
    assert mAP == 1.0
    assert per_class == [1.0, None]


def test_map_drops_unknown_cells_per_class():
    scores = np.array([[0.9], [0.8], [0.7]])
    truth = np.array([[1], [0], [-1]])
    mAP, _ = mean_average_precision(_batch(scores, truth))
    assert mAP == 1.0


def test_full_report_schema():
    rng = SplitMix64(5)
    scores = rng.fill_uniform((5, 3), 0.0, 1.0)
    truth = np.array([[1 if rng.next_below(2) else -1 for _ in range(3)] for _ in range(5)])
    truth[0] = [1, 1, 1]
    rep = full_report(_batch(scores, truth))
    assert set(rep) == {"mAP", "CP", "CR", "CF1", "OP", "OR", "OF1", "top3", "per_class_ap"}
    assert set(rep["top3"]) == {"CP", "CR", "CF1", "OP", "OR", "OF1"}
    assert len(rep["per_class_ap"]) == 3


def test_eval_batch_validation():
    with pytest.raises(ValueError):
        EvalBatch(scores=np.zeros((2, 3)), truth=np.zeros((3, 2)))
    with pytest.raises(ValueError):
        EvalBatch(scores=np.zeros((1, 1)), truth=np.array([[5]]))
