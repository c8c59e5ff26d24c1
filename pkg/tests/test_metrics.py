import numpy as np
import pytest

from ptsm.errors import ContractError
from ptsm.metrics import compute_metrics, confusion_matrix


def brute_force(pred, y, k):
    cm = [[0] * k for _ in range(k)]
    for p, t in zip(pred, y):
        cm[t][p] += 1
    n = len(y)
    acc = sum(cm[i][i] for i in range(k)) / n
    f1s, sens, specs = [], [], []
    for c in range(k):
        tp = cm[c][c]
        fp = sum(cm[r][c] for r in range(k)) - tp
        fn = sum(cm[c]) - tp
        tn = n - tp - fp - fn
        f1s.append(2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0)
        sens.append(tp / (tp + fn) if tp + fn else 0.0)
        specs.append(tn / (tn + fp) if tn + fp else 0.0)
    if k == 2:
        sen, spe = sens[1], specs[1]
    else:
        sen, spe = sum(sens) / k, sum(specs) / k
    return cm, acc, sum(f1s) / k, sen, spe


def test_matches_brute_force_on_1000_random_cases():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k = int(rng.integers(2, 6))
        n = int(rng.integers(1, 40))
        y = rng.integers(0, k, n)
        pred = rng.integers(0, k, n)
        cm, acc, f1, sen, spe = brute_force(pred.tolist(), y.tolist(), k)
        rep = compute_metrics(pred, y, k)
        assert rep.confusion == cm
        assert (rep.accuracy, rep.macro_f1, rep.sensitivity, rep.specificity) == (acc, f1, sen, spe)
        assert rep.n == n == sum(map(sum, rep.confusion))


def test_binary_confusion_example():
    # TP=3 FP=1 FN=1 TN=5 with class 1 positive
    y = [1] * 4 + [0] * 6
    pred = [1, 1, 1, 0] + [1, 0, 0, 0, 0, 0]
    rep = compute_metrics(pred, y, 2)
    assert rep.confusion == [[5, 1], [1, 3]]
    assert rep.accuracy == pytest.approx(0.8)
    assert rep.sensitivity == pytest.approx(0.75)
    assert rep.specificity == pytest.approx(5 / 6)
    assert rep.per_class_f1[1] == pytest.approx(0.75)


def test_perfect_predictions():
    rep = compute_metrics([0, 1, 1, 0], [0, 1, 1, 0], 2)
    assert (rep.accuracy, rep.macro_f1, rep.sensitivity, rep.specificity) == (1.0, 1.0, 1.0, 1.0)


def test_binary_all_wrong():
    rep = compute_metrics([1, 0, 1, 0], [0, 1, 0, 1], 2)
    assert (rep.accuracy, rep.sensitivity, rep.specificity) == (0.0, 0.0, 0.0)


def test_absent_class_scores_zero_and_is_flagged():
    rep = compute_metrics([0, 1, 1], [0, 1, 1], 3)
    assert rep.absent_classes == [2]
    assert rep.per_class_f1 == [1.0, 1.0, 0.0]
    assert rep.macro_f1 == pytest.approx(2 / 3)


def test_length_mismatch_is_rejected():
    with pytest.raises(ContractError):
        compute_metrics([0, 1], [0], 2)


def test_empty_and_out_of_range_inputs_are_rejected():
    with pytest.raises(ContractError):
        compute_metrics([], [], 2)
    with pytest.raises(ContractError):
        confusion_matrix([0, 2], [0, 1], 2)


def test_percentages_have_two_decimals():
    rep = compute_metrics([0, 1, 1], [0, 1, 0], 2)
    assert rep.percentages()["ACC"] == "66.67"
