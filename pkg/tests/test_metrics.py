import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trpoppo import kernels
from trpoppo.metrics import (
    COLUMNS,
    MetricReport,
    PredictionSet,
    auprc,
    build_report,
    classification_metrics,
    effect_labels,
    regression_metrics,
    render_table,
    report_csv,
)


def brute_classification(p, t):
    tp = fp = fn = tn = 0
    for a, b in zip(p, t):
        if a and b:
            tp += 1
        elif a:
            fp += 1
        elif b:
            fn += 1
        else:
            tn += 1
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return (tp + tn) / len(p), prec, rec, f1


def brute_auprc(scores, labels):
    """Threshold sweep over the distinct scores, highest first."""
    positives = sum(labels)
    area, prev_recall = 0.0, 0.0
    for thr in sorted(set(scores), reverse=True):
        picked = [y for s, y in zip(scores, labels) if s >= thr]
        tp = sum(picked)
        recall = tp / positives
        area += (tp / len(picked)) * (recall - prev_recall)
        prev_recall = recall
    return area


def brute_regression(yhat, y):
    n = len(y)
    mse = sum((a - b) ** 2 for a, b in zip(yhat, y)) / n
    mae = sum(abs(a - b) for a, b in zip(yhat, y)) / n
    ybar = sum(y) / n
    hbar = sum(yhat) / n
    r2 = 1 - sum((a - b) ** 2 for a, b in zip(yhat, y)) / sum((b - ybar) ** 2 for b in y)
    cov = sum((a - hbar) * (b - ybar) for a, b in zip(yhat, y)) / n
    sh = math.sqrt(sum((a - hbar) ** 2 for a in yhat) / n)
    sy = math.sqrt(sum((b - ybar) ** 2 for b in y) / n)
    return mse, math.sqrt(mse), mae, r2, cov / (sh * sy)


def test_hand_confusion_case():
    pred = [1, 1, 1, 0] + [0] * 6
    true = [1, 1, 0, 1] + [0] * 6
    acc, prec, rec, f1 = classification_metrics(pred, true)
    assert acc == 0.8
    assert abs(prec - 2 / 3) < 1e-15 and abs(rec - 2 / 3) < 1e-15 and abs(f1 - 2 / 3) < 1e-15


def test_classification_degenerate_conventions():
    assert classification_metrics([1, 0, 1], [1, 0, 1]) == (1.0, 1.0, 1.0, 1.0)
    assert classification_metrics([0, 0, 0], [1, 0, 1]) == (1 / 3, 0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        classification_metrics([], [])


def test_effect_labels_hand_case():
    base = np.array([[1.0, 1.0, 1.0], [0.0, 0.5, 2.0]])
    pred = np.array([[1.2, 1.05, 0.5], [0.11, 0.6, 2.5]])
    obs = np.array([[1.0, 1.3, 1.2], [0.1, 0.7, 1.0]])
    p, t = effect_labels(pred, obs, base, 0.1)
    np.testing.assert_array_equal(p, [[1, 0, 0], [1, 0, 1]])
    np.testing.assert_array_equal(t, [[0, 1, 1], [0, 1, 0]])
    p, t = effect_labels(obs, obs, base)
    assert classification_metrics(p, t)[0] == 1.0
    p, _ = effect_labels(base + 0.05, obs, base)
    assert not p.any()
    with pytest.raises(ValueError):
        effect_labels(pred, obs[:1], base)


def test_auprc_cases():
    assert auprc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    # ranking 1,0,1,0: precision 1 at recall 1/2, 2/3 at recall 1
    assert abs(auprc([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0]) - (0.5 + 0.5 * 2 / 3)) < 1e-15
    # full tie: one threshold at the positive rate
    assert auprc([0.5] * 4, [1, 0, 0, 0]) == 0.25
    with pytest.raises(ValueError):
        auprc([0.1, 0.2], [0, 0])


def test_auprc_random_ranking_is_near_positive_rate():
    rng = np.random.default_rng(0)
    labels = (rng.uniform(size=20000) < 0.3).astype(int)
    assert abs(auprc(rng.uniform(size=20000), labels) - labels.mean()) < 0.05


def test_auprc_kernels_agree():
    rng = np.random.default_rng(1)
    scores = np.round(rng.normal(size=500), 1)
    labels = (rng.uniform(size=500) < 0.4).astype(float)
    order = np.argsort(-scores, kind="stable")
    a = kernels.NUMBA_KERNELS["auprc"](scores[order], labels[order])
    b = kernels.NUMPY_KERNELS["auprc"](scores[order], labels[order])
    assert abs(a - b) < 1e-12


def test_regression_cases():
    y = np.array([1.0, 2.0, 4.0, 3.0])
    r = regression_metrics(y, y)
    assert (r.mse, r.rmse, r.mae, r.r2) == (0.0, 0.0, 0.0, 1.0)
    assert abs(r.pearson - 1.0) < 1e-15
    r = regression_metrics(np.full(4, y.mean()), y)
    assert r.r2 == 0.0 and r.undefined == ("pearson",)
    r = regression_metrics(-y, y)
    assert r.r2 < 0 and abs(r.pearson + 1.0) < 1e-15


def test_negative_r2_is_not_clamped():
    y = np.array([0.0, 1.0, 0.0, 1.0])
    assert regression_metrics(1 - y, y).r2 == -3.0


def test_constant_observed_flags_undefined():
    r = regression_metrics([1.0, 2.0, 3.0], [5.0, 5.0, 5.0])
    assert math.isnan(r.r2) and math.isnan(r.pearson)
    assert set(r.undefined) == {"r2", "pearson"}
    assert r.mse == (16 + 9 + 4) / 3


def test_random_sets_match_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(50):
        yhat, y = rng.normal(size=20), rng.normal(size=20)
        got = regression_metrics(yhat, y)
        for a, b in zip((got.mse, got.rmse, got.mae, got.r2, got.pearson), brute_regression(list(yhat), list(y))):
            assert abs(a - b) < 1e-10
        scores = np.round(rng.normal(size=30), 1)
        labels = [int(x) for x in rng.uniform(size=30) < 0.4]
        if sum(labels):
            assert abs(auprc(scores, labels) - brute_auprc(list(scores), labels)) < 1e-12
        p = [int(x) for x in rng.uniform(size=30) < 0.5]
        assert classification_metrics(p, labels) == pytest.approx(brute_classification(p, labels), abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 60))
def test_report_invariants(seed, n):
    rng = np.random.default_rng(seed)
    base = rng.uniform(0, 2, size=(n, 3))
    obs = base + rng.normal(scale=0.3, size=(n, 3))
    pred = base + rng.normal(scale=0.3, size=(n, 3))
    rep = build_report(PredictionSet(pred, obs, base))
    for v in (rep.accuracy, rep.precision, rep.recall, rep.f1):
        assert 0.0 <= v <= 1.0
    assert math.isnan(rep.auprc) or 0.0 <= rep.auprc <= 1.0
    assert abs(rep.rmse**2 - rep.mse) < 1e-12
    assert rep.mae <= rep.rmse + 1e-15
    assert -1.0 <= rep.pearson <= 1.0
    perm = rng.permutation(n)
    p, t = effect_labels(pred, obs, base)
    assert classification_metrics(p[perm], t[perm]) == classification_metrics(p, t)


def test_pearson_affine_invariance_r2_not():
    rng = np.random.default_rng(3)
    yhat, y = rng.normal(size=40), rng.normal(size=40)
    a = regression_metrics(yhat, y)
    b = regression_metrics(3.0 * yhat + 2.0, y)
    assert abs(a.pearson - b.pearson) < 1e-12
    assert abs(a.r2 - b.r2) > 1e-3


def test_prediction_set_validation():
    with pytest.raises(ValueError):
        PredictionSet(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        PredictionSet(np.full((1, 2), np.nan), np.zeros((1, 2)), np.zeros((1, 2)))


def test_report_rendering():
    rep = MetricReport(0.8, 0.7, 0.8, 0.75, 0.6, 0.04, 0.2, 0.1, -0.1147, 0.5)
    csv = report_csv([("TRPO_PPO", "RNA", rep)])
    header, row = csv.strip().split("\n")
    assert header.split(",") == ["Algorithm", "Modality", *COLUMNS]
    assert row.split(",")[:3] == ["TRPO_PPO", "RNA", "0.8"]
    assert float(row.split(",")[10]) == -0.1147
    table = render_table([("TRPO_PPO", "RNA", rep), ("PPO", "JOINT", rep)])
    lines = table.splitlines()
    assert len({len(line) for line in lines}) == 1
    assert "-0.1147" in table
    assert MetricReport.from_dict(rep.to_dict()) == rep
    assert MetricReport.mean([rep, rep]) == rep
