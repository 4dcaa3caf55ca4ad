import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import accuracy_score, cohen_kappa_score, precision_recall_fscore_support

from retina_grader.data import DistributionPreset, ImageStore, generate_dataset, sample_grades
from retina_grader.evaluation import (
    ConfusionMatrix,
    MetricsReport,
    accuracy,
    class_difference_report,
    cohen_kappa,
    confusion,
    cross_validate,
    evaluate,
    mean_report,
    report_from_labels,
    weighted_prf,
)
from retina_grader.model import Prediction
from retina_grader.severity import CharacteristicGrades, severity_from_grades


def test_confusion_hand_count_and_rejections():
    assert confusion([0, 0, 1, 1], [0, 1, 1, 1], 2).tolist() == [[1, 1], [0, 2]]
    assert confusion([0, 1, 2], [0, 1, 2], 3).tolist() == np.eye(3, dtype=int).tolist()
    with pytest.raises(ValueError):
        confusion([], [], 2)
    with pytest.raises(ValueError):
        confusion([0, 2], [0, 1], 2)


def test_weighted_prf_hand_values():
    p, r, f, _ = weighted_prf(ConfusionMatrix(np.array([[1, 1], [0, 2]])))
    assert p == pytest.approx(0.5 * 1.0 + 0.5 * 2 / 3)
    assert r == pytest.approx(0.75)
    assert f == pytest.approx(0.5 * (2 / 3) + 0.5 * 0.8)
    p, r, f, _ = weighted_prf(ConfusionMatrix(np.diag([3, 4, 5])))
    assert (p, r, f) == (1.0, 1.0, 1.0)


def test_unpredicted_class_has_zero_precision():
    _, _, _, table = weighted_prf(ConfusionMatrix(np.array([[2, 0], [3, 0]])))
    assert table.precision[1] == 0.0 and not np.isnan(table.f1).any()


def test_kappa_values():
    assert cohen_kappa(ConfusionMatrix(np.array([[2, 1], [1, 2]]))) == pytest.approx(1 / 3)
    assert cohen_kappa(ConfusionMatrix(np.diag([5, 5]))) == 1.0
    assert cohen_kappa(ConfusionMatrix(np.array([[7, 0], [0, 0]]))) == 0.0
    rng = np.random.default_rng(0)
    t, p = rng.integers(0, 4, 20_000), rng.integers(0, 4, 20_000)
    assert abs(cohen_kappa(confusion(t, p, 4))) < 0.05


@settings(max_examples=200, deadline=None)
@given(k=st.integers(2, 9), n=st.integers(1, 80), seed=st.integers(0, 2**31))
def test_metrics_agree_with_sklearn(k, n, seed):
    rng = np.random.default_rng(seed)
    t, p = rng.integers(0, k, n), rng.integers(0, k, n)
    cm = confusion(t, p, k)
    prec, rec, f1, _ = weighted_prf(cm)
    labels = list(range(k))
    sp, sr, sf, _ = precision_recall_fscore_support(t, p, labels=labels, average="weighted", zero_division=0)
    assert abs(prec - sp) < 1e-10 and abs(rec - sr) < 1e-10 and abs(f1 - sf) < 1e-10
    assert abs(accuracy(cm) - accuracy_score(t, p)) < 1e-10
    assert rec == pytest.approx(accuracy(cm), abs=1e-12)
    if len(set(t) | set(p)) > 1:
        assert abs(cohen_kappa(cm) - cohen_kappa_score(t, p, labels=labels)) < 1e-10


def test_majority_model_accuracy_on_areds():
    rng = np.random.default_rng(3)
    preset = DistributionPreset.named("areds")
    truth = np.array([sample_grades(preset, rng).as_tuple() for _ in range(5000)])
    report = report_from_labels(truth, np.zeros_like(truth))
    assert report.accuracy == pytest.approx(0.418, abs=0.03)


def test_report_json_roundtrip_and_keys():
    truth = np.array([[0, 0, 0, d] for d in range(6)] * 3)
    pred = truth.copy()
    pred[0, 3] = 2
    report = report_from_labels(truth, pred, {"note": "x"})
    js = report.to_json()
    for key in ("precision_weighted", "recall_weighted", "f1_weighted", "kappa", "accuracy", "per_task",
                "confusion_severity", "confusion_per_task", "config"):
        assert key in js
    assert js["accuracy"] == np.trace(js["confusion_severity"]) / np.sum(js["confusion_severity"])
    back = MetricsReport.from_json(json.loads(json.dumps(js)))
    assert back.to_json() == js


def test_class_difference_report():
    truth = np.array([[0, 0, 0, 0]] * 60 + [[0, 0, 0, 1]] * 60 + [[0, 0, 0, 2]] * 10)
    a = report_from_labels(truth, truth)
    same = class_difference_report(a, a)
    assert [r["severity"] for r in same.rows] == [1, 2]
    assert all(r["f1_delta"] == 0 and r["accuracy_delta"] == 0 for r in same.rows)
    pred = truth.copy()
    pred[:30, 3] = 1
    b = report_from_labels(truth, pred)
    diff = class_difference_report(a, b)
    assert diff.rows[0]["accuracy_delta"] == pytest.approx(-0.5)
    assert diff.to_csv().startswith("severity,")
    empty = class_difference_report(a, b, min_support=500)
    assert empty.rows == [] and "500" in empty.warning


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    manifest = generate_dataset(tmp_path_factory.mktemp("ev"), 15, 2, "areds", side=24, seed=8)
    return manifest, ImageStore(manifest, 16)


def oracle(images, records):
    return [Prediction(r.grades, r.severity) for r in records]


def test_oracle_model_is_perfect(small):
    manifest, store = small
    report = evaluate(oracle, manifest, "test", store)
    assert report.accuracy == 1.0 and report.metric("kappa") in (0.0, 1.0)
    assert all(report.task_accuracy(t) == 1.0 for t in ("ga", "ip", "dep", "drusen"))


def test_cross_validate_means_are_fold_means(small):
    manifest, store = small

    def train_fn(fold, i):
        return oracle_with_error(i)

    def oracle_with_error(i):
        def predict(images, records):
            out = []
            for j, r in enumerate(records):
                g = r.grades if j != 0 else CharacteristicGrades(0, 0, 0, (r.grades.drusen_area + 1) % 6)
                out.append(Prediction(g, severity_from_grades(g)))
            return out
        return predict

    means, reports = cross_validate(manifest, train_fn, k=3, seed=1, side=16)
    assert means["accuracy"] == pytest.approx(np.mean([r.accuracy for r in reports]), abs=0)
    totals = sum(r.severity.total for r in reports)
    assert totals == len(manifest.images())
    assert mean_report(reports) == means
