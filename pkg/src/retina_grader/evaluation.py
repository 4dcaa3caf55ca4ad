"""Confusion matrices, weighted metrics, Cohen's kappa, evaluation and cross-validation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .data import DatasetManifest, ImageStore, batch_iterator, kfold_split
from .model import ModelConfig, MultiTaskModel, Prediction, predict_batch
from .severity import TASK_CLASS_COUNTS, TASKS, grades_from_probabilities, severity_from_grades

logger = logging.getLogger(__name__)

METRIC_KEYS = ("precision_weighted", "recall_weighted", "f1_weighted", "kappa", "accuracy")


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.counts + other.counts)

    def tolist(self) -> list[list[int]]:
        return self.counts.astype(int).tolist()


def confusion(true, pred, k: int) -> ConfusionMatrix:
    true = np.asarray(true, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if true.shape != pred.shape:
        raise ValueError(f"label arrays differ in length: {true.size} vs {pred.size}")
    if true.size == 0:
        raise ValueError("cannot build a confusion matrix from no samples")
    for name, arr in (("true", true), ("predicted", pred)):
        if arr.min() < 0 or arr.max() >= k:
            raise ValueError(f"{name} labels must lie in [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return ConfusionMatrix(counts)


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den != 0)
    return out


@dataclass
class ClassScores:
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]


def weighted_prf(cm: ConfusionMatrix) -> tuple[float, float, float, ClassScores]:
    """Support-weighted precision, recall and F1. Zero denominators give 0."""
    c = cm.counts.astype(np.float64)
    total = c.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(c)
    support = c.sum(axis=1)
    precision = _safe_div(tp, c.sum(axis=0))
    recall = _safe_div(tp, support)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    w = support / total
    table = ClassScores(precision.tolist(), recall.tolist(), f1.tolist(), support.astype(int).tolist())
    return float(w @ precision), float(w @ recall), float(w @ f1), table


def cohen_kappa(cm: ConfusionMatrix) -> float:
    c = cm.counts.astype(np.float64)
    total = c.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    p_o = np.trace(c) / total
    p_e = float(c.sum(axis=1) @ c.sum(axis=0)) / total**2
    if p_e == 1.0:
        return 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def accuracy(cm: ConfusionMatrix) -> float:
    return float(np.trace(cm.counts) / cm.total)


def summarize(cm: ConfusionMatrix) -> dict:
    p, r, f, table = weighted_prf(cm)
    return {
        "precision_weighted": p,
        "recall_weighted": r,
        "f1_weighted": f,
        "kappa": cohen_kappa(cm),
        "accuracy": accuracy(cm),
        "per_class": {
            "precision": table.precision,
            "recall": table.recall,
            "f1": table.f1,
            "support": table.support,
        },
    }


@dataclass
class MetricsReport:
    severity: ConfusionMatrix
    per_task: dict[str, ConfusionMatrix]
    config: dict = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return accuracy(self.severity)

    def metric(self, key: str) -> float:
        return self.to_json()[key]

    def task_accuracy(self, task: str) -> float:
        return accuracy(self.per_task[task])

    def class_scores(self) -> dict:
        """Severity per-class table; class ``i`` is severity ``i + 1``."""
        return summarize(self.severity)["per_class"]

    def to_json(self) -> dict:
        sev = summarize(self.severity)
        out = {k: sev[k] for k in METRIC_KEYS}
        out["per_class"] = sev["per_class"]
        out["per_task"] = {t: summarize(cm) for t, cm in self.per_task.items()}
        out["confusion_severity"] = self.severity.tolist()
        out["confusion_per_task"] = {t: cm.tolist() for t, cm in self.per_task.items()}
        out["config"] = {"kappa": "unweighted", "averaging": "support-weighted", **self.config}
        return out

    @classmethod
    def from_json(cls, d: dict) -> MetricsReport:
        return cls(
            ConfusionMatrix(np.asarray(d["confusion_severity"], dtype=np.int64)),
            {t: ConfusionMatrix(np.asarray(v, dtype=np.int64)) for t, v in d["confusion_per_task"].items()},
            dict(d.get("config", {})),
        )


def report_from_labels(true_grades: np.ndarray, pred_grades: np.ndarray, config: Optional[dict] = None) -> MetricsReport:
    """Build a report from ``(N, 4)`` arrays of true and predicted grades."""
    true_grades = np.asarray(true_grades, dtype=np.int64).reshape(-1, 4)
    pred_grades = np.asarray(pred_grades, dtype=np.int64).reshape(-1, 4)
    sev_t = [severity_from_grades(_grades(row)) - 1 for row in true_grades]
    sev_p = [severity_from_grades(_grades(row)) - 1 for row in pred_grades]
    per_task = {
        t: confusion(true_grades[:, i], pred_grades[:, i], TASK_CLASS_COUNTS[t]) for i, t in enumerate(TASKS)
    }
    return MetricsReport(confusion(sev_t, sev_p, 9), per_task, dict(config or {}))


def _grades(row):
    from .severity import CharacteristicGrades

    return CharacteristicGrades.from_tuple(row)


Predictor = Callable[[np.ndarray, list], list[Prediction]]


def predict_split(
    predictor: Predictor | MultiTaskModel,
    manifest: DatasetManifest,
    split: Optional[str],
    store: Optional[ImageStore] = None,
    batch_size: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    """(true grades, predicted grades) as ``(N, 4)`` arrays in manifest order."""
    if isinstance(predictor, MultiTaskModel):
        model = predictor
        store = store or ImageStore(manifest, model.config.input_side)

        def predictor(images, records):
            return predict_batch(model, images)

    elif store is None:
        raise ValueError("an ImageStore is needed with a custom predictor")
    truths, preds = [], []
    for images, _, records in batch_iterator(manifest, split, batch_size, store=store):
        for rec, pred in zip(records, predictor(images, records)):
            truths.append(rec.labels())
            preds.append(pred.grades.as_tuple())
    return np.asarray(truths), np.asarray(preds)


def evaluate(
    model: Predictor | MultiTaskModel,
    manifest: DatasetManifest,
    split: Optional[str] = "test",
    store: Optional[ImageStore] = None,
    config: Optional[dict] = None,
) -> MetricsReport:
    truths, preds = predict_split(model, manifest, split, store)
    return report_from_labels(truths, preds, config)


def combine_single_task(models: dict[str, MultiTaskModel]) -> Predictor:
    """Predictor that takes each characteristic from its own single-task model."""
    missing = set(TASKS) - set(models)
    if missing:
        raise ValueError(f"missing single-task models for {sorted(missing)}")

    def predict(images, records):
        probs = {t: models[t].forward(images, "infer")[t].data.astype(np.float64) for t in TASKS}
        out = []
        for i in range(images.shape[0]):
            row = {t: probs[t][i] for t in TASKS}
            g = grades_from_probabilities(*(row[t] for t in TASKS))
            out.append(Prediction(g, severity_from_grades(g), row))
        return out

    return predict


def mean_report(reports: Sequence[MetricsReport]) -> dict:
    """Unweighted means of the headline metrics across reports."""
    if not reports:
        raise ValueError("no reports to average")
    js = [r.to_json() for r in reports]
    out = {k: float(np.mean([j[k] for j in js])) for k in METRIC_KEYS}
    out["per_task_accuracy"] = {t: float(np.mean([j["per_task"][t]["accuracy"] for j in js])) for t in TASKS}
    return out


def cross_validate(
    manifest: DatasetManifest,
    train_fn: Callable[[DatasetManifest, int], MultiTaskModel],
    k: int = 5,
    seed: int = 0,
    side: int = 64,
) -> tuple[dict, list[MetricsReport]]:
    """Train and test once per fold; returns (means, per-fold reports).

    ``train_fn(fold_manifest, round_index)`` must return a trained model.
    """
    rounds = kfold_split(manifest, k, seed)
    store = ImageStore(manifest, side)
    reports = []
    for i, assign in enumerate(rounds):
        fold = manifest.with_splits(assign)
        logger.info("cross-validation round %d/%d", i + 1, k)
        model = train_fn(fold, i)
        reports.append(evaluate(model, fold, "test", store, config={"fold": i}))
    return mean_report(reports), reports


@dataclass
class ClassDifference:
    rows: list[dict]
    warning: Optional[str] = None

    def to_csv(self) -> str:
        lines = ["severity,support_a,support_b,f1_a,f1_b,f1_delta,accuracy_a,accuracy_b,accuracy_delta"]
        for r in self.rows:
            lines.append(
                f"{r['severity']},{r['support_a']},{r['support_b']},{r['f1_a']:.6f},{r['f1_b']:.6f},"
                f"{r['f1_delta']:.6f},{r['accuracy_a']:.6f},{r['accuracy_b']:.6f},{r['accuracy_delta']:.6f}"
            )
        return "\n".join(lines) + "\n"


def class_difference_report(a: MetricsReport, b: MetricsReport, min_support: int = 50) -> ClassDifference:
    """Per-severity F1 and per-class accuracy (recall) of ``b`` minus ``a``.

    Only classes with at least ``min_support`` true instances in both reports
    are compared.
    """
    if a.severity.k != b.severity.k:
        raise ValueError("reports use different class spaces")
    sa, sb = a.class_scores(), b.class_scores()
    rows = []
    for c in range(a.severity.k):
        if sa["support"][c] < min_support or sb["support"][c] < min_support:
            continue
        rows.append(
            {
                "severity": c + 1,
                "support_a": sa["support"][c],
                "support_b": sb["support"][c],
                "f1_a": sa["f1"][c],
                "f1_b": sb["f1"][c],
                "f1_delta": sb["f1"][c] - sa["f1"][c],
                "accuracy_a": sa["recall"][c],
                "accuracy_b": sb["recall"][c],
                "accuracy_delta": sb["recall"][c] - sa["recall"][c],
            }
        )
    warning = None if rows else f"no severity class has at least {min_support} instances in both reports"
    return ClassDifference(rows, warning)
