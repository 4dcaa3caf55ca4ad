"""Built-in verification suites behind the ``gradcheck`` and ``selftest`` commands."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .evaluation import ConfusionMatrix, cohen_kappa, accuracy, weighted_prf
from .model import ModelConfig, build_model
from .severity import SEVERITY_GRID, all_grades, enumerate_preimage, severity_from_grades

GRAD_TOLERANCE = 1e-3
GRAD_STEP = 1e-3


@dataclass
class CheckResult:
    name: str
    value: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.value < self.threshold

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.value:.3e} (< {self.threshold:g})"


def _ce_of(logits: T.Tensor, target) -> T.Tensor:
    return T.categorical_cross_entropy(T.softmax(logits), target)


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[T.Tensor], T.Tensor], np.ndarray]]:
    """Scalar-valued probes, one per differentiable op, with random inputs (dims <= 8)."""
    # float32-representable values held in float64 so every op accumulates in double
    def f32(shape, s=1.0):
        return (rng.normal(size=shape) * s).astype(np.float32).astype(np.float64)

    x4 = f32((2, 3, 6, 6))
    k3 = f32((4, 3, 3, 3), 0.5)
    b4 = f32(4)
    p_same = rng.normal(size=(2, 4, 6, 6))
    p_s2 = rng.normal(size=(2, 4, 3, 3))
    p_valid = rng.normal(size=(2, 4, 4, 4))
    p_gap = rng.normal(size=(2, 3))
    p_cat = rng.normal(size=(2, 6, 6, 6))
    x2 = f32((3, 5))
    w2 = f32((5, 4))
    bias2 = f32(4)
    logits = f32((3, 4))
    target = rng.integers(0, 4, size=3)
    mask_seed = int(rng.integers(1 << 30))

    def conv_same(x):
        return T.tensor_sum(T.mul_const(T.conv2d(x, T.Tensor(k3), T.Tensor(b4), 1, "same"), p_same))

    return {
        "conv2d/input/same": (conv_same, x4),
        "conv2d/kernel/stride2": (
            lambda k: T.tensor_sum(T.mul_const(T.conv2d(T.Tensor(x4), k, T.Tensor(b4), 2, "same"), p_s2)),
            k3,
        ),
        "conv2d/input/stride2": (
            lambda x: T.tensor_sum(T.mul_const(T.conv2d(x, T.Tensor(k3), T.Tensor(b4), 2, "same"), p_s2)),
            x4,
        ),
        "conv2d/input/valid": (
            lambda x: T.tensor_sum(T.mul_const(T.conv2d(x, T.Tensor(k3), T.Tensor(b4), 1, "valid"), p_valid)),
            x4,
        ),
        "conv2d/bias": (
            lambda b: T.tensor_sum(T.mul_const(T.conv2d(T.Tensor(x4), T.Tensor(k3), b, 1, "same"), p_same)),
            b4,
        ),
        "dense/input": (lambda x: _ce_of(T.dense(x, T.Tensor(w2), T.Tensor(bias2)), target), x2),
        "dense/weight": (lambda w: _ce_of(T.dense(T.Tensor(x2), w, T.Tensor(bias2)), target), w2),
        "dense/bias": (lambda b: _ce_of(T.dense(T.Tensor(x2), T.Tensor(w2), b), target), bias2),
        "relu": (lambda x: T.tensor_sum(T.mul_const(T.relu(x), p_same[:, :3])), x4),
        "global_average_pool": (
            lambda x: T.tensor_sum(T.mul_const(T.global_average_pool(x), p_gap)),
            x4,
        ),
        "avg_pool3x3/stride1": (lambda x: T.tensor_sum(T.mul_const(T.avg_pool3x3(x, 1), p_same[:, :3])), x4),
        "avg_pool3x3/stride2": (lambda x: T.tensor_sum(T.mul_const(T.avg_pool3x3(x, 2), p_s2[:, :3])), x4),
        "concat_channels": (
            lambda x: T.tensor_sum(T.mul_const(T.concat_channels([x, T.relu(x)]), p_cat)),
            x4,
        ),
        "dropout/train": (
            lambda x: T.tensor_sum(T.mul_const(T.dropout(x, 0.5, "train", np.random.default_rng(mask_seed)),
                                              p_same[:, :3])),
            x4,
        ),
        "softmax+cross_entropy": (lambda z: _ce_of(z, target), logits),
    }


def model_cases(rng: np.random.Generator, input_side: int = 16, batch: int = 2):
    """Loss of a 3-block desk-preset model as a function of each parameter tensor and the input."""
    cfg = ModelConfig.preset("desk", input_side=input_side)
    model = build_model(cfg, rng).astype(np.float64)
    images = rng.random((batch, 3, input_side, input_side)).astype(np.float32).astype(np.float64)
    labels = {t: rng.integers(0, k, size=batch) for t, k in zip(cfg.tasks, cfg.task_class_counts)}

    def total_loss(outputs):
        loss = None
        for t, probs in outputs.items():
            term = T.categorical_cross_entropy(probs, labels[t])
            loss = term if loss is None else T.add(loss, term)
        return loss

    cases = {}
    for name in model.params:
        def fn(w, name=name):
            saved = model.params[name]
            model.params[name] = w
            try:
                return total_loss(model.forward(images, "infer"))
            finally:
                model.params[name] = saved

        cases[f"model/{name}"] = (fn, model.params[name].data)
    cases["model/input"] = (lambda x: total_loss(model.forward(x, "infer")), images)
    return cases


def gradcheck_suite(seed: int, coords_per_tensor: int = 6, include_model: bool = True) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    cases = op_cases(rng)
    if include_model:
        cases.update(model_cases(rng))
    results = []
    for name, (fn, point) in cases.items():
        err = T.grad_check(fn, point, GRAD_STEP, max_coords=coords_per_tensor, rng=rng)
        results.append(CheckResult(f"seed{seed}/{name}", err, GRAD_TOLERANCE))
    return results


# ---------------------------------------------------------------- selftest


def _brute_metrics(cm: np.ndarray) -> dict[str, float]:
    """Per-definition metrics from an explicit list of (true, predicted) samples."""
    pairs = [(t, p) for t in range(cm.shape[0]) for p in range(cm.shape[1]) for _ in range(int(cm[t, p]))]
    n = len(pairs)
    k = cm.shape[0]
    prec = rec = f1 = 0.0
    for c in range(k):
        tp = sum(1 for t, p in pairs if t == c and p == c)
        pred_c = sum(1 for _, p in pairs if p == c)
        true_c = sum(1 for t, _ in pairs if t == c)
        pc = tp / pred_c if pred_c else 0.0
        rc = tp / true_c if true_c else 0.0
        fc = 2 * pc * rc / (pc + rc) if pc + rc else 0.0
        prec += true_c / n * pc
        rec += true_c / n * rc
        f1 += true_c / n * fc
    agree = sum(1 for t, p in pairs if t == p) / n
    chance = sum((sum(1 for t, _ in pairs if t == c) / n) * (sum(1 for _, p in pairs if p == c) / n) for c in range(k))
    kappa = 0.0 if chance == 1 else (agree - chance) / (1 - chance)
    return {"precision": prec, "recall": rec, "f1": f1, "kappa": kappa, "accuracy": agree}


def selftest(seed: int = 0, n_matrices: int = 200) -> list[CheckResult]:
    results = []
    mismatches = sum(
        1 for g in all_grades() if severity_from_grades(g) != SEVERITY_GRID[g.drusen_area][_column(g)]
    )
    sizes = sorted(len(enumerate_preimage(s)) for s in range(1, 10))
    partition_ok = sum(sizes) == 96
    results.append(CheckResult("table1/exhaustive_mismatches", float(mismatches + (not partition_ok)), 0.5))

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_matrices):
        k = int(rng.choice([2, 4, 6, 9]))
        counts = rng.integers(0, 21, size=(k, k))
        if counts.sum() == 0:
            counts[0, 0] = 1
        cm = ConfusionMatrix(counts)
        p, r, f, _ = weighted_prf(cm)
        ref = _brute_metrics(counts)
        got = {"precision": p, "recall": r, "f1": f, "kappa": cohen_kappa(cm), "accuracy": accuracy(cm)}
        worst = max(worst, max(abs(got[key] - ref[key]) for key in ref))
    results.append(CheckResult("metrics/max_abs_error_vs_bruteforce", worst, 1e-10))
    return results


def _column(g) -> int:
    if g.geographic_atrophy:
        return 5
    if g.depigmentation:
        return g.depigmentation + 1
    return int(g.increased_pigment)
