"""Adam, multi-task loss, early stopping and the two-phase training schedule."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .data import DatasetManifest, ImageStore, batch_iterator, labels_of
from .model import SHARED, ModelConfig, MultiTaskModel, build_model, head_group
from .preprocess import augment
from .severity import TASKS
from .tensor import Tensor, add, backward, categorical_cross_entropy, dropout, scale

logger = logging.getLogger(__name__)

IMPROVEMENT_TOLERANCE = 1e-6


class DivergenceError(RuntimeError):
    """Validation loss became NaN or infinite."""


# ---------------------------------------------------------------- Adam


@dataclass(frozen=True)
class AdamHyper:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], state: AdamState, hyper: AdamHyper) -> AdamState:
    """One bias-corrected Adam update of every parameter with ``requires_grad``.

    Moments are kept in float64. A trainable parameter with no gradient is
    treated as having a zero gradient.
    """
    state.t += 1
    t = state.t
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = hyper.learning_rate * (m / c1) / (np.sqrt(v / c2) + hyper.epsilon)
        p.data = (p.data.astype(np.float64) - update).astype(p.data.dtype)
    return state


# ---------------------------------------------------------------- losses


def multitask_loss(
    outputs: dict[str, Tensor],
    labels: dict[str, np.ndarray],
    weights: Optional[dict[str, float]] = None,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of per-task categorical cross-entropies (unweighted by default)."""
    sizes = {outputs[t].shape[0] for t in outputs} | {len(labels[t]) for t in outputs}
    if len(sizes) != 1:
        raise ValueError(f"batch sizes disagree across tasks: {sorted(sizes)}")
    total: Optional[Tensor] = None
    per_task: dict[str, float] = {}
    for task, probs in outputs.items():
        loss = categorical_cross_entropy(probs, labels[task])
        per_task[task] = loss.item()
        w = 1.0 if weights is None else weights.get(task, 1.0)
        term = loss if w == 1.0 else scale(loss, w)
        total = term if total is None else add(total, term)
    return total, per_task


# ---------------------------------------------------------------- early stopping


@dataclass
class EarlyStopState:
    patience: int
    best_loss: float = math.inf
    best_epoch: int = -1
    best_checkpoint: Optional[dict[str, np.ndarray]] = None
    epochs_since_improvement: int = 0

    def update(self, epoch: int, loss: float, snapshot: Callable[[], dict[str, np.ndarray]]) -> bool:
        """Record one validation result; True when training should stop."""
        if math.isnan(loss) or math.isinf(loss):
            raise DivergenceError(f"validation loss is {loss} at epoch {epoch}")
        if loss < self.best_loss - IMPROVEMENT_TOLERANCE:
            self.best_loss = loss
            self.best_epoch = epoch
            self.best_checkpoint = snapshot()
            self.epochs_since_improvement = 0
        else:
            self.epochs_since_improvement += 1
        return self.epochs_since_improvement >= self.patience


def run_early_stopping(
    train_epoch: Callable[[int], None],
    validate: Callable[[int], float],
    snapshot: Callable[[], dict[str, np.ndarray]],
    patience: int,
    max_epochs: int,
    state: Optional[EarlyStopState] = None,
) -> EarlyStopState:
    """Alternate training epochs and validation until patience runs out.

    Epochs are numbered from 1. A pre-seeded ``state`` lets the starting
    weights compete as epoch 0.
    """
    state = state or EarlyStopState(patience)
    for epoch in range(1, max_epochs + 1):
        train_epoch(epoch)
        if state.update(epoch, validate(epoch), snapshot):
            break
    return state


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 16
    patience_phase1: int = 10
    patience_phase2: int = 5
    max_epochs: int = 200
    augment: bool = True
    seed: int = 0
    task_weights: Optional[dict[str, float]] = None

    @property
    def adam(self) -> AdamHyper:
        return AdamHyper(self.learning_rate, self.beta1, self.beta2, self.epsilon)

    def to_json(self) -> dict:
        return asdict(self)


LOG_FIELDS = (
    ["phase", "epoch", "task"]
    + [f"train_{t}" for t in TASKS]
    + ["train_total"]
    + [f"val_{t}" for t in TASKS]
    + ["val_total"]
)


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, phase: str, epoch: int, task: str, train: dict[str, float], val: dict[str, float]) -> None:
        row = {"phase": phase, "epoch": epoch, "task": task}
        for prefix, values in (("train", train), ("val", val)):
            for t in TASKS:
                row[f"{prefix}_{t}"] = values.get(t)
            row[f"{prefix}_total"] = sum(values.values()) if values else None
        self.rows.append(row)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for row in self.rows:
            writer.writerow(["" if row[k] is None else (f"{row[k]:.9g}" if isinstance(row[k], float) else row[k])
                             for k in LOG_FIELDS])
        return buf.getvalue()


@dataclass
class TrainResult:
    model: MultiTaskModel
    log: TrainingLog
    phase1_best_epoch: int = -1
    phase1_best_loss: float = math.inf
    phase1_state: Optional[dict[str, np.ndarray]] = None
    phase2_best: dict[str, float] = field(default_factory=dict)
    phase2_start: dict[str, float] = field(default_factory=dict)


# ---------------------------------------------------------------- loops


def _augmented(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(img, rng) for img in images])


def _streams(seed: int, label: str) -> np.random.Generator:
    # independent stream per purpose, stable under changes elsewhere
    key = [ord(c) for c in label]
    return np.random.default_rng([seed, *key])


def evaluate_losses(
    model: MultiTaskModel,
    manifest: DatasetManifest,
    split: str,
    store: ImageStore,
    batch_size: int = 64,
    tasks: Optional[Sequence[str]] = None,
) -> dict[str, float]:
    """Mean per-task cross-entropy over a split in infer mode, without augmentation."""
    tasks = tuple(tasks or model.config.tasks)
    sums = {t: 0.0 for t in tasks}
    n = 0
    for images, labels, _ in batch_iterator(manifest, split, batch_size, store=store):
        features = model.forward_trunk(images, "infer")
        for t in tasks:
            probs = model.forward_head(features, t, "infer")
            sums[t] += categorical_cross_entropy(probs, labels[t]).item() * len(images)
        n += len(images)
    return {t: sums[t] / n for t in tasks}


def _check_split(manifest: DatasetManifest, split: str) -> None:
    if not manifest.images(split):
        raise ValueError(f"split {split!r} is empty")


def train_phase1(
    model: MultiTaskModel,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    store: Optional[ImageStore] = None,
    log: Optional[TrainingLog] = None,
    phase: str = "phase1",
) -> tuple[EarlyStopState, TrainingLog]:
    """Joint training of every head plus the trunk; early stop on total validation loss.

    The model is left holding the best checkpoint.
    """
    _check_split(manifest, "train")
    _check_split(manifest, "val")
    store = store or ImageStore(manifest, model.config.input_side)
    log = log or TrainingLog()
    model.set_trainable(model.groups())
    adam = AdamState()
    aug_rng = _streams(cfg.seed, f"{phase}/augment")
    drop_rng = _streams(cfg.seed, f"{phase}/dropout")
    train_losses: dict[str, float] = {}

    def train_epoch(epoch: int) -> None:
        sums = {t: 0.0 for t in model.config.tasks}
        n = 0
        for images, labels, _ in batch_iterator(
            manifest, "train", cfg.batch_size, shuffle=True, seed=cfg.seed, epoch=epoch, store=store
        ):
            if cfg.augment:
                images = _augmented(images, aug_rng)
            outputs = model.forward(images, "train", drop_rng)
            loss, per_task = multitask_loss(outputs, labels, cfg.task_weights)
            backward(loss, inputs=model.trainable().values())
            adam_step(model.params, adam, cfg.adam)
            for t, v in per_task.items():
                sums[t] += v * len(images)
            n += len(images)
        train_losses.clear()
        train_losses.update({t: s / n for t, s in sums.items()})

    def validate(epoch: int) -> float:
        val = evaluate_losses(model, manifest, "val", store)
        log.add(phase, epoch, "all" if len(model.config.tasks) > 1 else model.config.tasks[0], train_losses, val)
        weights = cfg.task_weights or {}
        total = sum(weights.get(t, 1.0) * v for t, v in val.items())
        logger.info("%s epoch %d val_total=%.5f %s", phase, epoch, total,
                    " ".join(f"{t}={v:.4f}" for t, v in val.items()))
        return total

    state = run_early_stopping(train_epoch, validate, model.state_dict, cfg.patience_phase1, cfg.max_epochs)
    if state.best_checkpoint is not None:
        model.load_state_dict(state.best_checkpoint)
    return state, log


def _trunk_features(model: MultiTaskModel, manifest, split, store, batch_size=64) -> tuple[np.ndarray, dict]:
    feats, labs = [], []
    for images, labels, _ in batch_iterator(manifest, split, batch_size, store=store):
        feats.append(model.forward_trunk(images, "infer").data)
        labs.append(labels)
    labels = {t: np.concatenate([lb[t] for lb in labs]) for t in TASKS}
    return np.concatenate(feats), labels


def train_phase2(
    model: MultiTaskModel,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    store: Optional[ImageStore] = None,
    log: Optional[TrainingLog] = None,
) -> tuple[dict[str, float], dict[str, float], TrainingLog]:
    """Fine-tune each head in turn with the trunk frozen; patience on that task's validation loss.

    The starting head competes as epoch 0, so a task's selected loss never
    exceeds its phase-1 value. Returns (start losses, best losses, log).
    """
    _check_split(manifest, "train")
    _check_split(manifest, "val")
    store = store or ImageStore(manifest, model.config.input_side)
    log = log or TrainingLog()
    model.set_trainable([])
    # frozen trunk in infer mode is a fixed map, so validation features are computed once
    val_feats, val_labels = _trunk_features(model, manifest, "val", store)
    # training batches depend only on the epoch (shuffle + augmentation), so every head
    # sees the same inputs at a given epoch and the trunk runs once per epoch overall
    epoch_cache: dict[int, list[tuple[np.ndarray, dict]]] = {}

    def epoch_batches(epoch: int) -> list[tuple[np.ndarray, dict]]:
        if epoch not in epoch_cache:
            aug_rng = _streams(cfg.seed, f"phase2/augment/{epoch}")
            batches = []
            for images, labels, _ in batch_iterator(
                manifest, "train", cfg.batch_size, shuffle=True, seed=cfg.seed, epoch=10_000 + epoch, store=store
            ):
                if cfg.augment:
                    images = _augmented(images, aug_rng)
                batches.append((model.trunk_features(images).data, labels))
            epoch_cache[epoch] = batches
        return epoch_cache[epoch]

    start, best = {}, {}
    for task in model.config.tasks:
        group = head_group(task)
        model.set_trainable([group])
        adam = AdamState()
        drop_rng = _streams(cfg.seed, f"phase2/{task}/dropout")
        train_loss: dict[str, float] = {}

        def val_loss() -> float:
            probs = model.forward_head(Tensor(val_feats), task, "infer")
            return categorical_cross_entropy(probs, val_labels[task]).item()

        def snapshot(group=group) -> dict[str, np.ndarray]:
            return {n: p.data.copy() for n, p in model.group(group).items()}

        def train_epoch(epoch: int, task=task, adam=adam, drop_rng=drop_rng) -> None:
            total, n = 0.0, 0
            for feats, labels in epoch_batches(epoch):
                features = dropout(Tensor(feats), model.config.dropout_rate, "train", drop_rng)
                probs = model.forward_head(features, task, "train", drop_rng)
                loss = categorical_cross_entropy(probs, labels[task])
                backward(loss, inputs=model.trainable().values())
                adam_step(model.params, adam, cfg.adam)
                total += loss.item() * len(feats)
                n += len(feats)
            train_loss.clear()
            train_loss[task] = total / n

        def validate(epoch: int, task=task) -> float:
            v = val_loss()
            log.add("phase2", epoch, task, train_loss, {task: v})
            return v

        initial = val_loss()
        state = EarlyStopState(cfg.patience_phase2)
        state.update(0, initial, snapshot)
        log.add("phase2", 0, task, {}, {task: initial})
        state = run_early_stopping(train_epoch, validate, snapshot, cfg.patience_phase2, cfg.max_epochs, state)
        model.load_state_dict(state.best_checkpoint)
        start[task] = initial
        best[task] = state.best_loss
    model.set_trainable(model.groups())
    return start, best, log


def train_multitask(
    manifest: DatasetManifest,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    store: Optional[ImageStore] = None,
    init: Optional[MultiTaskModel] = None,
    phase1_callback: Optional[Callable[[MultiTaskModel], None]] = None,
) -> TrainResult:
    """Phase 1 then phase 2; the result holds the assembled final model."""
    model = init or build_model(model_cfg, _streams(cfg.seed, "init"))
    store = store or ImageStore(manifest, model.config.input_side)
    state, log = train_phase1(model, manifest, cfg, store)
    phase1_state = model.state_dict()
    if phase1_callback is not None:
        phase1_callback(model)
    start, best, log = train_phase2(model, manifest, cfg, store, log)
    return TrainResult(model, log, state.best_epoch, state.best_loss, phase1_state, best, start)


def train_singletask(
    task: str,
    manifest: DatasetManifest,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    store: Optional[ImageStore] = None,
) -> TrainResult:
    """Independent trunk plus one head, trained on one task with phase-1 early stopping."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {TASKS}")
    single_cfg = ModelConfig(**{**model_cfg.__dict__, "tasks": (task,)})
    model = build_model(single_cfg, _streams(cfg.seed, f"init/{task}"))
    state, log = train_phase1(model, manifest, cfg, store, phase=f"single/{task}")
    return TrainResult(model, log, state.best_epoch, state.best_loss, model.state_dict())
