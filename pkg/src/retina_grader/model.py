"""Shared inception-style trunk with one dense head per graded characteristic."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import serialization
from .severity import TASK_CLASS_COUNTS, TASKS, CharacteristicGrades, grades_from_probabilities, severity_from_grades
from .tensor import (
    Tensor,
    avg_pool3x3,
    concat_channels,
    conv2d,
    dense,
    dropout,
    global_average_pool,
    relu,
    softmax,
)

WEIGHTS_VERSION = 1
SHARED = "shared"


@dataclass(frozen=True)
class ModelConfig:
    input_side: int = 64
    block_count: int = 3
    base_width: int = 8
    trunk_dense_dim: int = 128
    head_dense_dims: tuple[int, int] = (64, 32)
    dropout_rate: float = 0.5
    task_class_counts: tuple[int, ...] = (2, 2, 4, 6)
    tasks: tuple[str, ...] = TASKS

    def __post_init__(self):
        if tuple(self.task_class_counts) != (2, 2, 4, 6):
            raise ValueError("task_class_counts must be (2, 2, 4, 6)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not self.tasks or any(t not in TASKS for t in self.tasks) or len(set(self.tasks)) != len(self.tasks):
            raise ValueError(f"tasks must be a non-empty subset of {TASKS}, got {self.tasks}")
        if self.block_count < 1:
            raise ValueError("block_count must be at least 1")
        need = self.min_input_side()
        if self.input_side < need:
            raise ValueError(
                f"input_side {self.input_side} too small for {self.block_count} blocks; minimum is {need}"
            )

    @classmethod
    def preset(cls, name: str, **overrides) -> ModelConfig:
        if name == "desk":
            base = cls()
        elif name == "paper":
            base = cls(input_side=512, block_count=10, base_width=16, trunk_dense_dim=1024, head_dense_dims=(256, 128))
        else:
            raise ValueError(f"unknown model preset {name!r}")
        return replace(base, **overrides) if overrides else base

    def reductions(self) -> int:
        return len([i for i in range(self.block_count) if block_is_reduction(i)])

    def min_input_side(self) -> int:
        # each stride-2 block needs at least 2 pixels to halve
        return 2 ** self.reductions()

    def to_json(self) -> dict:
        d = asdict(self)
        d["head_dense_dims"] = list(self.head_dense_dims)
        d["task_class_counts"] = list(self.task_class_counts)
        d["tasks"] = list(self.tasks)
        return d

    @classmethod
    def from_json(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["head_dense_dims"] = tuple(d["head_dense_dims"])
        d["task_class_counts"] = tuple(d["task_class_counts"])
        d["tasks"] = tuple(d["tasks"])
        return cls(**d)


def block_is_reduction(index: int) -> bool:
    """Blocks 0, 2, 4, ... halve the spatial size."""
    return index % 2 == 0


def block_width(cfg: ModelConfig, index: int) -> int:
    """Per-branch channel width; doubles after every reduction block pair."""
    return cfg.base_width * 2 ** (index // 2)


def head_group(task: str) -> str:
    return f"head_{task}"


def _he_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class MultiTaskModel:
    """Named parameters grouped into ``shared`` and ``head_<task>``.

    Trainability is the ``requires_grad`` flag on each parameter tensor.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    # ---- parameter bookkeeping

    @staticmethod
    def group_of(name: str) -> str:
        return name.split("/", 1)[0]

    def group(self, group: str) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if self.group_of(n) == group}

    def groups(self) -> list[str]:
        return [SHARED] + [head_group(t) for t in self.config.tasks]

    def parameter_count(self, group: Optional[str] = None) -> int:
        items = self.params if group is None else self.group(group)
        return sum(p.size for p in items.values())

    def set_shared_trainable(self, flag: bool) -> None:
        for p in self.group(SHARED).values():
            p.requires_grad = flag

    def set_trainable(self, groups: Sequence[str]) -> None:
        wanted = set(groups)
        for name, p in self.params.items():
            p.requires_grad = self.group_of(name) in wanted

    def trainable(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if p.requires_grad}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], groups: Optional[Sequence[str]] = None) -> None:
        for name, arr in state.items():
            if groups is not None and self.group_of(name) not in groups:
                continue
            if name not in self.params:
                raise ValueError(f"unknown parameter {name!r}")
            if arr.shape != self.params[name].shape:
                raise ValueError(f"parameter {name!r}: shape {arr.shape} != {self.params[name].shape}")
            self.params[name].data = np.array(arr, dtype=self.params[name].data.dtype, copy=True)

    def astype(self, dtype) -> MultiTaskModel:
        """Copy with every parameter cast to ``dtype``; trainability is kept."""
        params = {n: Tensor(p.data.astype(dtype), requires_grad=p.requires_grad) for n, p in self.params.items()}
        return MultiTaskModel(self.config, params)

    # ---- forward

    def _conv(self, x: Tensor, name: str, stride: int = 1) -> Tensor:
        return relu(conv2d(x, self.params[name + "/w"], self.params[name + "/b"], stride=stride, padding="same"))

    def _block(self, x: Tensor, i: int) -> Tensor:
        s = 2 if block_is_reduction(i) else 1
        p = f"{SHARED}/block{i}"
        b1 = self._conv(x, f"{p}/b1_1x1", stride=s)
        b2 = self._conv(self._conv(x, f"{p}/b2_1x1"), f"{p}/b2_3x3", stride=s)
        b3 = self._conv(self._conv(self._conv(x, f"{p}/b3_1x1"), f"{p}/b3_3x3a", stride=s), f"{p}/b3_3x3b")
        b4 = self._conv(avg_pool3x3(x, stride=s), f"{p}/b4_1x1")
        return concat_channels([b1, b2, b3, b4])

    def _dense(self, x: Tensor, name: str) -> Tensor:
        return dense(x, self.params[name + "/w"], self.params[name + "/b"])

    def forward_trunk(self, batch, mode: str = "infer", rng: Optional[np.random.Generator] = None) -> Tensor:
        return dropout(self.trunk_features(batch), self.config.dropout_rate, mode, rng)

    def trunk_features(self, batch) -> Tensor:
        """Shared representation before the trunk's dropout (identical in every mode)."""
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        if x.data.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (self.config.input_side,) * 2:
            raise ValueError(
                f"expected input [N, 3, {self.config.input_side}, {self.config.input_side}], got {list(x.shape)}"
            )
        for i in range(self.config.block_count):
            x = self._block(x, i)
        return relu(self._dense(global_average_pool(x), f"{SHARED}/dense"))

    def forward_head(self, features: Tensor, task: str, mode: str = "infer", rng=None) -> Tensor:
        g = head_group(task)
        h = relu(self._dense(features, f"{g}/dense1"))
        h = dropout(h, self.config.dropout_rate, mode, rng)
        h = relu(self._dense(h, f"{g}/dense2"))
        return softmax(self._dense(h, f"{g}/out"))

    def forward(self, batch, mode: str = "infer", rng: Optional[np.random.Generator] = None) -> dict[str, Tensor]:
        """Class probabilities per task, keyed by task name."""
        if mode == "train" and rng is None:
            raise ValueError("train mode needs an rng for dropout")
        features = self.forward_trunk(batch, mode, rng)
        return {t: self.forward_head(features, t, mode, rng) for t in self.config.tasks}

    # ---- persistence

    def save(self, path: str | Path) -> None:
        header = {"version": WEIGHTS_VERSION, "model": self.config.to_json()}
        serialization.save_weights(path, {n: p.data for n, p in self.params.items()}, header)


def build_model(cfg: ModelConfig, rng: np.random.Generator | int = 0) -> MultiTaskModel:
    """He-uniform weights, zero biases, deterministic in ``rng``."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    params: dict[str, Tensor] = {}

    def conv(name, cin, cout, k):
        params[name + "/w"] = Tensor(_he_uniform(rng, (cout, cin, k, k), cin * k * k), requires_grad=True)
        params[name + "/b"] = Tensor(np.zeros(cout, np.float32), requires_grad=True)

    def fc(name, din, dout):
        params[name + "/w"] = Tensor(_he_uniform(rng, (din, dout), din), requires_grad=True)
        params[name + "/b"] = Tensor(np.zeros(dout, np.float32), requires_grad=True)

    cin = 3
    for i in range(cfg.block_count):
        w = block_width(cfg, i)
        p = f"{SHARED}/block{i}"
        conv(f"{p}/b1_1x1", cin, w, 1)
        conv(f"{p}/b2_1x1", cin, w, 1)
        conv(f"{p}/b2_3x3", w, w, 3)
        conv(f"{p}/b3_1x1", cin, w, 1)
        conv(f"{p}/b3_3x3a", w, w, 3)
        conv(f"{p}/b3_3x3b", w, w, 3)
        conv(f"{p}/b4_1x1", cin, w, 1)
        cin = 4 * w
    fc(f"{SHARED}/dense", cin, cfg.trunk_dense_dim)
    h1, h2 = cfg.head_dense_dims
    for task in cfg.tasks:
        g = head_group(task)
        fc(f"{g}/dense1", cfg.trunk_dense_dim, h1)
        fc(f"{g}/dense2", h1, h2)
        fc(f"{g}/out", h2, TASK_CLASS_COUNTS[task])
    return MultiTaskModel(cfg, params)


def load_model(
    path: str | Path,
    expected: Optional[ModelConfig] = None,
    groups: Optional[Sequence[str]] = None,
    rng: np.random.Generator | int = 0,
) -> MultiTaskModel:
    """Load a weights container.

    With ``groups``, only those parameter groups are restored and the rest
    keep a fresh initialisation drawn from ``rng`` (warm start).
    """
    tensors, header = serialization.load_weights(path)
    if header.get("version") != WEIGHTS_VERSION:
        raise ValueError(f"{path}: unsupported weights version {header.get('version')!r}")
    stored = ModelConfig.from_json(header["model"])
    cfg = stored
    if expected is not None:
        if expected != stored:
            diffs = [k for k, v in expected.to_json().items() if stored.to_json().get(k) != v]
            if groups is None or any(k in ("input_side", "block_count", "base_width", "trunk_dense_dim") for k in diffs):
                raise ValueError(f"{path}: config mismatch in {', '.join(diffs)}")
        cfg = expected
    model = build_model(cfg, rng)
    wanted = set(groups) if groups is not None else None
    bad = []
    for name, arr in tensors.items():
        if wanted is not None and MultiTaskModel.group_of(name) not in wanted:
            continue
        if name not in model.params:
            bad.append(f"{name} (unexpected)")
        elif model.params[name].shape != arr.shape:
            bad.append(f"{name} {arr.shape} != {model.params[name].shape}")
    missing = [n for n in model.params if (wanted is None or MultiTaskModel.group_of(n) in wanted) and n not in tensors]
    bad.extend(f"{n} (missing)" for n in missing)
    if bad:
        raise ValueError(f"{path}: incompatible tensors: {'; '.join(bad)}")
    model.load_state_dict(tensors, groups=groups)
    return model


@dataclass
class Prediction:
    grades: CharacteristicGrades
    severity: int
    probabilities: dict[str, np.ndarray] = field(default_factory=dict)


def predict_batch(model: MultiTaskModel, batch: np.ndarray) -> list[Prediction]:
    if tuple(model.config.tasks) != TASKS:
        raise ValueError("severity prediction needs all four task heads")
    probs = {t: v.data.astype(np.float64) for t, v in model.forward(batch, mode="infer").items()}
    out = []
    for i in range(batch.shape[0]):
        row = {t: probs[t][i] for t in TASKS}
        grades = grades_from_probabilities(*(row[t] for t in TASKS))
        out.append(Prediction(grades, severity_from_grades(grades), row))
    return out


def predict_severity(model: MultiTaskModel, img: np.ndarray) -> tuple[CharacteristicGrades, int, dict[str, np.ndarray]]:
    """Grades, severity and per-task probabilities for one ``(3, S, S)`` image."""
    pred = predict_batch(model, np.asarray(img)[None])[0]
    return pred.grades, pred.severity, pred.probabilities
