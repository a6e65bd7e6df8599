"""Supervised outcome prediction from a layout: clear, win, and number of balls potted.

The network is the layout encoder followed by one fully-connected layer and a
softmax. A model trained on the ``clear`` task also serves as the score function
for layout generation.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn
from .checkpoint import Checkpoint, CheckpointError
from .core import Layout, PackedLayouts, pack_layouts
from .pipeline import Featurizer
from .synth import make_rng

log = logging.getLogger(__name__)

TASK_CLASSES = {"clear": 2, "win": 2, "potted": 10}


class SingleClassError(ValueError):
    pass


class MissingLabelError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    task: str = "clear"

    def __post_init__(self):
        if self.task not in TASK_CLASSES:
            raise ValueError(f"unknown task {self.task!r}; expected one of {sorted(TASK_CLASSES)}")

    @property
    def class_count(self) -> int:
        return TASK_CLASSES[self.task]

    def label(self, layout: Layout) -> int:
        value = None if layout.labels is None else getattr(layout.labels, self.task)
        if value is None:
            raise MissingLabelError(f"layout {layout.id} has no {self.task!r} label")
        return int(value)

    def labels(self, layouts: Sequence[Layout]) -> np.ndarray:
        return np.array([self.label(l) for l in layouts], dtype=np.int64)


@dataclass(frozen=True)
class FitConfig:
    epochs: int = 60
    batch_size: int = 32
    val_fraction: float = 0.1
    eval_every: int = 50
    patience: int = 10
    seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def stratified_split(labels: np.ndarray, fraction: float, rng: np.random.Generator):
    """Per-class random hold-out of ``round(fraction * class size)`` items (at most size - 1)."""
    val, train = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = min(int(round(fraction * len(idx))), len(idx) - 1)
        val.extend(idx[:k].tolist())
        train.extend(idx[k:].tolist())
    return np.array(sorted(val), dtype=np.int64), np.array(sorted(train), dtype=np.int64)


@dataclass
class BLCNN:
    params: nn.Params
    net: nn.NetConfig
    featurizer: Featurizer
    task: TaskSpec
    fit: FitConfig = FitConfig()
    curves: dict = field(default_factory=dict)

    def logits_packed(self, packed: PackedLayouts, batch: int = 2048) -> np.ndarray:
        out = []
        for i in range(0, len(packed), batch):
            ids = self.featurizer.ids(packed.take(np.arange(i, min(i + batch, len(packed)))))
            v, _ = nn.encode_forward(self.params, ids)
            out.append(nn.dense_forward(v, self.params["head.W"], self.params["head.b"])[0])
        if not out:
            return np.zeros((0, self.task.class_count), dtype=np.float32)
        return np.concatenate(out)

    def predict_packed(self, packed: PackedLayouts) -> np.ndarray:
        return nn.softmax(self.logits_packed(packed).astype(np.float64))

    def predict(self, layouts: Sequence[Layout]) -> np.ndarray:
        return self.predict_packed(pack_layouts([l.canonical() for l in layouts], self.featurizer.spec))

    def clear_scores_packed(self, packed: PackedLayouts) -> np.ndarray:
        if self.task.task != "clear":
            raise CheckpointError(f"clear score needs a clear-task model, got {self.task.task!r}")
        return self.predict_packed(packed)[:, 1]

    def clear_scores(self, layouts: Sequence[Layout]) -> np.ndarray:
        return self.clear_scores_packed(pack_layouts([l.canonical() for l in layouts], self.featurizer.spec))

    def to_checkpoint(self) -> Checkpoint:
        meta = {"net": self.net.to_dict(), "task": self.task.task, "fit": self.fit.to_dict(), "curves": self.curves}
        meta.update(self.featurizer.to_meta())
        return Checkpoint("blcnn", meta, dict(self.params))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "BLCNN":
        ckpt.expect("blcnn")
        m = ckpt.meta
        return cls(dict(ckpt.arrays), nn.NetConfig.from_dict(m["net"]), Featurizer.from_meta(m), TaskSpec(m["task"]),
                   FitConfig(**m["fit"]), m.get("curves", {}))


def init_blcnn(net_cfg: nn.NetConfig, featurizer: Featurizer, n_classes: int, rng: np.random.Generator) -> nn.Params:
    params = nn.init_encoder(net_cfg, featurizer.vocab, featurizer.spec.n, rng)
    return nn.init_dense(params, "head", net_cfg.K, n_classes, rng)


def forward_backward(params: nn.Params, ids: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and its parameter gradients for one batch."""
    v, ecache = nn.encode_forward(params, ids)
    z, dcache = nn.dense_forward(v, params["head.W"], params["head.b"])
    loss, dz = nn.cross_entropy(z.astype(np.float64), y)
    dv, dW, db = nn.dense_backward(dz.astype(params["head.W"].dtype), dcache)
    grads = nn.encode_backward(dv, ecache)
    grads["head.W"] = dW
    grads["head.b"] = db
    return loss, grads


def _accuracy(model: BLCNN, packed: PackedLayouts, y: np.ndarray) -> float:
    return float((model.predict_packed(packed).argmax(axis=1) == y).mean())


def train_blcnn(layouts: Sequence[Layout], task: TaskSpec = TaskSpec(), net_cfg: nn.NetConfig = nn.NetConfig(),
                featurizer: Featurizer = Featurizer(), fit: FitConfig = FitConfig(),
                labels: Optional[np.ndarray] = None, max_steps: Optional[int] = None) -> BLCNN:
    """Cross-entropy training with Adam + L2 and early stopping on validation loss.

    ``labels`` overrides the layouts' own labels (used for shuffled-label controls).
    """
    y = task.labels(layouts) if labels is None else np.asarray(labels, dtype=np.int64)
    if len(y) != len(layouts):
        raise ValueError("one label per layout")
    if y.min() < 0 or y.max() >= task.class_count:
        raise ValueError(f"labels must lie in 0..{task.class_count - 1}")
    if len(np.unique(y)) < 2:
        raise SingleClassError("training set contains a single class")
    rng = make_rng([fit.seed, net_cfg.seed, 1])
    init_rng, split_rng, step_rng = rng.spawn(3)
    packed = pack_layouts([l.canonical() for l in layouts], featurizer.spec)
    val_idx, train_idx = stratified_split(y, fit.val_fraction, split_rng) if fit.val_fraction > 0 else (
        np.zeros(0, dtype=np.int64), np.arange(len(y)))
    if len(np.unique(y[train_idx])) < 2:
        raise SingleClassError("training split contains a single class")
    ids_all = featurizer.ids(packed)
    params = init_blcnn(net_cfg, featurizer, task.class_count, init_rng)
    state = nn.AdamState()
    stopper = nn.EarlyStopping(fit.patience)
    curves = {"step": [], "train_loss": [], "val_loss": [], "val_acc": []}
    budget = fit.epochs * max(1, math.ceil(len(train_idx) / fit.batch_size)) if max_steps is None else max_steps
    run = []
    model = BLCNN(params, net_cfg, featurizer, task, fit, curves)
    for step in range(1, budget + 1):
        batch = train_idx[step_rng.integers(0, len(train_idx), size=fit.batch_size)]
        loss, grads = forward_backward(params, ids_all[batch], y[batch])
        if not math.isfinite(loss):
            raise nn.NumericalError(f"cross-entropy went non-finite at step {step}")
        nn.adam_step(params, grads, state, net_cfg.learning_rate, net_cfg.l2_lambda)
        run.append(loss)
        if step % fit.eval_every == 0 or step == budget:
            train_loss = float(np.mean(run))
            run = []
            if len(val_idx):
                v = nn.encode(params, ids_all[val_idx])
                z = nn.dense_forward(v, params["head.W"], params["head.b"])[0].astype(np.float64)
                val_loss = nn.cross_entropy(z, y[val_idx])[0]
                val_acc = float((z.argmax(axis=1) == y[val_idx]).mean())
            else:
                val_loss, val_acc = train_loss, None
            curves["step"].append(step)
            curves["train_loss"].append(train_loss)
            curves["val_loss"].append(val_loss)
            curves["val_acc"].append(val_acc)
            log.info("blcnn[%s] step %d train %.4f val %.4f", task.task, step, train_loss, val_loss)
            if stopper.update(val_loss, params):
                break
    model.params = stopper.best_params if stopper.best_params is not None else params
    curves["best"] = stopper.best
    return model


def predict(model: BLCNN, layout: Layout) -> np.ndarray:
    return model.predict([layout])[0]


def clear_score(model: BLCNN, layout: Layout) -> float:
    return float(model.clear_scores([layout])[0])


def evaluate_accuracy(model: BLCNN, layouts: Sequence[Layout], labels: Optional[np.ndarray] = None) -> float:
    y = model.task.labels(layouts) if labels is None else np.asarray(labels)
    return _accuracy(model, pack_layouts([l.canonical() for l in layouts], model.featurizer.spec), y)
