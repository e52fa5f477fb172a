"""Training recipe and evaluation harness.

Cross-entropy loss, global-norm gradient clipping (default 1.0), Adam with
decoupled weight decay, an epoch loop with seeded shuffling, optional
augmentation, early stopping on validation accuracy with best-checkpoint
restore, and metric reporting (loss/accuracy curves, confusion matrix,
wall time).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import rng as rng_streams
from . import tensor as T
from . import vit
from .data import LabeledDataset, Preprocessor
from .errors import ConfigError, DataError, NumericalError
from .tensor import Tensor


@dataclass(frozen=True)
class LRSchedule:
    """`constant`, or `step`: multiply by `gamma` at each milestone epoch (1-based)."""

    kind: str = "constant"
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1

    def __post_init__(self):
        if self.kind not in ("constant", "step"):
            raise ConfigError(f"schedule kind must be 'constant' or 'step', got {self.kind!r}")
        if self.kind == "step" and not self.milestones:
            raise ConfigError("step schedule needs at least one milestone epoch")

    def lr_at(self, base_lr: float, epoch: int) -> float:
        if self.kind == "constant":
            return base_lr
        passed = sum(1 for m in self.milestones if epoch >= m)
        return base_lr * self.gamma ** passed


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    schedule: LRSchedule = field(default_factory=LRSchedule)
    clip_norm: float = 1.0
    weight_decay: float = 0.0
    dropout_p: float | None = None  # None: use the model config's value
    batch_size: int = 64
    max_epochs: int = 15
    early_stop_patience: int = 0  # 0 disables early stopping
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.dropout_p is not None and not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.early_stop_patience < 0:
            raise ConfigError(f"early_stop_patience must be >= 0, got {self.early_stop_patience}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"]["milestones"] = list(self.schedule.milestones)
        return d


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(m={k: np.zeros_like(p.values) for k, p in params.items()},
                   v={k: np.zeros_like(p.values) for k, p in params.items()})


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer `labels` under softmax(logits).

    Computed through log-sum-exp, so arbitrarily large logits stay finite.
    """
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"expected [B, K] logits, got shape {logits.shape}")
    b, k = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must be in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros((b, k), dtype=logits.dtype)
    onehot[np.arange(b), labels] = 1.0
    logp = T.log_softmax(logits, axis=1)
    return T.scale(T.tsum(T.multiply(logp, Tensor(onehot))), -1.0 / b)


def global_grad_norm(params: Iterable[Tensor]) -> float:
    """Single L2 norm over all gradients jointly (accumulated in float64)."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            g = p.grad.astype(np.float64, copy=False)
            total += float((g * g).sum())
    return math.sqrt(total)


def clip_gradients(params: dict[str, Tensor] | Iterable[Tensor], clip_norm: float = 1.0) -> float:
    """Scale every gradient by clip_norm/global_norm when the global norm
    exceeds clip_norm; returns the applied coefficient (1.0 when untouched)."""
    if clip_norm <= 0:
        raise ConfigError(f"clip_norm must be positive, got {clip_norm}")
    plist = list(params.values()) if isinstance(params, dict) else list(params)
    norm = global_grad_norm(plist)
    if norm <= clip_norm or norm == 0.0:
        return 1.0
    coef = clip_norm / norm
    for p in plist:
        if p.grad is not None:
            p.grad *= np.asarray(coef, dtype=p.grad.dtype)
    return coef


def adam_step(params: dict[str, Tensor], state: AdamState, config: TrainConfig,
              lr: float | None = None) -> None:
    """One bias-corrected Adam update; weight decay is decoupled (applied
    directly to the weights, never mixed into the moments)."""
    lr = config.learning_rate if lr is None else lr
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise NumericalError(f"parameter {name!r} has no gradient; run backward first")
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if config.weight_decay > 0.0:
            update = update + config.weight_decay * p.values
        p.values -= np.asarray(lr, dtype=p.values.dtype) * update.astype(p.values.dtype, copy=False)


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted; integer counts."""

    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    def add_batch(self, true_labels, predictions) -> None:
        for t, p in zip(np.asarray(true_labels), np.asarray(predictions)):
            self.counts[int(t), int(p)] += 1

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return int(np.trace(self.counts)) / self.total

    def per_class_accuracy(self) -> list[float]:
        rows = self.counts.sum(axis=1)
        return [float(self.counts[i, i] / rows[i]) if rows[i] else 0.0
                for i in range(self.counts.shape[0])]

    def to_lists(self) -> list[list[int]]:
        return [[int(v) for v in row] for row in self.counts]

    @classmethod
    def from_lists(cls, rows: list[list[int]]) -> "ConfusionMatrix":
        arr = np.array(rows, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or (arr < 0).any():
            raise ValueError(f"confusion matrix must be square and nonnegative, got shape {arr.shape}")
        return cls(arr)


@dataclass
class MetricsReport:
    """Everything a finished run reports: per-epoch curves, the final
    confusion matrix, wall time, and the full config echo."""

    model: str
    augmented: bool
    epochs_trained: int
    total_time_sec: float
    final_val_accuracy: float
    curves: dict[str, list[float]]
    confusion: ConfusionMatrix
    config: dict

    CURVE_KEYS = ("train_loss", "train_accuracy", "val_loss", "val_accuracy")

    def validate(self) -> None:
        for key in self.CURVE_KEYS:
            series = self.curves.get(key)
            if not series:
                raise ValueError(f"curve {key!r} is missing or empty")
            if len(series) != self.epochs_trained:
                raise ValueError(f"curve {key!r} has {len(series)} points, expected {self.epochs_trained}")
        for key in ("train_accuracy", "val_accuracy"):
            if any(not 0.0 <= v <= 1.0 for v in self.curves[key]):
                raise ValueError(f"curve {key!r} has values outside [0, 1]")
        if not 0.0 <= self.final_val_accuracy <= 1.0:
            raise ValueError(f"final_val_accuracy {self.final_val_accuracy} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "augmented": self.augmented,
            "epochs_trained": self.epochs_trained,
            "total_time_sec": self.total_time_sec,
            "final_val_accuracy": self.final_val_accuracy,
            "curves": self.curves,
            "confusion_matrix": self.confusion.to_lists(),
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        return cls(
            model=doc["model"],
            augmented=doc["augmented"],
            epochs_trained=doc["epochs_trained"],
            total_time_sec=doc["total_time_sec"],
            final_val_accuracy=doc["final_val_accuracy"],
            curves=doc["curves"],
            confusion=ConfusionMatrix.from_lists(doc["confusion_matrix"]),
            config=doc["config"],
        )


def emit_report(report: MetricsReport, path: str | Path) -> None:
    """Validate and write the report as JSON."""
    report.validate()
    Path(path).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))


def load_report(path: str | Path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Train / evaluate
# ---------------------------------------------------------------------------

def _batches(n: int, batch_size: int, order=None):
    idx = np.arange(n) if order is None else np.asarray(order)
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]


def _assemble(dataset: LabeledDataset, indices, preprocess: Preprocessor, dtype,
              train: bool = False, augment_enabled: bool = False,
              aug_rng_for: Callable[[int], np.random.Generator] | None = None):
    arrays = []
    for i in indices:
        rng = aug_rng_for(int(i)) if aug_rng_for is not None else None
        arrays.append(preprocess(dataset.image(int(i)), rng=rng, train=train,
                                 augment_enabled=augment_enabled))
    x = Tensor(np.stack(arrays).astype(dtype))
    y = np.array([dataset.label(int(i)) for i in indices], dtype=np.int64)
    return x, y


def _evaluate_full(model: vit.ViTModel, dataset: LabeledDataset, preprocess: Preprocessor,
                   batch_size: int) -> tuple[float, float, ConfusionMatrix]:
    """(mean loss, accuracy, confusion matrix) in eval mode."""
    cm = ConfusionMatrix.empty(model.config.num_classes)
    loss_sum = 0.0
    with T.no_grad():
        for chunk in _batches(len(dataset), batch_size):
            x, y = _assemble(dataset, chunk, preprocess, model.dtype)
            logits = vit.forward(model, x, mode="eval")
            loss_sum += cross_entropy(logits, y).item() * len(chunk)
            cm.add_batch(y, np.argmax(logits.values, axis=1))
    return loss_sum / len(dataset), cm.accuracy, cm


def evaluate(model: vit.ViTModel, dataset: LabeledDataset, preprocess: Preprocessor,
             batch_size: int = 64) -> tuple[float, ConfusionMatrix]:
    """Deterministic eval-mode pass; accuracy equals trace/sum of the matrix."""
    if len(dataset) == 0:
        raise DataError("cannot evaluate an empty dataset")
    _, accuracy, cm = _evaluate_full(model, dataset, preprocess, batch_size)
    return accuracy, cm


def train(model: vit.ViTModel, train_set: LabeledDataset, val_set: LabeledDataset,
          config: TrainConfig, preprocess: Preprocessor, augment_enabled: bool = False,
          model_name: str = "vit", step_callback: Callable[[int, float], None] | None = None,
          config_echo: dict | None = None) -> MetricsReport:
    """Run the full recipe and return the metrics report.

    Per epoch: seeded shuffle, mini-batch forward (train mode) -> loss ->
    backward -> global-norm clip -> Adam step, then a validation pass.
    Training stops after `early_stop_patience` epochs without a validation
    accuracy improvement (patience 0 disables the check) and the
    best-validation parameters are restored before the final confusion
    matrix is computed, so the returned model is the best one seen.
    Patience counts strictly-greater improvements; among equal-best epochs
    the snapshot keeps the most recent one.

    Non-finite loss aborts with a diagnostic.  `step_callback(step, loss)`
    is invoked after every optimizer step (used by the overfit tests).
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise DataError(f"train/val sets must be non-empty, got {len(train_set)}/{len(val_set)}")
    params = model.params
    state = AdamState.for_params(params)
    dropout_p = model.config.dropout_p if config.dropout_p is None else config.dropout_p

    curves: dict[str, list[float]] = {k: [] for k in MetricsReport.CURVE_KEYS}
    best_acc = -1.0
    best_snapshot = model.snapshot()
    epochs_without_improvement = 0
    epochs_run = 0
    step = 0
    start = time.perf_counter()

    for epoch in range(1, config.max_epochs + 1):
        lr = config.schedule.lr_at(config.learning_rate, epoch)
        order = rng_streams.substream(config.seed, "shuffle", epoch).permutation(len(train_set))
        loss_sum = 0.0
        correct = 0
        for chunk in _batches(len(train_set), config.batch_size, order):
            x, y = _assemble(
                train_set, chunk, preprocess, model.dtype,
                train=True, augment_enabled=augment_enabled,
                aug_rng_for=(lambda i, e=epoch: rng_streams.substream(config.seed, "augment", e, i)),
            )
            step += 1
            dropout_rng = rng_streams.substream(config.seed, "dropout", step) if dropout_p > 0 else None
            logits = vit.forward(model, x, mode="train", rng=dropout_rng, dropout_p=dropout_p)
            loss = cross_entropy(logits, y)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise NumericalError(
                    f"training diverged: loss={loss_value} at epoch {epoch}, step {step}"
                )
            T.zero_grad(params.values())
            loss.backward()
            clip_gradients(params, config.clip_norm)
            adam_step(params, state, config, lr=lr)
            loss_sum += loss_value * len(chunk)
            correct += int((np.argmax(logits.values, axis=1) == y).sum())
            if step_callback is not None:
                step_callback(step, loss_value)

        val_loss, val_acc, _ = _evaluate_full(model, val_set, preprocess, config.batch_size)
        curves["train_loss"].append(loss_sum / len(train_set))
        curves["train_accuracy"].append(correct / len(train_set))
        curves["val_loss"].append(val_loss)
        curves["val_accuracy"].append(val_acc)
        epochs_run = epoch

        if val_acc >= best_acc:
            improved = val_acc > best_acc
            best_acc = val_acc
            best_snapshot = model.snapshot()
            if improved:
                epochs_without_improvement = 0
            else:
                epochs_without_improvement += 1
        else:
            epochs_without_improvement += 1
        if (config.early_stop_patience > 0
                and epochs_without_improvement >= config.early_stop_patience):
            break

    model.restore(best_snapshot)
    _, final_acc, final_cm = _evaluate_full(model, val_set, preprocess, config.batch_size)
    elapsed = time.perf_counter() - start

    return MetricsReport(
        model=model_name,
        augmented=augment_enabled,
        epochs_trained=epochs_run,
        total_time_sec=elapsed,
        final_val_accuracy=final_acc,
        curves=curves,
        confusion=final_cm,
        config=config_echo if config_echo is not None else config.to_dict(),
    )
