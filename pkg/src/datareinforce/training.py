"""Losses, optimizer, schedules, the training loop, and evaluation.

Objectives come in two families: hard-label cross entropy with label
smoothing, and a divergence loss against dense target rows (teacher outputs,
stored or live).  The divergence is KL(target || student) without a
temperature and without any cross-entropy mixing; both families share the
same logit gradient (softmax minus target, averaged over the batch).

Training is deterministic for a fixed config: initialization, shuffling, and
any online augmentation draw from streams derived from the config seed, and
all arithmetic is plain numpy, so two identical runs produce bit-identical
parameters.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import LabeledDataset
from .models import Model
from .rng import SeededRng

ECE_BINS = 15


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    ls = log_softmax(logits)
    return np.exp(ls)


def kl_loss(log_probs: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean KL(target || student) plus its gradient w.r.t. the log-probs.

    Zero target entries contribute zero to both terms.
    """
    t = np.asarray(targets, dtype=np.float64)
    ent = np.where(t > 0.0, t * np.log(np.where(t > 0.0, t, 1.0)), 0.0).sum()
    cross = (t * log_probs).sum()
    b = log_probs.shape[0]
    loss = float((ent - cross) / b)
    return loss, -t / b


def smoothed_targets(labels: np.ndarray, num_classes: int, eps: float) -> np.ndarray:
    t = np.full((labels.shape[0], num_classes), eps / num_classes, dtype=np.float64)
    t[np.arange(labels.shape[0]), labels] += 1.0 - eps
    return t


def cross_entropy_loss(log_probs: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross entropy against dense targets, gradient w.r.t. log-probs."""
    t = np.asarray(targets, dtype=np.float64)
    b = log_probs.shape[0]
    loss = float(-(t * log_probs).sum() / b)
    return loss, -t / b


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Half-cosine schedule from base_lr down to exactly 0 at total_steps."""
    if total_steps < 1:
        return 0.0
    frac = min(max(step, 0), total_steps) / total_steps
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, model: Model, momentum: float = 0.9, weight_decay: float = 0.0):
        self.model = model
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = {name: np.zeros_like(arr) for name, arr in model.parameters()}

    def step(self, lr: float) -> None:
        for i, layer in enumerate(self.model.layers):
            for name, p in layer.params.items():
                g = layer.grads[name].astype(p.dtype)
                if self.weight_decay:
                    g = g + self.weight_decay * p
                v = self._velocity[f"layer{i}.{name}"]
                v *= self.momentum
                v += g
                p -= lr * v


# ---------------------------------------------------------------------------
# evaluation


def ece(confidences: np.ndarray, correct: np.ndarray, num_bins: int = ECE_BINS) -> float:
    """Expected calibration error over equal-width confidence bins on (0, 1].

    Sum over bins of (bin count / n) * |bin accuracy - bin mean confidence|.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    corr = np.asarray(correct, dtype=np.float64)
    if conf.shape != corr.shape:
        raise ValueError("confidences and correctness must align")
    n = conf.shape[0]
    if n == 0:
        return 0.0
    bins = np.clip(np.ceil(conf * num_bins).astype(np.int64) - 1, 0, num_bins - 1)
    total = 0.0
    for b in range(num_bins):
        mask = bins == b
        cnt = int(mask.sum())
        if cnt == 0:
            continue
        total += (cnt / n) * abs(corr[mask].mean() - conf[mask].mean())
    return float(total)


@dataclass
class EvalResult:
    accuracy: float
    ece: float
    confidences: np.ndarray
    correct: np.ndarray


def evaluate(model: Model, ds: LabeledDataset, batch_size: int = 1000) -> EvalResult:
    """Top-1 accuracy and calibration on clean images; argmax breaks ties low."""
    probs = model.predict_probs(ds.images, batch_size=batch_size)
    pred = probs.argmax(axis=1)
    correct = (pred == ds.labels).astype(np.float64)
    conf = probs.max(axis=1)
    return EvalResult(
        accuracy=float(correct.mean()) if len(ds) else 0.0,
        ece=ece(conf, correct) if len(ds) else 0.0,
        confidences=conf,
        correct=correct,
    )


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    objective: str = "erm"
    epochs: int = 10
    batch_size: int = 250
    base_lr: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    label_smoothing: float = 0.1
    seed: int = 0

    def __post_init__(self):
        known = ("erm", "kd-reinforced", "kd-online-imitation", "kd-online-invariance")
        if self.objective not in known:
            raise ValueError(f"unknown objective {self.objective!r}, expected one of {known}")


@dataclass
class HistoryRow:
    epoch: int
    loss: float
    val_acc: float
    ece: float


@dataclass
class TrainResult:
    model: Model
    history: list[HistoryRow]
    step_seconds: list[float] = field(default_factory=list)

    @property
    def final_val_acc(self) -> float:
        return self.history[-1].val_acc if self.history else 0.0

    @property
    def final_ece(self) -> float:
        return self.history[-1].ece if self.history else 0.0

    @property
    def mean_step_seconds(self) -> float:
        return float(np.mean(self.step_seconds)) if self.step_seconds else 0.0


def train(
    model: Model,
    source,
    cfg: TrainConfig,
    val: LabeledDataset | None = None,
) -> TrainResult:
    """Run the configured objective against a batch source.

    The source contract: `num_samples` (int) and `iter_epoch(epoch,
    batch_size)` yielding (uint8 images, int labels, dense target rows or
    None).  Sources emitting None targets are hard-label sources; the trainer
    smooths them.  Every source yields each sample exactly once per epoch, so
    all objectives run the same iteration count for a given dataset.
    """
    n = source.num_samples
    if n == 0 or cfg.epochs == 0:
        return TrainResult(model=model, history=[])
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = steps_per_epoch * cfg.epochs
    opt = SGD(model, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    history: list[HistoryRow] = []
    step_seconds: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        epoch_batches = 0
        for x_u8, labels, targets in source.iter_epoch(epoch, cfg.batch_size):
            t0 = time.perf_counter()
            lr = cosine_lr(step, total_steps, cfg.base_lr)
            x = x_u8.astype(np.float32) / np.float32(255.0)
            logits = model.forward(x)
            logp = log_softmax(logits)
            if targets is None:
                tgt = smoothed_targets(labels, model.num_classes, cfg.label_smoothing)
                loss, _ = cross_entropy_loss(logp, tgt)
            else:
                tgt = targets
                loss, _ = kl_loss(logp, tgt)
            if not np.isfinite(loss):
                raise TrainingDiverged(step, loss)
            dlogits = ((np.exp(logp) - tgt) / x.shape[0]).astype(np.float32)
            model.backward(dlogits)
            opt.step(lr)
            epoch_loss += loss
            epoch_batches += 1
            step += 1
            step_seconds.append(time.perf_counter() - t0)
        if epoch_batches != steps_per_epoch:
            raise RuntimeError(
                f"source yielded {epoch_batches} batches, expected {steps_per_epoch}"
            )
        if val is not None and len(val):
            ev = evaluate(model, val)
            history.append(HistoryRow(epoch, epoch_loss / epoch_batches, ev.accuracy, ev.ece))
        else:
            history.append(HistoryRow(epoch, epoch_loss / epoch_batches, 0.0, 0.0))
    return TrainResult(model=model, history=history, step_seconds=step_seconds)
