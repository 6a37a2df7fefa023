"""Losses, Adam, plateau/early-stopping control and the epoch loop."""

from __future__ import annotations

import csv
import hashlib
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import DETECTION, Batch, _Model, decide, head_scores
from .text import pad_tokens

PROB_FLOOR = 1e-7


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    early_stop_patience: int = 3
    min_delta: float = 1e-4
    max_epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    val_fraction: float = 0.1
    class_weighting: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must be in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


def derive_seed(base_seed: int, *labels) -> int:
    """Stable 63-bit seed from a base seed and labels (fold id, subsystem name)."""
    text = "/".join([str(base_seed), *map(str, labels)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


# ---------------------------------------------------------------------------
# losses


def _batch_mean(per_example: Tensor, weights) -> Tensor:
    if weights is None:
        return ad.mean(per_example)
    weights = np.asarray(weights, dtype=np.float64)
    return ad.sum_(per_example * weights) * (1.0 / weights.sum())


def bce_loss(p, y, weights=None) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against labels in {0, 1}."""
    y = np.asarray(y, dtype=np.float64)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("binary labels must be 0 or 1")
    p = ad.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    ll = y * ad.log(p) + (1.0 - y) * ad.log(1.0 - p)
    return -_batch_mean(ll, weights)


def cce_loss(probs, y, weights=None) -> Tensor:
    """Mean categorical cross-entropy; ``probs`` is (B, K) or (K,)."""
    probs = ad.as_tensor(probs)
    if probs.ndim == 1:
        probs = probs.reshape(1, -1)
    y = np.atleast_1d(np.asarray(y))
    K = probs.shape[-1]
    if y.dtype.kind not in "iu" or (y < 0).any() or (y >= K).any():
        raise ValueError(f"class labels must be integers in [0, {K - 1}]")
    if np.abs(probs.data.sum(axis=-1) - 1.0).max() > 1e-6:
        raise ValueError("probabilities must sum to 1")
    onehot = np.zeros(probs.shape)
    onehot[np.arange(len(y)), y] = 1.0
    picked = ad.sum_(probs * onehot, axis=-1)
    return -_batch_mean(ad.log(ad.clip(picked, PROB_FLOOR, 1.0)), weights)


def task_loss(model: _Model, batch: Batch, training: bool, rng=None, class_weights=None) -> Tensor:
    scores = head_scores(model.logits(batch, training, rng), model.config.task)
    weights = None if class_weights is None else class_weights[batch.labels.astype(np.int64)]
    if model.config.task == DETECTION:
        return bce_loss(scores, batch.labels, weights)
    return cce_loss(scores, batch.labels.astype(np.int64), weights)


def balanced_class_weights(labels, n_classes: int) -> np.ndarray:
    """Inverse-frequency weights normalized so a balanced set gets all ones."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes).astype(np.float64)
    present = counts > 0
    w = np.zeros(n_classes)
    w[present] = counts[present].sum() / (present.sum() * counts[present])
    return w


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise ad.NonFiniteError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ad.ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# schedule / stopping


def improved(value: float, best: float, min_delta: float) -> bool:
    # an improvement of exactly min_delta counts; 1e-12 absorbs float rounding
    return best - value >= min_delta - 1e-12


@dataclass
class PlateauState:
    lr: float
    best: float = math.inf
    wait: int = 0
    reductions: int = 0


def reduce_on_plateau(val_loss: float, state: PlateauState, patience: int = 5,
                      factor: float = 0.5, min_delta: float = 1e-4) -> bool:
    """Feed one epoch's validation loss; returns True when lr was just reduced."""
    if improved(val_loss, state.best, min_delta):
        state.best = val_loss
        state.wait = 0
        return False
    state.wait += 1
    if state.wait >= patience:
        state.lr *= factor
        state.wait = 0
        state.reductions += 1
        return True
    return False


def early_stop_check(val_losses, patience: int = 3, min_delta: float = 1e-4) -> tuple[bool, int]:
    """(stop?, index of best epoch) for a validation-loss history.

    Stops once the last ``patience`` epochs all failed to improve on the best.
    """
    best, best_idx, wait = math.inf, -1, 0
    for i, v in enumerate(val_losses):
        if improved(v, best, min_delta):
            best, best_idx, wait = v, i, 0
        else:
            wait += 1
    return wait >= patience, best_idx


class TrainingControl:
    """Couples the plateau scheduler with early stopping.

    Early stopping is armed only once the scheduler has cut the learning
    rate; it then counts non-improving epochs since the later of the best
    epoch and the latest reduction.  A flat run therefore reduces lr at epoch
    1 + plateau_patience and stops early_stop_patience epochs after that.
    """

    def __init__(self, config: TrainConfig):
        self.config = config
        self.plateau = PlateauState(lr=config.lr)
        self.history: list[float] = []
        self.best_epoch = 0
        self.last_reduction = None

    @property
    def lr(self) -> float:
        return self.plateau.lr

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record epoch (1-based); returns True when training should stop."""
        cfg = self.config
        prev_best = self.plateau.best
        self.history.append(val_loss)
        if improved(val_loss, prev_best, cfg.min_delta):
            self.best_epoch = epoch
        if reduce_on_plateau(val_loss, self.plateau, cfg.plateau_patience, cfg.plateau_factor, cfg.min_delta):
            self.last_reduction = epoch
            return False
        if self.last_reduction is None:
            return False
        start = max(self.best_epoch, self.last_reduction)
        window = [self.plateau.best] + self.history[start:]
        stop, _ = early_stop_check(window, cfg.early_stop_patience, cfg.min_delta)
        return stop


# ---------------------------------------------------------------------------
# data


@dataclass
class Example:
    key: str
    mel: np.ndarray
    tokens: list[int]
    label: int
    speaker: str = ""


def collate(examples: list[Example]) -> Batch:
    lengths = np.array([e.mel.shape[0] for e in examples])
    n_mels = examples[0].mel.shape[1]
    mel = np.zeros((len(examples), lengths.max(), n_mels))
    for i, e in enumerate(examples):
        mel[i, :lengths[i]] = e.mel
    tokens, mask = pad_tokens([e.tokens for e in examples])
    labels = np.array([e.label for e in examples])
    return Batch(mel, lengths, tokens, mask, labels)


def batches(examples: list[Example], size: int):
    for i in range(0, len(examples), size):
        yield collate(examples[i:i + size])


def validation_split(examples: list[Example], fraction: float, seed: int) -> tuple[list[Example], list[Example]]:
    """Per-speaker seeded hold-out of ``fraction`` of each speaker's utterances."""
    rng = np.random.default_rng(derive_seed(seed, "validation"))
    by_speaker: dict[str, list[int]] = {}
    for i, e in enumerate(examples):
        by_speaker.setdefault(e.speaker, []).append(i)
    val_idx: set[int] = set()
    for speaker in sorted(by_speaker):
        idx = by_speaker[speaker]
        n_val = int(round(fraction * len(idx)))
        if len(idx) > 1:
            n_val = min(max(n_val, 1), len(idx) - 1)
        else:
            n_val = 0
        val_idx.update(rng.permutation(idx)[:n_val].tolist())
    train = [e for i, e in enumerate(examples) if i not in val_idx]
    val = [e for i, e in enumerate(examples) if i in val_idx]
    return train, val


def evaluate(model: _Model, examples: list[Example], batch_size: int = 64) -> tuple[float, float, np.ndarray]:
    """(mean loss, accuracy, per-example scores) in eval mode."""
    total, correct, scores = 0.0, 0, []
    with ad.no_record():
        for batch in batches(examples, batch_size):
            s = head_scores(model.logits(batch, training=False), model.config.task)
            if model.config.task == DETECTION:
                loss = bce_loss(s, batch.labels)
            else:
                loss = cce_loss(s, batch.labels.astype(np.int64))
            total += loss.item() * len(batch)
            correct += int((decide(s.data, model.config.task) == batch.labels).sum())
            scores.append(s.data)
    n = len(examples)
    return total / n, correct / n, np.concatenate(scores)


# ---------------------------------------------------------------------------
# loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_acc", "lr", "seconds"])
        for r in self.epochs:
            w.writerow([r.epoch, f"{r.train_loss:.10g}", f"{r.val_loss:.10g}", f"{r.val_acc:.6f}",
                        f"{r.lr:.6g}", f"{r.seconds:.3f}"])
        return buf.getvalue()


@dataclass
class TrainResult:
    state: dict[str, np.ndarray]
    log: TrainLog


def train_model(model: _Model, train: list[Example], val: list[Example] | None,
                config: TrainConfig = TrainConfig(), progress=None) -> TrainResult:
    """Fit ``model`` in place; leaves the best-validation-loss weights loaded.

    When ``val`` is None a speaker-stratified ``val_fraction`` of ``train`` is
    held out.  Every random draw derives from ``config.seed``.
    """
    if not train:
        raise TrainingError("empty training set")
    if val is None:
        train, val = validation_split(train, config.val_fraction, config.seed)
    if not val:
        raise TrainingError("empty validation set")
    shuffle_rng = np.random.default_rng(derive_seed(config.seed, "shuffle"))
    dropout_rng = np.random.default_rng(derive_seed(config.seed, "dropout"))
    params = model.params
    plist = model.parameters()
    opt = AdamState(beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    control = TrainingControl(config)
    class_weights = None
    if config.class_weighting:
        n_classes = 2 if model.config.task == DETECTION else model.config.n_classes
        class_weights = balanced_class_weights([e.label for e in train], n_classes)
    log = TrainLog()
    best_state, best_loss = model.state_dict(), math.inf

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(train))
        running, seen = 0.0, 0
        lr = control.lr
        for i in range(0, len(order), config.batch_size):
            batch = collate([train[j] for j in order[i:i + config.batch_size]])
            with ad.Tape() as tape:
                loss = task_loss(model, batch, True, dropout_rng, class_weights)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(epoch, value)
            grads = ad.backward(tape, loss, plist)
            adam_step(params, grads, opt, lr)
            running += value * len(batch)
            seen += len(batch)
        val_loss, val_acc, _ = evaluate(model, val)
        if not math.isfinite(val_loss):
            raise DivergenceError(epoch, val_loss)
        log.epochs.append(EpochRecord(epoch, running / seen, val_loss, val_acc, lr, time.perf_counter() - t0))
        if val_loss < best_loss:
            best_loss, best_state = val_loss, model.state_dict()
            log.best_epoch = epoch
        if progress is not None:
            progress(log.epochs[-1])
        if control.update(epoch, val_loss):
            log.stopped_early = True
            break
    model.load_state_dict(best_state)
    return TrainResult(best_state, log)
