"""Training of the adapter bank with hand-derived gradients.

Only the bank's ``w1``/``w2`` are optimized; region features and text
embeddings stay frozen. Each sample runs through exactly one adapter (its
shape bin), so adapters absent from a batch get exactly zero gradient and,
with the lazy optimizers below, no update at all.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .adapters import AdapterBank
from .classifier import ClassifierConfig, TextEmbeddingBank, normalized_prototypes
from .data import Dataset
from .errors import NovelClassError, ValidationError
from .geometry import BoundingBox, aspect_ratio

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
LOSSES = ("ce", "mean-all-classes")
OPTIMIZERS = ("adamw", "sgd")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    base_lr: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_after_epoch: int = 4
    batch_size: int = 16
    weight_decay: float = 0.0
    seed: int = 0
    optimizer: str = "adamw"
    loss: str = "ce"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if not self.base_lr > 0:
            raise ValidationError("base_lr must be positive")
        if not (0 < self.lr_decay_factor <= 1):
            raise ValidationError("lr_decay_factor must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {OPTIMIZERS}")
        if self.loss not in LOSSES:
            raise ValidationError(f"loss must be one of {LOSSES}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``: one step decay after ``lr_decay_after_epoch``."""
        return self.base_lr * (self.lr_decay_factor if epoch > self.lr_decay_after_epoch else 1.0)


@dataclass
class TrainReport:
    initial_loss: float
    epoch_losses: list[float]
    bin_counts: list[int]
    bin_accuracy: list[float | None]
    empty_bins: list[int]
    boundaries: list[float]
    steps: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def ce_loss(probs: np.ndarray, label: int) -> float:
    """``-log(probs[label])`` with a 1e-12 floor on the probability."""
    p = float(np.asarray(probs)[label])
    if p < PROB_FLOOR:
        warnings.warn(f"probability {p:g} of the labelled class clamped to {PROB_FLOOR:g}", stacklevel=2)
        p = PROB_FLOOR
    return -math.log(p)


def mean_all_classes_loss(probs: np.ndarray) -> float:
    """Label-independent ``-(1/K) sum_k log p_k`` variant, kept for comparison only."""
    probs = np.maximum(np.asarray(probs, dtype=np.float64), PROB_FLOOR)
    return float(-np.mean(np.log(probs)))


@dataclass
class Gradients:
    dw1: np.ndarray  # (N, D, Dh)
    dw2: np.ndarray  # (N, Dh, D)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))


def batch_loss_and_grads(
    w1: np.ndarray,
    w2: np.ndarray,
    lam: float,
    feats: np.ndarray,
    bins: np.ndarray,
    labels: np.ndarray,
    protos: np.ndarray,
    cfg: ClassifierConfig,
    loss: str = "ce",
    need_grads: bool = True,
) -> tuple[float, Gradients | None, np.ndarray]:
    """Mean loss over a batch, its gradients, and the per-sample log-probabilities.

    ``protos`` are the (already normalized, if requested) class prototypes as
    columns; ``bins`` the adapter index of each sample.
    """
    b_size = feats.shape[0]
    w1b, w2b = w1[bins], w2[bins]
    pre = np.einsum("bd,bdh->bh", feats, w1b)
    hid = np.maximum(pre, 0.0)
    beta = lam * np.einsum("bh,bhd->bd", hid, w2b) + (1.0 - lam) * feats
    if cfg.normalize:
        norm = np.linalg.norm(beta, axis=1, keepdims=True)
        if np.any(norm == 0):
            raise ValidationError("adapted feature collapsed to zero")
        unit = beta / norm
    else:
        unit = beta
    logp = _log_softmax(unit @ protos / cfg.tau)
    k = protos.shape[1]
    rows = np.arange(b_size)

    # log-probabilities are finite for finite logits, so no probability floor is needed here
    if loss == "ce":
        per_sample = -logp[rows, labels]
    else:
        per_sample = -np.mean(logp, axis=1)
    mean_loss = float(np.mean(per_sample))
    if not need_grads:
        return mean_loss, None, logp

    p = np.exp(logp)
    if loss == "ce":
        dz = p.copy()
        dz[rows, labels] -= 1.0
    else:
        dz = p - 1.0 / k
    dz /= b_size
    dunit = dz @ protos.T / cfg.tau
    if cfg.normalize:
        dbeta = (dunit - unit * np.sum(unit * dunit, axis=1, keepdims=True)) / norm
    else:
        dbeta = dunit
    dout = lam * dbeta
    dpre = np.einsum("bd,bhd->bh", dout, w2b) * (pre > 0)

    dw1 = np.zeros_like(w1)
    dw2 = np.zeros_like(w2)
    # accumulated in sample order
    np.add.at(dw2, bins, np.einsum("bh,bd->bhd", hid, dout))
    np.add.at(dw1, bins, np.einsum("bd,bh->bdh", feats, dpre))
    return mean_loss, Gradients(dw1, dw2), logp


def loss_and_gradients(
    bank: AdapterBank,
    batch: Sequence[tuple[np.ndarray, BoundingBox, int]],
    texts: TextEmbeddingBank,
    cfg: ClassifierConfig = ClassifierConfig(),
    loss: str = "ce",
) -> tuple[float, Gradients]:
    """Mean loss of ``(feature, box, label)`` triples and exact gradients w.r.t. every adapter."""
    if not batch:
        raise ValidationError("batch must be non-empty")
    feats = np.stack([np.asarray(f, dtype=np.float64) for f, _, _ in batch])
    if feats.ndim != 2 or feats.shape[1] != bank.dim or texts.dim != bank.dim:
        raise ValidationError(f"feature dim {feats.shape} disagrees with bank dim {bank.dim} / text dim {texts.dim}")
    labels = np.array([int(y) for _, _, y in batch])
    if np.any(labels < 0) or np.any(labels >= texts.num_classes):
        raise ValidationError("label outside the text bank")
    bins = bank.partition.indices_of([aspect_ratio(b) for _, b, _ in batch])
    value, grads, _ = batch_loss_and_grads(
        bank.w1, bank.w2, bank.lam, feats, bins, labels, normalized_prototypes(texts, cfg), cfg, loss)
    return value, grads


class SGD:
    def __init__(self, bank: AdapterBank, weight_decay: float = 0.0):
        self.weight_decay = weight_decay

    def step(self, bank: AdapterBank, grads: Gradients, active: np.ndarray, lr: float) -> None:
        for j in np.flatnonzero(active):
            bank.w1[j] -= lr * (grads.dw1[j] + self.weight_decay * bank.w1[j])
            bank.w2[j] -= lr * (grads.dw2[j] + self.weight_decay * bank.w2[j])


class AdamW:
    """Adaptive moments with decoupled weight decay, updated lazily per adapter.

    Adapters not routed in a batch keep both weights and moment state
    untouched; bias correction uses each adapter's own step count.
    """

    def __init__(self, bank: AdapterBank, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = np.zeros(bank.n_adapters, dtype=np.int64)
        self.m = [np.zeros_like(bank.w1), np.zeros_like(bank.w2)]
        self.v = [np.zeros_like(bank.w1), np.zeros_like(bank.w2)]

    def step(self, bank: AdapterBank, grads: Gradients, active: np.ndarray, lr: float) -> None:
        params = (bank.w1, bank.w2)
        for j in np.flatnonzero(active):
            self.t[j] += 1
            c1 = 1.0 - self.b1 ** self.t[j]
            c2 = 1.0 - self.b2 ** self.t[j]
            for w, g, m, v in zip(params, (grads.dw1, grads.dw2), self.m, self.v):
                m[j] = self.b1 * m[j] + (1.0 - self.b1) * g[j]
                v[j] = self.b2 * v[j] + (1.0 - self.b2) * g[j] ** 2
                w[j] -= lr * self.weight_decay * w[j]
                w[j] -= lr * (m[j] / c1) / (np.sqrt(v[j] / c2) + self.eps)


def _check_training_labels(ds: Dataset, texts: TextEmbeddingBank) -> None:
    if len(ds) == 0:
        raise ValidationError("training set is empty")
    if ds.num_classes != texts.num_classes or ds.dim != texts.dim:
        raise ValidationError("dataset and text bank disagree on K or D")
    novel = sorted({s.label for s in ds.samples if texts.split_tags[s.label] == "novel"})
    if novel:
        raise NovelClassError(f"training data contains novel classes {novel}; only base classes may be trained on")


def dataset_loss(bank: AdapterBank, ds: Dataset, texts: TextEmbeddingBank,
                 cfg: ClassifierConfig = ClassifierConfig(), loss: str = "ce") -> float:
    bins = bank.partition.indices_of(ds.ratios)
    value, _, _ = batch_loss_and_grads(bank.w1, bank.w2, bank.lam, ds.features, bins, ds.labels,
                                       normalized_prototypes(texts, cfg), cfg, loss, need_grads=False)
    return value


def train(
    bank: AdapterBank,
    dataset: Dataset,
    texts: TextEmbeddingBank,
    cfg: TrainConfig = TrainConfig(),
    clf: ClassifierConfig = ClassifierConfig(),
) -> tuple[AdapterBank, TrainReport]:
    """Mini-batch training of a copy of ``bank``; the input bank is left untouched."""
    _check_training_labels(dataset, texts)
    bank = bank.copy()
    feats, labels = dataset.features, dataset.labels
    bins = bank.partition.indices_of(dataset.ratios)
    protos = normalized_prototypes(texts, clf)
    n = len(dataset)

    opt = AdamW(bank, cfg.weight_decay) if cfg.optimizer == "adamw" else SGD(bank, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    initial, _, _ = batch_loss_and_grads(bank.w1, bank.w2, bank.lam, feats, bins, labels, protos, clf,
                                         cfg.loss, need_grads=False)
    epoch_losses = []
    steps = 0
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            value, grads, _ = batch_loss_and_grads(bank.w1, bank.w2, bank.lam, feats[idx], bins[idx],
                                                   labels[idx], protos, clf, cfg.loss)
            active = np.bincount(bins[idx], minlength=bank.n_adapters) > 0
            opt.step(bank, grads, active, lr)
            total += value * len(idx)
            steps += 1
        epoch_losses.append(total / n)
        log.info("epoch %d lr %.3g mean loss %.6f", epoch, lr, epoch_losses[-1])

    _, _, logp = batch_loss_and_grads(bank.w1, bank.w2, bank.lam, feats, bins, labels, protos, clf,
                                      cfg.loss, need_grads=False)
    correct = np.argmax(logp, axis=1) == labels
    counts = np.bincount(bins, minlength=bank.n_adapters)
    hits = np.bincount(bins, weights=correct, minlength=bank.n_adapters)
    acc = [float(h / c) if c else None for h, c in zip(hits, counts)]
    empty = [int(j) for j in np.flatnonzero(counts == 0)]
    if empty:
        log.warning("bins %s received no training samples and keep their initialization", empty)
    report = TrainReport(
        initial_loss=float(initial),
        epoch_losses=[float(v) for v in epoch_losses],
        bin_counts=[int(c) for c in counts],
        bin_accuracy=acc,
        empty_bins=empty,
        boundaries=list(bank.partition.interior),
        steps=steps,
        config={"train": asdict(cfg), "classifier": asdict(clf)},
    )
    return bank, report


def numerical_gradients(
    bank: AdapterBank,
    batch: Sequence[tuple[np.ndarray, BoundingBox, int]],
    texts: TextEmbeddingBank,
    cfg: ClassifierConfig = ClassifierConfig(),
    loss: str = "ce",
    step: float = 1e-4,
) -> Gradients:
    """Central finite differences of the batch loss, one weight at a time."""
    probe = bank.copy()

    def value() -> float:
        v, _ = loss_and_gradients(probe, batch, texts, cfg, loss)
        return v

    out = []
    for w in (probe.w1, probe.w2):
        g = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            orig = w[idx]
            w[idx] = orig + step
            plus = value()
            w[idx] = orig - step
            minus = value()
            w[idx] = orig
            g[idx] = (plus - minus) / (2.0 * step)
        out.append(g)
    return Gradients(*out)


def max_relative_error(analytic: Gradients, numeric: Gradients) -> float:
    """Max-norm relative error, worst of the ``w1`` and ``w2`` gradient groups.

    ``max|a - n| / max(max|a|, max|n|)``. Entrywise ratios are not used:
    entries near 1e-9 sit at the finite-difference rounding floor. Two
    all-zero gradients count as error 0.
    """
    worst = 0.0
    for a, n in ((analytic.dw1, numeric.dw1), (analytic.dw2, numeric.dw2)):
        scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))))
        diff = float(np.max(np.abs(a - n)))
        if scale > 0:
            worst = max(worst, diff / scale)
    return worst
