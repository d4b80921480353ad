"""Open-vocabulary region classification against class text embeddings."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _container
from .adapters import AdapterBank, adapt_region
from .errors import ValidationError
from .geometry import BoundingBox, RegionProposal

TEXT_MAGIC = "SHAPEADAPT-TEXT"
TEXT_VERSION = 1
SPLITS = ("base", "novel")


@dataclass(frozen=True)
class TextEmbeddingBank:
    embeddings: np.ndarray  # (D, K), column k is class k's prototype
    class_names: tuple[str, ...]
    split_tags: tuple[str, ...]

    def __post_init__(self):
        emb = np.array(self.embeddings, dtype=np.float64)
        names, tags = tuple(self.class_names), tuple(self.split_tags)
        if emb.ndim != 2 or emb.shape[1] < 2:
            raise ValidationError(f"need a D x K matrix with K >= 2, got shape {emb.shape}")
        if not np.all(np.isfinite(emb)) or np.any(np.linalg.norm(emb, axis=0) == 0):
            raise ValidationError("text embeddings must be finite and nonzero")
        if len(names) != emb.shape[1] or len(tags) != emb.shape[1]:
            raise ValidationError("class_names / split_tags length must equal K")
        if any(t not in SPLITS for t in tags):
            raise ValidationError(f"split tags must be one of {SPLITS}")
        emb.setflags(write=False)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "class_names", names)
        object.__setattr__(self, "split_tags", tags)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[0]

    @property
    def num_classes(self) -> int:
        return self.embeddings.shape[1]

    def class_ids(self, split: str) -> list[int]:
        return [k for k, t in enumerate(self.split_tags) if t == split]


@dataclass(frozen=True)
class ClassifierConfig:
    tau: float = 0.01
    normalize: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValidationError(f"tau must be positive, got {self.tau}")


@dataclass(frozen=True)
class ScoredDetection:
    box: BoundingBox
    probs: np.ndarray
    score_c: float
    score_l: float
    score_box: float
    predicted_class: int


def normalized_prototypes(texts: TextEmbeddingBank, cfg: ClassifierConfig) -> np.ndarray:
    emb = texts.embeddings
    return emb / np.linalg.norm(emb, axis=0, keepdims=True) if cfg.normalize else emb


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValidationError("cannot normalize a zero region feature")
    return x / norms


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def logits_many(betas: np.ndarray, texts: TextEmbeddingBank, cfg: ClassifierConfig) -> np.ndarray:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 2 or betas.shape[1] != texts.dim:
        raise ValidationError(f"expected features of shape (n, {texts.dim}), got {betas.shape}")
    if not np.all(np.isfinite(betas)):
        raise ValidationError("region features must be finite")
    if cfg.normalize:
        betas = _normalize_rows(betas)
    return (betas @ normalized_prototypes(texts, cfg)) / cfg.tau


def classify_many(betas: np.ndarray, texts: TextEmbeddingBank, cfg: ClassifierConfig) -> np.ndarray:
    """Class probabilities for each row of ``betas``, shape (n, K)."""
    return softmax(logits_many(betas, texts, cfg))


def classify(beta: np.ndarray, texts: TextEmbeddingBank, cfg: ClassifierConfig = ClassifierConfig()) -> np.ndarray:
    """Temperature softmax over (cosine or raw) similarities to every class."""
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1:
        raise ValidationError("beta must be a vector")
    return classify_many(beta[None, :], texts, cfg)[0]


def classification_score(probs: np.ndarray) -> tuple[float, int]:
    """Max probability and its index; ties go to the lowest index."""
    probs = np.asarray(probs)
    k = int(np.argmax(probs))
    return float(probs[k]), k


def fuse_scores(score_c: float, score_l: float) -> float:
    if not (0.0 <= score_c <= 1.0 and 0.0 <= score_l <= 1.0):
        raise ValidationError(f"scores must lie in [0, 1], got {score_c}, {score_l}")
    return score_c * score_l


def score_proposal(
    proposal: RegionProposal,
    f: np.ndarray,
    bank: AdapterBank,
    texts: TextEmbeddingBank,
    cfg: ClassifierConfig = ClassifierConfig(),
) -> ScoredDetection:
    beta = adapt_region(bank, f, proposal.box)
    probs = classify(beta, texts, cfg)
    score_c, k = classification_score(probs)
    return ScoredDetection(
        box=proposal.box,
        probs=probs,
        score_c=score_c,
        score_l=proposal.score_l,
        score_box=fuse_scores(score_c, proposal.score_l),
        predicted_class=k,
    )


def text_bank_to_bytes(texts: TextEmbeddingBank) -> bytes:
    header = {
        "num_classes": texts.num_classes,
        "dim": texts.dim,
        "class_names": list(texts.class_names),
        "split_tags": list(texts.split_tags),
    }
    # column-major by class: class 0's D values first
    return _container.encode(TEXT_MAGIC, TEXT_VERSION, header, texts.embeddings.T)


def text_bank_from_bytes(data: bytes) -> TextEmbeddingBank:
    header, payload = _container.decode(data, TEXT_MAGIC, TEXT_VERSION)
    try:
        k, d = int(header["num_classes"]), int(header["dim"])
        names, tags = header["class_names"], header["split_tags"]
    except (KeyError, TypeError, ValueError) as exc:
        raise _container.InconsistentHeaderError(f"bad text bank header: {exc}") from exc
    _container.require(payload.size == k * d, "payload size disagrees with K x D")
    _container.require(len(names) == k and len(tags) == k, "class list length disagrees with K")
    return TextEmbeddingBank(payload.reshape(k, d).T.astype(np.float64), names, tags)


def save_text_bank(texts: TextEmbeddingBank, path: str | os.PathLike) -> None:
    _container.write_bytes_atomic(path, text_bank_to_bytes(texts))


def load_text_bank(path: str | os.PathLike) -> TextEmbeddingBank:
    return text_bank_from_bytes(_container.read_bytes(path))


def make_text_bank(embeddings: np.ndarray, class_names: Sequence[str] | None = None,
                   split_tags: Sequence[str] | None = None) -> TextEmbeddingBank:
    k = np.asarray(embeddings).shape[1]
    names = class_names if class_names is not None else [f"class_{i}" for i in range(k)]
    tags = split_tags if split_tags is not None else ["base"] * k
    return TextEmbeddingBank(embeddings, names, tags)
