"""Region datasets, their on-disk container, splitting, and a synthetic generator.

The synthetic generator plants a hidden invertible linear map per aspect-ratio
bin between class prototypes and region features. An un-adapted cosine
classifier sees rotated features; a bank with one adapter per bin can learn
to undo them.
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import _container
from .adapters import BinPartition
from .classifier import SPLITS, TextEmbeddingBank
from .errors import InconsistentHeaderError, ValidationError
from .geometry import BoundingBox, aspect_ratio

DATASET_MAGIC = "SHAPEADAPT-DATA"
DATASET_VERSION = 1


@dataclass(frozen=True)
class RegionSample:
    id: int
    image_id: int
    box: BoundingBox
    label: int
    split: str
    feature: np.ndarray  # stored as read-only float32, the container's precision

    def __post_init__(self):
        f = np.array(self.feature, dtype=_container.FLOAT_DTYPE)
        f.setflags(write=False)
        object.__setattr__(self, "feature", f)


@dataclass
class Dataset:
    dim: int
    class_names: tuple[str, ...]
    split_tags: tuple[str, ...]
    samples: list[RegionSample] = field(default_factory=list)

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        self.split_tags = tuple(self.split_tags)
        k = len(self.class_names)
        if len(self.split_tags) != k:
            raise InconsistentHeaderError("split_tags and class_names differ in length")
        if any(t not in SPLITS for t in self.split_tags):
            raise InconsistentHeaderError(f"split tags must be one of {SPLITS}")
        for s in self.samples:
            if not (0 <= s.label < k):
                raise InconsistentHeaderError(f"sample {s.id} has label {s.label} outside K={k}")
            if s.split != self.split_tags[s.label]:
                raise InconsistentHeaderError(f"sample {s.id} split {s.split!r} disagrees with its class")
            if s.feature.shape != (self.dim,) or not np.all(np.isfinite(s.feature)):
                raise InconsistentHeaderError(f"sample {s.id} feature must be finite with length {self.dim}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def features(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, self.dim))
        return np.stack([s.feature for s in self.samples]).astype(np.float64)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def ratios(self) -> np.ndarray:
        return np.array([aspect_ratio(s.box) for s in self.samples], dtype=np.float64)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(self.dim, self.class_names, self.split_tags, [self.samples[i] for i in indices])


def dataset_to_bytes(ds: Dataset) -> bytes:
    rows = []
    for i, s in enumerate(ds.samples):
        rows.append({
            "id": s.id,
            "image_id": s.image_id,
            "box": list(s.box.as_tuple()),
            "label": s.label,
            "split": s.split,
            "offset": i * ds.dim * _container.FLOAT_DTYPE.itemsize,
        })
    header = {
        "dim": ds.dim,
        "num_classes": ds.num_classes,
        "class_names": list(ds.class_names),
        "split_tags": list(ds.split_tags),
        "num_samples": len(ds),
        "samples": rows,
    }
    payload = np.stack([s.feature for s in ds.samples]) if ds.samples else np.zeros(0)
    return _container.encode(DATASET_MAGIC, DATASET_VERSION, header, payload)


def dataset_from_bytes(data: bytes) -> Dataset:
    header, payload = _container.decode(data, DATASET_MAGIC, DATASET_VERSION)
    try:
        d, k, n = int(header["dim"]), int(header["num_classes"]), int(header["num_samples"])
        names, tags, rows = header["class_names"], header["split_tags"], header["samples"]
    except (KeyError, TypeError, ValueError) as exc:
        raise InconsistentHeaderError(f"bad dataset header: {exc}") from exc
    _container.require(len(names) == k, "class_names length disagrees with num_classes")
    _container.require(len(rows) == n, "sample rows disagree with num_samples")
    _container.require(payload.size == n * d, "payload size disagrees with num_samples x dim")

    itemsize = _container.FLOAT_DTYPE.itemsize
    samples = []
    for row in rows:
        try:
            offset = int(row["offset"])
            _container.require(offset % itemsize == 0 and 0 <= offset // itemsize <= payload.size - d,
                               f"bad blob offset {offset}")
            start = offset // itemsize
            samples.append(RegionSample(
                id=int(row["id"]),
                image_id=int(row["image_id"]),
                box=BoundingBox(*(float(v) for v in row["box"])),
                label=int(row["label"]),
                split=str(row["split"]),
                feature=payload[start:start + d].copy(),
            ))
        except InconsistentHeaderError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise InconsistentHeaderError(f"bad sample row {row!r}: {exc}") from exc
    return Dataset(d, names, tags, samples)


def save_dataset(ds: Dataset, path: str | os.PathLike) -> None:
    _container.write_bytes_atomic(path, dataset_to_bytes(ds))


def load_dataset(path: str | os.PathLike) -> Dataset:
    return dataset_from_bytes(_container.read_bytes(path))


def export_samples_csv(ds: Dataset, path: str | os.PathLike) -> None:
    """Sample metadata (no features) as CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "image_id", "x", "y", "w", "h", "aspect_ratio", "label", "class_name", "split"])
        for s in ds.samples:
            w.writerow([s.id, s.image_id, *map(repr, s.box.as_tuple()), repr(aspect_ratio(s.box)),
                        s.label, ds.class_names[s.label], s.split])


def split_train_eval(
    ds: Dataset,
    fraction: float,
    seed: int,
    partition: BinPartition | None = None,
) -> tuple[Dataset, Dataset]:
    """Label-stratified split; novel-split samples all go to the eval side.

    With ``partition`` given, strata are (label, shape bin) pairs instead of
    labels alone.
    """
    if not (0.0 < fraction < 1.0):
        raise ValidationError(f"fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    strata: dict[tuple[int, int], list[int]] = {}
    for i, s in enumerate(ds.samples):
        b = partition.index_of(aspect_ratio(s.box)) if partition is not None else 0
        strata.setdefault((s.label, b), []).append(i)

    per_label: dict[int, int] = {}
    for (label, _), idx in strata.items():
        per_label[label] = per_label.get(label, 0) + len(idx)

    train, evaluate = [], []
    for key in sorted(strata):
        label = key[0]
        idx = strata[key]
        if ds.split_tags[label] == "novel":
            evaluate.extend(idx)
            continue
        if per_label[label] < 2:
            warnings.warn(f"class {label} has fewer than 2 samples; placing it in eval", stacklevel=2)
            evaluate.extend(idx)
            continue
        perm = rng.permutation(len(idx))
        n_train = int(round(fraction * len(idx)))
        train.extend(idx[p] for p in perm[:n_train])
        evaluate.extend(idx[p] for p in perm[n_train:])
    return ds.subset(sorted(train)), ds.subset(sorted(evaluate))


def thin_per_cell(ds: Dataset, per_cell: int, partition: BinPartition) -> Dataset:
    """Keep the first ``per_cell`` samples of every (label, shape bin) cell."""
    if per_cell < 1:
        raise ValidationError("per_cell must be >= 1")
    seen: dict[tuple[int, int], int] = {}
    keep = []
    for i, s in enumerate(ds.samples):
        key = (s.label, partition.index_of(aspect_ratio(s.box)))
        if seen.get(key, 0) < per_cell:
            seen[key] = seen.get(key, 0) + 1
            keep.append(i)
    return ds.subset(keep)


DEFORMATIONS = ("rotation", "general-linear", "identity")


@dataclass(frozen=True)
class SynthConfig:
    dim: int = 32
    num_classes: int = 8
    num_bins: int = 4
    samples_per_class_per_bin: int = 250
    noise_std: float = 0.05
    deformation: str = "rotation"
    seed: int = 0
    num_novel: int = 0
    # ratio range covered by the outer bins, which are unbounded on one side
    ratio_range: tuple[float, float] = (1.0 / 16.0, 16.0)
    interior_boundaries: tuple[float, ...] | None = None

    def __post_init__(self):
        if min(self.dim, self.num_classes, self.num_bins, self.samples_per_class_per_bin) < 1:
            raise ValidationError("dim, num_classes, num_bins and samples_per_class_per_bin must be positive")
        if self.num_classes < 2:
            raise ValidationError("need at least two classes")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be >= 0")
        if self.deformation not in DEFORMATIONS:
            raise ValidationError(f"deformation must be one of {DEFORMATIONS}")
        if not (0 <= self.num_novel < self.num_classes):
            raise ValidationError("num_novel must leave at least one base class")
        lo, hi = self.ratio_range
        if not (0 < lo < hi < math.inf):
            raise ValidationError("ratio_range must satisfy 0 < lo < hi < inf")

    def partition(self) -> BinPartition:
        if self.interior_boundaries is None:
            return BinPartition.geometric(self.num_bins)
        part = BinPartition.from_interior(self.interior_boundaries)
        if part.n_bins != self.num_bins:
            raise ValidationError(f"num_bins={self.num_bins} but boundaries define {part.n_bins} bins")
        return part


class SyntheticTask(NamedTuple):
    dataset: Dataset
    texts: TextEmbeddingBank
    partition: BinPartition
    deformations: np.ndarray  # (B, D, D); kept out of the dataset


def random_rotation(rng: np.random.Generator, dim: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _random_general_linear(rng: np.random.Generator, dim: int) -> np.ndarray:
    while True:
        m = rng.standard_normal((dim, dim)) / math.sqrt(dim)
        if np.linalg.cond(m) < 1e3:
            return m


def _bin_range(partition: BinPartition, b: int, ratio_range: tuple[float, float]) -> tuple[float, float]:
    lo = max(partition.boundaries[b], ratio_range[0])
    hi = min(partition.boundaries[b + 1], ratio_range[1])
    if not lo < hi:
        raise ValidationError(f"bin {b} lies outside ratio_range {ratio_range}")
    return lo, hi


def _box_in_bin(rng: np.random.Generator, partition: BinPartition, b: int, lo: float, hi: float) -> BoundingBox:
    # unit-area box at the origin; resample on the rare rounding miss at a bin edge
    while True:
        r = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        box = BoundingBox(0.0, 0.0, 1.0 / math.sqrt(r), math.sqrt(r))
        if partition.index_of(aspect_ratio(box)) == b:
            return box


def generate_synthetic(cfg: SynthConfig, deformations: np.ndarray | None = None) -> SyntheticTask:
    """Draw prototypes, per-bin hidden maps and region samples.

    Samples are ordered bin-major, then class, then draw index. ``deformations``
    overrides the drawn maps (shape (B, D, D)).
    """
    partition = cfg.partition()
    rng = np.random.default_rng(cfg.seed)
    d, k, nb = cfg.dim, cfg.num_classes, cfg.num_bins

    protos = rng.standard_normal((d, k))
    protos /= np.linalg.norm(protos, axis=0, keepdims=True)

    if cfg.deformation == "rotation":
        maps = np.stack([random_rotation(rng, d) for _ in range(nb)])
    elif cfg.deformation == "general-linear":
        maps = np.stack([_random_general_linear(rng, d) for _ in range(nb)])
    else:
        maps = np.stack([np.eye(d)] * nb)
    if deformations is not None:
        deformations = np.asarray(deformations, dtype=np.float64)
        if deformations.shape != (nb, d, d):
            raise ValidationError(f"deformations must have shape {(nb, d, d)}")
        maps = deformations

    names = tuple(f"class_{i}" for i in range(k))
    tags = tuple("novel" if i >= k - cfg.num_novel else "base" for i in range(k))

    samples = []
    for b in range(nb):
        lo, hi = _bin_range(partition, b, cfg.ratio_range)
        for label in range(k):
            n = cfg.samples_per_class_per_bin
            noisy = protos[:, label][None, :] + cfg.noise_std * rng.standard_normal((n, d))
            feats = noisy @ maps[b].T
            feats /= np.linalg.norm(feats, axis=1, keepdims=True)
            feats = feats.astype(_container.FLOAT_DTYPE)
            for i in range(n):
                sid = len(samples)
                samples.append(RegionSample(
                    id=sid, image_id=sid, box=_box_in_bin(rng, partition, b, lo, hi),
                    label=label, split=tags[label], feature=feats[i]))

    ds = Dataset(d, names, tags, samples)
    texts = TextEmbeddingBank(protos, names, tags)
    return SyntheticTask(ds, texts, partition, maps)


def oracle_predictions(task: SyntheticTask, ds: Dataset) -> np.ndarray:
    """Cosine argmax after undoing each sample's hidden map (brute force, per sample)."""
    protos = task.texts.embeddings / np.linalg.norm(task.texts.embeddings, axis=0, keepdims=True)
    preds = np.empty(len(ds), dtype=np.int64)
    for i, s in enumerate(ds.samples):
        b = task.partition.index_of(aspect_ratio(s.box))
        restored = np.linalg.solve(task.deformations[b], s.feature.astype(np.float64))
        sims = [float(restored @ protos[:, c]) / float(np.linalg.norm(restored)) for c in range(protos.shape[1])]
        preds[i] = int(np.argmax(sims))
    return preds
