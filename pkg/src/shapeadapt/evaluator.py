"""Accuracy breakdowns (overall, split, class, shape bin) and AP50."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from ._container import write_bytes_atomic
from .adapters import AdapterBank, BinPartition
from .classifier import ScoredDetection
from .errors import ValidationError
from .geometry import BoundingBox, aspect_ratio, iou

IOU_THRESHOLD = 0.5


@dataclass
class EvalReport:
    overall_accuracy: float
    base_accuracy: float | None
    novel_accuracy: float | None
    per_class_accuracy: list[float | None]
    per_class_counts: list[int]
    per_bin_accuracy: list[float | None]  # None marks a bin with no samples
    per_bin_counts: list[int]
    bin_boundaries: list[float]  # interior edges; bins are (s_{j}, s_{j+1}]
    confusion: list[list[int]]  # rows: true class, columns: predicted class
    ap50_per_class: dict[int, float] | None = None
    mean_ap50: float | None = None

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.ap50_per_class is not None:
            out["ap50_per_class"] = {str(k): v for k, v in self.ap50_per_class.items()}
        return out


def _ratio(hits: int, total: int) -> float | None:
    return hits / total if total else None


def accuracy_report(
    predictions: Sequence[tuple[int, int, BoundingBox]],
    partition: BinPartition,
    split_tags: Sequence[str],
) -> EvalReport:
    """Accuracy breakdown of ``(predicted, true, box)`` triples.

    Shape bins come from ``partition`` applied to each box's aspect ratio;
    ``split_tags[k]`` gives class k's split.
    """
    if not predictions:
        raise ValidationError("no predictions to evaluate")
    k = len(split_tags)
    confusion = np.zeros((k, k), dtype=np.int64)
    bin_hits = np.zeros(partition.n_bins, dtype=np.int64)
    bin_counts = np.zeros(partition.n_bins, dtype=np.int64)
    for pred, true, box in predictions:
        if not (0 <= pred < k and 0 <= true < k):
            raise ValidationError(f"class index outside 0..{k - 1}: predicted {pred}, true {true}")
        confusion[true, pred] += 1
        j = partition.index_of(aspect_ratio(box))
        bin_counts[j] += 1
        bin_hits[j] += pred == true

    counts = confusion.sum(axis=1)
    hits = np.diag(confusion)

    def split_acc(tag: str) -> float | None:
        ids = [c for c in range(k) if split_tags[c] == tag]
        return _ratio(int(hits[ids].sum()), int(counts[ids].sum()))

    return EvalReport(
        overall_accuracy=float(hits.sum() / counts.sum()),
        base_accuracy=split_acc("base"),
        novel_accuracy=split_acc("novel"),
        per_class_accuracy=[_ratio(int(h), int(c)) for h, c in zip(hits, counts)],
        per_class_counts=[int(c) for c in counts],
        per_bin_accuracy=[_ratio(int(h), int(c)) for h, c in zip(bin_hits, bin_counts)],
        per_bin_counts=[int(c) for c in bin_counts],
        bin_boundaries=list(partition.interior),
        confusion=confusion.tolist(),
    )


@dataclass(frozen=True)
class GroundTruth:
    image_id: int
    box: BoundingBox
    label: int


def _match_class(dets: list[tuple[int, ScoredDetection]], gts: list[GroundTruth]) -> list[bool]:
    """Greedy matching in descending score order (stable for ties)."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1].score_box)
    by_image: dict[int, list[int]] = {}
    for g, gt in enumerate(gts):
        by_image.setdefault(gt.image_id, []).append(g)
    used = [False] * len(gts)
    flags = []
    for i in order:
        image_id, det = dets[i]
        best, best_iou = -1, IOU_THRESHOLD
        for g in by_image.get(image_id, []):
            if used[g]:
                continue
            overlap = iou(det.box, gts[g].box)
            if overlap >= best_iou and (best < 0 or overlap > best_iou):
                best, best_iou = g, overlap
        if best >= 0:
            used[best] = True
        flags.append(best >= 0)
    return flags


def average_precision(tp_flags: Sequence[bool], n_gt: int) -> Fraction:
    """All-point interpolated AP of a ranked TP/FP sequence, in exact arithmetic."""
    if n_gt == 0:
        raise ValidationError("AP is undefined without ground truth")
    precisions, recalls = [], []
    tp = 0
    for rank, hit in enumerate(tp_flags, start=1):
        tp += hit
        precisions.append(Fraction(tp, rank))
        recalls.append(Fraction(tp, n_gt))
    # precision envelope: running max from the right
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    ap = Fraction(0)
    prev_recall = Fraction(0)
    for p, r in zip(precisions, recalls):
        if r > prev_recall:
            ap += (r - prev_recall) * p
            prev_recall = r
    return ap


def ap50(
    detections: Sequence[tuple[int, ScoredDetection]],
    ground_truth: Sequence[GroundTruth],
    classes: Iterable[int] | None = None,
) -> tuple[dict[int, float], float | None]:
    """Per-class AP at IoU 0.5 and its mean over ``classes``.

    ``detections`` are ``(image_id, detection)`` pairs; each detection counts
    for its ``predicted_class``. Classes with no ground truth are left out of
    both the table and the mean.
    """
    for _, det in detections:
        if not np.isfinite(det.score_box):
            raise ValidationError("detection scores must be finite")
    if classes is None:
        classes = sorted({g.label for g in ground_truth})
    per_class: dict[int, float] = {}
    for c in classes:
        gts = [g for g in ground_truth if g.label == c]
        if not gts:
            continue
        dets = [d for d in detections if d[1].predicted_class == c]
        per_class[c] = float(average_precision(_match_class(dets, gts), len(gts)))
    mean = float(np.mean(list(per_class.values()))) if per_class else None
    return per_class, mean


def export_adapted_features(samples, bank: AdapterBank, path: str | os.PathLike) -> None:
    """One CSV row per sample: id, true label, adapted feature (exact float reprs)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label"] + [f"f{i}" for i in range(bank.dim)])
        for s in samples:
            beta = bank.adapt_many(np.asarray(s.feature, dtype=np.float64)[None, :], [aspect_ratio(s.box)])[0]
            w.writerow([s.id, s.label, *map(repr, beta.tolist())])


def read_adapted_features(path: str | os.PathLike) -> tuple[list[int], list[int], np.ndarray]:
    ids, labels, rows = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            ids.append(int(row[0]))
            labels.append(int(row[1]))
            rows.append([float(v) for v in row[2:]])
    return ids, labels, np.array(rows, dtype=np.float64)


def _csv_bytes(rows) -> bytes:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue().encode()


def report_files(report: EvalReport, config: dict | None = None,
                 class_names: Sequence[str] | None = None) -> dict[str, bytes]:
    """File name -> contents for ``report.json`` and one CSV per metric family."""
    k = len(report.per_class_counts)
    names = list(class_names) if class_names is not None else [str(c) for c in range(k)]

    def fmt(v):
        return "" if v is None else repr(v)

    payload = {"config": config or {}, "report": report.to_dict()}
    files = {"report.json": (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode()}

    summary = [["metric", "value"],
               ["overall_accuracy", fmt(report.overall_accuracy)],
               ["base_accuracy", fmt(report.base_accuracy)],
               ["novel_accuracy", fmt(report.novel_accuracy)]]
    if report.mean_ap50 is not None:
        summary.append(["mean_ap50", fmt(report.mean_ap50)])
    files["summary.csv"] = _csv_bytes(summary)

    files["per_class.csv"] = _csv_bytes(
        [["class", "name", "count", "accuracy"]]
        + [[c, names[c], report.per_class_counts[c], fmt(report.per_class_accuracy[c])] for c in range(k)])

    edges = [0.0, *report.bin_boundaries, float("inf")]
    files["per_bin.csv"] = _csv_bytes(
        [["bin", "lower_exclusive", "upper_inclusive", "count", "accuracy"]]
        + [[j, repr(edges[j]), repr(edges[j + 1]), cnt, fmt(acc)]
           for j, (cnt, acc) in enumerate(zip(report.per_bin_counts, report.per_bin_accuracy))])

    files["confusion.csv"] = _csv_bytes(
        [["true\\pred", *range(k)]] + [[c, *row] for c, row in enumerate(report.confusion)])

    if report.ap50_per_class is not None:
        files["ap50.csv"] = _csv_bytes(
            [["class", "name", "ap50"]] + [[c, names[c], repr(v)] for c, v in sorted(report.ap50_per_class.items())])
    return files


def write_report(report: EvalReport, out_dir: str | os.PathLike, config: dict | None = None,
                 class_names: Sequence[str] | None = None) -> None:
    """Write :func:`report_files` into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    for name, data in report_files(report, config, class_names).items():
        write_bytes_atomic(os.path.join(out_dir, name), data)
