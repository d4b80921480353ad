"""Command-line entry point.

Configuration is resolved as built-in defaults, then an optional JSON file
(``--config``), then explicit flags. Exit codes: 0 success, 1 validation
error, 2 I/O error, 3 check failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import _container
from .adapters import DEFAULT_LAMBDA, AdapterBank, bank_to_bytes, load_bank
from .classifier import (
    ClassifierConfig,
    ScoredDetection,
    TextEmbeddingBank,
    classification_score,
    classify_many,
    load_text_bank,
    text_bank_to_bytes,
)
from .data import Dataset, SynthConfig, dataset_to_bytes, generate_synthetic, load_dataset, split_train_eval
from .errors import CheckFailedError, ValidationError
from .evaluator import GroundTruth, accuracy_report, ap50, report_files
from .gradcheck import run_gradcheck
from .trainer import TrainConfig, train

log = logging.getLogger("shapeadapt")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_CHECK = 0, 1, 2, 3


@dataclass
class BankConfig:
    n_adapters: int = 4
    hidden_dim: int | None = None
    lam: float = DEFAULT_LAMBDA
    boundaries: list[float] | None = None
    seed: int = 0


@dataclass
class SynthSection:
    dim: int = 32
    num_classes: int = 8
    num_bins: int = 4
    samples_per_class_per_bin: int = 250
    noise_std: float = 0.05
    deformation: str = "rotation"
    seed: int = 0
    num_novel: int = 0
    train_fraction: float = 0.8


@dataclass
class GradcheckSection:
    instances: int = 100
    seed: int = 0
    dim: int = 8
    hidden_dim: int = 2
    n_adapters: int = 3
    num_classes: int = 5
    batch: int = 4
    tau: float = 0.1
    step: float = 1e-4
    tolerance: float = 1e-5


@dataclass
class RunConfig:
    synth: SynthSection = field(default_factory=SynthSection)
    bank: BankConfig = field(default_factory=BankConfig)
    train: dict = field(default_factory=lambda: asdict(TrainConfig()))
    classifier: dict = field(default_factory=lambda: asdict(ClassifierConfig()))
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    def classifier_config(self) -> ClassifierConfig:
        return ClassifierConfig(**self.classifier)

    def synth_config(self) -> SynthConfig:
        s = asdict(self.synth)
        s.pop("train_fraction")
        return SynthConfig(**s)


def _apply(section, values: dict, name: str):
    if isinstance(section, dict):
        unknown = set(values) - set(section)
        if unknown:
            raise ValidationError(f"unknown keys in [{name}]: {sorted(unknown)}")
        return {**section, **values}
    known = {f.name for f in fields(section)}
    unknown = set(values) - known
    if unknown:
        raise ValidationError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return replace(section, **values)


def resolve_config(path: str | None, overrides: dict[str, dict]) -> RunConfig:
    cfg = RunConfig()
    layers = []
    if path:
        with open(path) as fh:
            try:
                layers.append(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    layers.append(overrides)
    for layer in layers:
        for name, values in layer.items():
            if not hasattr(cfg, name):
                raise ValidationError(f"unknown config section {name!r}")
            setattr(cfg, name, _apply(getattr(cfg, name), values, name))
    return cfg


def _write_all(files: dict[str, bytes]) -> None:
    """Write every file or none of them."""
    written = []
    try:
        for path, data in files.items():
            _container.write_bytes_atomic(path, data)
            written.append(path)
    except BaseException:
        for path in written:
            os.unlink(path)
        raise


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def cmd_gen_synth(cfg: RunConfig, out_dir: str) -> None:
    task = generate_synthetic(cfg.synth_config())
    tr, ev = split_train_eval(task.dataset, cfg.synth.train_fraction, cfg.synth.seed, task.partition)
    parent = os.path.dirname(os.path.abspath(out_dir))
    if not os.path.isdir(parent):
        raise FileNotFoundError(f"parent directory of {out_dir} does not exist")
    os.makedirs(out_dir, exist_ok=True)
    _write_all({
        os.path.join(out_dir, "train.bin"): dataset_to_bytes(tr),
        os.path.join(out_dir, "eval.bin"): dataset_to_bytes(ev),
        os.path.join(out_dir, "texts.bin"): text_bank_to_bytes(task.texts),
        os.path.join(out_dir, "config.json"): _json_bytes({"config": cfg.to_dict()}),
    })
    log.info("wrote %d train / %d eval samples to %s", len(tr), len(ev), out_dir)


def _init_bank(cfg: RunConfig, dim: int, n: int | None = None) -> AdapterBank:
    b = cfg.bank
    n = b.n_adapters if n is None else n
    boundaries = b.boundaries if n == b.n_adapters else None
    return AdapterBank.initialize(n, dim, b.hidden_dim, b.lam, boundaries, b.seed)


def cmd_train(cfg: RunConfig, train_path: str, texts_path: str, checkpoint: str, report_path: str) -> None:
    ds = load_dataset(train_path)
    texts = load_text_bank(texts_path)
    bank = _init_bank(cfg, ds.dim)
    trained, report = train(bank, ds, texts, cfg.train_config(), cfg.classifier_config())
    payload = report.to_dict()
    payload["config"] = cfg.to_dict()
    _write_all({checkpoint: bank_to_bytes(trained), report_path: _json_bytes(payload)})
    log.info("loss %.6f -> %.6f over %d steps", report.initial_loss, report.epoch_losses[-1], report.steps)


def predict(bank: AdapterBank | None, ds: Dataset, texts: TextEmbeddingBank, clf: ClassifierConfig) -> np.ndarray:
    """Class probabilities per sample; ``bank=None`` classifies the raw features."""
    feats = ds.features
    betas = feats if bank is None else bank.adapt_many(feats, ds.ratios)
    return classify_many(betas, texts, clf)


def evaluate(bank: AdapterBank | None, ds: Dataset, texts: TextEmbeddingBank, clf: ClassifierConfig,
             partition=None):
    """Accuracy report plus AP50 with every sample's box used as a detection (score_l = 1)."""
    probs = predict(bank, ds, texts, clf)
    if partition is None:
        if bank is None:
            raise ValidationError("a partition is required to bin the un-adapted baseline")
        partition = bank.partition
    preds = np.argmax(probs, axis=1)
    report = accuracy_report([(int(p), s.label, s.box) for p, s in zip(preds, ds.samples)],
                             partition, texts.split_tags)
    dets, gts = [], []
    for s, pr in zip(ds.samples, probs):
        score_c, k = classification_score(pr)
        dets.append((s.image_id, ScoredDetection(s.box, pr, score_c, 1.0, score_c, k)))
        gts.append(GroundTruth(s.image_id, s.box, s.label))
    report.ap50_per_class, report.mean_ap50 = ap50(dets, gts)
    return report, probs


def cmd_eval(cfg: RunConfig, dataset_path: str, texts_path: str, out_dir: str,
             checkpoint: str | None = None, init: bool = False, baseline: bool = False) -> None:
    ds = load_dataset(dataset_path)
    texts = load_text_bank(texts_path)
    if sum([checkpoint is not None, init, baseline]) != 1:
        raise ValidationError("choose exactly one of --checkpoint, --init, --baseline")
    if checkpoint is not None:
        bank = load_bank(checkpoint)
    elif init:
        bank = _init_bank(cfg, ds.dim)
    else:
        bank = None
    partition = bank.partition if bank is not None else _init_bank(cfg, ds.dim).partition
    report, probs = evaluate(bank, ds, texts, cfg.classifier_config(), partition)
    config = cfg.to_dict()
    config["mode"] = "checkpoint" if checkpoint else ("init" if init else "baseline")
    rows = [["sample_id", "image_id", "label", "predicted", "score_c"]]
    for s, pr in zip(ds.samples, probs):
        score_c, k = classification_score(pr)
        rows.append([s.id, s.image_id, s.label, k, repr(score_c)])
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    files = report_files(report, config, texts.class_names)
    files["predictions.csv"] = buf.getvalue().encode()
    parent = os.path.dirname(os.path.abspath(out_dir))
    if not os.path.isdir(parent):
        raise FileNotFoundError(f"parent directory of {out_dir} does not exist")
    os.makedirs(out_dir, exist_ok=True)
    _write_all({os.path.join(out_dir, name): data for name, data in files.items()})
    log.info("overall accuracy %.4f", report.overall_accuracy)


def cmd_gradcheck(cfg: RunConfig, corrupt: bool = False) -> float:
    g = cfg.gradcheck
    result = run_gradcheck(
        instances=g.instances, seed=g.seed, dim=g.dim, hidden_dim=g.hidden_dim, n_adapters=g.n_adapters,
        num_classes=g.num_classes, batch=g.batch, lam=cfg.bank.lam,
        clf=ClassifierConfig(tau=g.tau, normalize=cfg.classifier_config().normalize),
        step=g.step, tolerance=g.tolerance, loss=cfg.train_config().loss, corrupt=corrupt)
    status = "PASS" if result.passed else "FAIL"
    print(f"gradcheck {status}: max relative error {result.max_relative_error:.3e} "
          f"(tolerance {result.tolerance:g}, {result.instances} instances, all-zero={result.all_zero})")
    if not result.passed:
        raise CheckFailedError(f"max relative error {result.max_relative_error:.3e} exceeds {result.tolerance:g}")
    return result.max_relative_error


def ablate_n(cfg: RunConfig, tr: Dataset, ev: Dataset, texts: TextEmbeddingBank, n_list) -> list[dict]:
    rows = []
    clf = cfg.classifier_config()
    for n in n_list:
        bank = _init_bank(cfg, tr.dim, n)
        trained, _ = train(bank, tr, texts, cfg.train_config(), clf)
        report, _ = evaluate(trained, ev, texts, clf)
        rows.append({
            "n_adapters": n,
            "overall_accuracy": report.overall_accuracy,
            "mean_ap50": report.mean_ap50,
            "boundaries": list(trained.partition.interior),
        })
        log.info("N=%d accuracy %.4f", n, report.overall_accuracy)
    return rows


def cmd_ablate_n(cfg: RunConfig, train_path: str, eval_path: str, texts_path: str, out_path: str,
                 n_list) -> list[dict]:
    rows = ablate_n(cfg, load_dataset(train_path), load_dataset(eval_path), load_text_bank(texts_path), n_list)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n_adapters", "overall_accuracy", "mean_ap50", "boundaries"])
    for r in rows:
        w.writerow([r["n_adapters"], repr(r["overall_accuracy"]), repr(r["mean_ap50"]),
                    ";".join(repr(b) for b in r["boundaries"])])
    _write_all({out_path: buf.getvalue().encode()})
    return rows


# flag -> (section, key, type)
_OVERRIDES = {
    "dim": ("synth", "dim", int),
    "num_classes": ("synth", "num_classes", int),
    "num_bins": ("synth", "num_bins", int),
    "samples_per_cell": ("synth", "samples_per_class_per_bin", int),
    "noise_std": ("synth", "noise_std", float),
    "deformation": ("synth", "deformation", str),
    "num_novel": ("synth", "num_novel", int),
    "train_fraction": ("synth", "train_fraction", float),
    "synth_seed": ("synth", "seed", int),
    "n_adapters": ("bank", "n_adapters", int),
    "hidden_dim": ("bank", "hidden_dim", int),
    "lam": ("bank", "lam", float),
    "boundaries": ("bank", "boundaries", lambda s: [float(v) for v in s.split(",") if v]),
    "bank_seed": ("bank", "seed", int),
    "epochs": ("train", "epochs", int),
    "base_lr": ("train", "base_lr", float),
    "lr_decay_factor": ("train", "lr_decay_factor", float),
    "lr_decay_after_epoch": ("train", "lr_decay_after_epoch", int),
    "batch_size": ("train", "batch_size", int),
    "weight_decay": ("train", "weight_decay", float),
    "seed": ("train", "seed", int),
    "optimizer": ("train", "optimizer", str),
    "loss": ("train", "loss", str),
    "tau": ("classifier", "tau", float),
    "normalize": ("classifier", "normalize", lambda s: s.lower() in ("1", "true", "yes")),
    "instances": ("gradcheck", "instances", int),
    "gc_seed": ("gradcheck", "seed", int),
    "gc_tau": ("gradcheck", "tau", float),
}

_GROUPS = {
    "gen-synth": ["dim", "num_classes", "num_bins", "samples_per_cell", "noise_std", "deformation",
                  "num_novel", "train_fraction", "synth_seed"],
    "train": ["n_adapters", "hidden_dim", "lam", "boundaries", "bank_seed", "epochs", "base_lr",
              "lr_decay_factor", "lr_decay_after_epoch", "batch_size", "weight_decay", "seed",
              "optimizer", "loss", "tau", "normalize"],
    "eval": ["n_adapters", "hidden_dim", "lam", "boundaries", "bank_seed", "tau", "normalize"],
    "gradcheck": ["lam", "tau", "normalize", "loss", "instances", "gc_seed", "gc_tau"],
}
_GROUPS["ablate-n"] = _GROUPS["train"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shapeadapt", description="Aspect-ratio routed adapter bank: data, training, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    cmds = {
        "gen-synth": sub.add_parser("gen-synth", help="write a synthetic train/eval set and text bank"),
        "train": sub.add_parser("train", help="train an adapter bank"),
        "eval": sub.add_parser("eval", help="evaluate a bank (or the un-adapted baseline)"),
        "gradcheck": sub.add_parser("gradcheck", help="finite-difference gradient check"),
        "ablate-n": sub.add_parser("ablate-n", help="accuracy as a function of adapter count"),
    }
    for name, p in cmds.items():
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        for flag in _GROUPS[name]:
            p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=str, default=None)

    cmds["gen-synth"].add_argument("--out-dir", required=True)

    p = cmds["train"]
    p.add_argument("--train", required=True, help="training dataset container")
    p.add_argument("--texts", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", required=True)

    p = cmds["eval"]
    p.add_argument("--dataset", required=True)
    p.add_argument("--texts", required=True)
    p.add_argument("--out-dir", required=True)
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--checkpoint")
    mode.add_argument("--init", action="store_true", help="evaluate a freshly initialized bank")
    mode.add_argument("--baseline", action="store_true", help="classify the raw features")

    cmds["gradcheck"].add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)

    p = cmds["ablate-n"]
    p.add_argument("--train", required=True)
    p.add_argument("--eval", required=True)
    p.add_argument("--texts", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-list", default="1,2,4,16")
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, dict]:
    out: dict[str, dict] = {}
    for flag in _GROUPS[args.command]:
        raw = getattr(args, flag)
        if raw is None:
            continue
        section, key, conv = _OVERRIDES[flag]
        try:
            value = conv(raw)
        except ValueError as exc:
            raise ValidationError(f"--{flag.replace('_', '-')}: {exc}") from exc
        out.setdefault(section, {})[key] = value
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, _overrides(args))
        if args.command == "gen-synth":
            cmd_gen_synth(cfg, args.out_dir)
        elif args.command == "train":
            cmd_train(cfg, args.train, args.texts, args.checkpoint, args.report)
        elif args.command == "eval":
            cmd_eval(cfg, args.dataset, args.texts, args.out_dir, args.checkpoint, args.init, args.baseline)
        elif args.command == "gradcheck":
            cmd_gradcheck(cfg, args.corrupt)
        elif args.command == "ablate-n":
            try:
                n_list = [int(v) for v in args.n_list.split(",") if v]
            except ValueError as exc:
                raise ValidationError(f"--n-list: {exc}") from exc
            cmd_ablate_n(cfg, args.train, args.eval, args.texts, args.out, n_list)
    except CheckFailedError as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (ValidationError, TypeError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
