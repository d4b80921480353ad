import csv

import numpy as np
import pytest

from shapeadapt.adapters import AdapterBank
from shapeadapt.classifier import ClassifierConfig, classify_many, text_bank_to_bytes
from shapeadapt.data import (
    Dataset,
    RegionSample,
    SynthConfig,
    dataset_from_bytes,
    dataset_to_bytes,
    export_samples_csv,
    generate_synthetic,
    load_dataset,
    oracle_predictions,
    random_rotation,
    save_dataset,
    split_train_eval,
    thin_per_cell,
)
from shapeadapt.errors import ContainerError, InconsistentHeaderError, TruncatedBlobError, ValidationError, VersionMismatchError
from shapeadapt.geometry import BoundingBox
from shapeadapt.trainer import TrainConfig, train


def random_dataset(rng, n=None, d=None, k=None):
    n = int(rng.integers(0, 20)) if n is None else n
    d = int(rng.integers(1, 9)) if d is None else d
    k = int(rng.integers(2, 6)) if k is None else k
    tags = tuple(rng.choice(["base", "novel"], size=k))
    samples = []
    for i in range(n):
        y = int(rng.integers(k))
        box = BoundingBox(*rng.normal(size=2), *np.exp(rng.normal(size=2)))
        samples.append(RegionSample(int(rng.integers(10**6)), int(rng.integers(50)), box, y, tags[y],
                                    rng.normal(size=d)))
    return Dataset(d, tuple(f"class {i}" for i in range(k)), tags, samples)


def same_dataset(a, b):
    if (a.dim, a.class_names, a.split_tags, len(a)) != (b.dim, b.class_names, b.split_tags, len(b)):
        return False
    for s, t in zip(a.samples, b.samples):
        if (s.id, s.image_id, s.box, s.label, s.split) != (t.id, t.image_id, t.box, t.label, t.split):
            return False
        if s.feature.dtype != t.feature.dtype or s.feature.tobytes() != t.feature.tobytes():
            return False
    return True


# container

def test_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    ds = random_dataset(rng, n=12)
    save_dataset(ds, tmp_path / "d.bin")
    assert same_dataset(load_dataset(tmp_path / "d.bin"), ds)


def test_empty_dataset(tmp_path):
    ds = Dataset(4, ("a", "b"), ("base", "novel"), [])
    save_dataset(ds, tmp_path / "e.bin")
    back = load_dataset(tmp_path / "e.bin")
    assert len(back) == 0 and back.features.shape == (0, 4)


def test_label_outside_classes():
    ds = Dataset(2, ("a", "b", "c"), ("base",) * 3,
                 [RegionSample(0, 0, BoundingBox(0, 0, 1, 1), 2, "base", np.ones(2))])
    data = dataset_to_bytes(ds).replace(b'"label":2', b'"label":5', 1)
    with pytest.raises(InconsistentHeaderError):
        dataset_from_bytes(data)


def test_container_errors():
    ds = random_dataset(np.random.default_rng(1), n=3, d=2)
    data = dataset_to_bytes(ds)
    with pytest.raises(TruncatedBlobError):
        dataset_from_bytes(data[:-4])
    with pytest.raises(VersionMismatchError):
        dataset_from_bytes(data.replace(b"SHAPEADAPT-DATA 1", b"SHAPEADAPT-DATA 0", 1))
    with pytest.raises(InconsistentHeaderError):
        dataset_from_bytes(data.replace(b'"num_samples":3', b'"num_samples":4', 1))
    with pytest.raises(ContainerError):
        dataset_from_bytes(b"SOMETHING-ELSE 1\n{}\n")


def test_split_tag_must_match_class():
    with pytest.raises(InconsistentHeaderError):
        Dataset(1, ("a", "b"), ("base", "novel"), [RegionSample(0, 0, BoundingBox(0, 0, 1, 1), 1, "base", [1.0])])
    with pytest.raises(InconsistentHeaderError):
        Dataset(2, ("a", "b"), ("base", "base"), [RegionSample(0, 0, BoundingBox(0, 0, 1, 1), 0, "base", [1.0])])


def test_sample_feature_frozen():
    s = RegionSample(0, 0, BoundingBox(0, 0, 1, 1), 0, "base", np.ones(3))
    assert s.feature.dtype == np.float32
    with pytest.raises(ValueError):
        s.feature[0] = 2.0


def test_export_csv(tmp_path):
    ds = random_dataset(np.random.default_rng(2), n=5)
    export_samples_csv(ds, tmp_path / "s.csv")
    with open(tmp_path / "s.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["id"]) for r in rows] == [s.id for s in ds.samples]
    assert [float(r["aspect_ratio"]) for r in rows] == pytest.approx(list(ds.ratios))


# generator

def test_identity_noiseless_is_perfect():
    task = generate_synthetic(SynthConfig(dim=12, num_classes=6, num_bins=3, samples_per_class_per_bin=5,
                                          noise_std=0.0, deformation="identity"))
    ds = task.dataset
    protos = task.texts.embeddings
    np.testing.assert_allclose(ds.features, protos[:, ds.labels].T, atol=1e-7)
    preds = np.argmax(classify_many(ds.features, task.texts, ClassifierConfig()), axis=1)
    assert np.array_equal(preds, ds.labels)


def plane_rotation(a, b):
    """Rotation in span(a, b) taking unit vector a onto unit vector b."""
    e1 = a
    u = b - (b @ a) * a
    e2 = u / np.linalg.norm(u)
    c, s = float(b @ e1), float(b @ e2)
    d = a.shape[0]
    return (np.eye(d) + (c - 1) * (np.outer(e1, e1) + np.outer(e2, e2))
            + s * (np.outer(e2, e1) - np.outer(e1, e2)))


def test_planted_rotation_breaks_one_class():
    cfg = SynthConfig(dim=10, num_classes=4, num_bins=2, samples_per_class_per_bin=6, noise_std=0.0,
                      deformation="identity", seed=5)
    protos = generate_synthetic(cfg).texts.embeddings
    rot = plane_rotation(protos[:, 0], protos[:, 1])
    assert np.linalg.det(rot) == pytest.approx(1.0)
    task = generate_synthetic(cfg, deformations=np.stack([np.eye(10), rot]))
    ds = task.dataset
    preds = np.argmax(classify_many(ds.features, task.texts, ClassifierConfig()), axis=1)
    bins = task.partition.indices_of(ds.ratios)
    in_cell = (bins == 1) & (ds.labels == 0)
    assert in_cell.sum() == 6
    assert np.all(preds[in_cell] == 1)
    assert np.all(preds[bins == 0] == ds.labels[bins == 0])


def test_boxes_land_in_their_bins():
    cfg = SynthConfig(dim=4, num_classes=2, num_bins=5, samples_per_class_per_bin=30, seed=2)
    task = generate_synthetic(cfg)
    bins = task.partition.indices_of(task.dataset.ratios)
    assert np.array_equal(np.bincount(bins), [60] * 5)
    r = task.dataset.ratios
    assert r.min() > 1 / 16 and r.max() <= 16


def test_generation_bit_identical():
    cfg = SynthConfig(dim=8, num_classes=3, num_bins=2, samples_per_class_per_bin=10, seed=11,
                      deformation="general-linear", num_novel=1)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert dataset_to_bytes(a.dataset) == dataset_to_bytes(b.dataset)
    assert text_bank_to_bytes(a.texts) == text_bank_to_bytes(b.texts)
    assert np.array_equal(a.deformations, b.deformations)
    c = generate_synthetic(SynthConfig(**{**cfg.__dict__, "seed": 12}))
    assert dataset_to_bytes(c.dataset) != dataset_to_bytes(a.dataset)


def test_hidden_maps_not_serialized():
    task = generate_synthetic(SynthConfig(dim=8, num_classes=3, num_bins=3, samples_per_class_per_bin=20))
    blob = dataset_to_bytes(task.dataset) + text_bank_to_bytes(task.texts)
    for m in task.deformations:
        for row in m:
            for dtype in ("<f4", "<f8", ">f4", ">f8"):
                raw = row.astype(dtype).tobytes()
                width = np.dtype(dtype).itemsize * 2
                for i in range(0, len(raw) - width + 1, np.dtype(dtype).itemsize):
                    assert raw[i:i + width] not in blob
    header = blob.split(b"\n")[1].decode()
    assert "deform" not in header and "rotation" not in header


def test_rotation_is_proper():
    rng = np.random.default_rng(3)
    for d in (2, 5, 16):
        q = random_rotation(rng, d)
        np.testing.assert_allclose(q @ q.T, np.eye(d), atol=1e-12)
        assert np.linalg.det(q) == pytest.approx(1.0)


def test_general_linear_invertible():
    task = generate_synthetic(SynthConfig(dim=6, num_classes=2, num_bins=2, samples_per_class_per_bin=2,
                                          deformation="general-linear"))
    assert all(np.linalg.cond(m) < 1e3 for m in task.deformations)


def test_bins_inconsistent_with_partition():
    with pytest.raises(ValidationError):
        generate_synthetic(SynthConfig(num_bins=3, interior_boundaries=(1.0,)))
    with pytest.raises(ValidationError):
        generate_synthetic(SynthConfig(dim=4), deformations=np.zeros((2, 4, 4)))


@pytest.mark.parametrize("kwargs", [dict(dim=0), dict(num_classes=1), dict(noise_std=-1),
                                    dict(deformation="shear"), dict(num_novel=8), dict(ratio_range=(2, 1))])
def test_synth_config_validation(kwargs):
    with pytest.raises(ValidationError):
        SynthConfig(**kwargs)


def test_oracle_upper_bounds_trained(small_task):
    task, tr, ev = small_task
    oracle = np.mean(oracle_predictions(task, ev) == ev.labels)
    bank = AdapterBank.initialize(2, tr.dim, seed=0)
    trained, _ = train(bank, tr, task.texts, TrainConfig(epochs=5, base_lr=1e-3))
    preds = np.argmax(classify_many(trained.adapt_many(ev.features, ev.ratios), task.texts, ClassifierConfig()), axis=1)
    assert np.mean(preds == ev.labels) <= oracle
    assert oracle == 1.0


# splitting

def test_split_half():
    task = generate_synthetic(SynthConfig(dim=4, num_classes=3, num_bins=1, samples_per_class_per_bin=10))
    tr, ev = split_train_eval(task.dataset, 0.5, 0)
    assert np.bincount(tr.labels).tolist() == [5, 5, 5]
    assert np.bincount(ev.labels).tolist() == [5, 5, 5]
    assert {s.id for s in tr.samples}.isdisjoint({s.id for s in ev.samples})


def test_split_novel_goes_to_eval():
    task = generate_synthetic(SynthConfig(dim=4, num_classes=4, num_bins=2, samples_per_class_per_bin=8,
                                          num_novel=2))
    tr, ev = split_train_eval(task.dataset, 0.75, 1, task.partition)
    assert all(s.split == "base" for s in tr.samples)
    assert sum(s.split == "novel" for s in ev.samples) == 32
    assert len(tr) == 24


def test_split_stratified_by_bin():
    task = generate_synthetic(SynthConfig(dim=4, num_classes=2, num_bins=4, samples_per_class_per_bin=10))
    tr, _ = split_train_eval(task.dataset, 0.8, 0, task.partition)
    cells = np.bincount(tr.labels * 4 + task.partition.indices_of(tr.ratios))
    assert cells.tolist() == [8] * 8


def test_split_deterministic():
    ds = random_dataset(np.random.default_rng(4), n=40, k=3)
    a = split_train_eval(ds, 0.6, 7)
    b = split_train_eval(ds, 0.6, 7)
    assert [s.id for s in a[0].samples] == [s.id for s in b[0].samples]


def test_split_small_class_warns():
    samples = [RegionSample(i, i, BoundingBox(0, 0, 1, 1), y, "base", [1.0, float(i)])
               for i, y in enumerate([0, 0, 0, 0, 1])]
    ds = Dataset(2, ("a", "b"), ("base", "base"), samples)
    with pytest.warns(UserWarning, match="fewer than 2"):
        tr, ev = split_train_eval(ds, 0.5, 0)
    assert 1 not in tr.labels and 1 in ev.labels


def test_split_fraction_validated():
    ds = random_dataset(np.random.default_rng(5), n=4)
    for f in (0.0, 1.0, -0.5):
        with pytest.raises(ValidationError):
            split_train_eval(ds, f, 0)


def test_thin_per_cell():
    task = generate_synthetic(SynthConfig(dim=4, num_classes=2, num_bins=2, samples_per_class_per_bin=10))
    thin = thin_per_cell(task.dataset, 3, task.partition)
    assert len(thin) == 12
    assert np.bincount(thin.labels * 2 + task.partition.indices_of(thin.ratios)).tolist() == [3] * 4
