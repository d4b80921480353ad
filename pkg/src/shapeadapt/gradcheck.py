"""Finite-difference verification of the trainer's analytic gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .adapters import DEFAULT_LAMBDA, AdapterBank
from .classifier import ClassifierConfig, TextEmbeddingBank, make_text_bank
from .geometry import BoundingBox
from .trainer import (
    Gradients,
    loss_and_gradients,
    max_relative_error,
    numerical_gradients,
)


@dataclass
class GradcheckResult:
    max_relative_error: float
    instances: int
    tolerance: float
    all_zero: bool

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= self.tolerance


def _box_with_ratio(r: float) -> BoundingBox:
    return BoundingBox(0.0, 0.0, 1.0 / math.sqrt(r), math.sqrt(r))


def random_instance(
    rng: np.random.Generator,
    dim: int = 8,
    hidden_dim: int = 2,
    n_adapters: int = 3,
    num_classes: int = 5,
    batch: int = 4,
    lam: float = DEFAULT_LAMBDA,
    exclusion: float = 1e-6,
    step: float = 1e-4,
) -> tuple[AdapterBank, list, TextEmbeddingBank]:
    """Random bank, batch and text bank with every ReLU input clear of its kink.

    An instance is redrawn while any pre-activation lies within
    ``max(exclusion, step * max|f|)`` of zero, so no finite-difference probe
    can cross the kink.
    """
    while True:
        bank = AdapterBank.initialize(n_adapters, dim, hidden_dim, lam=lam, seed=int(rng.integers(2**31)))
        bank.w2[:] = rng.normal(0.0, 0.3, size=bank.w2.shape)
        texts = make_text_bank(rng.normal(size=(dim, num_classes)))
        items = []
        for _ in range(batch):
            f = rng.normal(size=dim)
            f /= np.linalg.norm(f)
            r = math.exp(rng.uniform(math.log(1e-2), math.log(1e2)))
            items.append((f, _box_with_ratio(r), int(rng.integers(num_classes))))
        margin = max(exclusion, step * max(float(np.max(np.abs(f))) for f, _, _ in items))
        bins = bank.partition.indices_of([b.h / b.w for _, b, _ in items])
        pre = np.array([f @ bank.w1[j] for (f, _, _), j in zip(items, bins)])
        if np.min(np.abs(pre)) > margin:
            return bank, items, texts


def run_gradcheck(
    instances: int = 100,
    seed: int = 0,
    dim: int = 8,
    hidden_dim: int = 2,
    n_adapters: int = 3,
    num_classes: int = 5,
    batch: int = 4,
    lam: float = DEFAULT_LAMBDA,
    clf: ClassifierConfig = ClassifierConfig(tau=0.1),
    step: float = 1e-4,
    tolerance: float = 1e-5,
    loss: str = "ce",
    corrupt: bool = False,
) -> GradcheckResult:
    """Compare analytic and central-difference gradients over random instances.

    ``corrupt`` perturbs the analytic gradient as a negative control.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    all_zero = True
    for _ in range(instances):
        bank, items, texts = random_instance(rng, dim, hidden_dim, n_adapters, num_classes, batch, lam, step=step)
        _, analytic = loss_and_gradients(bank, items, texts, clf, loss)
        if corrupt:
            analytic = Gradients(analytic.dw1 * 1.01, analytic.dw2 + 1e-3)
        numeric = numerical_gradients(bank, items, texts, clf, loss, step)
        all_zero &= not (np.any(analytic.dw1) or np.any(analytic.dw2))
        worst = max(worst, max_relative_error(analytic, numeric))
    return GradcheckResult(worst, instances, tolerance, bool(all_zero))
