"""Bank of residual bottleneck adapters routed by region aspect ratio.

Each adapter maps a region feature ``f`` (row vector, length D) to
``ReLU(f @ w1) @ w2``; the bank mixes that with the input using the residual
factor ``lam``. A :class:`BinPartition` splits the positive aspect-ratio axis
into N left-open, right-closed intervals and each interval owns one adapter.

Indices are 0-based throughout: adapter ``j`` owns interval
``(boundaries[j], boundaries[j + 1]]``.
"""

from __future__ import annotations

import bisect
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _container
from .errors import ValidationError
from .geometry import BoundingBox, aspect_ratio

BANK_MAGIC = "SHAPEADAPT-BANK"
BANK_VERSION = 1
# residual weight of the adapter branch; w2 = 0 at init makes the starting
# predictions independent of it
DEFAULT_LAMBDA = 0.9


@dataclass(frozen=True)
class Adapter:
    w1: np.ndarray  # (D, Dh) down-projection
    w2: np.ndarray  # (Dh, D) up-projection

    @property
    def dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]


def adapter_forward(adapter: Adapter, f: np.ndarray) -> np.ndarray:
    """``ReLU(f @ w1) @ w2`` with no bias terms."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 1 or f.shape[0] != adapter.w1.shape[0] or adapter.w1.shape[1] != adapter.w2.shape[0] \
            or adapter.w2.shape[1] != f.shape[0]:
        raise ValidationError(
            f"dimension mismatch: f {f.shape}, w1 {adapter.w1.shape}, w2 {adapter.w2.shape}")
    return np.maximum(f @ adapter.w1, 0.0) @ adapter.w2


@dataclass(frozen=True)
class BinPartition:
    """Strictly increasing ``0 = s_0 < s_1 < ... < s_N = inf``."""

    boundaries: tuple[float, ...]

    def __post_init__(self):
        b = tuple(float(v) for v in self.boundaries)
        if len(b) < 2 or b[0] != 0.0 or b[-1] != math.inf:
            raise ValidationError(f"partition must start at 0 and end at inf, got {b}")
        if any(not math.isfinite(v) for v in b[1:-1]):
            raise ValidationError("interior boundaries must be finite")
        if any(lo >= hi for lo, hi in zip(b, b[1:])):
            raise ValidationError(f"boundaries must be strictly increasing, got {b}")
        object.__setattr__(self, "boundaries", b)

    @classmethod
    def from_interior(cls, interior: Sequence[float]) -> "BinPartition":
        return cls((0.0, *interior, math.inf))

    @classmethod
    def geometric(cls, n: int) -> "BinPartition":
        """Default partition: ``s_k = 4 ** (2k/n - 1)`` for k = 1..n-1.

        Symmetric in log-ratio around squares, spanning ratios 1/4 to 4.
        """
        if n < 1:
            raise ValidationError("need at least one bin")
        return cls.from_interior([4.0 ** (2.0 * k / n - 1.0) for k in range(1, n)])

    @property
    def n_bins(self) -> int:
        return len(self.boundaries) - 1

    @property
    def interior(self) -> tuple[float, ...]:
        return self.boundaries[1:-1]

    def index_of(self, ratio: float) -> int:
        _check_ratio(ratio)
        # first boundary >= ratio closes the owning interval
        return bisect.bisect_left(self.boundaries, ratio) - 1

    def indices_of(self, ratios: np.ndarray) -> np.ndarray:
        ratios = np.asarray(ratios, dtype=np.float64)
        if np.any(~np.isfinite(ratios)) or np.any(ratios <= 0):
            raise ValidationError("aspect ratios must be positive and finite")
        return np.searchsorted(np.asarray(self.boundaries), ratios, side="left") - 1


def _check_ratio(ratio: float) -> None:
    if not (math.isfinite(ratio) and ratio > 0):
        raise ValidationError(f"aspect ratio must be positive and finite, got {ratio}")


@dataclass(frozen=True)
class AllocationWeights:
    onehot: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.onehot)
        if v.ndim != 1 or not np.all((v == 0) | (v == 1)) or v.sum() != 1:
            raise ValidationError(f"allocation must be one-hot, got {v}")

    @property
    def index(self) -> int:
        return int(np.argmax(self.onehot))


def allocate(partition: BinPartition, ratio: float) -> AllocationWeights:
    k = partition.index_of(ratio)
    onehot = np.zeros(partition.n_bins, dtype=np.int8)
    onehot[k] = 1
    return AllocationWeights(onehot)


def allocate_many(partition: BinPartition, ratios: np.ndarray) -> np.ndarray:
    """Row-wise one-hot allocation matrix of shape (len(ratios), N)."""
    idx = partition.indices_of(ratios)
    out = np.zeros((idx.shape[0], partition.n_bins), dtype=np.int8)
    out[np.arange(idx.shape[0]), idx] = 1
    return out


@dataclass
class AdapterBank:
    """N adapters stored as stacked arrays ``w1: (N, D, Dh)``, ``w2: (N, Dh, D)``."""

    w1: np.ndarray
    w2: np.ndarray
    partition: BinPartition
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        self.w1 = np.array(self.w1, dtype=np.float64)
        self.w2 = np.array(self.w2, dtype=np.float64)
        if self.w1.ndim != 3 or self.w2.ndim != 3:
            raise ValidationError("w1 and w2 must be stacked 3-d arrays")
        n, d, dh = self.w1.shape
        if self.w2.shape != (n, dh, d):
            raise ValidationError(f"w2 shape {self.w2.shape} inconsistent with w1 {self.w1.shape}")
        if n < 1 or n != self.partition.n_bins:
            raise ValidationError(f"{n} adapters but partition has {self.partition.n_bins} bins")
        if not (0.0 <= self.lam <= 1.0):
            raise ValidationError(f"lam must lie in [0, 1], got {self.lam}")
        if not (np.all(np.isfinite(self.w1)) and np.all(np.isfinite(self.w2))):
            raise ValidationError("adapter weights must be finite")
        self.lam = float(self.lam)

    @classmethod
    def initialize(
        cls,
        n: int,
        dim: int,
        hidden_dim: int | None = None,
        lam: float = DEFAULT_LAMBDA,
        boundaries: Sequence[float] | None = None,
        seed: int = 0,
    ) -> "AdapterBank":
        """Fresh bank with ``w2 = 0`` and ``w1 ~ U(-1/sqrt(D), 1/sqrt(D))``.

        With ``w2 = 0`` every adapted feature is ``(1 - lam) * f``, so cosine
        classification at initialization matches the un-adapted features.
        ``boundaries`` are the N-1 interior edges; default is
        :meth:`BinPartition.geometric`.
        """
        if hidden_dim is None:
            hidden_dim = max(1, dim // 4)
        partition = BinPartition.geometric(n) if boundaries is None else BinPartition.from_interior(boundaries)
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(dim)
        w1 = rng.uniform(-bound, bound, size=(n, dim, hidden_dim))
        w2 = np.zeros((n, hidden_dim, dim))
        return cls(w1, w2, partition, lam)

    @property
    def n_adapters(self) -> int:
        return self.w1.shape[0]

    @property
    def dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[2]

    @property
    def adapters(self) -> list[Adapter]:
        return [Adapter(self.w1[j], self.w2[j]) for j in range(self.n_adapters)]

    def copy(self) -> "AdapterBank":
        return AdapterBank(self.w1.copy(), self.w2.copy(), self.partition, self.lam)

    def adapt_many(self, features: np.ndarray, ratios: np.ndarray) -> np.ndarray:
        """Vectorized :func:`adapt_region` over rows of ``features``."""
        features = np.asarray(features, dtype=np.float64)
        bins = self.partition.indices_of(ratios)
        hidden = np.maximum(np.einsum("bd,bdh->bh", features, self.w1[bins]), 0.0)
        out = np.einsum("bh,bhd->bd", hidden, self.w2[bins])
        return self.lam * out + (1.0 - self.lam) * features


def residual_mix(bank: AdapterBank, j: int, f: np.ndarray) -> np.ndarray:
    if not (0 <= j < bank.n_adapters):
        raise ValidationError(f"adapter index {j} out of range for N={bank.n_adapters}")
    f = np.asarray(f, dtype=np.float64)
    return bank.lam * adapter_forward(Adapter(bank.w1[j], bank.w2[j]), f) + (1.0 - bank.lam) * f


def adapt_all(bank: AdapterBank, f: np.ndarray) -> np.ndarray:
    """Stack of every adapter's residual output, shape (D, N)."""
    return np.stack([residual_mix(bank, j, f) for j in range(bank.n_adapters)], axis=1)


def select_adapted(stack: np.ndarray, y: AllocationWeights) -> np.ndarray:
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 2 or stack.shape[1] != y.onehot.shape[0]:
        raise ValidationError(f"stack shape {stack.shape} does not match allocation of length {y.onehot.shape[0]}")
    return stack @ y.onehot.astype(np.float64)


def adapt_region(bank: AdapterBank, f: np.ndarray, box: BoundingBox) -> np.ndarray:
    # only the selected adapter is evaluated; the one-hot makes this exact
    j = allocate(bank.partition, aspect_ratio(box)).index
    return residual_mix(bank, j, f)


def bank_to_bytes(bank: AdapterBank) -> bytes:
    header = {
        "dim": bank.dim,
        "hidden_dim": bank.hidden_dim,
        "n_adapters": bank.n_adapters,
        "lam": bank.lam,
        "interior_boundaries": list(bank.partition.interior),
    }
    payload = np.concatenate(
        [np.concatenate([bank.w1[j].ravel(), bank.w2[j].ravel()]) for j in range(bank.n_adapters)])
    return _container.encode(BANK_MAGIC, BANK_VERSION, header, payload)


def bank_from_bytes(data: bytes) -> AdapterBank:
    header, payload = _container.decode(data, BANK_MAGIC, BANK_VERSION)
    try:
        d, dh, n = int(header["dim"]), int(header["hidden_dim"]), int(header["n_adapters"])
        lam = float(header["lam"])
        interior = [float(v) for v in header["interior_boundaries"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise _container.InconsistentHeaderError(f"bad bank header: {exc}") from exc
    _container.require(len(interior) == n - 1, "boundary count disagrees with n_adapters")
    _container.require(payload.size == 2 * n * d * dh, "payload size disagrees with bank dimensions")
    per = payload.reshape(n, 2, d * dh).astype(np.float64)
    w1 = per[:, 0].reshape(n, d, dh)
    w2 = per[:, 1].reshape(n, dh, d)
    return AdapterBank(w1, w2, BinPartition.from_interior(interior), lam)


def save_bank(bank: AdapterBank, path: str | os.PathLike) -> None:
    _container.write_bytes_atomic(path, bank_to_bytes(bank))


def load_bank(path: str | os.PathLike) -> AdapterBank:
    return bank_from_bytes(_container.read_bytes(path))
