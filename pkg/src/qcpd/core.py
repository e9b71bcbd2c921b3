"""Domain types shared by every stage of the detection pipeline.

All user-facing indices (time ticks, entity ids, change points, stopping
times) are 1-based. Arrays are stored 0-based internally.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class QcpdError(Exception):
    """Base class for errors raised by this package."""


class DataError(QcpdError, ValueError):
    """Input data or configuration violates a documented precondition."""


class NumericError(QcpdError, ArithmeticError):
    """A numerical procedure failed (divergence, step-size underflow, ...)."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


def substream(seed: int, *key: int) -> np.random.Generator:
    """Return an independent PCG64 generator for ``(seed, *key)``.

    Substreams are derived with ``SeedSequence(seed, spawn_key=key)``, so the
    stream for entity ``p`` is ``substream(seed, p - 1)`` no matter how many
    entities exist.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def warmup_ticks(warmup_seconds: float, dt: float) -> int:
    """Number of ticks covering ``warmup_seconds`` at sampling interval ``dt``."""
    # round() guards ratios such as 2/0.1 that land a hair above an integer
    return int(math.ceil(round(warmup_seconds / dt, 9)))


@dataclass(frozen=True)
class EntityTensor:
    """Observation tensor of shape ``(F, T, P)``: sensors x time x entities.

    ``change_index`` is the annotated change point t* (1-based) or ``None`` for
    a normal sequence. ``mask`` is an optional ``(T, P)`` boolean array marking
    which entities are active at each tick.
    """

    data: np.ndarray
    dt: float
    change_index: Optional[int] = None
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DataError(f"tensor must have shape (F, T, P) with all dims >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError("tensor contains non-finite values")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise DataError(f"dt must be positive, got {self.dt}")
        T = data.shape[1]
        if self.change_index is not None:
            if not 1 <= int(self.change_index) <= T:
                raise DataError(f"change index {self.change_index} outside [1, {T}]")
            object.__setattr__(self, "change_index", int(self.change_index))
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "dt", float(self.dt))
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != (T, data.shape[2]):
                raise DataError(f"mask shape {mask.shape} does not match (T, P)={(T, data.shape[2])}")
            object.__setattr__(self, "mask", _frozen(mask))

    @property
    def F(self) -> int:
        return self.data.shape[0]

    @property
    def T(self) -> int:
        return self.data.shape[1]

    @property
    def P(self) -> int:
        return self.data.shape[2]

    def active(self) -> np.ndarray:
        """``(T, P)`` activity mask; all True when no mask is attached."""
        if self.mask is None:
            return np.ones((self.T, self.P), dtype=bool)
        return self.mask

    def with_data(self, data: np.ndarray) -> "EntityTensor":
        return EntityTensor(data, self.dt, self.change_index, self.mask)


def slice_time(tensor: EntityTensor, t: int) -> np.ndarray:
    """Copy of the ``(F, P)`` cross-section at 1-based tick ``t``."""
    if not 1 <= t <= tensor.T:
        raise IndexError(f"time index {t} outside [1, {tensor.T}]")
    return tensor.data[:, t - 1, :].copy()


@dataclass(frozen=True)
class Window:
    """``(F, w)`` block of observations ending at tick ``end_index``."""

    values: np.ndarray
    end_index: int

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)


@dataclass(frozen=True)
class IdfnSeries:
    """Per-entity reconstruction scores, shape ``(T, P)``."""

    scores: np.ndarray
    dt: float
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 2:
            raise DataError(f"IDfN scores must be 2-D (T, P), got shape {scores.shape}")
        if not np.all(np.isfinite(scores)) or np.any(scores < 0):
            raise DataError("IDfN scores must be finite and non-negative")
        object.__setattr__(self, "scores", _frozen(scores))
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != scores.shape:
                raise DataError("IDfN mask shape mismatch")
            object.__setattr__(self, "mask", _frozen(mask))

    @property
    def T(self) -> int:
        return self.scores.shape[0]

    @property
    def P(self) -> int:
        return self.scores.shape[1]

    def row(self, t: int) -> np.ndarray:
        """Scores of the entities active at 1-based tick ``t``."""
        if not 1 <= t <= self.T:
            raise IndexError(f"time index {t} outside [1, {self.T}]")
        values = self.scores[t - 1]
        if self.mask is not None:
            values = values[self.mask[t - 1]]
        return values

    def active_values(self) -> np.ndarray:
        if self.mask is None:
            return self.scores.reshape(-1)
        return self.scores[self.mask]


SERIES_KINDS = (
    "swas_mean",
    "swas_variance",
    "deviation_mean",
    "deviation_variance",
    "deviation_wasserstein",
    "cusum",
    "density",
    "signal",
)


@dataclass(frozen=True)
class ScalarSeries:
    """A scalar time series with its sampling interval and a kind tag.

    ``density`` series carry NaN on ticks where no density was evaluated
    (warmup, or after the detector latched).
    """

    values: np.ndarray
    dt: float
    kind: str

    def __post_init__(self):
        if self.kind not in SERIES_KINDS:
            raise DataError(f"unknown series kind {self.kind!r}")
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        checked = values if self.kind != "density" else values[~np.isnan(values)]
        if not np.all(np.isfinite(checked)):
            raise DataError(f"{self.kind} series contains non-finite values")
        object.__setattr__(self, "values", _frozen(values))

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class DetectionOutcome:
    stop_index: Optional[int]
    cusum: ScalarSeries
    density_at_current: ScalarSeries
    threshold: float
    warmup_samples: int
    deviation: Optional[ScalarSeries] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stop_index is not None and not (
            self.warmup_samples < self.stop_index <= len(self.cusum)
        ):
            raise DataError(
                f"stop index {self.stop_index} outside ({self.warmup_samples}, {len(self.cusum)}]"
            )

    @property
    def fired(self) -> bool:
        return self.stop_index is not None
