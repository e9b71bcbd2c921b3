"""Z-score normalisation and replication-padded sliding windows."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .core import DataError, EntityTensor, Window


@dataclass(frozen=True)
class NormStats:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        sigma = np.asarray(self.sigma, dtype=np.float64).reshape(-1)
        if mu.shape != sigma.shape:
            raise DataError("mu and sigma must have the same length")
        if np.any(sigma <= 0):
            raise DataError(f"sigma must be positive for every sensor, got {sigma.tolist()}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["mu"], dtype=float), np.array(d["sigma"], dtype=float))


TensorOrList = Union[EntityTensor, Sequence[EntityTensor]]


def _as_list(tensors: TensorOrList) -> list[EntityTensor]:
    return [tensors] if isinstance(tensors, EntityTensor) else list(tensors)


def fit_norm(train: TensorOrList) -> NormStats:
    """Per-sensor mean and population std pooled over all ticks and entities.

    Several tensors may be passed; their active cells are pooled together.
    """
    tensors = _as_list(train)
    if not tensors:
        raise DataError("cannot fit normalisation on an empty training set")
    F = tensors[0].F
    if any(t.F != F for t in tensors):
        raise DataError("all training tensors must have the same number of sensors")
    pooled = np.concatenate([t.data[:, t.active()] for t in tensors], axis=1)
    if pooled.shape[1] == 0:
        raise DataError("training tensors have no active cells")
    mu = pooled.mean(axis=1)
    sigma = np.sqrt(((pooled - mu[:, None]) ** 2).mean(axis=1))
    constant = np.flatnonzero(sigma == 0)
    if constant.size:
        raise DataError(f"constant channel: sensor {int(constant[0]) + 1} has zero variance; drop it")
    return NormStats(mu, sigma)


def apply_norm(tensor: EntityTensor, stats: NormStats) -> EntityTensor:
    if tensor.F != stats.mu.shape[0]:
        raise DataError(f"tensor has F={tensor.F} sensors, stats cover {stats.mu.shape[0]}")
    return tensor.with_data((tensor.data - stats.mu[:, None, None]) / stats.sigma[:, None, None])


def denormalize(tensor: EntityTensor, stats: NormStats) -> EntityTensor:
    if tensor.F != stats.mu.shape[0]:
        raise DataError(f"tensor has F={tensor.F} sensors, stats cover {stats.mu.shape[0]}")
    return tensor.with_data(tensor.data * stats.sigma[:, None, None] + stats.mu[:, None, None])


def make_window(tensor: EntityTensor, t: int, p: int, w: int) -> Window:
    """Window of the ``w`` ticks ending at ``t`` for entity ``p`` (both 1-based).

    Columns before tick 1 are filled with copies of the first observation.
    """
    if w < 1:
        raise DataError(f"window length must be >= 1, got {w}")
    if not 1 <= t <= tensor.T:
        raise IndexError(f"time index {t} outside [1, {tensor.T}]")
    if not 1 <= p <= tensor.P:
        raise IndexError(f"entity {p} outside [1, {tensor.P}]")
    cols = np.clip(np.arange(t - w, t), 0, None)
    return Window(tensor.data[:, cols, p - 1].copy(), t)


def padded_series(tensor: EntityTensor, w: int) -> np.ndarray:
    """``(P, T + w - 1, F)`` array with ``w - 1`` leading replicas of tick 1."""
    series = np.transpose(tensor.data, (2, 1, 0))
    pad = np.repeat(series[:, :1, :], w - 1, axis=1)
    return np.concatenate([pad, series], axis=1)


def flatten_windows(block: np.ndarray) -> np.ndarray:
    """``(n, w, F)`` time-major windows -> ``(n, F*w)`` sensor-major flat vectors."""
    n, w, F = block.shape
    return np.ascontiguousarray(np.transpose(block, (0, 2, 1))).reshape(n, F * w)


class WindowSet:
    """All windows of a list of (already normalised) tensors, materialised lazily.

    Windows are addressed by position ``0..len-1`` and gathered on demand with
    :meth:`take`, so a training set of millions of windows costs only the
    padded series plus one index per window.
    """

    def __init__(self, tensors: TensorOrList, w: int):
        tensors = _as_list(tensors)
        if w < 1:
            raise DataError(f"window length must be >= 1, got {w}")
        if not tensors:
            raise DataError("no tensors given")
        self.w = w
        self.F = tensors[0].F
        chunks, starts, offset = [], [], 0
        for tensor in tensors:
            if tensor.F != self.F:
                raise DataError("all tensors must have the same number of sensors")
            padded = padded_series(tensor, w)  # (P, T+w-1, F)
            P, L, _ = padded.shape
            active = tensor.active()  # (T, P)
            for p in range(P):
                ts = np.flatnonzero(active[:, p])
                starts.append(offset + ts)
                chunks.append(padded[p])
                offset += L
        self._series = np.concatenate(chunks, axis=0)
        self._starts = np.concatenate(starts).astype(np.int64)

    def __len__(self) -> int:
        return self._starts.shape[0]

    def take(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        rows = self._starts[idx][:, None] + np.arange(self.w)
        return flatten_windows(self._series[rows])

    def all(self) -> np.ndarray:
        return self.take(np.arange(len(self)))
