"""Per-entity reconstruction scores (IDfN) from the last column of each window."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .autoencoder import DenseAutoencoder, forward
from .core import DataError, EntityTensor, IdfnSeries
from .preprocess import NormStats, apply_norm, flatten_windows, make_window, padded_series


def _last_column_error(model: DenseAutoencoder, flat: np.ndarray, F: int, w: int) -> np.ndarray:
    """Mean over sensors of the squared error in the window's final column."""
    recon = forward(model, flat)
    last_in = flat.reshape(-1, F, w)[:, :, -1]
    last_out = recon.reshape(-1, F, w)[:, :, -1]
    return np.mean((last_out - last_in) ** 2, axis=1)


def _check(model: DenseAutoencoder, F: int, w: int) -> None:
    if model.input_dim != F * w:
        raise DataError(f"model expects {model.input_dim} inputs but F*w = {F}*{w} = {F * w}")


def idfn_at(model: DenseAutoencoder, tensor: EntityTensor, stats: Optional[NormStats], t: int, p: int,
            w: int) -> float:
    """IDfN of entity ``p`` at tick ``t``; ``tensor`` is raw unless ``stats`` is None."""
    _check(model, tensor.F, w)
    window = make_window(tensor, t, p, w).values
    if stats is not None:
        window = (window - stats.mu[:, None]) / stats.sigma[:, None]
    return float(_last_column_error(model, window.reshape(1, -1), tensor.F, w)[0])


def idfn_series(model: DenseAutoencoder, tensor: EntityTensor, stats: Optional[NormStats], w: int,
                chunk: int = 8192) -> IdfnSeries:
    """IDfN for every (tick, entity), evaluated in large batches."""
    _check(model, tensor.F, w)
    if stats is not None:
        tensor = apply_norm(tensor, stats)
    F, T, P = tensor.data.shape
    padded = padded_series(tensor, w)  # (P, T+w-1, F)
    # windows ordered tick-major so that row t*P + p is (t, p)
    views = np.lib.stride_tricks.sliding_window_view(padded, w, axis=1)  # (P, T, F, w)
    flat = np.ascontiguousarray(np.transpose(views, (1, 0, 2, 3))).reshape(T * P, F * w)
    out = np.empty(T * P)
    for start in range(0, T * P, chunk):
        out[start:start + chunk] = _last_column_error(model, flat[start:start + chunk], F, w)
    return IdfnSeries(out.reshape(T, P), tensor.dt, tensor.mask)


class StreamingScorer:
    """Scores one ``(F, P)`` tick at a time, keeping the last ``w`` normalised columns.

    The first tick is replicated to fill the window, matching the batch
    replication padding.
    """

    def __init__(self, model: DenseAutoencoder, stats: Optional[NormStats], w: int, n_features: int):
        _check(model, n_features, w)
        self.model, self.stats, self.w, self.F = model, stats, w, n_features
        self._buffer: Optional[np.ndarray] = None  # (P, w, F)
        self.t = 0

    def push(self, tick: np.ndarray) -> np.ndarray:
        tick = np.asarray(tick, dtype=np.float64)
        if tick.ndim != 2 or tick.shape[0] != self.F:
            raise DataError(f"tick must have shape (F={self.F}, P), got {tick.shape}")
        if self.stats is not None:
            tick = (tick - self.stats.mu[:, None]) / self.stats.sigma[:, None]
        column = tick.T  # (P, F)
        if self._buffer is None:
            self._buffer = np.repeat(column[:, None, :], self.w, axis=1)
        else:
            if column.shape[0] != self._buffer.shape[0]:
                raise DataError("entity count changed mid-stream; use a mask instead")
            self._buffer = np.concatenate([self._buffer[:, 1:, :], column[:, None, :]], axis=1)
        self.t += 1
        return _last_column_error(self.model, flatten_windows(self._buffer), self.F, self.w)
