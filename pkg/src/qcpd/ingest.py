"""Tensor file I/O and position-to-acceleration post-processing.

On-disk layout of one sequence (a directory)::

    tensor.csv   entity,time,<sensor_1>,...,<sensor_F>  rows sorted by (entity, time)
    tensor.json  {"dt", "change_index", "F", "T", "P", "sensors"}
    mask.csv     optional: entity,time,active  (only needed for non-rectangular data)

A dataset is either one such directory or a directory of them.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.signal import savgol_filter

from .core import DataError, EntityTensor, ScalarSeries

TENSOR_CSV = "tensor.csv"
TENSOR_META = "tensor.json"
MASK_CSV = "mask.csv"


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_tensor(tensor: EntityTensor, directory, sensors: Optional[Sequence[str]] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    F, T, P = tensor.data.shape
    sensors = list(sensors) if sensors is not None else [f"s{i + 1}" for i in range(F)]
    if len(sensors) != F:
        raise DataError(f"{len(sensors)} sensor names for F={F}")
    active = tensor.active()
    with open(directory / TENSOR_CSV, "w", newline="") as fh:
        fh.write(",".join(["entity", "time", *sensors]) + "\n")
        for p in range(P):
            for t in range(T):
                if not active[t, p]:
                    continue
                row = [str(p + 1), str(t + 1)] + [_fmt(v) for v in tensor.data[:, t, p]]
                fh.write(",".join(row) + "\n")
    meta = {
        "dt": tensor.dt,
        "change_index": tensor.change_index,
        "F": F,
        "T": T,
        "P": P,
        "sensors": sensors,
    }
    (directory / TENSOR_META).write_text(json.dumps(meta, indent=2) + "\n")
    mask_path = directory / MASK_CSV
    if tensor.mask is not None:
        with open(mask_path, "w", newline="") as fh:
            fh.write("entity,time,active\n")
            for p in range(P):
                for t in range(T):
                    fh.write(f"{p + 1},{t + 1},{int(active[t, p])}\n")
    elif mask_path.exists():
        mask_path.unlink()
    return directory


def _read_meta(directory: Path) -> dict:
    meta_path = directory / TENSOR_META
    if not meta_path.exists():
        raise DataError(f"missing sidecar file {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed sidecar {meta_path}: {exc}") from exc
    for key in ("dt", "F", "T", "P"):
        if key not in meta:
            raise DataError(f"sidecar {meta_path} lacks key {key!r}")
    return meta


def load_tensor(directory) -> EntityTensor:
    """Read a tensor directory written by :func:`save_tensor`."""
    directory = Path(directory)
    meta = _read_meta(directory)
    F, T, P = int(meta["F"]), int(meta["T"]), int(meta["P"])
    csv_path = directory / TENSOR_CSV
    if not csv_path.exists():
        raise DataError(f"missing data file {csv_path}")
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["entity", "time"] or len(header) != F + 2:
            raise DataError(f"malformed header in {csv_path}: expected entity,time + {F} sensors")
        data = np.zeros((F, T, P))
        seen = np.zeros((T, P), dtype=bool)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != F + 2:
                raise DataError(f"{csv_path}:{lineno}: expected {F + 2} fields, got {len(row)}")
            try:
                p, t = int(row[0]), int(row[1])
                values = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise DataError(f"{csv_path}:{lineno}: {exc}") from exc
            if not (1 <= p <= P and 1 <= t <= T):
                raise DataError(f"{csv_path}:{lineno}: (entity={p}, time={t}) out of range")
            if seen[t - 1, p - 1]:
                raise DataError(f"{csv_path}:{lineno}: duplicate row for entity {p}, time {t}")
            if not all(np.isfinite(values)):
                raise DataError(f"{csv_path}:{lineno}: non-finite value")
            data[:, t - 1, p - 1] = values
            seen[t - 1, p - 1] = True

    mask = None
    mask_path = directory / MASK_CSV
    if mask_path.exists():
        mask = np.zeros((T, P), dtype=bool)
        with open(mask_path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            for row in reader:
                p, t, a = int(row[0]), int(row[1]), int(row[2])
                mask[t - 1, p - 1] = bool(a)
        if np.any(mask & ~seen):
            raise DataError(f"{mask_path} marks cells active that have no data row")
    elif not seen.all():
        missing = np.argwhere(~seen)[0]
        raise DataError(
            f"non-rectangular data in {csv_path} (entity {missing[1] + 1} lacks time {missing[0] + 1}) "
            f"and no {MASK_CSV} sidecar"
        )
    return EntityTensor(data, float(meta["dt"]), meta.get("change_index"), mask)


def read_sensor_names(directory) -> list[str]:
    meta = _read_meta(Path(directory))
    return list(meta.get("sensors") or [f"s{i + 1}" for i in range(int(meta["F"]))])


def is_tensor_dir(directory) -> bool:
    return (Path(directory) / TENSOR_META).exists()


def load_dataset(directory) -> list[tuple[str, EntityTensor]]:
    """Load one tensor directory, or every tensor subdirectory (sorted by name)."""
    directory = Path(directory)
    if is_tensor_dir(directory):
        return [(directory.name, load_tensor(directory))]
    if not directory.is_dir():
        raise DataError(f"dataset directory {directory} does not exist")
    subdirs = sorted(d for d in directory.iterdir() if d.is_dir() and is_tensor_dir(d))
    if not subdirs:
        raise DataError(f"no tensor found in {directory} (expected {TENSOR_META} or subdirectories holding one)")
    return [(d.name, load_tensor(d)) for d in subdirs]


def save_dataset(items: Iterable[tuple[str, EntityTensor]], directory) -> Path:
    directory = Path(directory)
    for name, tensor in items:
        save_tensor(tensor, directory / name)
    return directory


# -- trajectory post-processing ---------------------------------------------


def savgol_smooth(series: ScalarSeries, window_len: int = 9, poly_order: int = 2) -> ScalarSeries:
    """Savitzky-Golay smoothing with one-sided polynomial fits at both edges.

    Near the boundaries the polynomial is fitted to the first (last)
    ``window_len`` samples and evaluated at the edge positions, so no padding
    values are invented.
    """
    values = series.values
    if window_len < 1 or window_len % 2 == 0:
        raise DataError(f"window_len must be a positive odd integer, got {window_len}")
    if not 0 <= poly_order < window_len:
        raise DataError(f"poly_order must satisfy 0 <= poly_order < window_len, got {poly_order}")
    if len(values) < window_len:
        raise DataError(f"series of length {len(values)} shorter than window_len {window_len}")
    out = savgol_filter(values, window_len, poly_order, mode="interp")
    return ScalarSeries(out, series.dt, series.kind)


def differentiate2(series: ScalarSeries) -> ScalarSeries:
    """Second derivative by finite differences.

    Interior ticks use the central stencil ``(y[t+1] - 2 y[t] + y[t-1]) / dt**2``;
    the endpoints use the one-sided second-order stencil ``(2, -5, 4, -1)``
    (or the three-point stencil when only three samples exist).
    """
    y = series.values
    T = len(y)
    if T < 3:
        raise DataError(f"need at least 3 samples to differentiate twice, got {T}")
    inv = 1.0 / series.dt**2
    a = np.empty(T)
    a[1:-1] = (y[2:] - 2.0 * y[1:-1] + y[:-2]) * inv
    if T == 3:
        a[0] = a[-1] = a[1]
    else:
        a[0] = (2.0 * y[0] - 5.0 * y[1] + 4.0 * y[2] - y[3]) * inv
        a[-1] = (2.0 * y[-1] - 5.0 * y[-2] + 4.0 * y[-3] - y[-4]) * inv
    return ScalarSeries(a, series.dt, series.kind)


def positions_to_accel(tensor: EntityTensor, sg_window: int = 9, sg_order: int = 2) -> EntityTensor:
    """Smooth each position channel and differentiate it twice."""
    if tensor.F != 3:
        raise DataError(f"expected 3 position channels, got F={tensor.F}")
    out = np.empty_like(tensor.data)
    for p in range(tensor.P):
        for s in range(tensor.F):
            pos = ScalarSeries(tensor.data[s, :, p], tensor.dt, "signal")
            out[s, :, p] = differentiate2(savgol_smooth(pos, sg_window, sg_order)).values
    return tensor.with_data(out)
