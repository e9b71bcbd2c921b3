"""Detection metrics (CD, MD, FA, delay CDF), AUROC, best F1 and the window sweep."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .core import DataError, DetectionOutcome

TP, FN, FP, TN = "TP", "FN", "FP", "TN"
DEFAULT_ALPHAS = (0.5, 0.9, 0.95)


@dataclass(frozen=True)
class RunRecord:
    dataset_id: str
    has_true_change: bool
    true_change: Optional[int]
    stop_index: Optional[int]
    dt: float
    T: Optional[int] = None

    def __post_init__(self):
        if self.has_true_change and self.true_change is None:
            raise DataError(f"run {self.dataset_id}: change-present run needs a true change index")
        if not self.has_true_change and self.true_change is not None:
            raise DataError(f"run {self.dataset_id}: change-absent run carries a change index")
        if self.stop_index is not None:
            if self.stop_index < 1 or (self.T is not None and self.stop_index > self.T):
                raise DataError(f"run {self.dataset_id}: stop index {self.stop_index} outside [1, T]")
        if not self.dt > 0:
            raise DataError(f"run {self.dataset_id}: dt must be positive")

    @classmethod
    def from_outcome(cls, dataset_id: str, outcome: DetectionOutcome, true_change: Optional[int],
                     dt: float) -> "RunRecord":
        return cls(dataset_id, true_change is not None, true_change, outcome.stop_index, dt,
                   len(outcome.cusum))

    def to_dict(self) -> dict:
        return asdict(self)


def classify(run: RunRecord) -> str:
    if run.has_true_change:
        if run.stop_index is None:
            return FN
        return TP if run.stop_index >= run.true_change else FP
    return TN if run.stop_index is None else FP


def delay_cdf(delays: Sequence[float], dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Empirical delay CDF on the grid ``d_min, d_min + dt, ..., d_max``.

    Grid points are built from integer tick counts so that float drift never
    drops the last point; the final value is exactly 1.
    """
    d = np.sort(np.asarray(delays, dtype=np.float64))
    if d.size == 0:
        return np.empty(0), np.empty(0)
    k = np.rint(d / dt).astype(np.int64)
    k_min, k_max = int(k[0]), int(k[-1])
    grid_k = np.arange(k_min, k_max + 1)
    F = np.searchsorted(k, grid_k, side="right") / k.size
    return grid_k * dt, F


def delay_quantile(grid: np.ndarray, cdf: np.ndarray, alpha: float) -> Optional[float]:
    """Smallest grid point whose CDF reaches ``alpha``."""
    if grid.size == 0:
        return None
    idx = int(np.argmax(cdf >= alpha - 1e-12))
    return float(grid[idx])


@dataclass
class MetricsReport:
    CD: float
    MD: float
    FA: float
    n_change: int
    n_normal: int
    counts: dict
    delays_seconds: list
    delay_mean: Optional[float]
    delay_median: Optional[float]
    delay_cdf: list
    d_alpha: dict
    per_run: list = field(default_factory=list)

    @property
    def best_delay(self) -> Optional[float]:
        vals = [v for v in (self.delay_mean, self.delay_median, self.d_alpha.get("0.9")) if v is not None]
        return min(vals) if vals else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["best_delay"] = self.best_delay
        return d


def metrics(runs: Sequence[RunRecord], alphas: Sequence[float] = DEFAULT_ALPHAS) -> MetricsReport:
    """Rates CD = TP/N_a, MD = FN/N_a, FA = FP/(N_a + N_n) and delay statistics over TP runs."""
    runs = sorted(runs, key=lambda r: r.dataset_id)
    if not runs:
        raise DataError("no runs to evaluate")
    n_a = sum(r.has_true_change for r in runs)
    n_n = len(runs) - n_a
    if n_a == 0:
        raise DataError("no change-present runs: CD and MD are undefined")
    dts = {r.dt for r in runs}
    if len(dts) != 1:
        raise DataError(f"runs mix sampling intervals {sorted(dts)}")
    dt = dts.pop()
    labels = [classify(r) for r in runs]
    counts = {c: labels.count(c) for c in (TP, FN, FP, TN)}
    delays = [(r.stop_index - r.true_change) * dt for r, c in zip(runs, labels)
              if c == TP and r.has_true_change]
    grid, cdf = delay_cdf(delays, dt)
    d_alpha = {repr(float(a)): delay_quantile(grid, cdf, a) for a in alphas}
    d_alpha.setdefault("0.9", delay_quantile(grid, cdf, 0.9))
    return MetricsReport(
        CD=counts[TP] / n_a,
        MD=counts[FN] / n_a,
        FA=counts[FP] / (n_a + n_n),
        n_change=n_a,
        n_normal=n_n,
        counts=counts,
        delays_seconds=[float(x) for x in delays],
        delay_mean=float(np.mean(delays)) if delays else None,
        delay_median=float(np.median(delays)) if delays else None,
        delay_cdf=[[float(r), float(f)] for r, f in zip(grid, cdf)],
        d_alpha=d_alpha,
        per_run=[{"dataset_id": r.dataset_id, "class": c, "stop_index": r.stop_index,
                  "true_change": r.true_change} for r, c in zip(runs, labels)],
    )


def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise DataError("scores and labels differ in length")
    if not np.all(np.isin(y, (0, 1))):
        raise DataError("labels must be 0 or 1")
    y = y.astype(bool)
    if y.all() or not y.any():
        raise DataError("both classes must be present")
    if not np.all(np.isfinite(s)):
        raise DataError("scores must be finite")
    return s, y


def auroc(scores, labels) -> float:
    """Area under the ROC curve from midranks (the Mann-Whitney statistic)."""
    s, y = _check_binary(scores, labels)
    ranks = rankdata(s)  # midranks, exact halves
    n1 = int(y.sum())
    n0 = y.size - n1
    r1 = float(np.sum(ranks[y]))
    return (r1 - n1 * (n1 + 1) / 2.0) / (n1 * n0)


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(false-positive rate, true-positive rate, threshold) for ``score >= threshold``."""
    s, y = _check_binary(scores, labels)
    thr = np.unique(s)[::-1]
    pos = np.sort(s[y])
    neg = np.sort(s[~y])
    tpr = (pos.size - np.searchsorted(pos, thr, side="left")) / pos.size
    fpr = (neg.size - np.searchsorted(neg, thr, side="left")) / neg.size
    return np.concatenate([[0.0], fpr]), np.concatenate([[0.0], tpr]), np.concatenate([[np.inf], thr])


def best_f1(scores, labels) -> tuple[float, float]:
    """Maximum F1 over thresholds ``score >= thr`` at every distinct score.

    F1 is computed as ``2TP / (2TP + FP + FN)``; among ties the largest
    threshold is returned.
    """
    s, y = _check_binary(scores, labels)
    thr = np.unique(s)
    pos = np.sort(s[y])
    neg = np.sort(s[~y])
    tp = pos.size - np.searchsorted(pos, thr, side="left")
    fp = neg.size - np.searchsorted(neg, thr, side="left")
    fn = pos.size - tp
    f1 = 2.0 * tp / (2.0 * tp + fp + fn)
    best = float(np.max(f1))
    idx = int(np.flatnonzero(f1 == best)[-1])
    return best, float(thr[idx])


def labeled_scores(values: np.ndarray, true_change: Optional[int]) -> tuple[np.ndarray, np.ndarray]:
    """Label ticks before the change 0 and from the change onward 1."""
    values = np.asarray(values, dtype=np.float64)
    labels = np.zeros(values.size, dtype=np.int64)
    if true_change is not None:
        labels[true_change - 1:] = 1
    return values, labels


def emit_cdf_csv(path, report: MetricsReport) -> Path:
    path = Path(path)
    lines = ["r_j,F_D"] + [f"{float(r)!r},{float(f)!r}" for r, f in report.delay_cdf]
    path.write_text("\n".join(lines) + "\n")
    return path


def emit_roc_csv(path, scores, labels) -> Path:
    fpr, tpr, thr = roc_curve(scores, labels)
    path = Path(path)
    lines = ["threshold,fpr,tpr"] + [f"{float(t)!r},{float(f)!r},{float(p)!r}" for t, f, p in zip(thr, fpr, tpr)]
    path.write_text("\n".join(lines) + "\n")
    return path


@dataclass
class SweepRow:
    w: int
    statistic: str
    delays: list
    mean_delay: Optional[float]
    std_delay: Optional[float]
    n_detected: int
    n_runs: int


def window_sweep(evaluate: Callable[[int, int], dict], w_values: Iterable[int] = (5, 10, 20, 30, 40, 50,
                 60, 70, 80, 90, 100), repeats: int = 5) -> list[SweepRow]:
    """Tabulate delay mean and std per window and statistic.

    ``evaluate(w, seed)`` must return ``{statistic: [delay seconds of each
    correctly detected run]}`` for one seeded replica.
    """
    rows = []
    for w in w_values:
        per_stat: dict[str, list] = {}
        n_runs: dict[str, int] = {}
        for seed in range(repeats):
            for stat, delays in evaluate(w, seed).items():
                per_stat.setdefault(stat, []).append(delays)
                n_runs[stat] = n_runs.get(stat, 0) + 1
        for stat, groups in sorted(per_stat.items()):
            means = [float(np.mean(g)) for g in groups if len(g)]
            rows.append(SweepRow(
                w=int(w), statistic=stat, delays=means,
                mean_delay=float(np.mean(means)) if means else None,
                std_delay=float(np.std(means)) if means else None,
                n_detected=len(means), n_runs=n_runs[stat],
            ))
    return rows


def write_json(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n")
    return path


def clean_for_json(x):
    """Replace non-finite floats with None so documents stay strict JSON."""
    if isinstance(x, float):
        return x if math.isfinite(x) else None
    if isinstance(x, dict):
        return {k: clean_for_json(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [clean_for_json(v) for v in x]
    return x
