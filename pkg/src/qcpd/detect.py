"""Deviation scores, CUSUM accumulation and the KDE-based adaptive stopping rule.

Per tick: the IDfN row is reduced to a non-negative deviation ``f(t)`` from the
training reference, accumulated as ``C_t = C_{t-1} + f(t)``, log-transformed
to ``log(1 + C_t)`` and scored under a Gaussian KDE of all earlier
log-CUSUM values. A change is declared the first time that density falls
below ``delta_thr``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .aggregate import (
    SQRT_2PI,
    Kde1d,
    compress_centers,
    row_mean,
    row_variance,
    select_bandwidth,
    silverman_bandwidth,
    wasserstein1,
)
from .autoencoder import DenseAutoencoder
from .core import (
    DataError,
    DetectionOutcome,
    EntityTensor,
    IdfnSeries,
    QcpdError,
    ScalarSeries,
    substream,
    warmup_ticks,
)
from .preprocess import NormStats
from .score import StreamingScorer

STATISTICS = ("mean", "variance", "wasserstein")
_ALIASES = {"mean": "mean", "mu": "mean", "var": "variance", "variance": "variance",
            "wass": "wasserstein", "wasserstein": "wasserstein", "wd": "wasserstein"}
PROFILE_FORMAT = "qcpd-profile"
PROFILE_VERSION = 1


def canonical_statistic(name: str) -> str:
    try:
        return _ALIASES[name.lower()]
    except KeyError:
        raise DataError(f"unknown statistic {name!r}; choose from mean, var, wass") from None


@dataclass(frozen=True)
class DetectorProfile:
    """Training references and the calibrated density threshold for one statistic."""

    statistic: str
    mu_train: float
    sigma2_train: float
    train_kde: Kde1d
    delta_thr: float
    dt: float
    warmup_seconds: float = 2.0
    alpha: float = 0.05
    calibration_rule: str = "run_min"
    n_grid: int = 512
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "statistic", canonical_statistic(self.statistic))
        if self.sigma2_train < 0:
            raise DataError("sigma2_train must be non-negative")
        if not self.delta_thr > 0:
            raise DataError(f"delta_thr must be positive, got {self.delta_thr}")
        if not self.warmup_seconds > 0:
            raise DataError("warmup_seconds must be positive")
        if self.warmup_samples < 2:
            raise DataError(
                f"warmup of {self.warmup_seconds} s at dt={self.dt} gives {self.warmup_samples} tick(s); "
                "the threshold KDE needs at least 2"
            )

    @property
    def bandwidth(self) -> float:
        return self.train_kde.bandwidth

    @property
    def warmup_samples(self) -> int:
        return warmup_ticks(self.warmup_seconds, self.dt)

    def to_dict(self) -> dict:
        return {
            "format": PROFILE_FORMAT,
            "version": PROFILE_VERSION,
            "statistic": self.statistic,
            "mu_train": self.mu_train,
            "sigma2_train": self.sigma2_train,
            "bandwidth": self.bandwidth,
            "train_kde_centers": self.train_kde.centers.tolist(),
            "delta_thr": self.delta_thr,
            "dt": self.dt,
            "warmup_seconds": self.warmup_seconds,
            "alpha": self.alpha,
            "calibration_rule": self.calibration_rule,
            "n_grid": self.n_grid,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorProfile":
        if d.get("format") != PROFILE_FORMAT:
            raise DataError("not a detector profile document")
        if d.get("version") != PROFILE_VERSION:
            raise DataError(f"unsupported profile version {d.get('version')}")
        try:
            return cls(
                statistic=d["statistic"],
                mu_train=float(d["mu_train"]),
                sigma2_train=float(d["sigma2_train"]),
                train_kde=Kde1d(np.array(d["train_kde_centers"], dtype=float), float(d["bandwidth"])),
                delta_thr=float(d["delta_thr"]),
                dt=float(d["dt"]),
                warmup_seconds=float(d["warmup_seconds"]),
                alpha=float(d["alpha"]),
                calibration_rule=d.get("calibration_rule", "run_min"),
                n_grid=int(d.get("n_grid", 512)),
                meta=d.get("meta", {}),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"corrupt profile: {exc}") from exc


def save_profile(path, profile: DetectorProfile) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(profile.to_dict(), indent=1) + "\n")
    return path


def load_profile(path) -> DetectorProfile:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read profile {path}: {exc}") from exc
    return DetectorProfile.from_dict(doc)


def deviation(statistic: str, idfn_row, profile: DetectorProfile) -> float:
    """Non-negative distance of one tick's IDfN values from the training reference."""
    row = np.asarray(idfn_row, dtype=np.float64).reshape(-1)
    if row.size == 0:
        raise DataError("no active entities at this tick")
    statistic = canonical_statistic(statistic)
    if statistic == "mean":
        return abs(row_mean(row) - profile.mu_train)
    if statistic == "variance":
        return abs(row_variance(row) - profile.sigma2_train)
    current = Kde1d(row, profile.bandwidth)
    return wasserstein1(current, profile.train_kde, profile.n_grid)


class DetectorInvariantError(QcpdError, RuntimeError):
    pass


@dataclass
class DetectorState:
    """Mutable state of one detector; the step functions update it in place."""

    t: int = 0
    cusum: float = 0.0
    log_cusum: float = 0.0
    history: list = field(default_factory=list)
    fired: Optional[int] = None
    last_density: float = float("nan")


def cusum_step(state: DetectorState, f_t: float) -> DetectorState:
    f_t = float(f_t)
    if not math.isfinite(f_t) or f_t < 0:
        raise DataError(f"deviation must be finite and non-negative, got {f_t}")
    state.t += 1
    state.cusum = state.cusum + f_t
    return state


def history_density(history: np.ndarray, x: float) -> float:
    """Density at ``x`` of a Gaussian KDE over ``history`` with Silverman's bandwidth."""
    h = silverman_bandwidth(history)
    u = (x - history) / h
    return float(np.sum(np.exp(-0.5 * u * u)) / (history.size * h * SQRT_2PI))


def threshold_step(state: DetectorState, profile: DetectorProfile,
                   delta_thr: Optional[float] = None) -> tuple[DetectorState, bool]:
    """Score the current log-CUSUM against the history; return ``(state, fired_now)``.

    After the detector has fired the call is a no-op.
    """
    if state.fired is not None:
        state.last_density = float("nan")
        return state, False
    delta_thr = profile.delta_thr if delta_thr is None else delta_thr
    state.log_cusum = math.log1p(state.cusum)
    fired = False
    if state.t <= profile.warmup_samples:
        state.last_density = float("nan")
    else:
        if len(state.history) < 2:
            raise DetectorInvariantError("threshold KDE history has fewer than 2 points after warmup")
        density = history_density(np.array(state.history), state.log_cusum)
        state.last_density = density
        if density < delta_thr:
            state.fired = state.t
            fired = True
    state.history.append(state.log_cusum)
    return state, fired


class OnlineDetector:
    """Consumes IDfN rows one tick at a time and records the traces."""

    def __init__(self, profile: DetectorProfile, delta_thr: Optional[float] = None):
        self.profile = profile
        self.delta_thr = profile.delta_thr if delta_thr is None else delta_thr
        self.state = DetectorState()
        self.deviations: list[float] = []
        self.cusums: list[float] = []
        self.densities: list[float] = []

    def update(self, idfn_row, active=None) -> bool:
        row = np.asarray(idfn_row, dtype=np.float64)
        if active is not None:
            row = row[np.asarray(active, dtype=bool)]
        f_t = deviation(self.profile.statistic, row, self.profile)
        cusum_step(self.state, f_t)
        _, fired = threshold_step(self.state, self.profile, self.delta_thr)
        self.deviations.append(f_t)
        self.cusums.append(self.state.cusum)
        self.densities.append(self.state.last_density)
        return fired

    def outcome(self, **meta) -> DetectionOutcome:
        dt = self.profile.dt
        return DetectionOutcome(
            stop_index=self.state.fired,
            cusum=ScalarSeries(self.cusums, dt, "cusum"),
            density_at_current=ScalarSeries(self.densities, dt, "density"),
            threshold=self.delta_thr,
            warmup_samples=self.profile.warmup_samples,
            deviation=ScalarSeries(self.deviations, dt, f"deviation_{self.profile.statistic}"),
            meta={"statistic": self.profile.statistic, **meta},
        )


def detect_series(idfn: IdfnSeries, profile: DetectorProfile, delta_thr: Optional[float] = None,
                  **meta) -> DetectionOutcome:
    """Feed a precomputed IDfN series through the online detector tick by tick."""
    det = OnlineDetector(profile, delta_thr)
    for t in range(idfn.T):
        active = None if idfn.mask is None else idfn.mask[t]
        det.update(idfn.scores[t], active)
    return det.outcome(**meta)


def deviation_series(idfn: IdfnSeries, profile: DetectorProfile) -> np.ndarray:
    """Deviation for every tick, vectorised where the statistic allows it."""
    stat = profile.statistic
    if idfn.mask is None and stat in ("mean", "variance"):
        s = idfn.scores
        m = np.sum(s, axis=1) / s.shape[1]
        if stat == "mean":
            return np.abs(m - profile.mu_train)
        var = np.sum((s - m[:, None]) ** 2, axis=1) / s.shape[1]
        return np.abs(var - profile.sigma2_train)
    return np.array([deviation(stat, idfn.row(t), profile) for t in range(1, idfn.T + 1)])


def detect_batch(idfn: IdfnSeries, profile: DetectorProfile, delta_thr: Optional[float] = None,
                 **meta) -> DetectionOutcome:
    """Whole-series evaluation of the same stopping rule (no per-tick state object)."""
    delta_thr = profile.delta_thr if delta_thr is None else delta_thr
    f = deviation_series(idfn, profile)
    C = np.cumsum(f)
    C_log = np.array([math.log1p(c) for c in C])
    warm = profile.warmup_samples
    density = np.full(C.shape, np.nan)
    stop = None
    for t in range(warm + 1, C.size + 1):
        density[t - 1] = history_density(C_log[:t - 1], C_log[t - 1])
        if density[t - 1] < delta_thr:
            stop = t
            break
    dt = profile.dt
    return DetectionOutcome(
        stop_index=stop,
        cusum=ScalarSeries(C, dt, "cusum"),
        density_at_current=ScalarSeries(density, dt, "density"),
        threshold=delta_thr,
        warmup_samples=warm,
        deviation=ScalarSeries(f, dt, f"deviation_{profile.statistic}"),
        meta={"statistic": profile.statistic, **meta},
    )


def run_online(model: DenseAutoencoder, stats: Optional[NormStats], profile: DetectorProfile,
               stream: Union[EntityTensor, Iterable[np.ndarray]], w: int, **meta) -> DetectionOutcome:
    """Score raw ``(F, P)`` ticks as they arrive and run the detector on them."""
    masks = None
    if isinstance(stream, EntityTensor):
        masks = stream.mask
        ticks = (stream.data[:, t, :] for t in range(stream.T))
        n_features = stream.F
    else:
        ticks = iter(stream)
        n_features = None
    det = OnlineDetector(profile)
    scorer = None
    for i, tick in enumerate(ticks):
        tick = np.asarray(tick, dtype=np.float64)
        if scorer is None:
            scorer = StreamingScorer(model, stats, w, n_features or tick.shape[0])
        row = scorer.push(tick)
        det.update(row, None if masks is None else masks[i])
    return det.outcome(**meta)


def _as_series_list(idfn) -> list[IdfnSeries]:
    return [idfn] if isinstance(idfn, IdfnSeries) else list(idfn)


def calibration_densities(calibration: Sequence[IdfnSeries], profile: DetectorProfile) -> list[np.ndarray]:
    """Post-warmup densities of each normal calibration series (detector never fires)."""
    out = []
    for series in calibration:
        outcome = detect_series(series, profile, delta_thr=0.0)
        d = outcome.density_at_current.values
        out.append(d[~np.isnan(d)])
    return out


def threshold_from_densities(per_run: Sequence[np.ndarray], alpha: float, rule: str = "run_min") -> float:
    """alpha-quantile of calibration densities.

    ``run_min`` takes the quantile over each run's smallest density, so a
    normal run stays silent with probability about ``1 - alpha``; ``tick``
    pools every tick.
    """
    per_run = [d for d in per_run if d.size]
    if not per_run:
        raise DataError("calibration produced no post-warmup densities (series shorter than warmup?)")
    if rule == "run_min":
        values = np.array([d.min() for d in per_run])
    elif rule == "tick":
        values = np.concatenate(per_run)
    else:
        raise DataError(f"unknown calibration rule {rule!r}")
    q = float(np.quantile(values, alpha))
    return max(q, np.finfo(float).tiny)


def build_profile(train_idfn, statistic: str, alpha: float = 0.05, dt: Optional[float] = None,
                  calibration=None, warmup_seconds: float = 2.0, calibration_rule: str = "run_min",
                  max_centers: int = 512, bandwidth_samples: int = 2000, grid=None, folds: int = 5,
                  seed: int = 0, n_grid: int = 512) -> DetectorProfile:
    """Fit references on normal IDfN and calibrate ``delta_thr`` on held-out normal series.

    Without ``calibration`` the last 10% of ``train_idfn`` series are
    replayed (the whole series when only one is given).
    """
    if not 0 <= alpha <= 1:
        raise DataError(f"alpha must lie in [0, 1], got {alpha}")
    train = _as_series_list(train_idfn)
    if not train:
        raise DataError("no training IDfN given")
    values = np.concatenate([s.active_values() for s in train])
    if values.size == 0:
        raise DataError("training IDfN is empty")
    if np.all(values == values[0]):
        raise DataError("degenerate training scores: every IDfN value is identical")
    dt = train[0].dt if dt is None else dt
    mu = float(np.sum(values) / values.size)
    sigma2 = float(np.sum((values - mu) ** 2) / values.size)

    bw_sample = values
    if values.size > bandwidth_samples:
        bw_sample = substream(seed, 7).choice(values, bandwidth_samples, replace=False)
    h = select_bandwidth(bw_sample, grid, folds, seed)
    kde = Kde1d(compress_centers(values, max_centers), h)

    if calibration is None:
        n_cal = max(1, int(math.ceil(0.1 * len(train)))) if len(train) > 1 else 1
        calibration = train[-n_cal:]
    calibration = _as_series_list(calibration)

    provisional = DetectorProfile(canonical_statistic(statistic), mu, sigma2, kde, 1.0, dt,
                                  warmup_seconds, alpha, calibration_rule, n_grid)
    per_run = calibration_densities(calibration, provisional)
    delta = threshold_from_densities(per_run, alpha, calibration_rule)
    return replace(provisional, delta_thr=delta,
                   meta={"n_train_values": int(values.size), "n_calibration_runs": len(calibration)})
