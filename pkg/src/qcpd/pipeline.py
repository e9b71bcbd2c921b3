"""End-to-end experiment driver: generate, train, profile, detect, evaluate."""
from __future__ import annotations

import dataclasses
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .autoencoder import DenseAutoencoder, ModelBundle, TrainConfig, train
from .core import DataError, EntityTensor, IdfnSeries
from .detect import DetectorProfile, build_profile, canonical_statistic, detect_batch
from .evaluation import (
    RunRecord,
    auroc,
    best_f1,
    clean_for_json,
    labeled_scores,
    metrics,
    window_sweep,
)
from .preprocess import WindowSet, apply_norm, fit_norm
from .score import idfn_series
from .synth import GENERATORS, config_from_dict, generate

log = logging.getLogger(__name__)


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("QCPD_JOBS", "1")))
    except ValueError:
        raise DataError("QCPD_JOBS must be an integer") from None


def parallel_map(fn: Callable, items: Sequence, jobs: int = 1) -> list:
    """Ordered map; results never depend on ``jobs``."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


@dataclass
class ExperimentConfig:
    dataset: str
    params: dict = field(default_factory=dict)
    n_train: int = 1200
    train_seed: int = 1001
    n_abnormal: int = 100
    abnormal_seed: int = 1
    n_normal: int = 100
    normal_seed: int = 101
    window: int = 50
    hidden: tuple = (128, 32)
    train: dict = field(default_factory=dict)
    statistics: tuple = ("mean", "variance", "wasserstein")
    alpha: float = 0.05
    warmup_seconds: float = 2.0
    calibration_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.dataset not in GENERATORS:
            raise DataError(f"unknown dataset {self.dataset!r}; choose from {sorted(GENERATORS)}")
        if self.n_train < 2:
            raise DataError("n_train must be at least 2 (one sequence is held out for calibration)")
        if self.n_abnormal < 1:
            raise DataError("n_abnormal must be at least 1")
        if self.n_normal < 0:
            raise DataError("n_normal must be non-negative")
        if not 0 < self.calibration_fraction < 1:
            raise DataError("calibration_fraction must lie in (0, 1)")
        self.hidden = tuple(int(h) for h in self.hidden)
        self.statistics = tuple(canonical_statistic(s) for s in self.statistics)
        self.train_config()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise DataError(f"unknown experiment keys: {sorted(unknown)}")
        if "dataset" not in d:
            raise DataError("experiment config needs a 'dataset'")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        d["statistics"] = list(self.statistics)
        return d

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(**{"seed": self.seed, **self.train})
        except TypeError as exc:
            raise DataError(f"bad train settings: {exc}") from exc

    def generator_config(self, seed: int, normal: bool):
        cfg = config_from_dict(self.dataset, {**self.params, "seed": seed})
        return cfg.normal() if normal else cfg


def _generate_job(args) -> EntityTensor:
    exp, seed, normal = args
    return generate(exp.dataset, exp.generator_config(seed, normal))


@dataclass
class Datasets:
    train: list
    calibration: list
    abnormal: list
    normal: list


def split_calibration(sequences: Sequence[EntityTensor], fraction: float = 0.1
                      ) -> tuple[list[EntityTensor], list[EntityTensor]]:
    """Hold out the last ``ceil(fraction * n)`` sequences for threshold calibration.

    A single sequence is cut along time instead.
    """
    sequences = list(sequences)
    if len(sequences) >= 2:
        n_cal = min(max(1, math.ceil(fraction * len(sequences))), len(sequences) - 1)
        return sequences[:-n_cal], sequences[-n_cal:]
    if len(sequences) == 1:
        x = sequences[0]
        cut = x.T - max(1, math.ceil(fraction * x.T))
        if cut < 2:
            raise DataError("training sequence too short to hold out a calibration segment")
        mask = None if x.mask is None else x.mask
        head = EntityTensor(x.data[:, :cut], x.dt, None, None if mask is None else mask[:cut])
        tail = EntityTensor(x.data[:, cut:], x.dt, None, None if mask is None else mask[cut:])
        return [head], [tail]
    raise DataError("no training sequences")


def make_datasets(exp: ExperimentConfig, jobs: int = 1) -> Datasets:
    jobs_list = ([(exp, exp.train_seed + i, True) for i in range(exp.n_train)]
                 + [(exp, exp.abnormal_seed + i, False) for i in range(exp.n_abnormal)]
                 + [(exp, exp.normal_seed + i, True) for i in range(exp.n_normal)])
    tensors = parallel_map(_generate_job, jobs_list, jobs)
    normal_train = tensors[:exp.n_train]
    tr, cal = split_calibration(normal_train, exp.calibration_fraction)
    return Datasets(tr, cal, tensors[exp.n_train:exp.n_train + exp.n_abnormal],
                    tensors[exp.n_train + exp.n_abnormal:])


def fit_model(train_tensors: Sequence[EntityTensor], window: int, hidden=(128, 32),
              cfg: TrainConfig = TrainConfig()) -> tuple[ModelBundle, dict]:
    stats = fit_norm(train_tensors)
    windows = WindowSet([apply_norm(x, stats) for x in train_tensors], window)
    model = DenseAutoencoder.create(train_tensors[0].F * window, hidden, cfg.dropout, cfg.seed)
    model, report = train(model, windows, cfg)
    return ModelBundle(model, stats, window, {"train": report.to_dict()}), report.to_dict()


def score_all(bundle: ModelBundle, tensors: Sequence[EntityTensor]) -> list[IdfnSeries]:
    return [idfn_series(bundle.model, x, bundle.stats, bundle.window) for x in tensors]


def fit_profiles(train_idfn: Sequence[IdfnSeries], cal_idfn: Sequence[IdfnSeries], statistics,
                 alpha: float = 0.05, warmup_seconds: float = 2.0, seed: int = 0) -> dict:
    return {s: build_profile(train_idfn, s, alpha=alpha, calibration=cal_idfn,
                             warmup_seconds=warmup_seconds, seed=seed)
            for s in statistics}


def evaluate_statistic(profile: DetectorProfile, abnormal: Sequence[IdfnSeries],
                       true_changes: Sequence[int], normal: Sequence[IdfnSeries]) -> dict:
    """Detect on every run and summarise rates, delays, AUROC and best F1."""
    records, pooled_s, pooled_y = [], [], []
    for i, (series, tc) in enumerate(zip(abnormal, true_changes)):
        out = detect_batch(series, profile)
        records.append(RunRecord.from_outcome(f"abnormal_{i:04d}", out, tc, series.dt))
        s, y = labeled_scores(out.deviation.values, tc)
        pooled_s.append(s)
        pooled_y.append(y)
    for i, series in enumerate(normal):
        out = detect_batch(series, profile)
        records.append(RunRecord.from_outcome(f"normal_{i:04d}", out, None, series.dt))
    report = metrics(records).to_dict()
    s = np.concatenate(pooled_s)
    y = np.concatenate(pooled_y)
    report["auroc"] = auroc(s, y)
    f1, thr = best_f1(s, y)
    report["best_f1"] = {"f1": f1, "threshold": thr, "protocol": "max over thresholds score >= thr"}
    report["delta_thr"] = profile.delta_thr
    return report


def run_experiment(exp: ExperimentConfig, jobs: Optional[int] = None) -> dict:
    """gen -> train -> profile -> detect -> eval for every configured statistic."""
    jobs = default_jobs() if jobs is None else jobs
    data = make_datasets(exp, jobs)
    bundle, train_report = fit_model(data.train, exp.window, exp.hidden, exp.train_config())
    train_idfn = score_all(bundle, data.train)
    cal_idfn = score_all(bundle, data.calibration)
    ab_idfn = score_all(bundle, data.abnormal)
    no_idfn = score_all(bundle, data.normal)
    profiles = fit_profiles(train_idfn, cal_idfn, exp.statistics, exp.alpha, exp.warmup_seconds, exp.seed)
    true_changes = [x.change_index for x in data.abnormal]
    results = {s: evaluate_statistic(p, ab_idfn, true_changes, no_idfn) for s, p in profiles.items()}
    return clean_for_json({
        "config": exp.to_dict(),
        "train": train_report,
        "n_train_sequences": len(data.train),
        "n_calibration_sequences": len(data.calibration),
        "statistics": results,
    })


def chen_window_sweep(w_values=(5, 20, 40, 50), repeats: int = 5, n_train: int = 12, n_abnormal: int = 10,
                      statistics=("mean", "wasserstein"), train: Optional[dict] = None,
                      params: Optional[dict] = None, jobs: int = 1) -> list[dict]:
    """Delay per window length on Chen data, one retrained model per (w, seed)."""
    train = {"max_epochs": 5, "lr_init": 1e-3} if train is None else train
    params = params or {}

    base = ExperimentConfig("chen", params=params, n_train=n_train, train_seed=5001,
                            n_abnormal=n_abnormal, abnormal_seed=6001, n_normal=0, normal_seed=7001,
                            statistics=statistics, train=train)
    data = make_datasets(base, jobs)
    true_changes = [x.change_index for x in data.abnormal]

    def evaluate(w: int, seed: int) -> dict:
        exp = dataclasses.replace(base, window=w, seed=seed)
        bundle, _ = fit_model(data.train, w, exp.hidden, exp.train_config())
        tr, cal = score_all(bundle, data.train), score_all(bundle, data.calibration)
        ab = score_all(bundle, data.abnormal)
        out = {}
        for stat, prof in fit_profiles(tr, cal, statistics, seed=seed).items():
            delays = []
            for series, tc in zip(ab, true_changes):
                t_hat = detect_batch(series, prof).stop_index
                if t_hat is not None and t_hat >= tc:
                    delays.append((t_hat - tc) * series.dt)
            out[stat] = delays
        return out

    return [dataclasses.asdict(r) for r in window_sweep(evaluate, w_values, repeats)]
