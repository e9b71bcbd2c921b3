"""Seeded generators for the synthetic benchmark datasets.

Every entity draws from its own substream ``substream(seed, p - 1)``; see
:func:`qcpd.core.substream`.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp

from .core import DataError, EntityTensor, NumericError, substream

AR_COEFFS = (0.6, -0.5)


@dataclass(frozen=True)
class ArConfig:
    """Two-lag autoregressive process with a noise-parameter switch at ``change_index``.

    ``change_index=None`` produces a normal sequence that uses the "before"
    noise parameters throughout.
    """

    n_entities: int = 10
    length: int = 300
    change_index: Optional[int] = 150
    phi1: float = AR_COEFFS[0]
    phi2: float = AR_COEFFS[1]
    noise_mean_before: float = 0.0
    noise_mean_after: float = 2.0
    noise_std_before: float = 0.5
    noise_std_after: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_entities < 1 or self.length < 3:
            raise DataError("AR config needs n_entities >= 1 and length >= 3")
        if self.change_index is not None and not 2 < self.change_index <= self.length:
            raise DataError(f"change_index must satisfy 2 < t* <= T, got {self.change_index}")
        if self.noise_std_before < 0 or self.noise_std_after < 0:
            raise DataError("noise standard deviations must be non-negative")

    def normal(self) -> "ArConfig":
        return dataclasses.replace(
            self,
            change_index=None,
            noise_mean_after=self.noise_mean_before,
            noise_std_after=self.noise_std_before,
        )


def ar_mean_config(seed: int = 0, **overrides) -> ArConfig:
    """Mean jump 0 -> 2 of the noise at t=150 with sigma 0.5."""
    return ArConfig(seed=seed, **overrides)


def ar_variance_config(seed: int = 0, **overrides) -> ArConfig:
    """Noise std jump 0.1 -> 0.3 at t=150, zero mean throughout."""
    params = dict(
        noise_mean_before=0.0,
        noise_mean_after=0.0,
        noise_std_before=0.1,
        noise_std_after=0.3,
    )
    params.update(overrides)
    return ArConfig(seed=seed, **params)


def generate_ar(cfg: ArConfig) -> EntityTensor:
    T, P = cfg.length, cfg.n_entities
    t_star = cfg.change_index if cfg.change_index is not None else T + 1
    mu = np.where(np.arange(1, T + 1) < t_star, cfg.noise_mean_before, cfg.noise_mean_after)
    sd = np.where(np.arange(1, T + 1) < t_star, cfg.noise_std_before, cfg.noise_std_after)
    data = np.zeros((1, T, P))
    for p in range(P):
        z = substream(cfg.seed, p).standard_normal(T - 2)
        eps = mu[2:] + sd[2:] * z
        y = np.zeros(T)
        for t in range(2, T):
            y[t] = cfg.phi1 * y[t - 1] + cfg.phi2 * y[t - 2] + eps[t - 2]
        data[0, :, p] = y
    return EntityTensor(data, 1.0, cfg.change_index)


def generate_ar_variance(cfg: ArConfig) -> EntityTensor:
    """Like :func:`generate_ar` with the noise mean pinned to zero."""
    return generate_ar(dataclasses.replace(cfg, noise_mean_before=0.0, noise_mean_after=0.0))


@dataclass(frozen=True)
class ChenConfig:
    n_oscillators: int = 4
    a: float = 35.0
    b: float = 2.8
    c_phase1: float = 24.0
    c_phase2: float = 27.0
    eps1_phase1: float = 0.5
    eps2_phase1: float = 0.9
    lambda_env: float = 1.0
    dt: float = 0.01
    t_change_seconds: Optional[float] = 10.0
    t_end_seconds: float = 20.0
    transient_discard_steps: int = 100
    seed: int = 0
    rtol: float = 1e-11
    atol: float = 1e-14

    def __post_init__(self):
        if self.n_oscillators < 1:
            raise DataError("need at least one oscillator")
        if not self.dt > 0:
            raise DataError("dt must be positive")
        n_end = self.t_end_seconds / self.dt
        if abs(n_end - round(n_end)) > 1e-9:
            raise DataError("t_end_seconds must be a whole number of dt steps")
        discard = self.transient_discard_steps * self.dt
        if self.t_change_seconds is not None:
            if not 0 < self.t_change_seconds < self.t_end_seconds:
                raise DataError("need 0 < t_change_seconds < t_end_seconds")
            n_change = self.t_change_seconds / self.dt
            if abs(n_change - round(n_change)) > 1e-9:
                raise DataError("t_change_seconds must be a whole number of dt steps")
            if not discard < self.t_change_seconds:
                raise DataError("discarded transient must end before the change")
        elif not discard < self.t_end_seconds:
            raise DataError("discarded transient covers the whole run")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end_seconds / self.dt))

    @property
    def change_step(self) -> Optional[int]:
        if self.t_change_seconds is None:
            return None
        return int(round(self.t_change_seconds / self.dt))

    @property
    def change_index(self) -> Optional[int]:
        step = self.change_step
        return None if step is None else step - self.transient_discard_steps

    def normal(self) -> "ChenConfig":
        return dataclasses.replace(self, t_change_seconds=None)


def chen_rhs(state: np.ndarray, P: int, a: float, b: float, c: float, eps1: float, eps2: float,
             lambda_env: float) -> np.ndarray:
    """Time derivative of ``[x_1..x_P, y_1..y_P, z_1..z_P, w]``."""
    x, y, z, w = state[:P], state[P:2 * P], state[2 * P:3 * P], state[3 * P]
    dx = a * (y - x) + eps2 * w
    dy = (c - a) * x - x * z + c * y
    dz = x * y - b * z
    dw = -lambda_env * w + (eps1 / P) * np.sum(x)
    return np.concatenate([dx, dy, dz, [dw]])


def chen_initial_state(cfg: ChenConfig) -> np.ndarray:
    P = cfg.n_oscillators
    xyz = np.array([substream(cfg.seed, p).uniform(-1.0, 1.0, 3) for p in range(P)])
    return np.concatenate([xyz[:, 0], xyz[:, 1], xyz[:, 2], [0.0]])


def _integrate(cfg: ChenConfig, y0: np.ndarray, t0: float, t1: float, t_eval: np.ndarray,
               c: float, eps1: float, eps2: float) -> np.ndarray:
    P = cfg.n_oscillators
    sol = solve_ivp(
        lambda _t, s: chen_rhs(s, P, cfg.a, cfg.b, c, eps1, eps2, cfg.lambda_env),
        (t0, t1),
        y0,
        method="RK45",
        t_eval=t_eval,
        rtol=cfg.rtol,
        atol=cfg.atol,
    )
    if sol.status != 0:
        t_fail = sol.t[-1] if sol.t.size else t0
        raise NumericError(f"Chen integration failed near t={t_fail:.6g} s: {sol.message}")
    return sol.y


def simulate_chen(cfg: ChenConfig, y0: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Integrate the coupled system and return ``(times, states)`` on the grid ``k*dt``, k=1..N.

    Phase 1 runs exactly to the change time; phase 2 restarts the integrator
    from the phase-1 end state with the couplings off.
    """
    y0 = chen_initial_state(cfg) if y0 is None else np.asarray(y0, dtype=float)
    N = cfg.n_steps
    k_change = cfg.change_step if cfg.change_step is not None else N
    times = np.arange(1, N + 1) * cfg.dt
    t_change = k_change * cfg.dt
    phase1 = _integrate(cfg, y0, 0.0, t_change, times[:k_change],
                        cfg.c_phase1, cfg.eps1_phase1, cfg.eps2_phase1)
    if k_change == N:
        return times, phase1
    phase2 = _integrate(cfg, phase1[:, -1], t_change, times[-1], times[k_change:],
                        cfg.c_phase2, 0.0, 0.0)
    return times, np.concatenate([phase1, phase2], axis=1)


def generate_chen(cfg: ChenConfig) -> EntityTensor:
    """Coupled Chen oscillators; emits x, y, z per oscillator (the environment is hidden)."""
    P = cfg.n_oscillators
    _, states = simulate_chen(cfg)
    states = states[:, cfg.transient_discard_steps:]
    data = np.stack([states[:P].T, states[P:2 * P].T, states[2 * P:3 * P].T])
    return EntityTensor(data, cfg.dt, cfg.change_index)


GENERATORS = {
    "ar": (ArConfig, generate_ar),
    "ar-var": (ArConfig, generate_ar_variance),
    "chen": (ChenConfig, generate_chen),
}


def config_from_dict(kind: str, params: dict):
    """Build the generator config for ``kind`` from a JSON-style mapping."""
    if kind not in GENERATORS:
        raise DataError(f"unknown generator {kind!r}; choose from {sorted(GENERATORS)}")
    cls = GENERATORS[kind][0]
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(params) - names
    if unknown:
        raise DataError(f"unknown {kind} config keys: {sorted(unknown)}")
    if kind == "ar-var":
        return ar_variance_config(**params)
    return cls(**params)


def generate(kind: str, cfg) -> EntityTensor:
    return GENERATORS[kind][1](cfg)
