"""Variance schedules for discrete-time DDPM chains.

Timesteps are 1-based everywhere in the public API: ``t = 1`` is the
least noisy step and ``t = T`` the noisiest. Arrays are stored 0-based,
so the value for timestep ``t`` lives at index ``t - 1``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class ScheduleError(ValueError):
    """Invalid schedule parameters or timestep selection."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable table of beta/alpha/alpha_bar/sigma for ``T`` steps.

    ``timesteps`` maps every step of this schedule to the timestep of the
    schedule it was respaced from (identity for a freshly built schedule).
    Denoisers trained on the original chain are queried with those ids.
    """

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    timesteps: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.timesteps is None:
            object.__setattr__(self, "timesteps", np.arange(1, len(self.beta) + 1))
        for name in ("beta", "alpha", "alpha_bar", "sigma", "timesteps"):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_t(self, t: int) -> int:
        if not (1 <= int(t) <= self.T) or int(t) != t:
            raise ScheduleError(f"timestep t={t} outside 1..{self.T}")
        return int(t)

    def abar(self, t: int) -> float:
        """alpha_bar at timestep t, with alpha_bar(0) = 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[self.check_t(t) - 1])

    def a(self, t: int) -> float:
        return float(self.alpha[self.check_t(t) - 1])

    def sig(self, t: int) -> float:
        return float(self.sigma[self.check_t(t) - 1])

    def model_timestep(self, t: int) -> int:
        """Timestep id to hand to a denoiser of the original chain."""
        return int(self.timesteps[self.check_t(t) - 1])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("# schema: noise-schedule v1\n")
            w = csv.writer(fh)
            w.writerow(["t", "beta", "alpha", "alpha_bar", "sigma"])
            for i in range(self.T):
                w.writerow(
                    [i + 1]
                    + [f"{float(v[i]):.17g}" for v in (self.beta, self.alpha, self.alpha_bar, self.sigma)]
                )


def _posterior_sigma(alpha: np.ndarray, alpha_bar: np.ndarray) -> np.ndarray:
    abar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    var = (1.0 - alpha) * (1.0 - abar_prev) / (1.0 - alpha_bar)
    var[0] = 0.0
    return np.sqrt(var)


def from_betas(beta: Sequence[float]) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or len(beta) == 0:
        raise ScheduleError("beta must be a non-empty 1-D sequence")
    if np.any(~np.isfinite(beta)) or np.any(beta <= 0.0) or np.any(beta >= 1.0):
        raise ScheduleError("beta values must lie in (0, 1)")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(beta, alpha, alpha_bar, _posterior_sigma(alpha, alpha_bar))


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp from ``beta_start`` to ``beta_end`` inclusive."""
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    if not 0.0 < beta_start < 1.0:
        raise ScheduleError(f"beta_start must lie in (0, 1), got {beta_start!r}")
    if not 0.0 < beta_end < 1.0:
        raise ScheduleError(f"beta_end must lie in (0, 1), got {beta_end!r}")
    if beta_start > beta_end:
        raise ScheduleError("beta_start must not exceed beta_end")
    return from_betas(np.linspace(beta_start, beta_end, int(T), dtype=np.float64))


def sub_schedule(s: NoiseSchedule, steps: Sequence[int]) -> NoiseSchedule:
    """Respace ``s`` onto the selected timesteps, keeping alpha_bar exact.

    The new per-step alphas are ratios of consecutive kept alpha_bars, so
    the forward marginal at every kept timestep is unchanged.
    """
    steps = np.asarray(steps)
    if steps.ndim != 1 or len(steps) == 0:
        raise ScheduleError("steps must be a non-empty 1-D sequence")
    if not np.issubdtype(steps.dtype, np.integer):
        if np.any(steps != np.round(steps)):
            raise ScheduleError("steps must be integers")
        steps = steps.astype(np.int64)
    if steps[0] < 1 or steps[-1] > s.T:
        raise ScheduleError(f"steps must lie in 1..{s.T}")
    if np.any(np.diff(steps) <= 0):
        raise ScheduleError("steps must be strictly increasing")
    if steps[-1] != s.T:
        raise ScheduleError(f"last step must be T={s.T}, got {steps[-1]}")
    alpha_bar = s.alpha_bar[steps - 1].copy()
    if len(steps) == s.T:
        return NoiseSchedule(s.beta, s.alpha, s.alpha_bar, s.sigma, s.timesteps)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    alpha = alpha_bar / prev
    beta = 1.0 - alpha
    return NoiseSchedule(beta, alpha, alpha_bar, _posterior_sigma(alpha, alpha_bar), s.timesteps[steps - 1])
