"""The dynamic-guidance fusion loop.

A respaced DDPM chain runs from pure noise; every ``S`` steps the
information gain of each modality over the next ``S`` steps (cut short
at step 1) is measured and turned into guidance weights,
which are then held until the next record. The first record, taken at
the noisiest step where gains are least reliable, uses equal weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diffusion import DivergenceError, guided_reverse_step, predict_x0, rng_stream
from .dig import DIGConfig, DIGTrace, dig, dig_noise, weights_from_dig
from .guidance import GuidanceWeights, ModalityStack, assemble_guidance, guidance_grad_from_x0
from .oracles import Denoiser
from .schedule import NoiseSchedule, sub_schedule

WEIGHT_MODES = ("dynamic", "static_equal", "static_fixed")
SPACINGS = ("uniform", "coarse_to_fine")


@dataclass(frozen=True)
class FusionConfig:
    total_steps_N: int = 25
    step_spacing: str = "uniform"
    dig: DIGConfig = field(default_factory=DIGConfig)
    guidance_scale: float = 1.0
    seed: int = 0
    weight_mode: str = "dynamic"
    fixed_weights: tuple[float, ...] | None = None
    ramp_exponent: float = 2.0

    def __post_init__(self):
        if int(self.total_steps_N) != self.total_steps_N or self.total_steps_N < 2:
            raise ValueError("total_steps_N must be an integer >= 2")
        if self.step_spacing not in SPACINGS:
            raise ValueError(f"step_spacing must be one of {SPACINGS}")
        if not self.guidance_scale > 0:
            raise ValueError("guidance_scale must be positive")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}")
        if self.weight_mode == "static_fixed":
            w = np.asarray(self.fixed_weights if self.fixed_weights is not None else [], dtype=np.float64)
            if w.size == 0 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError("static_fixed needs fixed_weights on the simplex")
        if self.ramp_exponent < 1.0:
            raise ValueError("ramp_exponent must be >= 1")


def make_step_plan(s: NoiseSchedule, N: int, spacing: str = "uniform", exponent: float = 2.0) -> list[int]:
    """Increasing timesteps of length N ending at T.

    ``coarse_to_fine`` takes gaps proportional to the increments of
    ``(i/N)**exponent``: short steps near t = 1, long steps near t = T.
    """
    T = s.T
    if int(N) != N or not 2 <= N <= T:
        raise ValueError(f"N must be an integer in 2..{T}, got {N}")
    N = int(N)
    if spacing == "uniform":
        return [T * i // N for i in range(1, N + 1)]
    if spacing != "coarse_to_fine":
        raise ValueError(f"unknown spacing {spacing!r}")
    ramp = T * (np.arange(N + 1) / N) ** exponent
    gaps = np.diff(np.round(ramp)).astype(np.int64)
    # sorted gaps stay sorted when the first of the largest run is decremented
    gaps = np.sort(np.maximum(gaps, 1))
    while gaps.sum() > T:
        gaps[np.argmax(gaps)] -= 1
    return np.cumsum(gaps).tolist()


# -- weight policies ---------------------------------------------------------

WeightPolicy = Callable[[np.ndarray, "FusionContext"], GuidanceWeights]


@dataclass(frozen=True)
class FusionContext:
    K: int
    shape: tuple[int, int]
    t: int
    record: int
    dig_cfg: DIGConfig
    seed: int


def dynamic_policy(gains, ctx: FusionContext) -> GuidanceWeights:
    return weights_from_dig(gains, ctx.dig_cfg, ctx.shape, ctx.t)


def static_equal_policy(gains, ctx: FusionContext) -> GuidanceWeights:
    return GuidanceWeights.equal(ctx.K, ctx.t)


def static_fixed_policy(weights) -> WeightPolicy:
    w = np.asarray(weights, dtype=np.float64)

    def policy(gains, ctx):
        return GuidanceWeights("global", w, ctx.t)

    return policy


def policy_for(cfg: FusionConfig) -> WeightPolicy:
    if cfg.weight_mode == "dynamic":
        return dynamic_policy
    if cfg.weight_mode == "static_equal":
        return static_equal_policy
    return static_fixed_policy(cfg.fixed_weights)


# -- the loop ----------------------------------------------------------------

@dataclass
class StepInfo:
    """Everything the theory lab needs from one reverse step."""

    t: int
    schedule: NoiseSchedule
    x_t: np.ndarray
    x0_hat: np.ndarray
    eps_hat: np.ndarray
    grads: list
    weights: GuidanceWeights
    guidance: np.ndarray
    z: np.ndarray
    x_next: np.ndarray


def _record_weights(w: GuidanceWeights, shape: tuple) -> np.ndarray:
    """Weights at the resolution of the gains; global weights are spread over the patch cells."""
    vals = w.patch_values if w.patch_values is not None else w.values
    if vals.ndim == 1 and len(shape) == 3:
        vals = np.broadcast_to(vals[:, None, None], shape).copy()
    return vals


def fuse(ms: ModalityStack, d: Denoiser, s: NoiseSchedule, cfg: FusionConfig,
         policy: WeightPolicy | None = None,
         observer: Callable[[StepInfo], None] | None = None) -> tuple[np.ndarray, DIGTrace]:
    """Run the guided reverse chain and return the fused image with its DIG trace.

    ``s`` is the full schedule the denoiser was built for; it is respaced
    onto ``cfg.total_steps_N`` steps here. ``policy`` overrides the
    weight mode of ``cfg``. All randomness comes from named sub-streams
    of ``cfg.seed``; the DIG noise at a record is shared by every
    modality, so the result is equivariant under reordering modalities.
    """
    if cfg.total_steps_N > s.T:
        raise ValueError(f"total_steps_N={cfg.total_steps_N} exceeds T={s.T}")
    if cfg.weight_mode == "static_fixed" and len(cfg.fixed_weights) != ms.K:
        raise ValueError("fixed_weights length must equal the number of modalities")
    policy = policy or policy_for(cfg)
    plan = make_step_plan(s, cfg.total_steps_N, cfg.step_spacing, cfg.ramp_exponent)
    rs = sub_schedule(s, plan)
    N, S = rs.T, cfg.dig.interval_S
    shape = ms.shape
    trace = DIGTrace(ms.names)

    x = rng_stream(cfg.seed, "init").standard_normal(shape)
    noise = rng_stream(cfg.seed, "reverse-noise")
    weights = GuidanceWeights.equal(ms.K)
    for t in range(N, 0, -1):
        if (N - t) % S == 0:
            record = (N - t) // S
            if t == N:
                grid = cfg.dig.patch_grid
                gains = np.zeros((ms.K,) if grid is None else (ms.K, *grid))
                weights = GuidanceWeights.equal(ms.K, rs.model_timestep(t))
            elif t == 1:
                # no valid window below step 1: keep the previous weights
                gains = np.zeros_like(gains)
            else:
                eps = dig_noise(rng_stream(cfg.seed, "dig", record), shape, cfg.dig.shared_noise)
                lo = max(t - S, 1)
                gains = np.stack([dig(c, t, d, rs, cfg.dig, eps=eps, t_low=lo) for c in ms.images])
                ctx = FusionContext(ms.K, shape[:2], rs.model_timestep(t), record, cfg.dig, cfg.seed)
                weights = policy(gains, ctx)
            trace.append(rs.model_timestep(t), gains, _record_weights(weights, np.shape(gains)))

        eps_hat = d.predict_eps(x, rs.model_timestep(t))
        x0_hat = predict_x0(x, t, eps_hat, rs)
        grads = [guidance_grad_from_x0(c, x0_hat, t, rs) for c in ms.images]
        guidance = cfg.guidance_scale * assemble_guidance(ms, weights, grads)
        z = noise.standard_normal(shape)
        x_next = guided_reverse_step(x, t, eps_hat, guidance, z, rs)
        if not np.all(np.isfinite(x_next)):
            raise DivergenceError(f"sampler diverged at t={rs.model_timestep(t)}", t=rs.model_timestep(t))
        if observer is not None:
            observer(StepInfo(t, rs, x, x0_hat, eps_hat, grads, weights, guidance, z, x_next))
        x = x_next
    return x, trace
