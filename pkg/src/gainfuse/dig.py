"""Diffusion information gains and the softmax weights derived from them.

The gain of modality ``c`` over an interval of ``S`` steps starting at
``t`` is ``l(c_hat^t, c) - l(c_hat^(t-S), c)``: how much closer the
one-step denoised reconstruction of the noised modality gets to the
modality when the noise level drops from ``t`` to ``t - S``. Distances are summed over
pixels, either over the whole image or per cell of a patch grid.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import as_image, forward_sample, predict_x0
from .guidance import GuidanceWeights, upsample_patch_weights
from .metrics import ssim_map
from .oracles import Denoiser
from .schedule import NoiseSchedule

DISTANCES = ("l1", "l2", "ssim")


@dataclass(frozen=True)
class DIGConfig:
    distance: str = "l2"
    interval_S: int = 10
    patch_grid: tuple[int, int] | None = (8, 8)  # None means one global value
    temperature: float = 1.0
    auto_scale: bool = False
    shared_noise: bool = True

    def __post_init__(self):
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}, got {self.distance!r}")
        if int(self.interval_S) != self.interval_S or self.interval_S < 1:
            raise ValueError("interval_S must be a positive integer")
        if self.patch_grid is not None:
            r, c = self.patch_grid
            if r < 1 or c < 1:
                raise ValueError("patch grid dimensions must be positive")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def noisy_modality(c_k, t: int, eps, s: NoiseSchedule) -> np.ndarray:
    return forward_sample(c_k, t, eps, s)


def one_step_denoised(c_k_t, t: int, d: Denoiser, s: NoiseSchedule) -> np.ndarray:
    c_k_t = as_image(c_k_t, "c_k_t")
    return predict_x0(c_k_t, t, d.predict_eps(c_k_t, s.model_timestep(t)), s)


def _pad_to_grid(x: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    rows, cols = grid
    H, W = x.shape[:2]
    ph, pw = -(-H // rows), -(-W // cols)
    if ph * rows == H and pw * cols == W:
        return x
    pad = [(0, rows * ph - H), (0, cols * pw - W)] + [(0, 0)] * (x.ndim - 2)
    return np.pad(x, pad, mode="edge")


def patch_sum(x: np.ndarray, grid: tuple[int, int] | None):
    """Sum a per-pixel map over each patch (or over everything)."""
    if grid is None:
        return float(np.sum(x))
    rows, cols = grid
    x = _pad_to_grid(x, grid)
    H, W = x.shape[:2]
    x = x.reshape(rows, H // rows, cols, W // cols, -1)
    return x.sum(axis=(1, 3, 4))


def distance(a, b, cfg: DIGConfig):
    """Pixel-summed distance between two images, globally or per patch."""
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if cfg.distance == "l2":
        per_pixel = (a - b) ** 2
    elif cfg.distance == "l1":
        per_pixel = np.abs(a - b)
    else:
        per_pixel = 1.0 - ssim_map(a, b, data_range=2.0)
    return patch_sum(per_pixel, cfg.patch_grid)


def dig(c_k, t: int, d: Denoiser, s: NoiseSchedule, cfg: DIGConfig,
        rng: np.random.Generator | None = None, eps=None, t_low: int | None = None):
    """Information gain of ``c_k`` between steps ``t`` and ``t_low`` (default ``t - S``).

    With ``cfg.shared_noise`` both endpoints are noised with one draw (``eps``
    if given, else drawn from ``rng``); otherwise each endpoint gets its
    own draw and ``eps`` may be a pair.
    """
    c_k = as_image(c_k, "c_k")
    t = s.check_t(t)
    lo = t - cfg.interval_S if t_low is None else int(t_low)
    if not 1 <= lo < t:
        raise ValueError(f"invalid DIG window: t={t}, lower end {lo}")
    if eps is None:
        if rng is None:
            raise ValueError("dig needs either eps or rng")
        n = 1 if cfg.shared_noise else 2
        draws = [rng.standard_normal(c_k.shape) for _ in range(n)]
        eps_hi, eps_lo = draws[0], draws[-1]
    elif cfg.shared_noise:
        eps_hi = eps_lo = eps
    else:
        eps_hi, eps_lo = eps
    hi = one_step_denoised(noisy_modality(c_k, t, eps_hi, s), t, d, s)
    low = one_step_denoised(noisy_modality(c_k, lo, eps_lo, s), lo, d, s)
    return distance(hi, c_k, cfg) - distance(low, c_k, cfg)


def dig_noise(rng: np.random.Generator, shape: tuple, shared: bool = True):
    """One noise draw for both window ends, or an independent pair."""
    if shared:
        return rng.standard_normal(shape)
    return rng.standard_normal(shape), rng.standard_normal(shape)


def softmax(x: np.ndarray, axis: int = 0) -> np.ndarray:
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def weights_from_dig(dig_values, cfg: DIGConfig, shape: tuple[int, int] | None = None,
                     t: int | None = None) -> GuidanceWeights:
    """Softmax of the gains across modalities (axis 0).

    Patch gains of shape (K, rows, cols) are normalised per patch and
    then interpolated to a full (K, H, W) map of size ``shape``.
    """
    g = np.asarray(dig_values, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ValueError("DIG values must be finite")
    if cfg.auto_scale and g.shape[0] > 1:
        spread = g.std(axis=0, keepdims=True)
        g = g / np.where(spread > 0, spread, 1.0)
    w = softmax(g / cfg.temperature, axis=0)
    if g.ndim == 1:
        return GuidanceWeights("global", w, t)
    if shape is None:
        raise ValueError("patch weights need the image shape to upsample to")
    return GuidanceWeights("patchwise", upsample_patch_weights(w, shape), t, patch_values=w)


@dataclass
class DIGTrace:
    """Time-ordered DIG records of one reverse chain.

    Each record stores the model timestep, the per-modality gains
    (K,) or (K, rows, cols), and the coarse weights they produced.
    """

    names: tuple
    records: list = field(default_factory=list)

    def append(self, t: int, gains: np.ndarray, weights: np.ndarray) -> None:
        self.records.append((int(t), np.array(gains, dtype=np.float64), np.array(weights, dtype=np.float64)))

    def __len__(self):
        return len(self.records)

    @property
    def timesteps(self) -> list[int]:
        return [r[0] for r in self.records]

    def gains(self) -> np.ndarray:
        return np.stack([r[1] for r in self.records])

    def weights(self) -> np.ndarray:
        return np.stack([r[2] for r in self.records])

    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.gains(), axis=0)

    def to_csv(self, path: str | Path) -> None:
        gains, weights, cum = self.gains(), self.weights(), self.cumulative()
        with open(path, "w", newline="") as fh:
            fh.write("# schema: dig-trace v1\n")
            w = csv.writer(fh)
            w.writerow(["t", "modality", "patch_row", "patch_col", "dig", "weight", "cum_dig"])
            for i, t in enumerate(self.timesteps):
                for k, name in enumerate(self.names):
                    if gains.ndim == 2:
                        cells = [((-1, -1), (i, k))]
                    else:
                        cells = [((r, c), (i, k, r, c)) for r in range(gains.shape[2]) for c in range(gains.shape[3])]
                    for (r, c), idx in cells:
                        w.writerow([t, name, r, c, f"{gains[idx]:.17g}", f"{weights[idx]:.17g}", f"{cum[idx]:.17g}"])


def record_steps(N: int, S: int) -> list[int]:
    """Respaced steps at which a chain of N steps records DIG: N, N-S, ..."""
    return list(range(N, 0, -S))


def dig_curves(images, d: Denoiser, rs: NoiseSchedule, cfg: DIGConfig, seed: int = 0,
               n_seeds: int = 16) -> np.ndarray:
    """DIG at every record step of the respaced schedule ``rs`` for ``n_seeds`` noise draws.

    Unlike the sampler, the first record is evaluated too; a record at
    step 1 has no window and contributes zeros. Returns an array of shape
    (n_seeds, n_records, K) or (n_seeds, n_records, K, rows, cols).
    """
    from .diffusion import rng_stream

    steps = record_steps(rs.T, cfg.interval_S)
    cell = () if cfg.patch_grid is None else tuple(cfg.patch_grid)
    out = np.zeros((n_seeds, len(steps), len(images), *cell))
    for i in range(n_seeds):
        for r, t in enumerate(steps):
            if t == 1:
                continue
            eps = dig_noise(rng_stream(seed, "dig-band", i, r), np.shape(images[0]), cfg.shared_noise)
            lo = max(t - cfg.interval_S, 1)
            out[i, r] = np.stack([np.asarray(dig(c, t, d, rs, cfg, eps=eps, t_low=lo)) for c in images])
    return out
