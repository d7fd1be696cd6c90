"""Forward noising, reverse updates and the score / x0 identities.

Every function here is pure: noise is drawn by the caller and passed in.
Images are float64 numpy arrays; any shape works as long as the operands
agree.
"""

from __future__ import annotations

import zlib

import numpy as np

from .schedule import NoiseSchedule


class DivergenceError(FloatingPointError):
    """A sampler state or gradient became non-finite."""

    def __init__(self, message: str, t: int | None = None):
        super().__init__(message)
        self.t = t


def as_image(x, name: str = "image") -> np.ndarray:
    """Coerce to float64 and reject NaN/Inf."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"{name} contains non-finite values")
    return arr


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch for {what}: {a.shape} vs {b.shape}")


def rng_stream(seed: int, *keys) -> np.random.Generator:
    """Independent, reproducible generator for a named sub-stream of ``seed``.

    Keys may be ints or strings; strings are folded in with CRC32 so the
    stream layout does not depend on Python's randomized ``hash``.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for k in keys:
        if isinstance(k, str):
            words.append(zlib.crc32(k.encode("utf-8")))
        else:
            words.append(int(k) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def forward_sample(x0, t: int, eps, s: NoiseSchedule) -> np.ndarray:
    x0, eps = as_image(x0, "x0"), as_image(eps, "eps")
    _same_shape(x0, eps, "x0/eps")
    ab = s.abar(s.check_t(t))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0(x_t, t: int, eps_hat, s: NoiseSchedule) -> np.ndarray:
    """Invert the forward map given a noise estimate."""
    x_t, eps_hat = as_image(x_t, "x_t"), as_image(eps_hat, "eps_hat")
    _same_shape(x_t, eps_hat, "x_t/eps_hat")
    ab = s.abar(s.check_t(t))
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def score_from_eps(eps_hat, t: int, s: NoiseSchedule) -> np.ndarray:
    eps_hat = as_image(eps_hat, "eps_hat")
    return -eps_hat / np.sqrt(1.0 - s.abar(s.check_t(t)))


def reverse_step(x_t, t: int, eps_hat, z, s: NoiseSchedule) -> np.ndarray:
    """One ancestral DDPM step x_t -> x_{t-1}; ``z`` is ignored at t = 1."""
    x_t, eps_hat, z = as_image(x_t, "x_t"), as_image(eps_hat, "eps_hat"), as_image(z, "z")
    _same_shape(x_t, eps_hat, "x_t/eps_hat")
    _same_shape(x_t, z, "x_t/z")
    t = s.check_t(t)
    a, ab = s.a(t), s.abar(t)
    mean = (x_t - (1.0 - a) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
    if t == 1:
        return mean
    return mean + s.sig(t) * z


def guided_reverse_step(x_t, t: int, eps_hat, guidance_sum, z, s: NoiseSchedule) -> np.ndarray:
    """Reverse step written as scaling + unconditional + multimodal guidance + noise.

    ``guidance_sum`` is the already weighted sum of per-modality
    conditional gradients (including any global guidance scale).
    """
    x_t, eps_hat, z = as_image(x_t, "x_t"), as_image(eps_hat, "eps_hat"), as_image(z, "z")
    guidance_sum = as_image(guidance_sum, "guidance_sum")
    for other, what in ((eps_hat, "eps_hat"), (guidance_sum, "guidance_sum"), (z, "z")):
        _same_shape(x_t, other, f"x_t/{what}")
    t = s.check_t(t)
    a = s.a(t)
    coef = (1.0 - a) / np.sqrt(a)
    out = x_t / np.sqrt(a) + coef * score_from_eps(eps_hat, t, s) + coef * guidance_sum
    if t == 1:
        return out
    return out + s.sig(t) * z
