"""Per-modality conditional gradients and their weighted assembly."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffusion import DivergenceError, as_image, predict_x0
from .oracles import Denoiser
from .schedule import NoiseSchedule

SIMPLEX_TOL = 1e-12


@dataclass(frozen=True)
class ModalityStack:
    """K co-registered condition images of identical shape (H, W, C)."""

    images: tuple
    names: tuple

    def __init__(self, images: Sequence[np.ndarray], names: Sequence[str] | None = None):
        imgs = []
        for i, im in enumerate(images):
            arr = as_image(im, f"modality {i}")
            if arr.ndim == 2:
                arr = arr[..., None]
            if arr.ndim != 3:
                raise ValueError("modality images must be (H, W) or (H, W, C)")
            imgs.append(arr)
        if not imgs:
            raise ValueError("ModalityStack needs at least one image")
        if any(im.shape != imgs[0].shape for im in imgs):
            raise ValueError("all modality images must share one shape")
        if names is None:
            names = [f"m{i}" for i in range(len(imgs))]
        names = tuple(str(n) for n in names)
        if len(names) != len(imgs):
            raise ValueError("need exactly one name per modality")
        if len(set(names)) != len(names):
            raise ValueError(f"modality names must be unique: {names}")
        object.__setattr__(self, "images", tuple(imgs))
        object.__setattr__(self, "names", names)

    @property
    def K(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.images[0].shape


@dataclass(frozen=True)
class GuidanceWeights:
    """Per-modality weights; global (K,) or patchwise full-resolution maps (K, H, W).

    ``patch_values`` keeps the coarse (K, rows, cols) weights a patchwise
    map was interpolated from, when there is one.
    """

    mode: str
    values: np.ndarray
    t: int | None = None
    patch_values: np.ndarray | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        if self.mode == "global":
            if vals.ndim != 1:
                raise ValueError("global weights must be a length-K vector")
        elif self.mode == "patchwise":
            if vals.ndim != 3:
                raise ValueError("patchwise weights must have shape (K, H, W)")
        else:
            raise ValueError(f"unknown weight mode {self.mode!r}")
        check_simplex(vals)

    @property
    def K(self) -> int:
        return self.values.shape[0]

    @classmethod
    def equal(cls, K: int, t: int | None = None) -> "GuidanceWeights":
        return cls("global", np.full(K, 1.0 / K), t)


def check_simplex(values: np.ndarray, tol: float = SIMPLEX_TOL) -> None:
    if not np.all(np.isfinite(values)):
        raise ValueError("weights must be finite")
    if np.any(values < 0):
        raise ValueError("weights must be nonnegative")
    if np.any(np.abs(values.sum(axis=0) - 1.0) > tol):
        raise ValueError("weights must sum to 1 across modalities")


def guidance_grad_from_x0(c_k, x0_hat, t: int, s: NoiseSchedule) -> np.ndarray:
    """Gradient of the Gaussian observation log-likelihood of ``c_k`` given x_t.

    Uses p(c_k | x_t) ~ exp(-|x0_hat - c_k|^2 / (2 (1 - alpha_bar_t))) with
    the Jacobian of x0_hat taken as identity.
    """
    g = (np.asarray(c_k) - x0_hat) / (1.0 - s.abar(s.check_t(t)))
    if not np.all(np.isfinite(g)):
        raise DivergenceError(f"non-finite guidance gradient at t={t}", t=t)
    return g


def modality_guidance_grad(c_k, x_t, t: int, d: Denoiser, s: NoiseSchedule) -> np.ndarray:
    c_k, x_t = as_image(c_k, "c_k"), as_image(x_t, "x_t")
    if c_k.shape != x_t.shape:
        raise ValueError(f"shape mismatch: c_k {c_k.shape} vs x_t {x_t.shape}")
    eps_hat = d.predict_eps(x_t, s.model_timestep(t))
    return guidance_grad_from_x0(c_k, predict_x0(x_t, t, eps_hat, s), t, s)


def assemble_guidance(ms: ModalityStack, w: GuidanceWeights, grads: Sequence[np.ndarray]) -> np.ndarray:
    """Weighted sum of the K modality gradients."""
    if len(grads) != ms.K or w.K != ms.K:
        raise ValueError(f"expected {ms.K} gradients and weights, got {len(grads)} / {w.K}")
    check_simplex(w.values)
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if any(g.shape != grads[0].shape for g in grads):
        raise ValueError("gradient shapes differ")
    out = np.zeros_like(grads[0])
    for k, g in enumerate(grads):
        wk = w.values[k]
        if w.mode == "patchwise":
            if wk.shape != g.shape[:2]:
                raise ValueError(f"weight map {wk.shape} does not match image {g.shape[:2]}")
            wk = wk[..., None] if g.ndim == 3 else wk
        out = out + wk * g
    return out


def upsample_patch_weights(patch_w: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear interpolation of (K, rows, cols) patch weights to (K, H, W).

    Patch centres sit on the edge-padded patch grid; pixels beyond the
    outermost centres take the edge value. The result is renormalised per
    pixel so it stays on the simplex.
    """
    K, rows, cols = patch_w.shape
    H, W = shape
    ph, pw = -(-H // rows), -(-W // cols)
    cy = (np.arange(rows) + 0.5) * ph - 0.5
    cx = (np.arange(cols) + 0.5) * pw - 0.5
    py, px = np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64)
    out = np.empty((K, H, W))
    for k in range(K):
        along_x = np.stack([np.interp(px, cx, patch_w[k, r]) for r in range(rows)])
        out[k] = np.stack([np.interp(py, cy, along_x[:, j]) for j in range(W)], axis=1)
    out = np.clip(out, 0.0, None)
    return out / out.sum(axis=0, keepdims=True)
