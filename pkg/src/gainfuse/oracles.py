"""Training-free denoisers with exact noise predictions.

Each oracle holds the noise schedule of the chain it denoises and answers
``predict_eps(x_t, t)`` with the MMSE noise estimate for its data model,
obtained by inverting the forward map around the posterior mean E[x0|x_t].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
from scipy.special import logsumexp

from .diffusion import as_image
from .schedule import NoiseSchedule


@runtime_checkable
class Denoiser(Protocol):
    def predict_eps(self, x_t: np.ndarray, t: int) -> np.ndarray: ...


def _eps_from_posterior_mean(x_t: np.ndarray, mean_x0: np.ndarray, ab: float) -> np.ndarray:
    return (x_t - np.sqrt(ab) * mean_x0) / np.sqrt(1.0 - ab)


@dataclass(frozen=True)
class ZeroDenoiser:
    """Predicts zero noise everywhere."""

    def predict_eps(self, x_t, t):
        return np.zeros_like(np.asarray(x_t, dtype=np.float64))


@dataclass(frozen=True)
class GaussianDataOracle:
    """x0 ~ N(mu, var * I)."""

    mu: np.ndarray
    var: float
    schedule: NoiseSchedule

    def __post_init__(self):
        if self.var < 0:
            raise ValueError("var must be nonnegative")
        object.__setattr__(self, "mu", as_image(self.mu, "mu"))

    def predict_eps(self, x_t, t):
        return gaussian_predict_eps(self, x_t, t, self.schedule)


def gaussian_predict_eps(o: GaussianDataOracle, x_t, t: int, s: NoiseSchedule) -> np.ndarray:
    x_t = as_image(x_t, "x_t")
    if x_t.shape != o.mu.shape:
        raise ValueError(f"shape mismatch: x_t {x_t.shape} vs mu {o.mu.shape}")
    ab = s.abar(s.check_t(t))
    score = -(x_t - np.sqrt(ab) * o.mu) / (ab * o.var + 1.0 - ab)
    return -np.sqrt(1.0 - ab) * score


@dataclass(frozen=True)
class EmpiricalDataOracle:
    """Uniform mixture of point masses at ``atoms``."""

    atoms: Sequence[np.ndarray]
    schedule: NoiseSchedule

    def __post_init__(self):
        if len(self.atoms) == 0:
            raise ValueError("EmpiricalDataOracle needs at least one atom")
        stack = np.stack([as_image(a, "atom") for a in self.atoms])
        object.__setattr__(self, "atoms", stack)

    def posterior_mean(self, x_t, ab: float) -> np.ndarray:
        diff = (x_t[None] - np.sqrt(ab) * self.atoms).reshape(len(self.atoms), -1)
        logits = -np.sum(diff**2, axis=1) / (2.0 * (1.0 - ab))
        w = np.exp(logits - logsumexp(logits))
        return np.tensordot(w, self.atoms, axes=1)

    def predict_eps(self, x_t, t):
        return empirical_predict_eps(self, x_t, t, self.schedule)


def empirical_predict_eps(o: EmpiricalDataOracle, x_t, t: int, s: NoiseSchedule) -> np.ndarray:
    x_t = as_image(x_t, "x_t")
    if x_t.shape != o.atoms.shape[1:]:
        raise ValueError(f"shape mismatch: x_t {x_t.shape} vs atoms {o.atoms.shape[1:]}")
    ab = s.abar(s.check_t(t))
    return _eps_from_posterior_mean(x_t, o.posterior_mean(x_t, ab), ab)


def power_law_spectrum(shape: tuple[int, int], exponent: float = 2.0, corner: float = 1.0,
                       pixel_var: float = 1.0) -> np.ndarray:
    """Isotropic power-law spectrum ``(corner^2 + |k|^2)^(-exponent/2)`` on the FFT grid.

    ``k`` is measured in cycles per image. The result is scaled so that the
    implied per-pixel variance equals ``pixel_var``.
    """
    h, w = shape
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.fftfreq(w) * w
    k2 = ky[:, None] ** 2 + kx[None, :] ** 2
    lam = (corner**2 + k2) ** (-exponent / 2.0)
    return lam * (pixel_var / lam.mean())


@dataclass(frozen=True)
class SpectralGaussianOracle:
    """Stationary Gaussian image prior, diagonal in the 2-D Fourier basis.

    ``spectrum`` holds the eigenvalues of the (circulant, periodic-boundary)
    pixel covariance on the ``np.fft.fft2`` grid; channels are independent
    and share the spectrum. The exact denoiser is a Wiener filter, so low
    frequencies with large eigenvalues are resolved at higher noise levels
    than fine texture.
    """

    mu: np.ndarray
    spectrum: np.ndarray
    schedule: NoiseSchedule
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        mu = as_image(self.mu, "mu")
        if mu.ndim == 2:
            mu = mu[..., None]
        object.__setattr__(self, "mu", mu)
        spec = np.asarray(self.spectrum, dtype=np.float64)
        if spec.shape != mu.shape[:2] or np.any(spec < 0):
            raise ValueError("spectrum must be nonnegative with shape (H, W) of mu")
        object.__setattr__(self, "spectrum", spec)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        white = rng.standard_normal(self.mu.shape)
        f = np.fft.fft2(white, axes=(0, 1)) * np.sqrt(self.spectrum)[..., None]
        return self.mu + np.fft.ifft2(f, axes=(0, 1)).real

    def posterior_mean(self, x_t, ab: float) -> np.ndarray:
        gain = self._cache.get(ab)
        if gain is None:
            gain = np.sqrt(ab) * self.spectrum / (ab * self.spectrum + 1.0 - ab)
            self._cache[ab] = gain
        f = np.fft.fft2(x_t - np.sqrt(ab) * self.mu, axes=(0, 1)) * gain[..., None]
        return self.mu + np.fft.ifft2(f, axes=(0, 1)).real

    def predict_eps(self, x_t, t):
        x_t = as_image(x_t, "x_t")
        squeeze = x_t.ndim == 2
        if squeeze:
            x_t = x_t[..., None]
        if x_t.shape != self.mu.shape:
            raise ValueError(f"shape mismatch: x_t {x_t.shape} vs mu {self.mu.shape}")
        ab = self.schedule.abar(self.schedule.check_t(t))
        eps = _eps_from_posterior_mean(x_t, self.posterior_mean(x_t, ab), ab)
        return eps[..., 0] if squeeze else eps
