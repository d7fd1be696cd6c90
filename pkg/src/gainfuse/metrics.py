"""Fusion quality metrics on display-range images ([0, 255]).

Reference metrics compare two images; the no-reference statistics
describe one. Colour images are reduced to BT.601 luma before any
single-channel metric.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

PEAK = 255.0
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # 11x11 window at sigma 1.5
MI_BINS = 256
BT601 = np.array([0.299, 0.587, 0.114])

# report column order; "n/a" columns are not computed
TABLE_COLUMNS = ("PSNR", "SSIM", "SSIM_f", "MSE", "Nabf", "CC", "LPIPS", "SD", "EI", "EN", "AG", "SF", "MI")
NOT_COMPUTED = ("Nabf", "LPIPS")


def to_display(x) -> np.ndarray:
    """Model space [-1, 1] to display range [0, 255] (no rounding)."""
    return (np.asarray(x, dtype=np.float64) + 1.0) * 127.5


def luma(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        if x.shape[2] == 1:
            return x[..., 0]
        if x.shape[2] == 3:
            return x @ BT601
        return x.mean(axis=2)
    return x


def _pair(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = PEAK) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    m = mse(a, b)
    if m == 0:
        return float("inf")
    return float(10.0 * np.log10(peak**2 / m))


def cc(a, b) -> float:
    """Pearson correlation over all pixels; 0.0 (with a warning) if either is constant."""
    a, b = _pair(a, b)
    a, b = a.ravel() - a.mean(), b.ravel() - b.mean()
    den = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if den == 0:
        warnings.warn("cc: constant image, correlation defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.clip(np.dot(a, b) / den, -1.0, 1.0))


def ssim_map(a, b, data_range: float = PEAK) -> np.ndarray:
    """Gaussian-window SSIM map (channel-averaged), same size as the input."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def blur(x):
        return ndimage.gaussian_filter(x, SSIM_SIGMA, truncate=SSIM_TRUNCATE, axes=(0, 1))

    ux, uy = blur(a), blur(b)
    vx = blur(a * a) - ux * ux
    vy = blur(b * b) - uy * uy
    vxy = blur(a * b) - ux * uy
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux**2 + uy**2 + c1) * (vx + vy + c2))
    return s.mean(axis=2)


def ssim(a, b, data_range: float = PEAK) -> float:
    """Mean SSIM over the luma plane, excluding a half-window border."""
    s = ssim_map(luma(a), luma(b), data_range)
    pad = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
    if s.shape[0] > 2 * pad and s.shape[1] > 2 * pad:
        s = s[pad:-pad, pad:-pad]
    return float(s.mean())


def _plane(x) -> np.ndarray:
    x = luma(x)
    if x.size < 2 or min(x.shape) < 2:
        raise ValueError("image too small for no-reference statistics")
    return x


def entropy(x, bins: int = MI_BINS) -> float:
    """Shannon entropy in bits of the 256-bin histogram over [0, 256)."""
    hist, _ = np.histogram(_plane(x), bins=bins, range=(0, 256))
    p = hist[hist > 0] / hist.sum()
    return float(-np.sum(p * np.log2(p)) + 0.0)


def average_gradient(x) -> float:
    x = _plane(x)
    dx = np.diff(x, axis=1)[:-1, :]
    dy = np.diff(x, axis=0)[:, :-1]
    return float(np.mean(np.sqrt((dx**2 + dy**2) / 2.0)))


def spatial_frequency(x) -> float:
    x = _plane(x)
    rf = np.mean(np.diff(x, axis=1) ** 2)
    cf = np.mean(np.diff(x, axis=0) ** 2)
    return float(np.sqrt(rf + cf))


def edge_intensity(x) -> float:
    x = _plane(x)
    gx = ndimage.sobel(x, axis=1, mode="reflect")
    gy = ndimage.sobel(x, axis=0, mode="reflect")
    return float(np.mean(np.hypot(gx, gy)))


def fusion_stats(x) -> dict[str, float]:
    plane = _plane(x)
    return {
        "SD": float(np.std(plane)),
        "EN": entropy(plane),
        "AG": average_gradient(plane),
        "SF": spatial_frequency(plane),
        "EI": edge_intensity(plane),
    }


def mutual_information(a, b, bins: int = MI_BINS) -> float:
    a, b = _plane(a), _plane(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    joint, _, _ = np.histogram2d(a.ravel(), b.ravel(), bins=bins, range=[[0, 256], [0, 256]])
    pxy = joint / joint.sum()
    px, py = pxy.sum(axis=1), pxy.sum(axis=0)
    nz = pxy > 0
    return float(np.sum(pxy[nz] * np.log2(pxy[nz] / np.outer(px, py)[nz])))


def mi(fused, sources: Sequence[np.ndarray]) -> float:
    """Sum over sources of I(fused; source) in bits."""
    return float(sum(mutual_information(fused, c) for c in sources))


@dataclass
class MetricReport:
    values: dict[str, float]
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        bad = [k for k, v in self.values.items() if not np.isfinite(v) and k != "PSNR"]
        if bad:
            raise ValueError(f"non-finite metric values: {bad}")

    def row(self) -> list[str]:
        out = []
        for col in TABLE_COLUMNS:
            v = self.values.get(col)
            out.append("n/a" if v is None else f"{v:.6g}")
        return out

    def to_csv(self, path: str | Path, image_id: str = "fused") -> None:
        with open(path, "w", newline="") as fh:
            fh.write("# schema: metric-report v1\n")
            for k, v in sorted(self.meta.items()):
                fh.write(f"# {k}={v}\n")
            w = csv.writer(fh)
            w.writerow(["image", *TABLE_COLUMNS])
            w.writerow([image_id, *self.row()])

    def to_table(self, image_id: str = "fused") -> str:
        header = ["image", *TABLE_COLUMNS]
        row = [image_id, *self.row()]
        widths = [max(len(h), len(r)) for h, r in zip(header, row)]
        fmt = "  ".join("{:>%d}" % wd for wd in widths)
        return fmt.format(*header) + "\n" + fmt.format(*row) + "\n"


def evaluate(fused, sources: Sequence[np.ndarray], reference=None) -> MetricReport:
    """Full metric report for a display-range fused image.

    Reference metrics are averaged over the sources (``SSIM_f`` is the
    summed variant); with ``reference`` given they compare against it instead.
    """
    targets = [reference] if reference is not None else list(sources)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ccs = [cc(fused, c) for c in targets]
    ssims = [ssim(fused, c) for c in targets]
    values = {
        "PSNR": float(np.mean([psnr(fused, c) for c in targets])),
        "SSIM": float(np.mean(ssims)),
        "SSIM_f": float(np.sum(ssims)),
        "MSE": float(np.mean([mse(fused, c) for c in targets])),
        "CC": float(np.mean(ccs)),
        **fusion_stats(fused),
        "MI": mi(fused, sources),
    }
    meta = {
        "ssim_window": f"gaussian sigma={SSIM_SIGMA} 11x11",
        "mi_bins": str(MI_BINS),
        "reference": "ideal" if reference is not None else "sources-mean",
    }
    if caught:
        meta["cc_warning"] = "constant image"
    return MetricReport(values, meta)
