"""Full-reference image quality measures and the rank-sum config selector.

All measures assume min-max normalized inputs (PSNR peak is fixed at 1.0).
The perceptual measure is pluggable: the default backend is a multi-scale
structural dissimilarity that needs no learned weights; an optional backend
loads convolutional feature weights from a raw-float container.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve
from scipy.stats import rankdata

from . import image as img_mod

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class MetricKind(str, Enum):
    """Quality measures recorded for every (candidate, reference) pair."""

    MAE = "mae"
    MSE = "mse"
    PSNR = "psnr"
    SSIM = "ssim"
    PERCEPTUAL = "perceptual"
    MEAN_GRADIENT_DIFF = "mean_gradient_diff"

    @property
    def higher_is_better(self) -> bool:
        return self in (MetricKind.PSNR, MetricKind.SSIM)

    @property
    def compares_absolute(self) -> bool:
        # signed gradient difference: zero is optimal, either sign is a miss
        return self is MetricKind.MEAN_GRADIENT_DIFF


def _pair(a, b, op: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mae(a, b) -> float:
    """Mean absolute difference over all pixels and channels."""
    a, b = _pair(a, b, "mae")
    return float(np.mean(np.abs(a - b)))


def mse(a, b) -> float:
    """Mean squared difference over all pixels and channels."""
    a, b = _pair(a, b, "mse")
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB with the peak fixed at 1.0.

    Identical inputs return ``math.inf``, which ranks above every finite
    value in :func:`rank_sum_select`.
    """
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return float(10.0 * math.log10(1.0 / err))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(offsets**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b) -> float:
    """Mean local structural similarity (11x11 Gaussian window, sigma 1.5).

    Uses the standard constants K1=0.01, K2=0.03 with dynamic range 1 and is
    symmetric in its arguments. Inputs must be single-channel and at least as
    large as the window.
    """
    a, b = _pair(a, b, "ssim")
    if a.ndim != 2:
        raise ValueError(f"ssim expects single-channel images, got shape {a.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"ssim needs images of at least {SSIM_WINDOW}px per side, got {a.shape}")
    win = _gaussian_window()

    def filt(x):
        return fftconvolve(x, win, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# perceptual backends
# ---------------------------------------------------------------------------

def _halve(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[0::2, 1::2] + x[1::2, 0::2] + x[1::2, 1::2])


class StructuralDissimilarity:
    """Default perceptual backend: multi-scale gradient-structure dissimilarity.

    Averages ``1 - SSIM`` over up to ``scales`` dyadic downsamplings (2x2 area
    means). Deterministic, symmetric, zero for identical inputs, and free of
    learned weights. Images too small for the SSIM window at a scale simply
    contribute fewer scales (at least the original scale is required).
    """

    def __init__(self, scales: int = 3):
        if scales < 1:
            raise ValueError("scales must be >= 1")
        self.scales = scales

    def distance(self, a, b) -> float:
        a, b = _pair(a, b, "perceptual")
        terms = []
        for _ in range(self.scales):
            if min(a.shape) < SSIM_WINDOW:
                break
            terms.append(1.0 - ssim(a, b))
            a, b = _halve(a), _halve(b)
        if not terms:
            raise ValueError("image too small for the perceptual measure "
                             f"(needs >= {SSIM_WINDOW}px per side)")
        return float(np.mean(terms))


class LearnedPerceptual:
    """Perceptual backend driven by convolutional feature weights on disk.

    The weight file is a raw-float container holding all layer parameters
    concatenated (per layer: ``out*in*k*k`` kernel values then ``out``
    biases); a JSON sidecar ``<file>.json`` describes the layer shapes::

        {"input_channels": 1,
         "layers": [{"out_channels": 8, "kernel": 3, "stride": 2}, ...]}

    The distance is the mean over layers of the mean Euclidean distance
    between channel-unit-normalized feature maps of the two inputs.
    """

    def __init__(self, weight_path):
        weight_path = Path(weight_path)
        sidecar = weight_path.with_suffix(weight_path.suffix + ".json")
        if not weight_path.exists():
            raise FileNotFoundError(f"perceptual weight file missing: {weight_path}")
        if not sidecar.exists():
            raise FileNotFoundError(f"perceptual weight sidecar missing: {sidecar}")
        with open(sidecar) as fh:
            layout = json.load(fh)
        flat = np.asarray(img_mod.read_raw(weight_path), dtype=np.float32).ravel()
        self.layers = []
        pos = 0
        c_in = int(layout.get("input_channels", 1))
        for i, spec in enumerate(layout["layers"]):
            c_out, k, stride = int(spec["out_channels"]), int(spec["kernel"]), int(spec.get("stride", 1))
            n_w, n_b = c_out * c_in * k * k, c_out
            if pos + n_w + n_b > flat.size:
                raise ValueError(f"weight file too short for layer {i} of the sidecar layout")
            kernel = flat[pos:pos + n_w].reshape(c_out, c_in, k, k)
            bias = flat[pos + n_w:pos + n_w + n_b]
            pos += n_w + n_b
            self.layers.append((kernel, bias, stride))
            c_in = c_out
        if pos != flat.size:
            raise ValueError(f"weight file has {flat.size - pos} trailing values "
                             "beyond the sidecar layout")

    @staticmethod
    def _conv(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride: int) -> np.ndarray:
        c_out, c_in, k, _ = kernel.shape
        pad = k // 2
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
        h, w = x.shape[1], x.shape[2]
        cols = np.empty((c_in * k * k, h * w), dtype=np.float64)
        row = 0
        for c in range(c_in):
            for dy in range(k):
                for dx in range(k):
                    cols[row] = xp[c, dy:dy + h, dx:dx + w].ravel()
                    row += 1
        out = kernel.reshape(c_out, -1).astype(np.float64) @ cols + bias[:, None]
        out = out.reshape(c_out, h, w)[:, ::stride, ::stride]
        return np.maximum(out, 0.2 * out)  # leaky rectifier, slope 0.2

    def _features(self, x: np.ndarray) -> list[np.ndarray]:
        feats = []
        cur = x[None, :, :].astype(np.float64)
        for kernel, bias, stride in self.layers:
            cur = self._conv(cur, kernel, bias, stride)
            feats.append(cur)
        return feats

    def distance(self, a, b) -> float:
        a, b = _pair(a, b, "perceptual")
        if a.ndim != 2:
            raise ValueError("learned perceptual backend expects single-channel images")
        total = 0.0
        for fa, fb in zip(self._features(a), self._features(b)):
            na = fa / (np.linalg.norm(fa, axis=0, keepdims=True) + 1e-10)
            nb = fb / (np.linalg.norm(fb, axis=0, keepdims=True) + 1e-10)
            total += float(np.mean(np.linalg.norm(na - nb, axis=0)))
        return total / len(self.layers)


DEFAULT_PERCEPTUAL = StructuralDissimilarity()


def perceptual_distance(a, b, backend=None) -> float:
    """Perceptual dissimilarity (lower = more similar, 0 for identical)."""
    backend = backend or DEFAULT_PERCEPTUAL
    return backend.distance(a, b)


# ---------------------------------------------------------------------------
# combined selection
# ---------------------------------------------------------------------------

def rank_sum_select(candidates: list[tuple[float, float]]) -> int:
    """Pick the candidate with the lowest PSNR-rank + perceptual-rank sum.

    Rank 1 goes to the highest PSNR and to the lowest perceptual distance;
    ties within one measure receive the mean of the tied positions. Rank-sum
    ties are broken by higher PSNR, then by lower index.
    """
    if not candidates:
        raise ValueError("rank_sum_select requires at least one candidate")
    psnr_vals = np.array([c[0] for c in candidates], dtype=np.float64)
    perc_vals = np.array([c[1] for c in candidates], dtype=np.float64)
    sums = rankdata(-psnr_vals, method="average") + rankdata(perc_vals, method="average")
    best = 0
    for i in range(1, len(candidates)):
        if sums[i] < sums[best] or (sums[i] == sums[best] and psnr_vals[i] > psnr_vals[best]):
            best = i
    return best


def mean_gradient_diff(a, reference) -> float:
    """Signed difference of mean image gradients: ``mg(a) - mg(reference)``."""
    return img_mod.mean_gradient(a) - img_mod.mean_gradient(reference)


def metric_report(candidate, reference, backend=None) -> dict[MetricKind, float]:
    """Evaluate every :class:`MetricKind` for one (candidate, reference) pair."""
    return {
        MetricKind.MAE: mae(candidate, reference),
        MetricKind.MSE: mse(candidate, reference),
        MetricKind.PSNR: psnr(candidate, reference),
        MetricKind.SSIM: ssim(candidate, reference),
        MetricKind.PERCEPTUAL: perceptual_distance(candidate, reference, backend),
        MetricKind.MEAN_GRADIENT_DIFF: mean_gradient_diff(candidate, reference),
    }
