"""Image containers, file I/O, normalization, tiling and gradient statistics.

Images are plain ``float32`` numpy arrays: 2-D ``(H, W)`` for a single
channel or 3-D ``(H, W, C)`` channel-last for a stack. All pipeline code
assumes a nominal ``[0, 1]`` value range after :func:`normalize`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

MICROSCOPE_TYPES = ("confocal", "widefield", "two_photon", "unknown")
BIT_DEPTHS = (8, 16, "raw_float")

RAW_MAGIC = b"ADIPF1\x00"
RAW_SUFFIX = ".adipf"

DEFAULT_PATCH_SIZE = 512
DEFAULT_OVERLAP = 128
FINGERPRINT_SIZE = 64


@dataclass
class NormParams:
    """Per-channel min/max recorded by :func:`normalize` for inversion."""

    min_value: np.ndarray
    max_value: np.ndarray

    def __post_init__(self):
        self.min_value = np.atleast_1d(np.asarray(self.min_value, dtype=np.float32))
        self.max_value = np.atleast_1d(np.asarray(self.max_value, dtype=np.float32))
        if self.min_value.shape != self.max_value.shape:
            raise ValueError("min_value and max_value must have matching shapes")
        if np.any(self.max_value < self.min_value):
            raise ValueError("max_value must be >= min_value per channel")

    @property
    def channels(self) -> int:
        return self.min_value.shape[0]


@dataclass
class Patch:
    """A single-channel tile cut from a parent image at a pixel offset."""

    offset_y: int
    offset_x: int
    data: np.ndarray


@dataclass
class ImageMeta:
    """Acquisition metadata used for group-based parameter transfer."""

    source_id: str
    microscope: str = "unknown"
    specimen: str = "unknown"
    noise_level: int | None = None
    bit_depth: int | str = "raw_float"

    def __post_init__(self):
        if not self.source_id:
            raise ValueError("source_id must be non-empty")
        if self.microscope not in MICROSCOPE_TYPES:
            raise ValueError(
                f"unknown microscope {self.microscope!r}, expected one of {MICROSCOPE_TYPES}"
            )
        if self.noise_level is not None and self.noise_level < 1:
            raise ValueError("noise_level must be >= 1 when present")
        if self.bit_depth not in BIT_DEPTHS:
            raise ValueError(f"bit_depth must be one of {BIT_DEPTHS}")


def _require_finite(img: np.ndarray, name: str = "image"):
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{name} contains NaN or Inf values")


def _require_single_channel(img: np.ndarray, op: str) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim != 2:
        raise ValueError(f"{op} expects a single-channel image, got shape {img.shape}")
    return img


def channel_count(img: np.ndarray) -> int:
    img = np.asarray(img)
    if img.ndim == 2:
        return 1
    if img.ndim == 3:
        return img.shape[2]
    raise ValueError(f"expected a 2-D or 3-D image array, got shape {img.shape}")


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def write_raw(path, img: np.ndarray):
    """Write the raw-float container (magic, u32 dims, little-endian f32 data)."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ValueError(f"expected 2-D or 3-D image, got shape {img.shape}")
    height, width, channels = img.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<III", height, width, channels))
        fh.write(np.ascontiguousarray(img, dtype="<f4").tobytes())


def read_raw(path) -> np.ndarray:
    """Read the raw-float container written by :func:`write_raw`, bit-exact."""
    with open(path, "rb") as fh:
        magic = fh.read(len(RAW_MAGIC))
        if magic != RAW_MAGIC:
            raise ValueError(f"{path}: not a raw-float container (bad magic {magic!r})")
        header = fh.read(12)
        if len(header) != 12:
            raise ValueError(f"{path}: truncated raw-float header")
        height, width, channels = struct.unpack("<III", header)
        count = height * width * channels
        data = np.frombuffer(fh.read(4 * count), dtype="<f4")
        if data.size != count:
            raise ValueError(f"{path}: expected {count} float values, got {data.size}")
    img = data.reshape(height, width, channels).astype(np.float32)
    return img[:, :, 0] if channels == 1 else img


def _pil_frames(pil) -> list[np.ndarray]:
    frames = []
    n = getattr(pil, "n_frames", 1)
    for i in range(n):
        pil.seek(i)
        frames.append(np.asarray(pil))
    return frames


def load_image(path, bit_depth: int | str | None = None) -> np.ndarray:
    """Load a PNG/TIFF (8/16-bit grayscale) or raw-float container as float32.

    Integer pixel values are divided by ``2**bits - 1`` into ``[0, 1]``; raw
    floats are passed through unchanged. Multi-page TIFFs are read as a
    channel stack. When ``bit_depth`` is declared it is checked against the
    file header and a mismatch raises ``ValueError``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix.lower() == RAW_SUFFIX:
        if bit_depth not in (None, "raw_float"):
            raise ValueError(f"{path}: declared bit depth {bit_depth!r} but file is raw_float")
        return read_raw(path)

    with PILImage.open(path) as pil:
        frames = _pil_frames(pil)
    channels = []
    for arr in frames:
        if arr.ndim != 2:
            raise ValueError(f"{path}: expected grayscale frames, got shape {arr.shape}")
        if arr.dtype == np.uint8:
            found = 8
        elif arr.dtype in (np.uint16, np.int32):
            found = 16
        else:
            raise ValueError(f"{path}: unsupported pixel type {arr.dtype}")
        if bit_depth is not None and bit_depth != found:
            raise ValueError(f"{path}: declared bit depth {bit_depth!r}, file header says {found}")
        channels.append(arr.astype(np.float32) / float(2**found - 1))
    stack = np.stack(channels, axis=2)
    return stack[:, :, 0] if stack.shape[2] == 1 else stack


def save_image(path, img: np.ndarray, bit_depth: int | str = 16):
    """Write an image in the format implied by the path suffix.

    PNG/TIFF outputs are clipped to ``[0, 1]`` and quantized to the requested
    integer depth; ``.adipf`` paths store raw floats losslessly. Multichannel
    data is only supported by TIFF (multi-page) and the raw container.
    """
    path = Path(path)
    if path.suffix.lower() == RAW_SUFFIX or bit_depth == "raw_float":
        if path.suffix.lower() != RAW_SUFFIX:
            raise ValueError(f"{path}: raw_float output requires the {RAW_SUFFIX} suffix")
        write_raw(path, img)
        return
    if bit_depth not in (8, 16):
        raise ValueError(f"bit_depth must be 8, 16 or 'raw_float', got {bit_depth!r}")
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    peak = float(2**bit_depth - 1)
    quant = np.round(np.clip(img, 0.0, 1.0) * peak)
    suffix = path.suffix.lower()
    if suffix == ".png":
        if img.shape[2] != 1:
            raise ValueError("PNG output supports single-channel images only")
        arr = quant[:, :, 0].astype(np.uint8 if bit_depth == 8 else np.uint16)
        mode = "L" if bit_depth == 8 else "I;16"
        PILImage.fromarray(arr, mode=mode).save(path)
    elif suffix in (".tif", ".tiff"):
        dtype = np.uint8 if bit_depth == 8 else np.uint16
        pages = [
            PILImage.fromarray(quant[:, :, c].astype(dtype), mode="L" if bit_depth == 8 else "I;16")
            for c in range(img.shape[2])
        ]
        pages[0].save(path, save_all=len(pages) > 1, append_images=pages[1:])
    else:
        raise ValueError(f"unsupported output format {path.suffix!r}")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def normalize(img: np.ndarray) -> tuple[np.ndarray, NormParams]:
    """Min-max rescale each channel to ``[0, 1]``.

    Returns the rescaled image plus the per-channel :class:`NormParams`
    needed to invert the mapping. A constant channel maps to all zeros and
    records ``max_value == min_value``.
    """
    img = np.asarray(img, dtype=np.float32)
    _require_finite(img)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    mins = img.min(axis=(0, 1))
    maxs = img.max(axis=(0, 1))
    out = np.zeros_like(img)
    for c in range(img.shape[2]):
        span = maxs[c] - mins[c]
        if span > 0:
            out[:, :, c] = (img[:, :, c] - mins[c]) / span
    params = NormParams(mins, maxs)
    return (out[:, :, 0] if squeeze else out), params


def denormalize(img: np.ndarray, params: NormParams) -> np.ndarray:
    """Invert :func:`normalize`: ``out = in * (max - min) + min`` per channel."""
    img = np.asarray(img, dtype=np.float32)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    if img.shape[2] != params.channels:
        raise ValueError(
            f"image has {img.shape[2]} channels but params describe {params.channels}"
        )
    out = img * (params.max_value - params.min_value) + params.min_value
    out = out.astype(np.float32)
    return out[:, :, 0] if squeeze else out


def split_channels(img: np.ndarray) -> list[np.ndarray]:
    img = np.asarray(img)
    if img.ndim == 2:
        return [img.copy()]
    if img.ndim != 3:
        raise ValueError(f"expected a 2-D or 3-D image array, got shape {img.shape}")
    return [img[:, :, c].copy() for c in range(img.shape[2])]


def merge_channels(channels: list[np.ndarray]) -> np.ndarray:
    if not channels:
        raise ValueError("merge_channels requires at least one channel")
    shapes = {np.asarray(c).shape for c in channels}
    if len(shapes) != 1 or len(next(iter(shapes))) != 2:
        raise ValueError(f"channels must all be 2-D with identical shape, got {shapes}")
    return np.stack([np.asarray(c, dtype=np.float32) for c in channels], axis=2)


# ---------------------------------------------------------------------------
# tiling
# ---------------------------------------------------------------------------

def _axis_offsets(dim: int, patch: int, stride: int) -> list[int]:
    if dim <= patch:
        return [0]
    offsets = list(range(0, dim - patch + 1, stride))
    if offsets[-1] != dim - patch:
        offsets.append(dim - patch)
    return offsets


def tile(img: np.ndarray, patch_size: int = DEFAULT_PATCH_SIZE,
         overlap: int = DEFAULT_OVERLAP) -> list[Patch]:
    """Cut a single-channel image into overlapping patches.

    Offsets advance by ``patch_size - overlap``; the final offset per axis is
    clamped to the image boundary so no pixel is lost and no padding is
    introduced. Images not larger than ``patch_size`` yield one patch that
    covers (and shrinks to) the whole image.
    """
    img = _require_single_channel(img, "tile")
    if not patch_size > overlap >= 0:
        raise ValueError("requires patch_size > overlap >= 0")
    height, width = img.shape
    patch_h = min(patch_size, height)
    patch_w = min(patch_size, width)
    stride = patch_size - overlap
    patches = []
    for oy in _axis_offsets(height, patch_h, stride):
        for ox in _axis_offsets(width, patch_w, stride):
            patches.append(Patch(oy, ox, img[oy:oy + patch_h, ox:ox + patch_w].copy()))
    return patches


def stitch(patches: list[Patch], height: int, width: int) -> np.ndarray:
    """Reassemble patches by averaging values over overlapping regions."""
    acc = np.zeros((height, width), dtype=np.float64)
    cover = np.zeros((height, width), dtype=np.int32)
    for p in patches:
        data = _require_single_channel(p.data, "stitch")
        ph, pw = data.shape
        if p.offset_y < 0 or p.offset_x < 0 or p.offset_y + ph > height or p.offset_x + pw > width:
            raise ValueError(
                f"patch at ({p.offset_y}, {p.offset_x}) of size {ph}x{pw} "
                f"exceeds the {height}x{width} target extent"
            )
        acc[p.offset_y:p.offset_y + ph, p.offset_x:p.offset_x + pw] += data
        cover[p.offset_y:p.offset_y + ph, p.offset_x:p.offset_x + pw] += 1
    if np.any(cover == 0):
        ys, xs = np.nonzero(cover == 0)
        raise ValueError(f"pixel ({ys[0]}, {xs[0]}) is not covered by any patch")
    return (acc / cover).astype(np.float32)


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def mean_gradient(img: np.ndarray) -> float:
    """Mean forward-difference gradient magnitude over the interior.

    ``gx = I(y, x+1) - I(y, x)`` and ``gy = I(y+1, x) - I(y, x)`` are taken on
    the ``(H-1) x (W-1)`` interior; the result is the mean of
    ``sqrt(gx**2 + gy**2)``. Serves as a scale-linear structural-complexity
    proxy: doubling the intensities doubles the value.
    """
    img = _require_single_channel(img, "mean_gradient")
    if img.shape[0] < 2 or img.shape[1] < 2:
        raise ValueError(f"mean_gradient requires at least 2x2 pixels, got {img.shape}")
    arr = img.astype(np.float64)
    gx = arr[:-1, 1:] - arr[:-1, :-1]
    gy = arr[1:, :-1] - arr[:-1, :-1]
    return float(np.mean(np.hypot(gx, gy)))


def area_resize(img: np.ndarray, out_height: int, out_width: int) -> np.ndarray:
    """Resample a single-channel image by exact pixel-area averaging.

    Each output pixel is the mean of the input region it covers, with
    fractional boundary pixels weighted by overlap; integer-factor
    downsampling reduces to plain block averaging.
    """
    img = _require_single_channel(img, "area_resize")

    def weights(n_in: int, n_out: int) -> np.ndarray:
        w = np.zeros((n_out, n_in), dtype=np.float64)
        scale = n_in / n_out
        for i in range(n_out):
            lo, hi = i * scale, (i + 1) * scale
            j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
            for j in range(j0, min(j1, n_in)):
                w[i, j] = min(hi, j + 1) - max(lo, j)
        return w / w.sum(axis=1, keepdims=True)

    wy = weights(img.shape[0], out_height)
    wx = weights(img.shape[1], out_width)
    return (wy @ img.astype(np.float64) @ wx.T).astype(np.float32)


def fingerprint(img: np.ndarray, size: int = FINGERPRINT_SIZE) -> np.ndarray:
    """Area-average an image to ``size x size`` and min-max normalize it.

    The fingerprint makes images of arbitrary sizes comparable for the
    metric-based transfer strategies; multichannel inputs are collapsed to
    their channel mean first.
    """
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 3:
        img = img.mean(axis=2)
    small = area_resize(img, size, size)
    out, _ = normalize(small)
    return out
