"""Raster container conventions, image I/O and shared low-level kernels.

Images are ``float64`` arrays of shape ``(H, W, C)`` with ``C`` in ``{1, 3}``
and values in ``[0, 1]``.  Single-plane maps (losses, Sobel magnitudes) are
``(H, W)`` arrays.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


class ImageFormatError(ValueError):
    """Unsupported, truncated or malformed image data."""


def as_image(data, clamp: bool = False) -> np.ndarray:
    """Validate (and optionally clamp) an array into the ``(H, W, C)`` layout."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, 1|3) image, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError("image has a zero dimension")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    if clamp:
        return np.clip(arr, 0.0, 1.0)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values outside [0, 1]")
    return arr


@dataclass(frozen=True)
class Histogram256:
    bins: np.ndarray
    total: int

    def probabilities(self) -> np.ndarray:
        return self.bins / self.total


# --------------------------------------------------------------------------- I/O


def _read_pgm(raw: bytes) -> np.ndarray:
    # P5 header: magic, width, height, maxval separated by whitespace; '#' comments.
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PGM header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte before raster
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise ImageFormatError("malformed PGM header") from exc
    if width <= 0 or height <= 0:
        raise ImageFormatError("zero-dimension image")
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit PGM (maxval 255) is supported, got maxval {maxval}")
    body = raw[pos : pos + width * height]
    if len(body) < width * height:
        raise ImageFormatError("truncated PGM raster")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 1)
    return pixels.astype(np.float64) / 255.0


def load_image(path) -> np.ndarray:
    """Read an 8-bit grayscale/RGB PNG or a binary PGM into ``[0, 1]``."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"P5":
        return _read_pgm(raw)
    if raw[:8] != PNG_MAGIC:
        raise ImageFormatError(f"{path}: not a PNG or binary PGM file")
    try:
        with Image.open(Path(path)) as im:
            mode = im.mode
            if mode not in ("L", "RGB"):
                raise ImageFormatError(f"{path}: unsupported PNG mode {mode!r} (need 8-bit L or RGB)")
            im.load()
            pixels = np.asarray(im, dtype=np.uint8)
    except ImageFormatError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageFormatError(f"{path}: cannot decode PNG ({exc})") from exc
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    if 0 in pixels.shape:
        raise ImageFormatError("zero-dimension image")
    return pixels.astype(np.float64) / 255.0


def quantize8(img: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    """Write an 8-bit PNG (values rounded to the nearest of 256 levels)."""
    img = as_image(img)
    pixels = quantize8(img)
    mode = "L" if img.shape[2] == 1 else "RGB"
    arr = pixels[:, :, 0] if mode == "L" else pixels
    Image.fromarray(arr, mode=mode).save(Path(path), format="PNG")


def write_pgm(pixels: np.ndarray, path) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim == 3:
        pixels = pixels[:, :, 0]
    h, w = pixels.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes())


# ----------------------------------------------------------------------- kernels


def to_grayscale(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, 1|3) image, got shape {img.shape}")
    if img.shape[2] == 1:
        return img
    r, g, b = LUMA_WEIGHTS
    return (r * img[:, :, 0] + g * img[:, :, 1] + b * img[:, :, 2])[:, :, None]


def histogram256(img: np.ndarray) -> Histogram256:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[2] != 1:
            raise ValueError("histogram256 needs a single-channel image")
        img = img[:, :, 0]
    idx = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.int64)
    bins = np.bincount(idx.ravel(), minlength=256)
    return Histogram256(bins=bins, total=int(idx.size))


def _plane(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[2] != 1:
            raise ValueError("expected a single-channel image")
        return img[:, :, 0]
    return img


def sobel_magnitude(img: np.ndarray) -> np.ndarray:
    """Un-normalized 3x3 Sobel gradient magnitude, replicate borders, ``(H, W)``."""
    plane = _plane(img)
    h, w = plane.shape
    p = np.pad(plane, 1, mode="edge")
    # smooth across, then difference: both terms are computed identically,
    # so flat regions give exact zeros
    sv = p[:-2] + 2.0 * p[1:-1] + p[2:]
    sh = p[:, :-2] + 2.0 * p[:, 1:-1] + p[:, 2:]
    gx = sv[:, 2:] - sv[:, :-2]
    gy = sh[2:] - sh[:-2]
    return np.sqrt(gx * gx + gy * gy)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _blur_axis(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = len(kernel) // 2
    n = arr.shape[axis]
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (r, r)
    # Half-sample symmetric extension (d c b a | a b c d): mass conserving.
    padded = np.pad(arr, pad, mode="symmetric")
    out = np.zeros_like(arr, dtype=np.float64)
    for i, kv in enumerate(kernel):
        out += kv * np.take(padded, np.arange(i, i + n), axis=axis)
    return out


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ``ceil(3 sigma)``, any ``(H, W[, C])`` array."""
    kernel = gaussian_kernel1d(sigma)
    arr = np.asarray(img, dtype=np.float64)
    return _blur_axis(_blur_axis(arr, kernel, 0), kernel, 1)


def pack_raw_map(arr: np.ndarray) -> bytes:
    """8-byte header (H, W as little-endian u32) then row-major little-endian f32."""
    arr = np.asarray(arr)
    h, w = arr.shape
    return struct.pack("<II", h, w) + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def unpack_raw_map(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise ImageFormatError("raw map shorter than its header")
    h, w = struct.unpack("<II", buf[:8])
    body = buf[8:]
    if len(body) != 4 * h * w:
        raise ImageFormatError("raw map body size does not match header")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64)
