"""Fundus image preprocessing: colour normalisation, square crop, resize, augmentation.

Real-valued images are float arrays laid out ``(H, W, 3)`` until the final
pipeline step, which returns ``(3, side, side)`` float32 for the model.
"""

from __future__ import annotations

import math
import re
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

BACKGROUND_THRESHOLD = 10 / 255
NORMALIZE_GAIN = 4.0
NORMALIZE_OFFSET = 128.0
BLUR_WIDTH_DIVISOR = 30.0
MIN_BBOX_FRACTION = 0.01


# ---------------------------------------------------------------- PPM I/O


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary (P6) 8-bit PPM as a ``(H, W, 3)`` uint8 array."""
    blob = Path(path).read_bytes()
    # header tokens may be separated by whitespace and '#' comments
    tokens: list[bytes] = []
    pos = 0
    token_re = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")
    while len(tokens) < 4:
        m = token_re.match(blob, pos)
        if m is None:
            raise ValueError(f"{path}: truncated PPM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported, maxval={maxval}")
    pos += 1  # single whitespace byte after maxval
    need = width * height * 3
    data = blob[pos : pos + need]
    if len(data) != need:
        raise ValueError(f"{path}: pixel payload has {len(data)} bytes, expected {need}")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path: str | Path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) uint8 pixels, got {pixels.shape} {pixels.dtype}")
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels).tobytes())


# ---------------------------------------------------------------- filters


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur over the two spatial axes, replicating borders."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    k = gaussian_kernel(sigma)
    out = correlate1d(np.asarray(img, dtype=np.float64), k, axis=0, mode="nearest")
    return correlate1d(out, k, axis=1, mode="nearest")


def color_normalize(raw: np.ndarray, sigma: float | None = None) -> np.ndarray:
    """Subtract the local average colour and recentre on mid-grey.

    ``raw`` is uint8 ``(H, W, 3)``; returns float64 in [0, 1]. The blur
    width defaults to ``width / 30``.
    """
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {raw.shape}")
    if sigma is None:
        sigma = raw.shape[1] / BLUR_WIDTH_DIVISOR
    img = raw.astype(np.float64)
    out = NORMALIZE_GAIN * (img - gaussian_blur(img, sigma)) + NORMALIZE_OFFSET
    return np.clip(out, 0.0, 255.0) / 255.0


def square_box(mask_source: np.ndarray, threshold: float = BACKGROUND_THRESHOLD) -> tuple[int, int, int]:
    """(top, left, side) of the square crop around the non-background region."""
    h, w = mask_source.shape[:2]
    fg = mask_source.max(axis=2) > threshold if mask_source.ndim == 3 else mask_source > threshold
    rows = np.flatnonzero(fg.any(axis=1))
    cols = np.flatnonzero(fg.any(axis=0))
    if rows.size == 0 or cols.size == 0:
        bbox_area = 0
    else:
        bbox_area = (rows[-1] - rows[0] + 1) * (cols[-1] - cols[0] + 1)
    if bbox_area < MIN_BBOX_FRACTION * h * w:
        side = min(h, w)
        return (h - side) // 2, (w - side) // 2, side
    bh = rows[-1] - rows[0] + 1
    bw = cols[-1] - cols[0] + 1
    side = int(min(bh, bw, h, w))
    cy = (rows[0] + rows[-1] + 1) / 2.0
    cx = (cols[0] + cols[-1] + 1) / 2.0
    top = int(np.clip(round(cy - side / 2.0), 0, h - side))
    left = int(np.clip(round(cx - side / 2.0), 0, w - side))
    return top, left, side


def crop_to_square(img: np.ndarray, reference: np.ndarray | None = None) -> np.ndarray:
    """Crop to a square centred on the retinal disc.

    The disc is located by thresholding ``reference`` (defaults to ``img``).
    Normalised images have a grey background, so the pipeline passes the
    raw image, scaled to [0, 1], as the reference.
    """
    top, left, side = square_box(img if reference is None else reference)
    return img[top : top + side, left : left + side]


def _bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray, fill: float | None) -> np.ndarray:
    """Sample ``(H, W, C)`` at float coordinates; ``fill=None`` clamps to the edge."""
    h, w = img.shape[:2]
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = (ys - y0)[..., None]
    wx = (xs - x0)[..., None]
    out = np.zeros(ys.shape + img.shape[2:], dtype=np.float64)
    for dy, fy in ((0, 1.0 - wy), (1, wy)):
        for dx, fx in ((0, 1.0 - wx), (1, wx)):
            yy = y0 + dy
            xx = x0 + dx
            if fill is None:
                vals = img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            else:
                inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
                vals = np.where(inside[..., None], img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)], fill)
            out += fy * fx * vals
    return out


def resize(img: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize of a square ``(S, S, C)`` image to ``(side, side, C)``."""
    h, w = img.shape[:2]
    if h != w:
        raise ValueError(f"resize expects a square image, got {h}x{w}")
    if side < 1:
        raise ValueError("side must be positive")
    if side == h:
        return np.asarray(img, dtype=np.float64).copy()
    scale = h / side
    coords = (np.arange(side) + 0.5) * scale - 0.5
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    return _bilinear_sample(np.asarray(img, dtype=np.float64), ys, xs, fill=None)


def preprocess_pipeline(raw: np.ndarray, side: int) -> np.ndarray:
    """Normalise, crop to square, scale; returns float32 ``(3, side, side)`` in [0, 1]."""
    raw = np.asarray(raw)
    normalized = color_normalize(raw)
    cropped = crop_to_square(normalized, reference=raw.astype(np.float64) / 255.0)
    scaled = resize(cropped, side)
    return np.clip(scaled, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32)


# ---------------------------------------------------------------- augmentation


def rotate(img_chw: np.ndarray, degrees: float, fill: float = 0.0) -> np.ndarray:
    """Rotate ``(C, S, S)`` about its centre with bilinear sampling."""
    c, h, w = img_chw.shape
    theta = math.radians(degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64) - cy, np.arange(w, dtype=np.float64) - cx, indexing="ij")
    # inverse mapping: output pixel -> source pixel
    src_y = cos_t * yy - sin_t * xx + cy
    src_x = sin_t * yy + cos_t * xx + cx
    # snap float noise so exact multiples of 90 degrees stay exact permutations
    src_y = np.where(np.abs(src_y - np.round(src_y)) < 1e-9, np.round(src_y), src_y)
    src_x = np.where(np.abs(src_x - np.round(src_x)) < 1e-9, np.round(src_x), src_x)
    out = _bilinear_sample(img_chw.transpose(1, 2, 0), src_y, src_x, fill=fill)
    return out.transpose(2, 0, 1)


def augment(
    img: np.ndarray,
    rng: np.random.Generator,
    angle: float | None = None,
    hflip: bool | None = None,
    vflip: bool | None = None,
) -> np.ndarray:
    """Random rotation in [-180, 180] degrees, then random horizontal/vertical flips.

    Any of ``angle``, ``hflip``, ``vflip`` may be forced; the rng is still
    advanced by the same amount so the stream stays aligned.
    """
    if img.ndim != 3 or img.shape[1] != img.shape[2]:
        raise ValueError(f"augment expects (C, S, S), got {img.shape}")
    draws = rng.random(3)
    if angle is None:
        angle = -180.0 + 360.0 * draws[0]
    if hflip is None:
        hflip = bool(draws[1] < 0.5)
    if vflip is None:
        vflip = bool(draws[2] < 0.5)
    out = rotate(img, angle) if angle != 0 else np.asarray(img, dtype=np.float64)
    if hflip:
        out = out[:, :, ::-1]
    if vflip:
        out = out[:, ::-1, :]
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=True)
