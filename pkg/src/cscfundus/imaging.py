"""Pixel-level primitives for fundus photographs.

Images are ``uint8`` arrays of shape ``(height, width, 3)`` in RGB order;
single-channel planes are ``uint8`` arrays of shape ``(height, width)``.
Every operation that produces pixels rounds half away from zero.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image

from .ellipse import Ellipse, interior_mask

PathLike = Union[str, Path]


def round_half_away(x):
    """Round half away from zero (``np.round`` rounds half to even)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def to_uint8(x) -> np.ndarray:
    return np.clip(round_half_away(x), 0, 255).astype(np.uint8)


def check_image(img: np.ndarray) -> np.ndarray:
    if not isinstance(img, np.ndarray) or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB array, got shape {getattr(img, 'shape', None)}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image must be at least 1x1")
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {img.dtype}")
    return img


# -- I/O ---------------------------------------------------------------------


def read_image(path: PathLike) -> np.ndarray:
    """Read a PNG or binary PPM file as an RGB ``uint8`` array.

    Alpha channels are discarded; grayscale files are replicated to RGB.
    """
    with Image.open(path) as im:
        im.load()
        if im.mode != "RGB":
            im = im.convert("RGB")
        return np.asarray(im, dtype=np.uint8).copy()


def write_image(path: PathLike, img: np.ndarray) -> Path:
    """Write ``img`` as PNG or PPM (P6), chosen by file extension."""
    check_image(img)
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pnm") else "PNG"
    # no PNG metadata so identical pixels give identical bytes
    Image.fromarray(img).save(path, format=fmt)
    return path


# -- intensity and equalization ---------------------------------------------


def intensity_plane(img: np.ndarray) -> np.ndarray:
    """Mean of the three channels, rounded: ``round((r + g + b) / 3)``."""
    check_image(img)
    s = img.astype(np.int64).sum(axis=2)
    # integer form of floor(s/3 + 1/2)
    return ((2 * s + 3) // 6).astype(np.uint8)


def equalization_lut(values: np.ndarray) -> Optional[np.ndarray]:
    """Histogram-equalization lookup table for a flat array of 8-bit values.

    Returns ``None`` when every value is identical (the mapping would
    divide by zero); callers then leave the data unchanged.
    """
    values = np.asarray(values)
    n = values.size
    if n == 0:
        raise ValueError("empty input")
    cdf = np.cumsum(np.bincount(values.ravel(), minlength=256)).astype(np.int64)
    cdf_min = int(cdf[np.flatnonzero(cdf)[0]])
    den = n - cdf_min
    if den == 0:
        return None
    num = np.clip(cdf - cdf_min, 0, None) * 255
    # exact integer round-half-up of num / den
    return ((2 * num + den) // (2 * den)).astype(np.uint8)


def equalize_gray(ch: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Histogram-equalize a single channel.

    Args:
        ch: ``uint8`` plane of shape (H, W).
        mask: optional boolean (H, W) array. When given, the histogram is
            built from masked pixels only and only those pixels are remapped.

    Returns:
        A new ``uint8`` plane.
    """
    ch = np.asarray(ch)
    if ch.size == 0:
        raise ValueError("empty input")
    if ch.dtype != np.uint8:
        raise ValueError(f"expected uint8 values, got {ch.dtype}")
    if mask is None:
        lut = equalization_lut(ch)
        return ch.copy() if lut is None else lut[ch]
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != ch.shape:
        raise ValueError("mask shape does not match channel")
    out = ch.copy()
    lut = equalization_lut(ch[mask])
    if lut is not None:
        out[mask] = lut[ch[mask]]
    return out


def shift_intensity(rgb, old_intensity, new_intensity) -> np.ndarray:
    """Move pixels from one intensity to another without changing hue.

    Darkening scales all channels by ``new / old``. Brightening moves each
    channel toward white by the fraction ``(new - old) / (255 - old)``,
    which cannot leave the RGB gamut. Pixels with zero intensity are left
    as they are. Works on broadcastable arrays; returns rounded ``uint8``.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    i0 = np.asarray(old_intensity, dtype=np.float64)[..., None]
    i1 = np.asarray(new_intensity, dtype=np.float64)[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(i0 > 0, i1 / i0, 1.0)
        frac = np.where(i0 < 255, (i1 - i0) / (255.0 - i0), 0.0)
    down = alpha * rgb
    up = rgb + (255.0 - rgb) * frac
    out = np.where(alpha <= 1.0, down, up)
    out = np.where(i0 > 0, out, rgb)
    return to_uint8(out)


def equalize_color_hue_preserving(img: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Equalize the mean-intensity plane and carry the change into RGB.

    With ``mask`` only the masked (FOV) pixels enter the histogram and only
    they are modified.
    """
    check_image(img)
    inten = intensity_plane(img)
    eq = equalize_gray(inten, mask)
    out = shift_intensity(img, inten, eq)
    if mask is not None:
        out[~np.asarray(mask, dtype=bool)] = img[~np.asarray(mask, dtype=bool)]
    return out


# -- geometry ----------------------------------------------------------------


def mask_outside_ellipse(img: np.ndarray, e: Ellipse) -> np.ndarray:
    """Black out every pixel whose center lies outside ``e``."""
    check_image(img)
    inside = interior_mask(img.shape[0], img.shape[1], e)
    out = img.copy()
    out[~inside] = 0
    return out


def ellipse_bbox(e: Ellipse, width: int, height: int) -> tuple[int, int, int, int]:
    """Inclusive pixel box ``(x0, y0, x1, y1)`` of ``e`` clipped to the image.

    Box edges are ``round(center -/+ half_extent)``.
    """
    e.validate()
    hx, hy = e.half_extents()
    x0, x1 = int(round_half_away(e.cx - hx)), int(round_half_away(e.cx + hx))
    y0, y1 = int(round_half_away(e.cy - hy)), int(round_half_away(e.cy + hy))
    if x1 < 0 or y1 < 0 or x0 > width - 1 or y0 > height - 1:
        raise ValueError("ellipse bounding box does not intersect the image")
    return max(x0, 0), max(y0, 0), min(x1, width - 1), min(y1, height - 1)


def crop_to_ellipse_bbox(img: np.ndarray, e: Ellipse) -> np.ndarray:
    check_image(img)
    x0, y0, x1, y1 = ellipse_bbox(e, img.shape[1], img.shape[0])
    return img[y0 : y1 + 1, x0 : x1 + 1].copy()


def _bilinear_taps(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize with pixel-center alignment and edge clamping."""
    check_image(img)
    if out_w < 1 or out_h < 1:
        raise ValueError("target dimensions must be >= 1")
    h, w = img.shape[:2]
    if (w, h) == (out_w, out_h):
        return img.copy()
    x0, x1, wx = _bilinear_taps(w, out_w)
    y0, y1, wy = _bilinear_taps(h, out_h)
    f = img.astype(np.float64)
    rows = f[y0] * (1 - wy)[:, None, None] + f[y1] * wy[:, None, None]
    out = rows[:, x0] * (1 - wx)[None, :, None] + rows[:, x1] * wx[None, :, None]
    return to_uint8(out)
