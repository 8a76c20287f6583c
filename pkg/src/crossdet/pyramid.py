"""Laplacian pyramid construction/reconstruction and the high-resolution
translation path.

The translator consumes fixed low-resolution inputs, so large frames are
decomposed into a band-pass pyramid, only the coarse top level is translated,
and the untouched band-pass levels restore the original high-frequency
content on reconstruction. Arrays are (C, H, W) float in [0, 1]; internal
arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import cv2
import numpy as np

# classic 5-tap binomial blur kernel
_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _to_hwc(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(img, 0, -1))


def _to_chw(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        img = img[:, :, None]
    return np.ascontiguousarray(np.moveaxis(img, -1, 0))


def _blur(img_hwc: np.ndarray, gain: float = 1.0) -> np.ndarray:
    k = _KERNEL * gain
    out = cv2.sepFilter2D(img_hwc, -1, k, k, borderType=cv2.BORDER_REFLECT)
    if out.ndim == 2:  # cv2 drops the axis of single-channel images
        out = out[:, :, None]
    return out


def _downsample(img_hwc: np.ndarray) -> np.ndarray:
    return _blur(img_hwc)[::2, ::2]


_mask_cache: dict[tuple[int, int], np.ndarray] = {}


def _upsample_weights(target_hw: tuple[int, int]) -> np.ndarray:
    """Blur response of the zero-stuffed sample mask; dividing by it makes the
    upsampler exactly constant-preserving, borders included."""
    if target_hw not in _mask_cache:
        h, w = target_hw
        mask = np.zeros((h, w, 1), dtype=np.float64)
        mask[::2, ::2] = 1.0
        _mask_cache[target_hw] = _blur(mask, gain=2.0).reshape(h, w, 1)
    return _mask_cache[target_hw]


def _upsample(img_hwc: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    h, w = target_hw
    out = np.zeros((h, w, img_hwc.shape[2]), dtype=img_hwc.dtype)
    out[::2, ::2] = img_hwc
    # zero insertion keeps 1/4 of the samples, so the blur gain doubles per axis
    return _blur(out, gain=2.0) / _upsample_weights(target_hw)


@dataclass
class LaplacianPyramid:
    """Band-pass levels (finest first) plus the coarsest residual image.

    Each level's spatial dims are the ceil-half of the previous level's; the
    band shapes record the upsample targets, so reconstruction of an untouched
    pyramid reproduces the source exactly up to float rounding.
    """

    bands: list[np.ndarray]
    top: np.ndarray

    @property
    def level_count(self) -> int:
        return len(self.bands) + 1


def build(img: np.ndarray, levels: int) -> LaplacianPyramid:
    """Decompose a (C, H, W) image into a pyramid with ``levels`` levels.

    ``levels`` counts the top, so levels=1 returns the image itself with no
    band-pass levels. Raises ValueError when the image is too small to halve
    levels-1 times.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if img.ndim != 3:
        raise ValueError(f"expected (C, H, W) image, got shape {img.shape}")
    min_dim = min(img.shape[1], img.shape[2])
    if min_dim < 2 ** (levels - 1):
        raise ValueError(f"image of min dim {min_dim} cannot support {levels} levels")
    cur = _to_hwc(img.astype(np.float64))
    bands = []
    for _ in range(levels - 1):
        nxt = _downsample(cur)
        bands.append(_to_chw(cur - _upsample(nxt, cur.shape[:2])))
        cur = nxt
    return LaplacianPyramid(bands, _to_chw(cur))


def reconstruct(p: LaplacianPyramid) -> np.ndarray:
    """Collapse a pyramid back into a (C, H, W) image, top down."""
    cur = _to_hwc(p.top)
    for band in reversed(p.bands):
        band_hwc = _to_hwc(band)
        if band_hwc.shape[2] != cur.shape[2]:
            raise ValueError("pyramid levels disagree in channel count")
        cur = _upsample(cur, band_hwc.shape[:2]) + band_hwc
    return _to_chw(cur)


def resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize a (C, H, W) image; area-average when shrinking, bilinear otherwise."""
    hwc = _to_hwc(img.astype(np.float64))
    shrinking = height * width < hwc.shape[0] * hwc.shape[1]
    interp = cv2.INTER_AREA if shrinking else cv2.INTER_LINEAR
    out = cv2.resize(hwc, (width, height), interpolation=interp)
    if out.ndim == 2:
        out = out[:, :, None]
    return _to_chw(out)


def translate_via_pyramid(
    img: np.ndarray,
    translate_fn: Callable[[np.ndarray], np.ndarray],
    low_res: int = 256,
) -> np.ndarray:
    """Translate a large (C, H, W) image through its pyramid top.

    The frame is squashed to S x S (S = min side), decomposed until the top is
    at most ceil(low_res * 270 / 256) on a side, and the top is resized to
    exactly low_res x low_res for ``translate_fn`` (a [0,1] -> [0,1] image
    map). The translated top is resized back, replaces the original top, and
    the pyramid is reconstructed and resized to the input dims.
    """
    if img.ndim != 3:
        raise ValueError(f"expected (C, H, W) image, got shape {img.shape}")
    _, h, w = img.shape
    side = min(h, w)
    if side < low_res:
        raise ValueError(f"image min side {side} is below the translator input {low_res}")
    top_limit = -(-low_res * 270 // 256)  # ceil; 270 for the default 256
    square = resize(img, side, side) if (h, w) != (side, side) else img.astype(np.float64)
    levels = 1
    top_side = side
    while top_side > top_limit:
        top_side = -(-top_side // 2)
        levels += 1
    p = build(square, levels)
    low = resize(p.top, low_res, low_res)
    translated = np.asarray(translate_fn(np.clip(low, 0.0, 1.0)), dtype=np.float64)
    if translated.shape != low.shape:
        raise ValueError(f"translator returned shape {translated.shape}, expected {low.shape}")
    p.top = resize(translated, p.top.shape[1], p.top.shape[2])
    out = reconstruct(p)
    if (h, w) != (side, side):
        out = resize(out, h, w)
    return np.clip(out, 0.0, 1.0)


def translate_highres(
    img_1920x1080: np.ndarray,
    translate_fn: Callable[[np.ndarray], np.ndarray],
) -> np.ndarray:
    """Full-HD path: 1920x1080 -> 1080x1080 -> pyramid -> translated top -> back."""
    if img_1920x1080.shape[1:] != (1080, 1920):
        raise ValueError(f"expected (C, 1080, 1920) input, got {img_1920x1080.shape}")
    return translate_via_pyramid(img_1920x1080, translate_fn, low_res=256)
