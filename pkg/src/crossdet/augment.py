"""Photometric source-domain augmentation: Gaussian noise, random occlusion
masks, and brightness/contrast/saturation jitter, plus the 4x dataset
expansion (original + one copy per operation).

No operation moves pixels, so annotation boxes are copied verbatim onto every
augmented image. Images are (3, H, W) float arrays in [0, 1]; every op is
pure given (image, params, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import datakit

_GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass
class AugmentParams:
    noise_sigma: float = 0.05
    mask_count: tuple[int, int] = (1, 3)  # inclusive per-image range
    mask_size_fraction: float = 0.2
    brightness_range: tuple[float, float] = (0.7, 1.3)
    contrast_range: tuple[float, float] = (0.7, 1.3)
    saturation_range: tuple[float, float] = (0.7, 1.3)
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= self.mask_count[0] <= self.mask_count[1]:
            raise ValueError(f"invalid mask_count range {self.mask_count}")
        if not 0.0 <= self.mask_size_fraction < 1.0:
            raise ValueError("mask_size_fraction must be in [0, 1)")
        for lo, hi in (self.brightness_range, self.contrast_range, self.saturation_range):
            if not 0.0 < lo <= hi:
                raise ValueError("factor ranges must be positive intervals")


def gaussian_noise(img: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Add N(0, sigma^2) per pixel and clamp to [0, 1]."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return img.copy()
    rng = np.random.default_rng(seed)
    noisy = img + rng.normal(0.0, sigma, img.shape)
    return np.clip(noisy, 0.0, 1.0).astype(img.dtype)


def random_mask(img: np.ndarray, params: AugmentParams, seed: int) -> np.ndarray:
    """Zero out randomly placed rectangles; annotations are left untouched.

    The number of masks is drawn from params.mask_count, each side is at most
    mask_size_fraction times the matching image side, and masks may overlap
    object boxes (occlusion is the point).
    """
    rng = np.random.default_rng(seed)
    _, h, w = img.shape
    out = img.copy()
    count = int(rng.integers(params.mask_count[0], params.mask_count[1] + 1))
    max_h = max(1, int(params.mask_size_fraction * h))
    max_w = max(1, int(params.mask_size_fraction * w))
    for _ in range(count):
        mh = int(rng.integers(1, max_h + 1))
        mw = int(rng.integers(1, max_w + 1))
        y0 = int(rng.integers(0, h - mh + 1))
        x0 = int(rng.integers(0, w - mw + 1))
        out[:, y0 : y0 + mh, x0 : x0 + mw] = 0.0
    return out


def color_jitter(img: np.ndarray, params: AugmentParams, seed: int) -> np.ndarray:
    """Scale brightness, contrast and saturation by factors drawn from the
    configured ranges (applied in that order), then clamp to [0, 1].

    Contrast pivots on the scalar mean of the grayscale image; saturation
    blends between the per-pixel grayscale and the color image.
    """
    rng = np.random.default_rng(seed)
    f_b = rng.uniform(*params.brightness_range)
    f_c = rng.uniform(*params.contrast_range)
    f_s = rng.uniform(*params.saturation_range)
    out = img.astype(np.float64) * f_b
    gray_mean = np.tensordot(_GRAY_WEIGHTS, out, axes=(0, 0)).mean()
    out = gray_mean + (out - gray_mean) * f_c
    gray = np.tensordot(_GRAY_WEIGHTS, out, axes=(0, 0))
    out = gray[None] + (out - gray[None]) * f_s
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


_OPS = ("noise", "mask", "jitter")


def _derived_seed(root_seed: int, index: int, op_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([root_seed, index, op_id])


def expand_dataset(
    manifest: datakit.DatasetManifest,
    params: AugmentParams,
    out_dir: str | Path,
) -> datakit.DatasetManifest:
    """Expand a labeled manifest fourfold: original + noised + masked + jittered.

    Augmented images are written under out_dir/images; each copy keeps its
    source annotations byte-for-byte. A JSON-lines log mapping source ids to
    derived ids and sampled parameters is written to out_dir/augment_log.jsonl.
    The output manifest is saved as out_dir/augmented.manifest and returned.
    """
    if not manifest.entries:
        raise ValueError("cannot expand an empty manifest")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    entries: list[datakit.ManifestEntry] = []
    log_lines: list[str] = []
    for idx, entry in enumerate(manifest.entries):
        img = datakit.load_image(manifest.image_path(entry))
        entries.append(replace(entry, image_path=str(manifest.image_path(entry))))
        stem = Path(entry.image_path).stem
        for op_id, op in enumerate(_OPS):
            seed_seq = _derived_seed(params.seed, idx, op_id)
            seed = int(seed_seq.generate_state(1)[0])
            if op == "noise":
                aug = gaussian_noise(img, params.noise_sigma, seed)
                detail = {"sigma": params.noise_sigma}
            elif op == "mask":
                aug = random_mask(img, params, seed)
                detail = {
                    "count_range": list(params.mask_count),
                    "size_fraction": params.mask_size_fraction,
                }
            else:
                aug = color_jitter(img, params, seed)
                detail = {
                    "brightness_range": list(params.brightness_range),
                    "contrast_range": list(params.contrast_range),
                    "saturation_range": list(params.saturation_range),
                }
            name = f"{stem}_{op}.png"
            datakit.save_image(aug, img_dir / name)
            entries.append(
                datakit.ManifestEntry(
                    image_path=f"images/{name}",
                    domain=entry.domain,
                    boxes=list(entry.boxes),
                    provenance=f"{op} of {entry.image_path}",
                )
            )
            log_lines.append(
                json.dumps(
                    {"source": entry.image_path, "derived": f"images/{name}", "op": op, "seed": seed, **detail},
                    sort_keys=True,
                )
            )
    (out_dir / "augment_log.jsonl").write_text("\n".join(log_lines) + "\n")
    out = datakit.DatasetManifest(entries=entries, class_names=list(manifest.class_names), root=out_dir)
    datakit.save_manifest(out, out_dir / "augmented.manifest")
    return out
