"""Dataset manifests, image I/O, the synthetic day/night benchmark generator,
and report rendering.

The manifest format is line-oriented text: a version line, a classes line,
then one record per image (``image``/``domain``/``provenance`` lines followed
by ``box`` lines). Paths are stored relative to the manifest's directory
unless absolute. Images travel as (3, H, W) float arrays in [0, 1] and are
stored as lossless 8-bit RGB PNG.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .boxgeom import Box, LabeledBox

MANIFEST_VERSION = 1
DOMAINS = ("source", "target", "generated")


@dataclass
class ManifestEntry:
    image_path: str
    domain: str
    boxes: list[LabeledBox]
    provenance: str = ""


@dataclass
class DatasetManifest:
    """Image records with annotations plus the ordered class vocabulary.

    ``root`` is the directory relative paths resolve against (set on load and
    by generators); it is not part of the serialized form.
    """

    entries: list[ManifestEntry]
    class_names: list[str]
    root: Path = field(default_factory=Path)

    def image_path(self, entry: ManifestEntry) -> Path:
        p = Path(entry.image_path)
        return p if p.is_absolute() else self.root / p


# ---------------------------------------------------------------------------
# image I/O
# ---------------------------------------------------------------------------


def load_image(path: str | Path) -> np.ndarray:
    """Load an RGB image file as a (3, H, W) float32 array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(np.moveaxis(arr, -1, 0))


def save_image(img: np.ndarray, path: str | Path) -> None:
    """Save a (3, H, W) float array in [0, 1] as an 8-bit RGB PNG."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    u8 = np.round(np.moveaxis(arr, 0, -1) * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(u8, "RGB").save(path, format="PNG")


def save_gray8(arr: np.ndarray, path: str | Path) -> None:
    """Save a (H, W) float array in [0, 1] as an 8-bit grayscale PNG."""
    u8 = np.round(np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(u8, "L").save(path, format="PNG")


def image_size(path: str | Path) -> tuple[int, int]:
    """(height, width) from the file header without decoding pixel data."""
    with Image.open(path) as im:
        w, h = im.size
    return h, w


# ---------------------------------------------------------------------------
# manifest serialization
# ---------------------------------------------------------------------------


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    lines = [f"manifest_version {MANIFEST_VERSION}"]
    lines.append("classes " + " ".join(manifest.class_names))
    for e in manifest.entries:
        lines.append(f"image {e.image_path}")
        lines.append(f"domain {e.domain}")
        if e.provenance:
            lines.append(f"provenance {e.provenance}")
        for b in e.boxes:
            bb = b.box
            lines.append(
                f"box {b.class_id} {bb.x_min!r} {bb.y_min!r} {bb.x_max!r} {bb.y_max!r}"
            )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


class ManifestError(ValueError):
    """Malformed or invalid manifest content, with the offending line."""


def load_manifest(path: str | Path, check_images: bool = True) -> DatasetManifest:
    """Parse and validate a manifest file.

    Validation covers: unknown fields, malformed records, box invariants,
    class ids versus the vocabulary, and (when check_images is set) that each
    image path resolves and its boxes lie within the image bounds.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    class_names: list[str] | None = None
    entries: list[ManifestEntry] = []
    current: ManifestEntry | None = None
    version_seen = False

    def fail(lineno: int, msg: str):
        raise ManifestError(f"{path}:{lineno}: {msg}")

    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        if key == "manifest_version":
            if rest.strip() != str(MANIFEST_VERSION):
                fail(lineno, f"unsupported manifest version {rest.strip()!r}")
            version_seen = True
        elif key == "classes":
            class_names = rest.split()
        elif key == "image":
            if not rest:
                fail(lineno, "image record without a path")
            current = ManifestEntry(image_path=rest, domain="", boxes=[])
            entries.append(current)
        elif key == "domain":
            if current is None:
                fail(lineno, "domain line outside an image record")
            if rest not in DOMAINS:
                fail(lineno, f"unknown domain tag {rest!r} (expected one of {DOMAINS})")
            current.domain = rest
        elif key == "provenance":
            if current is None:
                fail(lineno, "provenance line outside an image record")
            current.provenance = rest
        elif key == "box":
            if current is None:
                fail(lineno, "box line outside an image record")
            parts = rest.split()
            if len(parts) != 5:
                fail(lineno, f"box record needs class_id and 4 coordinates, got {rest!r}")
            try:
                class_id = int(parts[0])
                coords = [float(v) for v in parts[1:]]
            except ValueError:
                fail(lineno, f"non-numeric box record {rest!r}")
            try:
                box = Box(*coords)
            except ValueError as exc:
                fail(lineno, str(exc))
            if class_names is None:
                fail(lineno, "box record before the classes line")
            if class_id < 0 or class_id >= len(class_names):
                fail(lineno, f"class_id {class_id} outside vocabulary of {len(class_names)}")
            current.boxes.append(LabeledBox(box, class_id))
        else:
            fail(lineno, f"unknown field {key!r}")

    if not version_seen:
        raise ManifestError(f"{path}: missing manifest_version line")
    if class_names is None:
        raise ManifestError(f"{path}: missing classes line")
    manifest = DatasetManifest(entries=entries, class_names=class_names, root=root)
    for e in entries:
        if not e.domain:
            raise ManifestError(f"{path}: image {e.image_path} has no domain line")
        if check_images:
            img_path = manifest.image_path(e)
            if not img_path.exists():
                raise ManifestError(f"{path}: image file not found: {img_path}")
            h, w = image_size(img_path)
            for b in e.boxes:
                bb = b.box
                if bb.x_min < 0 or bb.y_min < 0 or bb.x_max > w or bb.y_max > h:
                    raise ManifestError(
                        f"{path}: box {bb.as_tuple()} outside {w}x{h} image {e.image_path}"
                    )
    return manifest


# ---------------------------------------------------------------------------
# synthetic day/night benchmark
# ---------------------------------------------------------------------------


@dataclass
class SyntheticParams:
    """Knobs for the desk-scale day/night scene generator.

    Scenes are not meant to look real: cars are rectangles (with a roof
    stripe and wheels; headlight dots at night) on a textured background,
    which gives a controllable day/night feature gap and exactly known boxes.
    """

    image_size: int = 64
    min_cars: int = 1
    max_cars: int = 5
    car_width: tuple[int, int] = (14, 32)
    car_height: tuple[int, int] = (9, 20)
    # cars sit brighter than the background in both domains so the day/night
    # gap is a (large) photometric shift rather than a contrast inversion
    day_background: tuple[float, float] = (0.45, 0.60)
    night_background: tuple[float, float] = (0.03, 0.08)
    day_car_value: tuple[float, float] = (0.65, 0.95)
    night_car_value: tuple[float, float] = (0.16, 0.30)
    texture_sigma: float = 0.015


def _render_scene(rng: np.random.Generator, params: SyntheticParams, night: bool):
    s = params.image_size
    lo, hi = params.night_background if night else params.day_background
    base = rng.uniform(lo, hi)
    img = np.full((3, s, s), base, dtype=np.float64)
    img += np.linspace(-0.03, 0.03, s)[None, :, None]  # mild vertical gradient
    img += rng.normal(0.0, params.texture_sigma, img.shape)

    boxes: list[LabeledBox] = []
    n_cars = int(rng.integers(params.min_cars, params.max_cars + 1))
    placed: list[tuple[int, int, int, int]] = []
    for _ in range(n_cars):
        for _attempt in range(40):
            w = int(rng.integers(params.car_width[0], params.car_width[1] + 1))
            h = int(rng.integers(params.car_height[0], params.car_height[1] + 1))
            x0 = int(rng.integers(0, s - w + 1))
            y0 = int(rng.integers(0, s - h + 1))
            if all(
                max(0, min(x0 + w, px1) - max(x0, px0)) * max(0, min(y0 + h, py1) - max(y0, py0)) == 0
                for px0, py0, px1, py1 in placed
            ):
                break
        else:
            continue  # crowded scene; place fewer cars
        placed.append((x0, y0, x0 + w, y0 + h))
        vlo, vhi = params.night_car_value if night else params.day_car_value
        color = rng.uniform(vlo, vhi, 3)
        img[:, y0 : y0 + h, x0 : x0 + w] = color[:, None, None]
        roof = max(1, h // 3)
        img[:, y0 : y0 + roof, x0 : x0 + w] = color[:, None, None] * 0.75
        # wheels
        wy = min(y0 + h - 2, s - 2)
        for wx in (x0 + 1, x0 + w - 3):
            img[:, wy : wy + 2, max(0, wx) : max(0, wx) + 2] = 0.02
        if night:
            # two bright headlight dots inside the body
            hy = y0 + h - max(3, h // 3)
            for hx in (x0 + 1, x0 + w - 3):
                img[:, hy : hy + 2, max(0, hx) : max(0, hx) + 2] = rng.uniform(0.85, 1.0)
        boxes.append(LabeledBox(Box(float(x0), float(y0), float(x0 + w), float(y0 + h)), 0))

    # distractors: lane lines plus small bright dots at night (street lights)
    for _ in range(int(rng.integers(0, 3))):
        y = int(rng.integers(0, s - 2))
        img[:, y : y + 1, :] = 0.8 if not night else 0.12
    if night:
        for _ in range(int(rng.integers(1, 4))):
            x0 = int(rng.integers(0, s - 2))
            y0 = int(rng.integers(0, s - 2))
            if all(not (px0 <= x0 < px1 and py0 <= y0 < py1) for px0, py0, px1, py1 in placed):
                img[:, y0 : y0 + 2, x0 : x0 + 2] = rng.uniform(0.8, 1.0)

    return np.clip(img, 0.0, 1.0), boxes


def generate_synthetic(
    n_train_day: int,
    n_test_night: int,
    params: SyntheticParams,
    seed: int,
    out_dir: str | Path,
) -> tuple[DatasetManifest, DatasetManifest]:
    """Write a seeded day training set and night test set under out_dir.

    Returns (day_manifest, night_manifest); files land in images/day and
    images/night with manifests day.manifest / night.manifest.
    """
    if n_train_day < 1 or n_test_night < 1:
        raise ValueError("need at least one image per split")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    manifests = []
    for split, n, night in (("day", n_train_day, False), ("night", n_test_night, True)):
        entries = []
        for i in range(n):
            img, boxes = _render_scene(rng, params, night)
            rel = f"images/{split}/{i:04d}.png"
            save_image(img, out_dir / rel)
            entries.append(
                ManifestEntry(
                    image_path=rel,
                    domain="target" if night else "source",
                    boxes=boxes,
                    provenance=f"synthetic {split} seed={seed} index={i}",
                )
            )
        manifest = DatasetManifest(entries=entries, class_names=["car"], root=out_dir)
        save_manifest(manifest, out_dir / f"{split}.manifest")
        manifests.append(manifest)
    return manifests[0], manifests[1]


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------


def emit_report(
    metrics: list[tuple[str, "MetricsReport"]],
    curves: list[tuple[str, tuple[list[float], list[float]]]],
    heatmaps: list[np.ndarray],
    out_dir: str | Path,
) -> list[Path]:
    """Render a metrics table (text), PR-curve plot and heatmap montage.

    ``metrics`` rows become one table line each (F1/Recall/Precision/mAP
    columns); ``curves`` entries are (label, (recalls, precisions)); heatmaps
    are (H, W) arrays in [0, 1]. Empty curve/heatmap lists skip those files.
    Returns the list of files written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    header = f"{'configuration':<48} {'F1-Score':>9} {'Recall':>8} {'Precision':>10} {'mAP':>8}"
    lines = [header, "-" * len(header)]
    for label, rep in metrics:
        lines.append(
            f"{label:<48} {rep.f1:>9.4f} {rep.recall * 100:>7.2f}% {rep.precision * 100:>9.2f}% {rep.map_score * 100:>7.2f}%"
        )
    table_path = out_dir / "metrics_table.txt"
    table_path.write_text("\n".join(lines) + "\n")
    written.append(table_path)

    if curves:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 4))
        for label, (recalls, precisions) in curves:
            ax.plot(recalls, precisions, label=label)
        ax.set_xlabel("Recall")
        ax.set_ylabel("Precision")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.05)
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=7)
        curve_path = out_dir / "pr_curves.png"
        fig.savefig(curve_path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(curve_path)

    if heatmaps:
        tile = max(m.shape[0] for m in heatmaps), max(m.shape[1] for m in heatmaps)
        cols = min(8, len(heatmaps))
        rows = -(-len(heatmaps) // cols)
        montage = np.full((rows * (tile[0] + 2) - 2, cols * (tile[1] + 2) - 2), 1.0)
        for k, m in enumerate(heatmaps):
            r, c = divmod(k, cols)
            y0, x0 = r * (tile[0] + 2), c * (tile[1] + 2)
            montage[y0 : y0 + m.shape[0], x0 : x0 + m.shape[1]] = np.clip(m, 0.0, 1.0)
        montage_path = out_dir / "heatmaps.png"
        save_gray8(montage, montage_path)
        written.append(montage_path)

    return written
