"""Content-paired two-domain detection scenes and the color-statistics translator.

A scene's object layout is a pure function of ``(seed, split, index)``; the
domain only changes how it is rendered. Source scenes are clean glyphs on a
plain background, target scenes add clutter, blur, a per-channel gain/bias
shift and Gaussian noise.
"""
from __future__ import annotations

import json
import logging
import math
from collections.abc import Iterable
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFilter
from tqdm import tqdm

from . import boxes as box_ops
from .detector import BoxAnnotation
from .errors import ConfigError, DataError, ManifestError


logger = logging.getLogger("detadapt.toydomains")

DOMAINS = ("source", "target")
SPLITS = {"train": 0, "test": 1}
MANIFEST_NAME = "manifest.jsonl"
STATS_NAME = "stats.json"
MIN_STATS_IMAGES = 50

SHAPES = ("circle", "square", "triangle", "diamond", "cross", "ring", "hexagon", "hourglass")
PALETTE = (
    (220, 60, 60),
    (60, 180, 75),
    (65, 105, 225),
    (240, 200, 40),
    (200, 70, 200),
    (40, 190, 200),
    (245, 130, 48),
    (235, 235, 235),
    (128, 0, 0),
    (170, 255, 195),
    (0, 0, 128),
    (128, 128, 0),
    (250, 190, 212),
    (0, 128, 128),
    (155, 100, 40),
    (120, 120, 120),
)
BACKGROUND = (92, 92, 100)


@dataclass(frozen=True)
class CorruptionProfile:
    gain_range: tuple[float, float] = (0.6, 0.9)
    bias_range: tuple[float, float] = (-0.05, 0.0)
    noise_sigma: float = 0.05
    blur_radius: int = 1
    clutter_density: int = 3


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    domain: str = "source"
    split: str = "train"
    image_size: int = 128
    num_classes: int = 8
    min_objects: int = 1
    max_objects: int = 4
    object_size: tuple[float, float] = (0.125, 0.3125)
    profile: CorruptionProfile = field(default_factory=CorruptionProfile)

    def __post_init__(self) -> None:
        if self.domain not in DOMAINS:
            raise ConfigError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {tuple(SPLITS)}, got {self.split!r}")
        if not 1 <= self.num_classes <= len(PALETTE):
            raise ConfigError(f"num_classes must be between 1 and {len(PALETTE)}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 1 <= min_objects <= max_objects")
        lo, hi = self.object_size
        if not 0 < lo <= hi < 1:
            raise ConfigError("object_size must satisfy 0 < low <= high < 1")

    def domain_shift(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel gain and bias of the target rendering, fixed by the seed."""
        rng = np.random.default_rng([self.seed, 0x7A26])
        gain = rng.uniform(*self.profile.gain_range, size=3)
        bias = rng.uniform(*self.profile.bias_range, size=3)
        return gain, bias


@dataclass(frozen=True)
class ManifestRecord:
    image: str
    boxes: tuple[BoxAnnotation, ...] = ()


@dataclass
class DatasetManifest:
    split: str
    records: list[ManifestRecord]
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.records)

    def image_path(self, idx: int) -> Path:
        return self.root / self.records[idx].image

    def image_paths(self) -> list[Path]:
        return [self.root / record.image for record in self.records]


@dataclass(frozen=True)
class DomainStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]


def _glyph_polygon(shape: str, x1: int, y1: int, x2: int, y2: int) -> list[tuple[float, float]]:
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    if shape == "triangle":
        return [(cx, y1), (x2, y2), (x1, y2)]
    if shape == "diamond":
        return [(cx, y1), (x2, cy), (cx, y2), (x1, cy)]
    if shape == "hexagon":
        rx, ry = (x2 - x1) / 2, (y2 - y1) / 2
        return [(cx + rx * math.cos(k * math.pi / 3), cy + ry * math.sin(k * math.pi / 3)) for k in range(6)]
    raise ValueError(shape)


def draw_glyph(draw: ImageDraw.ImageDraw, class_id: int, box: tuple[int, int, int, int], fill) -> None:
    """Render class ``class_id`` inside the inclusive pixel box ``box``."""
    shape = SHAPES[class_id % len(SHAPES)]
    x1, y1, x2, y2 = box
    third_w = max((x2 - x1) // 3, 1)
    third_h = max((y2 - y1) // 3, 1)
    if shape == "circle":
        draw.ellipse(box, fill=fill)
    elif shape == "square":
        draw.rectangle(box, fill=fill)
    elif shape == "ring":
        draw.ellipse(box, outline=fill, width=max((x2 - x1) // 5, 2))
    elif shape == "cross":
        draw.rectangle((x1, y1 + third_h, x2, y2 - third_h), fill=fill)
        draw.rectangle((x1 + third_w, y1, x2 - third_w, y2), fill=fill)
    elif shape == "hourglass":
        cy = (y1 + y2) / 2
        draw.polygon([(x1, y1), (x2, y1), ((x1 + x2) / 2, cy)], fill=fill)
        draw.polygon([(x1, y2), (x2, y2), ((x1 + x2) / 2, cy)], fill=fill)
    else:
        draw.polygon(_glyph_polygon(shape, x1, y1, x2, y2), fill=fill)


def render_glyph_mask(class_id: int, box: BoxAnnotation, image_size: int) -> np.ndarray:
    """Boolean mask of the pixels the glyph of ``box`` paints on an empty canvas."""
    canvas = Image.new("L", (image_size, image_size), 0)
    draw_glyph(ImageDraw.Draw(canvas), class_id, _pixel_box(box), 255)
    return np.asarray(canvas) > 0


def _pixel_box(box: BoxAnnotation) -> tuple[int, int, int, int]:
    return int(box.x1), int(box.y1), int(box.x2) - 1, int(box.y2) - 1


def _layout(spec: SceneSpec, index: int) -> list[BoxAnnotation]:
    rng = np.random.default_rng([spec.seed, SPLITS[spec.split], index, 0])
    size = spec.image_size
    lo = max(int(round(spec.object_size[0] * size)), 4)
    hi = max(int(round(spec.object_size[1] * size)), lo)
    wanted = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    placed: list[BoxAnnotation] = []
    for _ in range(wanted):
        for _attempt in range(50):
            side = int(rng.integers(lo, hi + 1))
            x1 = int(rng.integers(0, size - side + 1))
            y1 = int(rng.integers(0, size - side + 1))
            class_id = int(rng.integers(0, spec.num_classes))
            candidate = BoxAnnotation(class_id, float(x1), float(y1), float(x1 + side), float(y1 + side))
            if all(not _touches(candidate, other) for other in placed):
                placed.append(candidate)
                break
    return placed


def _touches(a: BoxAnnotation, b: BoxAnnotation, margin: float = 2.0) -> bool:
    return not (
        a.x2 + margin <= b.x1 or b.x2 + margin <= a.x1 or a.y2 + margin <= b.y1 or b.y2 + margin <= a.y1
    )


def _draw_clutter(draw: ImageDraw.ImageDraw, spec: SceneSpec, objects: list[BoxAnnotation], rng) -> None:
    size = spec.image_size
    object_boxes = np.array([o.box for o in objects], dtype=np.float64).reshape(-1, 4)
    for _ in range(spec.profile.clutter_density):
        for _attempt in range(20):
            w = int(rng.integers(4, max(size // 6, 5)))
            h = int(rng.integers(4, max(size // 6, 5)))
            x1 = int(rng.integers(0, size - w + 1))
            y1 = int(rng.integers(0, size - h + 1))
            rect = np.array([[x1, y1, x1 + w, y1 + h]], dtype=np.float64)
            if len(object_boxes) and box_ops.pairwise_iou(rect, object_boxes).max() > 0.3:
                continue
            color = tuple(int(c) for c in rng.integers(0, 256, size=3))
            draw.rectangle((x1, y1, x1 + w - 1, y1 + h - 1), fill=color)
            break


def render_scene(spec: SceneSpec, index: int) -> tuple[np.ndarray, list[BoxAnnotation]]:
    """Return ``(uint8 HxWx3 pixels, annotations)`` for scene ``index``."""
    objects = _layout(spec, index)
    size = spec.image_size
    image = Image.new("RGB", (size, size), BACKGROUND)
    draw = ImageDraw.Draw(image)
    style_rng = np.random.default_rng([spec.seed, SPLITS[spec.split], index, 1])

    if spec.domain == "target":
        _draw_clutter(draw, spec, objects, style_rng)
    for obj in objects:
        draw_glyph(draw, obj.class_id, _pixel_box(obj), PALETTE[obj.class_id])

    if spec.domain == "source":
        return np.asarray(image, dtype=np.uint8).copy(), objects

    profile = spec.profile
    if profile.blur_radius > 0:
        image = image.filter(ImageFilter.BoxBlur(profile.blur_radius))
    pixels = np.asarray(image, dtype=np.float64) / 255.0
    gain, bias = spec.domain_shift()
    pixels = pixels * gain + bias
    if profile.noise_sigma > 0:
        pixels = pixels + style_rng.normal(0.0, profile.noise_sigma, size=pixels.shape)
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8), objects


def _render_to_file(spec: SceneSpec, index: int, out_dir: Path) -> ManifestRecord:
    pixels, objects = render_scene(spec, index)
    name = f"{spec.domain}_{spec.split}_{index:05d}.png"
    Image.fromarray(pixels).save(out_dir / name)
    return ManifestRecord(name, tuple(objects))


def generate_dataset(
    spec: SceneSpec,
    count: int,
    out_dir: str | Path,
    workers: int = 1,
    progress: bool = False,
) -> DatasetManifest:
    """Render ``count`` scenes into ``out_dir`` and write their manifest next to them."""
    if count < 1:
        raise ConfigError(f"count must be at least 1, got {count}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc

    indices = range(count)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(
                tqdm(
                    pool.map(_render_to_file, [spec] * count, indices, [out] * count, chunksize=16),
                    total=count,
                    disable=not progress,
                    desc=f"{spec.domain}/{spec.split}",
                )
            )
    else:
        records = [
            _render_to_file(spec, i, out)
            for i in tqdm(indices, disable=not progress, desc=f"{spec.domain}/{spec.split}")
        ]

    manifest = DatasetManifest(spec.split, records, root=out)
    write_manifest(manifest, out / MANIFEST_NAME)
    logger.info("rendered %s %s/%s images into %s", count, spec.domain, spec.split, out)
    return manifest


def _record_to_json(record: ManifestRecord) -> str:
    return json.dumps(
        {
            "image": record.image,
            "boxes": [
                {"class": b.class_id, "x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2} for b in record.boxes
            ],
        }
    )


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(_record_to_json(r) + "\n" for r in manifest.records), encoding="utf-8")
    return path


def _parse_box(raw, line: int, index: int) -> BoxAnnotation:
    try:
        return BoxAnnotation(
            int(raw["class"]), float(raw["x1"]), float(raw["y1"]), float(raw["x2"]), float(raw["y2"])
        )
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"malformed box: {exc}", line=line, index=index) from exc
    except ValueError as exc:
        raise ManifestError(str(exc), line=line, index=index) from exc


def read_manifest(path: str | Path, split: str = "train", check_images: bool = True) -> DatasetManifest:
    """Parse a JSON-lines manifest; image paths resolve relative to the manifest's directory."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    records: list[ManifestRecord] = []
    for line_no, text in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not text.strip():
            continue
        try:
            raw = json.loads(text)
            image = raw["image"]
            raw_boxes = raw["boxes"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ManifestError(f"malformed record: {exc}", line=line_no) from exc
        if not isinstance(image, str) or not isinstance(raw_boxes, list):
            raise ManifestError("'image' must be a string and 'boxes' a list", line=line_no)
        parsed = tuple(_parse_box(b, line_no, i) for i, b in enumerate(raw_boxes))

        if check_images:
            image_path = root / image
            if not image_path.exists():
                raise ManifestError(f"image not found: {image_path}", line=line_no)
            with Image.open(image_path) as im:
                width, height = im.size
            for i, b in enumerate(parsed):
                if b.x1 < 0 or b.y1 < 0 or b.x2 > width or b.y2 > height:
                    raise ManifestError(f"box outside the {width}x{height} image", line=line_no, index=i)
        else:
            for i, b in enumerate(parsed):
                if b.x1 < 0 or b.y1 < 0:
                    raise ManifestError("box has negative coordinates", line=line_no, index=i)
        records.append(ManifestRecord(image, parsed))
    return DatasetManifest(split, records, root=root)


def read_image_list(path: str | Path, split: str = "train") -> DatasetManifest:
    """Read only the ``image`` field of each manifest line; ``boxes`` is never parsed."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    records: list[ManifestRecord] = []
    for line_no, text in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not text.strip():
            continue
        try:
            image = json.loads(text)["image"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ManifestError(f"malformed record: {exc}", line=line_no) from exc
        if not isinstance(image, str):
            raise ManifestError("'image' must be a string", line=line_no)
        if not (root / image).exists():
            raise ManifestError(f"image not found: {root / image}", line=line_no)
        records.append(ManifestRecord(image, ()))
    return DatasetManifest(split, records, root=root)


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def stats_from_images(images: Iterable[np.ndarray]) -> DomainStats:
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for image in images:
        pixels = np.asarray(image, dtype=np.float64).reshape(-1, 3)
        total += pixels.sum(axis=0)
        total_sq += (pixels**2).sum(axis=0)
        count += len(pixels)
    if count == 0:
        raise DataError("cannot compute statistics of an empty image set")
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean**2, 0.0))
    return DomainStats(tuple(float(v) for v in mean), tuple(float(v) for v in std))


def compute_domain_stats(manifest: DatasetManifest) -> DomainStats:
    """Per-channel mean/std pooled over every pixel of every image."""
    if len(manifest) == 0:
        raise DataError("cannot compute statistics of an empty manifest")
    if len(manifest) < MIN_STATS_IMAGES:
        logger.warning("domain statistics from only %s images; translation expects at least %s",
                       len(manifest), MIN_STATS_IMAGES)
    return stats_from_images(load_image(p) for p in manifest.image_paths())


def save_stats(stats: DomainStats, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"mean": list(stats.mean), "std": list(stats.std)}, indent=2), encoding="utf-8")
    return path


def load_stats(path: str | Path) -> DomainStats:
    path = Path(path)
    if not path.exists():
        raise DataError(f"stats file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        mean, std = raw["mean"], raw["std"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"malformed stats file {path}: {exc}") from exc
    if len(mean) != 3 or len(std) != 3:
        raise DataError(f"stats file {path} must hold three channels")
    return DomainStats(tuple(float(v) for v in mean), tuple(float(v) for v in std))


def color_stat_transfer(image: np.ndarray, reference: DomainStats) -> np.ndarray:
    """Match each channel's mean/std to ``reference``; flat channels are only shifted."""
    pixels = np.asarray(image, dtype=np.float64)
    flat = pixels.reshape(-1, 3)
    mu = flat.mean(axis=0)
    sigma = flat.std(axis=0)
    ref_mean = np.asarray(reference.mean)
    ref_std = np.asarray(reference.std)
    out = np.empty_like(pixels)
    for c in range(3):
        if sigma[c] > 1e-12:
            out[..., c] = (pixels[..., c] - mu[c]) / sigma[c] * ref_std[c] + ref_mean[c]
        else:
            out[..., c] = pixels[..., c] - mu[c] + ref_mean[c]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def translate_manifest(manifest: DatasetManifest, stats: DomainStats, out_dir: str | Path) -> DatasetManifest:
    """Write a translated copy of every image; annotations are carried over unchanged."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for record, src in zip(manifest.records, tqdm(manifest.image_paths(), desc="translate", leave=False)):
        translated = color_stat_transfer(load_image(src), stats)
        name = Path(record.image).name
        Image.fromarray(np.round(translated * 255.0).astype(np.uint8)).save(out / name)
        records.append(ManifestRecord(name, record.boxes))
    translated_manifest = DatasetManifest(manifest.split, records, root=out)
    write_manifest(translated_manifest, out / MANIFEST_NAME)
    return translated_manifest
