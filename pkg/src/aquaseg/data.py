"""COCO-style annotation ingestion, the 7-category underwater taxonomy,
deterministic dataset splitting, and a synthetic underwater-scene generator
for desk-scale training and testing.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import (
    BinaryMask,
    Box,
    Polygon,
    RunLength,
    bbox_from_mask,
    decode_rle,
    encode_rle,
    rasterize_polygon,
)

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    """Base class for annotation-file contract violations."""


class CocoParseError(DatasetError):
    """File is not readable as COCO-style annotation JSON."""


class ReferentialIntegrityError(DatasetError):
    """Annotation references a missing image or category."""


@dataclass(frozen=True)
class Category:
    id: int
    name: str


CATEGORIES: tuple[Category, ...] = (
    Category(1, "fish"),
    Category(2, "reefs"),
    Category(3, "aquatic plants"),
    Category(4, "wrecks/ruins"),
    Category(5, "human divers"),
    Category(6, "robots"),
    Category(7, "sea-floor"),
)

_CATEGORY_IDS = frozenset(c.id for c in CATEGORIES)


@dataclass(frozen=True)
class ImageRecord:
    id: int
    file_name: str
    height: int
    width: int

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise DatasetError(f"image {self.id} has non-positive dimensions")


@dataclass(frozen=True)
class InstanceAnnotation:
    """One ground-truth salient instance."""

    id: int
    image_id: int
    category_id: int
    segmentation: tuple[Polygon, ...] | RunLength
    box: Box
    area: int

    def mask(self, height: int, width: int) -> BinaryMask:
        """Rasterize the stored segmentation onto an (height, width) grid."""
        if isinstance(self.segmentation, RunLength):
            return decode_rle(self.segmentation)
        combined = np.zeros((height, width), dtype=bool)
        for poly in self.segmentation:
            combined |= rasterize_polygon(poly, height, width).array
        return BinaryMask(combined)


@dataclass(frozen=True)
class Dataset:
    """Immutable bundle of categories, images, and annotations."""

    images: tuple[ImageRecord, ...]
    annotations: tuple[InstanceAnnotation, ...]
    categories: tuple[Category, ...] = CATEGORIES
    split: str = "none"

    def __post_init__(self):
        image_ids = {im.id for im in self.images}
        if len(image_ids) != len(self.images):
            raise DatasetError("duplicate image ids")
        cat_ids = {c.id for c in self.categories}
        for ann in self.annotations:
            if ann.image_id not in image_ids:
                raise ReferentialIntegrityError(
                    f"annotation {ann.id} references missing image {ann.image_id}"
                )
            if ann.category_id not in cat_ids:
                raise ReferentialIntegrityError(
                    f"annotation {ann.id} references missing category {ann.category_id}"
                )

    def image_by_id(self, image_id: int) -> ImageRecord:
        for im in self.images:
            if im.id == image_id:
                return im
        raise KeyError(image_id)

    def annotations_for(self, image_id: int) -> tuple[InstanceAnnotation, ...]:
        return tuple(a for a in self.annotations if a.image_id == image_id)


def _parse_segmentation(seg, height: int, width: int):
    if isinstance(seg, dict):
        rle = RunLength.from_json(seg)
        if (rle.height, rle.width) != (height, width):
            raise DatasetError(
                f"RLE size {rle.height}x{rle.width} does not match image "
                f"{height}x{width}"
            )
        return rle
    if isinstance(seg, list) and seg and isinstance(seg[0], (list, tuple)):
        return tuple(Polygon.from_flat(part) for part in seg)
    if isinstance(seg, list):
        return (Polygon.from_flat(seg),)
    raise DatasetError(f"unsupported segmentation form: {type(seg).__name__}")


def _normalized_annotation(raw: dict, image: ImageRecord) -> InstanceAnnotation:
    seg = _parse_segmentation(raw["segmentation"], image.height, image.width)
    ann_id = int(raw["id"])

    placeholder = InstanceAnnotation(
        id=ann_id,
        image_id=image.id,
        category_id=int(raw["category_id"]),
        segmentation=seg,
        box=Box(0, 0, 0, 0),
        area=0,
    )
    mask = placeholder.mask(image.height, image.width)
    true_area = mask.area()
    if true_area == 0:
        raise DatasetError(f"annotation {ann_id} rasterizes to an empty mask")

    area = int(raw["area"]) if "area" in raw and raw["area"] is not None else true_area
    if abs(area - true_area) > 1:
        log.warning(
            "annotation %d: stored area %d deviates from rasterized %d; recomputed",
            ann_id,
            area,
            true_area,
        )
        area = true_area

    tight = bbox_from_mask(mask)
    if "bbox" in raw and raw["bbox"] is not None:
        box = Box.from_xywh(raw["bbox"])
        contains = (
            box.x_min <= tight.x_min
            and box.y_min <= tight.y_min
            and box.x_max >= tight.x_max
            and box.y_max >= tight.y_max
        )
        if not contains:
            log.warning("annotation %d: stored bbox does not contain mask; recomputed", ann_id)
            box = tight
    else:
        box = tight

    return dataclasses.replace(placeholder, box=box, area=area)


def load_coco(path) -> Dataset:
    """Load a COCO-style annotation file into an immutable Dataset.

    Polygons are retained verbatim; missing area/bbox fields are recomputed
    from the rasterized mask, and stored values deviating by more than one
    pixel are recomputed with a warning.
    """
    path = Path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CocoParseError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or "images" not in doc or "annotations" not in doc:
        raise CocoParseError(f"{path}: missing 'images'/'annotations' sections")

    images = tuple(
        ImageRecord(
            id=int(im["id"]),
            file_name=str(im["file_name"]),
            height=int(im["height"]),
            width=int(im["width"]),
        )
        for im in doc["images"]
    )
    by_id = {im.id: im for im in images}

    annotations = []
    for raw in doc["annotations"]:
        image_id = int(raw["image_id"])
        if image_id not in by_id:
            raise ReferentialIntegrityError(
                f"annotation {raw.get('id')} references missing image {image_id}"
            )
        if int(raw["category_id"]) not in _CATEGORY_IDS:
            raise ReferentialIntegrityError(
                f"annotation {raw.get('id')} references missing category "
                f"{raw['category_id']}"
            )
        annotations.append(_normalized_annotation(raw, by_id[image_id]))

    return Dataset(images=images, annotations=tuple(annotations))


def _annotation_to_json(ann: InstanceAnnotation) -> dict:
    if isinstance(ann.segmentation, RunLength):
        seg = ann.segmentation.to_json()
    else:
        seg = [poly.to_flat() for poly in ann.segmentation]
    return {
        "id": ann.id,
        "image_id": ann.image_id,
        "category_id": ann.category_id,
        "segmentation": seg,
        "bbox": ann.box.to_xywh(),
        "area": ann.area,
        "iscrowd": 0,
    }


def save_coco(dataset: Dataset, path) -> None:
    """Write a self-contained COCO-style JSON file (categories duplicated)."""
    doc = {
        "images": [
            {"id": im.id, "file_name": im.file_name, "height": im.height, "width": im.width}
            for im in dataset.images
        ],
        "annotations": [_annotation_to_json(a) for a in dataset.annotations],
        "categories": [{"id": c.id, "name": c.name} for c in dataset.categories],
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def split_dataset(
    dataset: Dataset, ratios: tuple[float, float, float] = (7, 1.5, 1.5), seed: int = 0
) -> tuple[Dataset, Dataset, Dataset]:
    """Partition images into train/val/test by shuffled image ids.

    Val and test sizes are floored proportional counts; the remainder goes to
    train, keeping it the largest split. Deterministic for a fixed seed.
    """
    if any(r <= 0 for r in ratios):
        raise DatasetError("split ratios must be positive")
    if not dataset.images:
        raise DatasetError("cannot split an empty dataset")

    total = sum(ratios)
    n = len(dataset.images)
    n_val = int(n * ratios[1] / total)
    n_test = int(n * ratios[2] / total)

    ids = sorted(im.id for im in dataset.images)
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(n)]
    val_ids = frozenset(order[:n_val])
    test_ids = frozenset(order[n_val : n_val + n_test])

    def subset(keep, tag):
        images = tuple(im for im in dataset.images if im.id in keep)
        annotations = tuple(a for a in dataset.annotations if a.image_id in keep)
        return Dataset(
            images=images,
            annotations=annotations,
            categories=dataset.categories,
            split=tag,
        )

    train_ids = frozenset(order[n_val + n_test :])
    return (
        subset(train_ids, "train"),
        subset(val_ids, "val"),
        subset(test_ids, "test"),
    )


# --- synthetic scene generation ---------------------------------------------

# One bright, distinctive base color per category so the classification path
# has a learnable signal.
CATEGORY_COLORS: tuple[tuple[int, int, int], ...] = (
    (230, 90, 60),  # fish
    (240, 170, 60),  # reefs
    (80, 220, 90),  # aquatic plants
    (150, 110, 220),  # wrecks/ruins
    (240, 240, 120),  # human divers
    (240, 100, 200),  # robots
    (120, 200, 230),  # sea-floor
)


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic underwater scene generator."""

    image_size: int = 64
    min_instances: int = 1
    max_instances: int = 3
    shapes: tuple[str, ...] = ("ellipse", "blob")
    attenuation: tuple[float, float, float] = (0.5, 0.85, 1.0)
    noise_level: float = 3.0
    min_radius: int = 6
    max_radius: int = 14
    category_rule: str = "color"  # "color": category follows the palette entry

    def __post_init__(self):
        r, g, b = self.attenuation
        if not all(0 < a <= 1 for a in (r, g, b)):
            raise DatasetError("attenuation factors must lie in (0, 1]")
        if r > g or r > b:
            raise DatasetError("red attenuation must not exceed green or blue")
        if self.min_instances < 0 or self.max_instances < self.min_instances:
            raise DatasetError("bad instance count range")
        if self.category_rule not in ("color", "shape"):
            raise DatasetError(f"unknown category rule {self.category_rule!r}")


def _ellipse_mask(size: int, cx, cy, rx, ry) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return ((xx + 0.5 - cx) / rx) ** 2 + ((yy + 0.5 - cy) / ry) ** 2 <= 1.0


def _blob_polygon(rng, cx, cy, radius) -> Polygon:
    k = int(rng.integers(5, 9))
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=k))
    radii = radius * rng.uniform(0.6, 1.0, size=k)
    xs = np.maximum(cx + radii * np.cos(angles), 0.0)
    ys = np.maximum(cy + radii * np.sin(angles), 0.0)
    return Polygon(np.stack([xs, ys], axis=1))


def generate_synthetic_scene(
    cfg: SynthConfig, seed: int
) -> tuple[np.ndarray, tuple[InstanceAnnotation, ...]]:
    """Render one deterministic underwater-looking scene.

    Returns a (H, W, 3) uint8 image and its instance annotations (image_id 0;
    callers building a corpus reassign ids). Instances never overlap; ones
    that cannot be placed after bounded retries are dropped.
    """
    rng = np.random.default_rng(seed)
    size = cfg.image_size

    base = rng.uniform(120, 190, size=3)
    gradient = np.linspace(-12, 12, size)[:, None, None]
    scene = np.clip(
        np.broadcast_to(base, (size, size, 3)) + gradient, 0, 255
    ).astype(np.float64)

    occupied = np.zeros((size, size), dtype=bool)
    annotations = []
    count = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    ann_id = 1
    for _ in range(count):
        placed = None
        for _attempt in range(30):
            shape = cfg.shapes[int(rng.integers(0, len(cfg.shapes)))]
            radius = float(rng.uniform(cfg.min_radius, cfg.max_radius))
            margin = radius + 1
            cx = float(rng.uniform(margin, size - margin))
            cy = float(rng.uniform(margin, size - margin))
            if shape == "ellipse":
                rx = radius
                ry = float(rng.uniform(0.6, 1.0)) * radius
                mask_arr = _ellipse_mask(size, cx, cy, rx, ry)
                segmentation = None  # stored as RLE below
            else:
                poly = _blob_polygon(rng, cx, cy, radius)
                mask_arr = rasterize_polygon(poly, size, size).array
                segmentation = (poly,)
            if mask_arr.sum() < 12 or (mask_arr & occupied).any():
                continue
            placed = (mask_arr, segmentation, shape)
            break
        if placed is None:
            continue

        mask_arr, segmentation, shape = placed
        color_idx = int(rng.integers(0, len(CATEGORY_COLORS)))
        color = np.array(CATEGORY_COLORS[color_idx], dtype=np.float64)
        color = np.clip(color + rng.uniform(-15, 15, size=3), 0, 255)
        scene[mask_arr] = color

        occupied |= mask_arr
        mask = BinaryMask(mask_arr)
        if segmentation is None:
            segmentation = encode_rle(mask)
        if cfg.category_rule == "color":
            category_id = color_idx + 1
        else:
            category_id = 1 if shape == "ellipse" else 2
        annotations.append(
            InstanceAnnotation(
                id=ann_id,
                image_id=0,
                category_id=category_id,
                segmentation=segmentation,
                box=bbox_from_mask(mask),
                area=mask.area(),
            )
        )
        ann_id += 1

    atten = np.asarray(cfg.attenuation, dtype=np.float64)
    scene = scene * atten[None, None, :]
    scene = scene + rng.normal(0, cfg.noise_level, size=scene.shape)
    image = np.clip(scene, 0, 255).astype(np.uint8)
    return image, tuple(annotations)


@dataclass(frozen=True)
class Scene:
    """One image with its annotations, resolved into memory."""

    record: ImageRecord
    image: np.ndarray
    annotations: tuple[InstanceAnnotation, ...]


def generate_synthetic_corpus(
    cfg: SynthConfig, count: int, seed: int = 0
) -> tuple[Dataset, list[Scene]]:
    """Generate `count` scenes with corpus-unique image/annotation ids."""
    images = []
    annotations = []
    scenes = []
    next_ann_id = 1
    for i in range(count):
        image, anns = generate_synthetic_scene(cfg, seed=seed * 1_000_003 + i)
        record = ImageRecord(
            id=i + 1,
            file_name=f"scene_{i + 1:05d}.png",
            height=cfg.image_size,
            width=cfg.image_size,
        )
        images.append(record)
        renumbered = []
        for ann in anns:
            renumbered.append(
                dataclasses.replace(ann, id=next_ann_id, image_id=record.id)
            )
            next_ann_id += 1
        annotations.extend(renumbered)
        scenes.append(Scene(record, image, tuple(renumbered)))
    dataset = Dataset(images=tuple(images), annotations=tuple(annotations))
    return dataset, scenes


def write_scenes(scenes, images_dir) -> None:
    images_dir = Path(images_dir)
    images_dir.mkdir(parents=True, exist_ok=True)
    for scene in scenes:
        Image.fromarray(scene.image).save(images_dir / scene.record.file_name)


def load_scenes(dataset: Dataset, images_dir) -> list[Scene]:
    """Resolve a dataset against an image directory.

    Unreadable images are skipped with a warning so corpus-level consumers can
    report them rather than abort.
    """
    images_dir = Path(images_dir)
    scenes = []
    for record in dataset.images:
        path = images_dir / record.file_name
        try:
            with Image.open(path) as img:
                array = np.asarray(img.convert("RGB"))
        except (FileNotFoundError, OSError) as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
            continue
        scenes.append(Scene(record, array, dataset.annotations_for(record.id)))
    return scenes
