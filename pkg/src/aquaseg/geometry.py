"""Bit-exact mask primitives: binary grids, polygons, run-length codes, boxes.

Everything here is a pure function on immutable values. Masks are boolean
numpy grids in row-major (H, W) layout; run-length codes scan column-major
to stay compatible with the uncompressed COCO convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    """Base class for mask/polygon contract violations."""


class DegeneratePolygonError(GeometryError):
    """Polygon has fewer than 3 vertices or non-finite coordinates."""


class MaskShapeError(GeometryError):
    """Operands do not share grid dimensions."""


class CorruptRunLengthError(GeometryError):
    """Run-length counts are inconsistent with the stated grid size."""


class EmptyMaskError(GeometryError):
    """Operation requires at least one set pixel."""


@dataclass(frozen=True)
class BinaryMask:
    """A boolean pixel grid of shape (height, width)."""

    array: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.array, dtype=bool)
        if arr.ndim != 2:
            raise MaskShapeError(f"mask must be 2-D, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "array", arr)

    @property
    def height(self) -> int:
        return self.array.shape[0]

    @property
    def width(self) -> int:
        return self.array.shape[1]

    def area(self) -> int:
        """Number of set pixels."""
        return int(self.array.sum())

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.array.shape == other.array.shape and bool(
            np.array_equal(self.array, other.array)
        )


@dataclass(frozen=True)
class Polygon:
    """Closed polygon with vertices in continuous pixel coordinates (x, y)."""

    vertices: np.ndarray

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64)
        if verts.ndim != 2 or verts.shape[1] != 2 or verts.shape[0] < 3:
            raise DegeneratePolygonError(
                f"polygon needs >= 3 (x, y) vertices, got shape {verts.shape}"
            )
        if not np.isfinite(verts).all() or (verts < 0).any():
            raise DegeneratePolygonError("vertices must be finite and non-negative")
        verts.setflags(write=False)
        object.__setattr__(self, "vertices", verts)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Polygon):
            return NotImplemented
        return self.vertices.shape == other.vertices.shape and bool(
            np.array_equal(self.vertices, other.vertices)
        )

    @classmethod
    def from_flat(cls, coords) -> "Polygon":
        """Build from a flat [x1, y1, x2, y2, ...] list (COCO segmentation style)."""
        flat = np.asarray(coords, dtype=np.float64)
        if flat.ndim != 1 or flat.size % 2 != 0:
            raise DegeneratePolygonError("flat coordinate list must have even length")
        return cls(flat.reshape(-1, 2))

    def to_flat(self) -> list:
        return [float(v) for v in self.vertices.reshape(-1)]


@dataclass(frozen=True)
class RunLength:
    """Column-major run-length code; counts alternate starting with a zero-run."""

    height: int
    width: int
    counts: tuple = field(default=())

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if any(c < 0 for c in counts):
            raise CorruptRunLengthError("negative run length")
        if any(c == 0 for c in counts[1:]):
            raise CorruptRunLengthError("only the leading zero-run may be empty")
        if sum(counts) != self.height * self.width:
            raise CorruptRunLengthError(
                f"counts sum to {sum(counts)}, expected {self.height * self.width}"
            )
        object.__setattr__(self, "counts", counts)

    def to_json(self) -> dict:
        """COCO uncompressed-RLE shape: {"size": [H, W], "counts": [...]}."""
        return {"size": [self.height, self.width], "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: dict) -> "RunLength":
        try:
            h, w = obj["size"]
            counts = obj["counts"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptRunLengthError(f"bad RLE object: {obj!r}") from exc
        return cls(int(h), int(w), tuple(counts))


@dataclass(frozen=True)
class Box:
    """Axis-aligned box; max coordinates are exclusive pixel extents."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise GeometryError(f"inverted box {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def area(self) -> float:
        return self.width * self.height

    def to_xywh(self) -> list:
        """COCO bbox convention [x, y, w, h]."""
        return [self.x_min, self.y_min, self.width, self.height]

    @classmethod
    def from_xywh(cls, xywh) -> "Box":
        x, y, w, h = (float(v) for v in xywh)
        return cls(x, y, x + w, y + h)


def rasterize_polygon(poly: Polygon, height: int, width: int) -> BinaryMask:
    """Rasterize a polygon: a pixel is set iff its center is inside (even-odd rule).

    Pixel (row r, col c) has center (c + 0.5, r + 0.5). Crossing parity is
    accumulated over all edges; vertices shared by two edges are counted once
    by the half-open `(y1 > py) != (y2 > py)` test.
    """
    if height <= 0 or width <= 0:
        raise GeometryError("grid dimensions must be positive")
    px = np.arange(width, dtype=np.float64) + 0.5
    py = np.arange(height, dtype=np.float64) + 0.5
    inside = np.zeros((height, width), dtype=bool)
    verts = poly.vertices
    n = verts.shape[0]
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        if y1 == y2:
            continue
        crosses_row = (y1 > py) != (y2 > py)
        if not crosses_row.any():
            continue
        x_at_row = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses_row[:, None] & (px[None, :] < x_at_row[:, None])
    return BinaryMask(inside)


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union of two same-shape masks; 0.0 when both empty."""
    if a.array.shape != b.array.shape:
        raise MaskShapeError(f"shape mismatch {a.array.shape} vs {b.array.shape}")
    inter = int(np.count_nonzero(a.array & b.array))
    union = int(np.count_nonzero(a.array | b.array))
    if union == 0:
        return 0.0
    return inter / union


def encode_rle(mask: BinaryMask) -> RunLength:
    """Encode a mask as alternating column-major run lengths (zero-run first)."""
    flat = mask.array.flatten(order="F")
    if flat.size == 0:
        return RunLength(mask.height, mask.width, ())
    boundaries = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], boundaries, [flat.size]))
    counts = np.diff(edges).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return RunLength(mask.height, mask.width, tuple(counts))


def decode_rle(rle: RunLength) -> BinaryMask:
    """Invert :func:`encode_rle`; bit-exact roundtrip."""
    flat = np.zeros(rle.height * rle.width, dtype=bool)
    pos = 0
    value = False
    for count in rle.counts:
        if value:
            flat[pos : pos + count] = True
        pos += count
        value = not value
    return BinaryMask(flat.reshape((rle.width, rle.height)).T)


def bbox_from_mask(mask: BinaryMask) -> Box:
    """Tight axis-aligned box over set pixels, max-exclusive."""
    rows = np.any(mask.array, axis=1)
    cols = np.any(mask.array, axis=0)
    if not rows.any():
        raise EmptyMaskError("cannot box an empty mask")
    y_idx = np.flatnonzero(rows)
    x_idx = np.flatnonzero(cols)
    return Box(
        x_min=float(x_idx[0]),
        y_min=float(y_idx[0]),
        x_max=float(x_idx[-1] + 1),
        y_max=float(y_idx[-1] + 1),
    )


def box_iou(a: Box, b: Box) -> float:
    """IoU of two boxes; 0.0 when the union is degenerate."""
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area() + b.area() - inter
    if union <= 0:
        return 0.0
    return inter / union
