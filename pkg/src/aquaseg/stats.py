"""Dataset characterization: color-contrast measures, channel intensities,
instance size/count distributions, and the center-bias heatmap.

Histograms are 64 bins per channel, concatenated to one normalized 192-bin
vector; marginal binning keeps small-region histograms well populated. The
contrast measure is D = -ln(BC) with the Bhattacharyya coefficient clamped
at 1e-12 so disjoint supports stay finite.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import Scene
from .geometry import BinaryMask

log = logging.getLogger(__name__)

DEFAULT_BINS = 64
COEFF_FLOOR = 1e-12
CENTER_CANVAS = 256


class EmptyRegionError(ValueError):
    """A histogram or contrast was requested over zero pixels."""


class HistogramLayoutError(ValueError):
    """Operands do not share a bin layout."""


@dataclass(frozen=True)
class Histogram:
    """Concatenated per-channel color histogram, normalized to sum 1."""

    bins_per_channel: int
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1 or vals.size != 3 * self.bins_per_channel:
            raise HistogramLayoutError(
                f"expected {3 * self.bins_per_channel} values, got shape {vals.shape}"
            )
        if (vals < 0).any():
            raise HistogramLayoutError("histogram weights must be non-negative")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)


def _bin_pixels(pixels: np.ndarray, bins: int) -> np.ndarray:
    """Histogram an (n, 3) uint8 pixel block into 3*bins normalized weights."""
    values = np.zeros(3 * bins, dtype=np.float64)
    for ch in range(3):
        idx = (pixels[:, ch].astype(np.int64) * bins) // 256
        values[ch * bins : (ch + 1) * bins] = np.bincount(idx, minlength=bins)
    return values / values.sum()


def rgb_histogram(image: np.ndarray, mask: BinaryMask, bins_per_channel: int = DEFAULT_BINS) -> Histogram:
    """Histogram of the pixels under `mask`, per channel then concatenated."""
    image = np.asarray(image)
    if image.shape[:2] != mask.array.shape:
        raise HistogramLayoutError(
            f"image {image.shape[:2]} vs mask {mask.array.shape}"
        )
    pixels = image[mask.array]
    if pixels.size == 0:
        raise EmptyRegionError("mask selects no pixels")
    return Histogram(bins_per_channel, _bin_pixels(pixels, bins_per_channel))


def bhattacharyya_distance(p, q) -> float:
    """-ln of the Bhattacharyya coefficient, clamped to stay finite.

    Accepts Histogram objects or plain 1-D weight vectors.
    """
    pv = p.values if isinstance(p, Histogram) else np.asarray(p, dtype=np.float64)
    qv = q.values if isinstance(q, Histogram) else np.asarray(q, dtype=np.float64)
    if pv.shape != qv.shape:
        raise HistogramLayoutError(f"bin layouts differ: {pv.shape} vs {qv.shape}")
    coeff = float(np.sqrt(pv * qv).sum())
    return -float(np.log(max(coeff, COEFF_FLOOR)))


def global_contrast(
    image: np.ndarray,
    instance_mask: BinaryMask,
    all_instance_masks,
    bins_per_channel: int = DEFAULT_BINS,
) -> float:
    """Contrast between one instance and the non-salient background.

    The background is the complement of the union of every salient mask in
    the image, so overlapping siblings never leak into it.
    """
    union = np.zeros_like(instance_mask.array)
    for m in all_instance_masks:
        union |= m.array
    background = BinaryMask(~union)
    if background.area() == 0:
        raise EmptyRegionError("salient masks cover the whole image")
    fg = rgb_histogram(image, instance_mask, bins_per_channel)
    bg = rgb_histogram(image, background, bins_per_channel)
    return bhattacharyya_distance(fg, bg)


def _boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Set pixels with at least one unset in-bounds 4-neighbor."""
    unset_neighbor = np.zeros_like(mask)
    unset_neighbor[:-1, :] |= ~mask[1:, :]
    unset_neighbor[1:, :] |= ~mask[:-1, :]
    unset_neighbor[:, :-1] |= ~mask[:, 1:]
    unset_neighbor[:, 1:] |= ~mask[:, :-1]
    return mask & unset_neighbor


def local_contrast(
    image: np.ndarray, mask: BinaryMask, bins_per_channel: int = DEFAULT_BINS
) -> float:
    """Mean boundary-patch contrast.

    For every boundary pixel, its 5x5 patch (clipped to the image) is split
    by mask membership and the two pixel populations are compared.
    """
    image = np.asarray(image)
    arr = mask.array
    if image.shape[:2] != arr.shape:
        raise HistogramLayoutError(f"image {image.shape[:2]} vs mask {arr.shape}")
    boundary = np.argwhere(_boundary_pixels(arr))
    if boundary.size == 0:
        raise EmptyRegionError("mask has no boundary pixels")

    h, w = arr.shape
    distances = []
    for r, c in boundary:
        r0, r1 = max(0, r - 2), min(h, r + 3)
        c0, c1 = max(0, c - 2), min(w, c + 3)
        patch = image[r0:r1, c0:c1].reshape(-1, 3)
        membership = arr[r0:r1, c0:c1].reshape(-1)
        inside = patch[membership]
        outside = patch[~membership]
        if inside.size == 0 or outside.size == 0:
            continue
        p = Histogram(bins_per_channel, _bin_pixels(inside, bins_per_channel))
        q = Histogram(bins_per_channel, _bin_pixels(outside, bins_per_channel))
        distances.append(bhattacharyya_distance(p, q))
    if not distances:
        raise EmptyRegionError("no boundary patch had pixels on both sides")
    return float(np.mean(distances))


def channel_intensity(image: np.ndarray) -> tuple[float, float, float]:
    """Arithmetic per-channel means over all pixels."""
    image = np.asarray(image)
    if image.size == 0:
        raise EmptyRegionError("empty image")
    means = image.reshape(-1, 3).mean(axis=0)
    return (float(means[0]), float(means[1]), float(means[2]))


@dataclass(frozen=True)
class ContrastReport:
    """Per-instance global/local contrast values, aligned by annotation id."""

    annotation_ids: tuple
    global_values: np.ndarray
    local_values: np.ndarray


@dataclass(frozen=True)
class CorpusStats:
    """Corpus-level aggregates over a list of scenes."""

    image_channel_means: np.ndarray  # (n_images, 3)
    density_bin_edges: np.ndarray
    channel_densities: np.ndarray  # (3, n_bins), each integrating to 1
    area_fractions: np.ndarray  # one entry per instance
    below_1pct: int
    mid_band: int
    above_30pct: int
    count_histogram: np.ndarray  # index = instances per image
    center_bias: np.ndarray  # (CENTER_CANVAS, CENTER_CANVAS) int64

    @property
    def total_instances(self) -> int:
        return int(self.area_fractions.size)


def _resample_nearest(mask: np.ndarray, canvas: int) -> np.ndarray:
    h, w = mask.shape
    rows = (np.arange(canvas) * h) // canvas
    cols = (np.arange(canvas) * w) // canvas
    return mask[np.ix_(rows, cols)]


def _scene_partial(scene: Scene, canvas: int):
    h, w = scene.record.height, scene.record.width
    means = channel_intensity(scene.image)
    fractions = []
    grid = np.zeros((canvas, canvas), dtype=np.int64)
    for ann in scene.annotations:
        mask = ann.mask(h, w)
        fractions.append(mask.area() / (h * w))
        grid += _resample_nearest(mask.array, canvas).astype(np.int64)
    return means, fractions, len(scene.annotations), grid


def corpus_statistics(
    scenes, canvas: int = CENTER_CANVAS, density_bins: int = 32, workers: int = 1
) -> CorpusStats:
    """Aggregate per-image and per-instance measurements over a corpus.

    Accumulation is commutative (integer counts and sums), so fanning out
    over `workers` threads never changes the result.
    """
    scenes = list(scenes)
    if not scenes:
        raise EmptyRegionError("no scenes to aggregate")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(lambda s: _scene_partial(s, canvas), scenes))
    else:
        partials = [_scene_partial(s, canvas) for s in scenes]

    all_means = np.array([p[0] for p in partials], dtype=np.float64)
    fractions = np.array(
        [f for p in partials for f in p[1]], dtype=np.float64
    )
    counts = [p[2] for p in partials]
    grid = np.zeros((canvas, canvas), dtype=np.int64)
    for p in partials:
        grid += p[3]

    count_hist = np.bincount(np.asarray(counts, dtype=np.int64))
    edges = np.linspace(0, 255, density_bins + 1)
    densities = np.stack(
        [
            np.histogram(all_means[:, ch], bins=edges, density=True)[0]
            for ch in range(3)
        ]
    )

    below = int((fractions < 0.01).sum())
    above = int((fractions > 0.30).sum())
    mid = int(fractions.size - below - above)
    return CorpusStats(
        image_channel_means=all_means,
        density_bin_edges=edges,
        channel_densities=densities,
        area_fractions=fractions,
        below_1pct=below,
        mid_band=mid,
        above_30pct=above,
        count_histogram=count_hist,
        center_bias=grid,
    )


def contrast_report(scenes, bins_per_channel: int = DEFAULT_BINS) -> ContrastReport:
    """Global and local contrast for every instance across the corpus.

    Instances whose contrast is undefined (e.g. mask covering the image) are
    skipped with a warning.
    """
    ids, glob, loc = [], [], []
    for scene in scenes:
        h, w = scene.record.height, scene.record.width
        masks = [ann.mask(h, w) for ann in scene.annotations]
        for ann, mask in zip(scene.annotations, masks):
            try:
                g = global_contrast(scene.image, mask, masks, bins_per_channel)
                l = local_contrast(scene.image, mask, bins_per_channel)
            except EmptyRegionError as exc:
                log.warning("annotation %d skipped in contrast report: %s", ann.id, exc)
                continue
            ids.append(ann.id)
            glob.append(g)
            loc.append(l)
    return ContrastReport(
        annotation_ids=tuple(ids),
        global_values=np.asarray(glob, dtype=np.float64),
        local_values=np.asarray(loc, dtype=np.float64),
    )
