"""Few-shot dataset machinery: annotation ingestion, base/novel splits,
deterministic K-shot sampling, Gaussian shot masking, and image tiling.

Annotations use DOTA-style text labels, one file per image, each line
"x1 y1 x2 y2 x3 y3 x4 y4 category difficult". Quads are refit to oriented
boxes on ingestion. Randomized operations use numpy's PCG64 generator
seeded explicitly, so selections reproduce across runs and platforms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import OrientedBox, quad_to_obb


@dataclass(frozen=True)
class ImageInfo:
    image_id: str
    width: int
    height: int
    path: str = ""


@dataclass(frozen=True)
class Instance:
    instance_id: int
    image_id: str
    category_id: int
    box: OrientedBox
    difficult: bool = False


@dataclass(frozen=True)
class DatasetIndex:
    """Immutable view of a dataset: ordered categories, images, instances."""

    categories: Tuple[str, ...]
    images: Tuple[ImageInfo, ...]
    instances: Tuple[Instance, ...]

    def __post_init__(self):
        image_ids = {im.image_id for im in self.images}
        seen = set()
        for inst in self.instances:
            if inst.image_id not in image_ids:
                raise ValueError(f"instance {inst.instance_id} references unknown image {inst.image_id}")
            if not 0 <= inst.category_id < len(self.categories):
                raise ValueError(f"instance {inst.instance_id} has invalid category {inst.category_id}")
            if inst.instance_id in seen:
                raise ValueError(f"duplicate instance id {inst.instance_id}")
            seen.add(inst.instance_id)

    def instances_on(self, image_id: str) -> List[Instance]:
        return [i for i in self.instances if i.image_id == image_id]


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint base/novel category-id sets."""

    base_categories: frozenset
    novel_categories: frozenset

    def __post_init__(self):
        if self.base_categories & self.novel_categories:
            raise ValueError("base and novel categories must be disjoint")


@dataclass(frozen=True)
class EpisodeSpec:
    """K-shot sampling request over a category set."""

    k: int
    seed: int
    categories: frozenset

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")


class AnnotationError(ValueError):
    """Raised on malformed label text; carries offending line numbers."""

    def __init__(self, problems: List[Tuple[int, str]]):
        self.problems = problems
        lines = "; ".join(f"line {ln}: {msg}" for ln, msg in problems)
        super().__init__(f"malformed annotation ({lines})")


def parse_annotations(
    label_text: str,
    image: ImageInfo,
    categories: Dict[str, int],
    first_instance_id: int = 0,
) -> List[Instance]:
    """Parse one image's DOTA-style label text into instances.

    Unknown category names are appended to `categories` (mutated in place).
    Malformed lines raise AnnotationError naming every offending line.
    """
    instances: List[Instance] = []
    problems: List[Tuple[int, str]] = []
    next_id = first_instance_id
    for lineno, line in enumerate(label_text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith(("imagesource", "gsd", "#")):
            continue
        tokens = line.split()
        if len(tokens) != 10:
            problems.append((lineno, f"expected 10 fields, got {len(tokens)}"))
            continue
        try:
            coords = [float(t) for t in tokens[:8]]
        except ValueError:
            problems.append((lineno, "non-numeric coordinate"))
            continue
        name = tokens[8]
        try:
            difficult = bool(int(tokens[9]))
        except ValueError:
            problems.append((lineno, f"bad difficult flag {tokens[9]!r}"))
            continue
        try:
            box = quad_to_obb(list(zip(coords[0::2], coords[1::2])))
        except ValueError as exc:
            problems.append((lineno, str(exc)))
            continue
        if name not in categories:
            categories[name] = len(categories)
        instances.append(Instance(next_id, image.image_id, categories[name], box, difficult))
        next_id += 1
    if problems:
        raise AnnotationError(problems)
    return instances


def split_dataset(
    index: DatasetIndex, split: SplitSpec
) -> Tuple[DatasetIndex, DatasetIndex]:
    """Partition by category: (base index, novel-eligible index).

    Base categories must exist in the dataset. Images containing both base
    and novel instances appear on both sides; the novel instances on the
    base side are simply absent there (they are masked at fine-tuning time
    by the shot-masking pipeline, not silently kept as background).
    """
    n_cat = len(index.categories)
    for cid in sorted(set(split.base_categories) | set(split.novel_categories)):
        if not 0 <= cid < n_cat:
            raise ValueError(f"split references unknown category id {cid}")

    def subset(cat_ids: frozenset) -> DatasetIndex:
        insts = tuple(i for i in index.instances if i.category_id in cat_ids)
        img_ids = {i.image_id for i in insts}
        imgs = tuple(im for im in index.images if im.image_id in img_ids)
        return DatasetIndex(index.categories, imgs, insts)

    return subset(split.base_categories), subset(split.novel_categories)


def sample_k_shots(
    index: DatasetIndex, spec: EpisodeSpec, allow_short: bool = False
) -> Set[int]:
    """Deterministic uniform K-shot sampling without replacement.

    Exactly K instances per requested category; categories with fewer than
    K instances raise unless allow_short (then all of them are taken).
    Selection depends only on (index, spec).
    """
    rng = np.random.default_rng(spec.seed)
    selected: Set[int] = set()
    for cid in sorted(spec.categories):
        pool = sorted(i.instance_id for i in index.instances if i.category_id == cid)
        if len(pool) < spec.k and not allow_short:
            name = index.categories[cid] if cid < len(index.categories) else str(cid)
            raise ValueError(
                f"category {name!r} has {len(pool)} instances, need k={spec.k}"
            )
        if len(pool) <= spec.k:
            selected.update(pool)
        else:
            picks = rng.choice(len(pool), size=spec.k, replace=False)
            selected.update(pool[i] for i in picks)
    return selected


def mask_plan(
    index: DatasetIndex, selected: Set[int], image_id: str
) -> List[OrientedBox]:
    """Boxes of every unselected instance on the image, any category."""
    return [
        inst.box
        for inst in index.instances_on(image_id)
        if inst.instance_id not in selected
    ]


def _region_mask(
    height: int, width: int, regions: Sequence[OrientedBox]
) -> np.ndarray:
    """Boolean (H, W) mask of pixels whose centers lie inside any region.

    Pixel (row, col) has center (col + 0.5, row + 0.5). Membership uses the
    box's local frame: |R^T (p - c)| <= (w/2, h/2), exact for rectangles.
    """
    mask = np.zeros((height, width), dtype=bool)
    ys, xs = np.mgrid[0:height, 0:width]
    px = xs + 0.5
    py = ys + 0.5
    for box in regions:
        c, s = math.cos(box.angle), math.sin(box.angle)
        dx = px - box.cx
        dy = py - box.cy
        u = dx * c + dy * s
        v = -dx * s + dy * c
        mask |= (np.abs(u) <= box.w / 2.0) & (np.abs(v) <= box.h / 2.0)
    return mask


def apply_gaussian_mask(
    raster: np.ndarray,
    regions: Sequence[OrientedBox],
    sigma: float = 8.0,
    radius: Optional[int] = None,
) -> np.ndarray:
    """Blur out the given regions of an 8-bit image.

    Pixels whose centers fall inside a region polygon are replaced by the
    Gaussian-blurred value (reflective borders, truncated at `radius`,
    default 2*sigma); all other pixels are bit-identical to the input.
    Regions outside the raster are silently clipped.
    """
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if radius is None:
        radius = max(int(round(2.0 * sigma)), 1)
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    img = np.asarray(raster)
    if img.dtype != np.uint8:
        raise ValueError("raster must be 8-bit")
    if img.ndim == 2:
        channels = [img]
    elif img.ndim == 3 and img.shape[2] in (1, 3):
        channels = [img[:, :, i] for i in range(img.shape[2])]
    else:
        raise ValueError(f"unsupported raster shape {img.shape}")

    mask = _region_mask(img.shape[0], img.shape[1], regions)
    if not mask.any():
        return img.copy()

    out = img.copy()
    truncate = radius / sigma
    blurred = [
        np.clip(
            np.rint(gaussian_filter(ch.astype(np.float64), sigma=sigma, mode="reflect", truncate=truncate)),
            0,
            255,
        ).astype(np.uint8)
        for ch in channels
    ]
    if img.ndim == 2:
        out[mask] = blurred[0][mask]
    else:
        for i in range(img.shape[2]):
            out[:, :, i][mask] = blurred[i][mask]
    return out


def tile_windows(
    width: int, height: int, tile: int = 1024, stride: int = 824
) -> List[Tuple[int, int]]:
    """Sliding-window origins covering the full image.

    Origins step by `stride`; when the grid overshoots, the final window is
    shifted back so its far edge sits on the image boundary. Images smaller
    than the tile yield a single window at (0, 0).
    """
    if tile < 1 or stride < 1:
        raise ValueError("tile and stride must be positive")

    def axis_origins(length: int) -> List[int]:
        if length <= tile:
            return [0]
        origins = []
        x = 0
        while True:
            if x + tile >= length:
                origins.append(length - tile)
                break
            origins.append(x)
            x += stride
        return origins

    return [(x, y) for y in axis_origins(height) for x in axis_origins(width)]


def crop_instances(
    index: DatasetIndex, image_id: str, window: Tuple[int, int, int, int]
) -> List[Instance]:
    """Instances whose box center lies inside the window (x, y, w, h),
    translated to the window frame. Extent may spill past the window."""
    x0, y0, ww, wh = window
    out = []
    for inst in index.instances_on(image_id):
        b = inst.box
        if x0 <= b.cx < x0 + ww and y0 <= b.cy < y0 + wh:
            shifted = OrientedBox(b.cx - x0, b.cy - y0, b.w, b.h, b.angle)
            out.append(
                Instance(inst.instance_id, image_id, inst.category_id, shifted, inst.difficult)
            )
    return out
