"""Weak-prompt simulation: area-weighted slice choice, jittered boxes, soft points."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .volume import PROMPT_TYPES, as_mask

# 4-connectivity in the slice plane
_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class BoundingBox2D:
    slice_index: int
    row_min: int
    row_max: int
    col_min: int
    col_max: int

    @property
    def area(self) -> int:
        return (self.row_max - self.row_min + 1) * (self.col_max - self.col_min + 1)


@dataclass(frozen=True)
class PointPrompt:
    slice_index: int
    row: int
    col: int
    radius_voxels: float

    def __post_init__(self):
        if not self.radius_voxels > 0:
            raise ValueError("point radius must be positive")


@dataclass(frozen=True)
class PromptSpec:
    prompt_type: str = "box"
    prompts_per_image: int = 1
    jitter_enabled: bool = True
    rng_seed: int = 0
    point_radius: Optional[float] = None  # None: 4 voxels at 32^3, scaled with edge length

    def __post_init__(self):
        if self.prompt_type not in PROMPT_TYPES:
            raise ValueError(f"prompt_type must be one of {PROMPT_TYPES}, got {self.prompt_type!r}")
        if int(self.prompts_per_image) < 1:
            raise ValueError("prompts_per_image must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "PromptSpec":
        return cls(**d)


def default_radius(shape) -> float:
    return 4.0 * float(np.mean(shape)) / 32.0


def slice_area_distribution(mask) -> np.ndarray:
    """Probability of each axis-0 slice, proportional to its foreground area."""
    m = as_mask(mask)
    areas = m.reshape(m.shape[0], -1).sum(axis=1, dtype=np.int64)
    total = int(areas.sum())
    if total == 0:
        raise ValueError("no target to prompt: mask is empty")
    return areas / total


def connected_components_2d(slice_mask) -> list[np.ndarray]:
    """4-connected components of a 2D binary slice.

    Each component is an ``(n, 2)`` int array of (row, col) pixels in scanline
    order. Components are ordered by the scanline position of their first pixel.
    """
    s = np.asarray(slice_mask).astype(bool)
    if s.ndim != 2:
        raise ValueError("expected a 2D slice")
    labels, n = ndimage.label(s, structure=_CROSS)
    if n == 0:
        return []
    rows, cols = np.nonzero(labels)  # scanline order
    lab = labels[rows, cols]
    first = {}
    for i, l in enumerate(lab):
        if l not in first:
            first[l] = i
    order = sorted(first, key=first.get)
    return [np.stack([rows[lab == l], cols[lab == l]], axis=1) for l in order]


def tight_bbox(component, slice_index: int = 0) -> BoundingBox2D:
    c = np.asarray(component).reshape(-1, 2)
    if len(c) == 0:
        raise ValueError("cannot box an empty component")
    return BoundingBox2D(slice_index, int(c[:, 0].min()), int(c[:, 0].max()),
                         int(c[:, 1].min()), int(c[:, 1].max()))


def jitter_bbox(box: BoundingBox2D, rng, bounds: tuple[int, int]) -> BoundingBox2D:
    """Add an independent round(N(0, 1)) to each coordinate.

    Draw order is (row_min, row_max, col_min, col_max). The result is clamped to
    ``bounds = (H, W)`` and each coordinate pair is reordered if it crossed.
    """
    g = np.rint(np.asarray(rng.standard_normal(4), dtype=np.float64)).astype(np.int64)
    h, w = bounds
    r0 = int(np.clip(box.row_min + g[0], 0, h - 1))
    r1 = int(np.clip(box.row_max + g[1], 0, h - 1))
    c0 = int(np.clip(box.col_min + g[2], 0, w - 1))
    c1 = int(np.clip(box.col_max + g[3], 0, w - 1))
    return BoundingBox2D(box.slice_index, min(r0, r1), max(r0, r1), min(c0, c1), max(c0, c1))


def render_box(channel: np.ndarray, box: BoundingBox2D) -> np.ndarray:
    """Fill the box with ones, in place. Returns ``channel``."""
    d, h, w = channel.shape
    if not 0 <= box.slice_index < d:
        raise ValueError(f"slice {box.slice_index} outside volume depth {d}")
    r0, r1 = max(box.row_min, 0), min(box.row_max, h - 1)
    c0, c1 = max(box.col_min, 0), min(box.col_max, w - 1)
    channel[box.slice_index, r0:r1 + 1, c0:c1 + 1] = 1.0
    return channel


def sample_point(component, rng, slice_index: int = 0, radius: float = 4.0) -> PointPrompt:
    c = np.asarray(component).reshape(-1, 2)
    if len(c) == 0:
        raise ValueError("cannot sample from an empty component")
    r, col = c[int(rng.integers(len(c)))]
    return PointPrompt(slice_index, int(r), int(col), float(radius))


def render_point(channel: np.ndarray, p: PointPrompt) -> np.ndarray:
    """Max-compose the soft sphere ``1 - d/R`` (for d < R) into ``channel`` in place."""
    d, h, w = channel.shape
    center = np.array([p.slice_index, p.row, p.col])
    if not all(0 <= c < n for c, n in zip(center, (d, h, w))):
        raise ValueError(f"point {tuple(center)} outside volume {channel.shape}")
    R = float(p.radius_voxels)
    reach = int(np.ceil(R))
    lo = np.maximum(center - reach, 0)
    hi = np.minimum(center + reach + 1, (d, h, w))
    zz, yy, xx = np.ogrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    dist = np.sqrt((zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2)
    inside = dist < R
    view = channel[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    soft = np.where(inside, 1.0 - dist / R, 0.0)
    np.maximum(view, soft, out=view, where=inside)
    return channel


def sample_slices(mask, n: int, rng) -> np.ndarray:
    """``n`` slice indices drawn with replacement, proportional to foreground area."""
    probs = slice_area_distribution(mask)
    return rng.choice(len(probs), size=int(n), replace=True, p=probs)


def simulate_prompts(mask, spec: PromptSpec, rng=None) -> np.ndarray:
    """Render ``spec.prompts_per_image`` sampled-slice prompts for ``mask``.

    Slices are drawn with replacement from the area distribution; every
    connected component on a drawn slice receives one box or one point.
    """
    m = as_mask(mask)
    if rng is None:
        rng = np.random.default_rng(spec.rng_seed)
    radius = spec.point_radius if spec.point_radius is not None else default_radius(m.shape)
    channel = np.zeros(m.shape, dtype=np.float32)
    for k in sample_slices(m, spec.prompts_per_image, rng):
        k = int(k)
        for comp in connected_components_2d(m[k]):
            if spec.prompt_type == "box":
                box = tight_bbox(comp, k)
                if spec.jitter_enabled:
                    box = jitter_bbox(box, rng, m.shape[1:])
                render_box(channel, box)
            else:
                render_point(channel, sample_point(comp, rng, k, radius))
    return channel
