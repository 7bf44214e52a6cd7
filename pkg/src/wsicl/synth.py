"""Synthetic 3D task families used as the training and held-out corpus.

A family fixes an appearance: a dark background and two bright structure
intensities, one for the target and one for the distractors. Target and
distractor blobs share their shape statistics, so only intensity tells them
apart, and which of the two levels is the target changes from family to
family. The prompted context is what says which structure is wanted.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import DEFAULT_SHAPE, load_volume, minmax_normalize, save_volume

MIN_FRACTION = 0.01
MAX_FRACTION = 0.30


@dataclass
class TaskFamily:
    family_seed: int
    n_samples: int = 24
    shape: tuple[int, int, int] = DEFAULT_SHAPE
    fg: float | None = None  # None: drawn from family_seed
    bg: float | None = None
    distractor: float | None = None
    n_distractors: tuple[int, int] = (1, 2)
    noise: float = 0.04
    smoothing: float = 3.0  # sigma (voxels at 32^3) of the low-pass noise field
    fraction_range: tuple[float, float] = (0.02, 0.10)
    max_retries: int = 20
    level_jitter: float = 0.0  # per-sample uniform shift of the target and distractor levels
    bias_field: float = 0.0  # amplitude of a smooth multiplicative intensity inhomogeneity
    guard: int = 2  # minimum distractor distance from the target, voxels
    min_gap: float = 0.3  # minimum |target - distractor| level difference
    layout: bool = False  # structures sit near family-fixed centres, as organs do
    layout_spread: float = 0.12  # radial prior scale, fraction of the mean edge
    displacement: float = 1.5  # per-sample centre shift std, voxels at 32^3

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.n_distractors = tuple(self.n_distractors)
        self.fraction_range = tuple(self.fraction_range)
        if self.fg is None or self.bg is None or self.distractor is None:
            fg, bg, dis = family_appearance(self.family_seed, self.min_gap)
            self.fg = fg if self.fg is None else self.fg
            self.bg = bg if self.bg is None else self.bg
            self.distractor = dis if self.distractor is None else self.distractor

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TaskFamily":
        return cls(**d)


def family_appearance(family_seed: int, min_gap: float = 0.3) -> tuple[float, float, float]:
    """(target, background, distractor) levels.

    Background lies in [0, 0.15]; target and distractor in [0.4, 1] at least
    ``min_gap`` apart, in either order.
    """
    rng = np.random.default_rng([int(family_seed), 0xFA])
    bg = rng.uniform(0.0, 0.15)
    while True:
        fg, dis = rng.uniform(0.4, 1.0, size=2)
        if abs(fg - dis) >= min_gap:
            return float(fg), float(bg), float(dis)


def family_layout(family: TaskFamily) -> tuple[np.ndarray, list[np.ndarray]]:
    """Target centre and one centre per possible distractor, fixed for the family."""
    rng = np.random.default_rng([int(family.family_seed), 0x1A])
    shape = np.asarray(family.shape, dtype=np.float64)
    target = rng.uniform(0.3, 0.7, size=3) * shape
    min_dist = 0.3 * shape.mean()
    others: list[np.ndarray] = []
    for _ in range(1000):
        if len(others) == family.n_distractors[1]:
            break
        c = rng.uniform(0.2, 0.8, size=3) * shape
        if all(np.linalg.norm(c - o) >= min_dist for o in [target, *others]):
            others.append(c)
    else:
        raise RuntimeError(f"family {family.family_seed}: cannot place {family.n_distractors[1]} distractors")
    return target, others


def sample_rng(family_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(family_seed), int(index)])


def _blob(rng, shape, fraction, sigma, forbidden=None, center=None, spread=None) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    if center is not None:
        # a quadratic bowl pulls the thresholded region towards the centre
        grid = np.indices(shape, dtype=np.float64)
        d2 = sum((g - c) ** 2 for g, c in zip(grid, center))
        field_ = field_ / field_.std() - d2 / (spread * float(np.mean(shape))) ** 2
    if forbidden is not None:
        field_[forbidden] = -np.inf
    thr = np.quantile(field_, 1.0 - fraction)
    raw = field_ > thr
    labels, n = ndimage.label(raw)
    if n == 0:
        return np.zeros(shape, dtype=bool)
    sizes = ndimage.sum_labels(raw, labels, index=np.arange(1, n + 1))
    return labels == (int(np.argmax(sizes)) + 1)


def generate_sample(family: TaskFamily, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (image, mask) pair number ``index`` of ``family``."""
    if not 0 <= index < family.n_samples:
        raise IndexError(f"sample {index} outside family of {family.n_samples}")
    rng = sample_rng(family.family_seed, index)
    shape = family.shape
    n_vox = int(np.prod(shape))
    sigma = family.smoothing * float(np.mean(shape)) / 32.0
    lo, hi = family.fraction_range
    centers = [None] * (1 + family.n_distractors[1])
    if family.layout:
        t, others = family_layout(family)
        shift = family.displacement * float(np.mean(shape)) / 32.0
        centers = [c + rng.normal(0.0, shift, size=3) for c in (t, *others)]
    spread = family.layout_spread
    for _ in range(family.max_retries):
        target = _blob(rng, shape, rng.uniform(lo, hi), sigma, center=centers[0], spread=spread)
        frac = target.sum() / n_vox
        if MIN_FRACTION <= frac <= MAX_FRACTION:
            break
    else:
        raise RuntimeError(
            f"family {family.family_seed} sample {index}: no valid mask after {family.max_retries} draws")

    distract = np.zeros(shape, dtype=bool)
    guard = ndimage.binary_dilation(target, iterations=family.guard) if family.guard > 0 else target
    for k in range(int(rng.integers(family.n_distractors[0], family.n_distractors[1] + 1))):
        blob = _blob(rng, shape, rng.uniform(lo, hi), sigma, forbidden=guard | distract,
                     center=centers[1 + k], spread=spread)
        distract |= blob & ~guard

    fg, dis = family.fg, family.distractor
    if family.level_jitter > 0:
        fg, dis = np.asarray([fg, dis]) + rng.uniform(-family.level_jitter, family.level_jitter, size=2)
    image = np.full(shape, family.bg, dtype=np.float64)
    image[distract] = dis
    image[target] = fg
    if family.bias_field > 0:
        # low-frequency field scaled to [-1, 1], as in scanner intensity inhomogeneity
        f = ndimage.gaussian_filter(rng.standard_normal(shape), 2.5 * sigma, mode="wrap")
        f /= np.abs(f).max() + 1e-12
        image *= 1.0 + family.bias_field * f
    if family.noise > 0:
        image += family.noise * rng.standard_normal(shape)
    return minmax_normalize(image), target.astype(np.uint8)


def split_family(family: TaskFamily, n_context_pool: int, n_eval: int,
                 seed: int | None = None) -> tuple[list[int], list[int]]:
    """Disjoint (context pool, eval) index lists."""
    if n_context_pool < 1 or n_eval < 0:
        raise ValueError("need a non-empty context pool and a non-negative eval size")
    if n_context_pool + n_eval > family.n_samples:
        raise ValueError(
            f"family has {family.n_samples} samples, split needs {n_context_pool + n_eval}")
    order = np.random.default_rng([family.family_seed if seed is None else seed, 0x5B]).permutation(
        family.n_samples)
    pool = sorted(int(i) for i in order[:n_context_pool])
    evals = sorted(int(i) for i in order[n_context_pool:n_context_pool + n_eval])
    return pool, evals


@dataclass
class FamilyData:
    """Materialised samples of one family plus its split."""

    family: TaskFamily
    images: list[np.ndarray]
    masks: list[np.ndarray]
    pool: list[int] = field(default_factory=list)
    eval: list[int] = field(default_factory=list)
    name: str = ""
    role: str = "train"

    @classmethod
    def build(cls, family: TaskFamily, n_context_pool: int | None = None, n_eval: int = 0,
              name: str = "", role: str = "train") -> "FamilyData":
        pairs = ordered_map(lambda i: generate_sample(family, i), range(family.n_samples))
        if n_context_pool is None:
            n_context_pool = family.n_samples - n_eval
        pool, evals = split_family(family, n_context_pool, n_eval)
        return cls(family, [p[0] for p in pairs], [p[1] for p in pairs], pool, evals,
                   name or f"family{family.family_seed}", role)


# --- on-disk datasets --------------------------------------------------------

MANIFEST_VERSION = 1


def ordered_map(fn, items) -> list:
    """``map`` honouring WSICL_NUM_WORKERS (0 = serial); results keep input order."""
    items = list(items)
    n = int(os.environ.get("WSICL_NUM_WORKERS", "0") or 0)
    if n <= 0:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(fn, items))


def write_dataset(families: list[FamilyData], out_dir, extra: dict | None = None) -> Path:
    """Write every sample as VOLB pairs plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    entries = []
    for fam in families:
        samples = []
        for i, (img, m) in enumerate(zip(fam.images, fam.masks)):
            stem = Path("data") / fam.name / f"{i:04d}"
            save_volume(out / f"{stem}_image", img)
            save_volume(out / f"{stem}_mask", m)
            samples.append({"index": i, "image": f"{stem}_image", "mask": f"{stem}_mask"})
        entries.append({"name": fam.name, "role": fam.role, "family": fam.family.to_json(),
                        "pool": fam.pool, "eval": fam.eval, "samples": samples})
    manifest = {"version": MANIFEST_VERSION, "families": entries, **(extra or {})}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_manifest(path, roles: tuple[str, ...] | None = None) -> list[FamilyData]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {manifest.get('version')!r}")
    root = path.parent
    out = []
    for e in manifest["families"]:
        if roles is not None and e["role"] not in roles:
            continue
        fam = TaskFamily.from_json(e["family"])
        images = [load_volume(root / s["image"]) for s in e["samples"]]
        masks = [load_volume(root / s["mask"]) for s in e["samples"]]
        if set(e["pool"]) & set(e["eval"]):
            raise ValueError(f"{path}: family {e['name']} has overlapping pool and eval indices")
        out.append(FamilyData(fam, images, masks, list(e["pool"]), list(e["eval"]), e["name"], e["role"]))
    return out
