"""Volumetric data model, preprocessing, Dice and the VOLB on-disk format.

Volumes are plain numpy arrays of shape ``(D, H, W)``. Axis 0 is the slicing
axis: 2D prompts are placed on ``volume[k]`` slices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

PROMPT_TYPES = ("box", "point")
DEFAULT_SHAPE = (32, 32, 32)

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def as_volume(v) -> np.ndarray:
    arr = np.asarray(v)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ValueError(f"expected a non-empty 3D grid, got shape {arr.shape}")
    return arr


def as_mask(m) -> np.ndarray:
    arr = as_volume(m)
    if arr.dtype != np.uint8:
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("mask must be strictly binary")
        arr = arr.astype(np.uint8)
    elif arr.max(initial=0) > 1:
        raise ValueError("mask must be strictly binary")
    return arr


def is_mask(arr: np.ndarray) -> bool:
    return arr.dtype == np.uint8 or arr.dtype == np.bool_


@dataclass
class ContextSet:
    """Ordered (image, prompt channel) pairs sharing one shape and prompt type."""

    images: list[np.ndarray]
    prompts: list[np.ndarray]
    prompt_type: str

    def __post_init__(self):
        if self.prompt_type not in PROMPT_TYPES:
            raise ValueError(f"unknown prompt type {self.prompt_type!r}")
        if len(self.images) != len(self.prompts):
            raise ValueError("images and prompts differ in length")
        if not self.images:
            raise ValueError("context set must hold at least one pair")
        shape = np.shape(self.images[0])
        for img, pr in zip(self.images, self.prompts):
            if np.shape(img) != shape or np.shape(pr) != shape:
                raise ValueError("all context pairs must share one shape")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(np.shape(self.images[0]))

    def permuted(self, order: Sequence[int]) -> "ContextSet":
        return ContextSet([self.images[i] for i in order], [self.prompts[i] for i in order], self.prompt_type)


def minmax_normalize(v) -> np.ndarray:
    """Affinely map values onto [0, 1]; a constant volume maps to zeros."""
    arr = np.asarray(as_volume(v), dtype=np.float64)
    if not np.isfinite(arr).all():
        bad = int((~np.isfinite(arr)).sum())
        raise ValueError(f"volume contains {bad} non-finite values")
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.zeros(arr.shape, dtype=np.float32)
    out = (arr - lo) / (hi - lo)
    return out.astype(np.float32)


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centred nearest neighbour
    idx = np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64)
    return np.clip(idx, 0, n_in - 1)


def resize(v, target_shape: Sequence[int]) -> np.ndarray:
    """Resize a volume (trilinear) or a mask (nearest neighbour).

    uint8/bool inputs are treated as masks and stay binary.
    """
    arr = as_volume(v)
    target = tuple(int(s) for s in target_shape)
    if len(target) != 3 or min(target) < 1:
        raise ValueError(f"target shape must be three positive ints, got {target_shape}")
    if target == arr.shape:
        return arr.copy()
    if is_mask(arr):
        ii = [_nearest_index(n, m) for n, m in zip(arr.shape, target)]
        return arr[np.ix_(*ii)].astype(np.uint8)
    t = torch.from_numpy(np.asarray(arr, dtype=np.float64))[None, None]
    out = F.interpolate(t, size=target, mode="trilinear", align_corners=False)
    return out[0, 0].numpy().astype(arr.dtype if arr.dtype.kind == "f" else np.float32)


def dice(a, b) -> float:
    """Dice overlap of two binary masks; two empty masks score 1.0."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


# --- VOLB format -----------------------------------------------------------

class VolumeFormatError(ValueError):
    pass


def _volb_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".raw")


def save_volume(path, v) -> Path:
    """Write ``<path>.json`` (header) and ``<path>.raw`` (payload).

    Masks (uint8/bool) are stored as u8, everything else as little-endian f32.
    Returns the header path.
    """
    arr = as_volume(v)
    if is_mask(arr):
        arr = as_mask(arr)
        code = "u8"
    else:
        code = "f32"
    header_path, raw_path = _volb_paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "shape": list(arr.shape),
        "dtype": code,
        "order": "row-major",
        "endianness": "little",
        "axes": ["D", "H", "W"],
        "payload": raw_path.name,
    }
    raw_path.write_bytes(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    header_path.write_text(json.dumps(header, indent=1))
    return header_path


def load_volume(path) -> np.ndarray:
    header_path, raw_path = _volb_paths(path)
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{header_path}: corrupt header ({exc})") from exc
    if not isinstance(header, dict):
        raise VolumeFormatError(f"{header_path}: header must be a JSON object")
    for key in ("shape", "dtype", "order", "endianness"):
        if key not in header:
            raise VolumeFormatError(f"{header_path}: header missing {key!r}")
    shape = header["shape"]
    if (not isinstance(shape, list) or len(shape) != 3
            or not all(isinstance(s, int) and s >= 1 for s in shape)):
        raise VolumeFormatError(f"{header_path}: bad shape {shape!r}")
    if header["dtype"] not in _DTYPES:
        raise VolumeFormatError(f"{header_path}: unsupported dtype {header['dtype']!r}")
    if header["order"] != "row-major" or header["endianness"] != "little":
        raise VolumeFormatError(f"{header_path}: only row-major little-endian payloads are supported")
    if "payload" in header:
        raw_path = header_path.parent / header["payload"]
    dtype = _DTYPES[header["dtype"]]
    payload = raw_path.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{raw_path}: payload has {len(payload)} bytes, header implies {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if header["dtype"] == "u8":
        if arr.max(initial=0) > 1:
            raise VolumeFormatError(f"{raw_path}: u8 payload is not binary")
        return arr.astype(np.uint8)
    return arr.astype(np.float32)
