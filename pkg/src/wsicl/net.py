"""Dual-branch in-context segmentation network.

The target branch sees the image alone. The context branch sees image and
prompt channel stacked. Context features are averaged over the context set
level by level and fed to every decoder stage of the target branch, so the
context can be streamed in mini-batches without changing the result.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .volume import DEFAULT_SHAPE, PROMPT_TYPES, ContextSet

_EPS = 1e-6



@dataclass
class ModelConfig:
    levels: int = 3
    base_channels: int = 8
    input_shape: tuple[int, int, int] = DEFAULT_SHAPE
    fusion: str = "mean"
    context_minibatch: int = 4
    prompt_type: str = "box"

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.levels < 1 or self.base_channels < 1:
            raise ValueError("levels and base_channels must be >= 1")
        if self.fusion != "mean":
            raise ValueError(f"unsupported fusion {self.fusion!r}")
        if self.context_minibatch < 1:
            raise ValueError("context_minibatch must be >= 1")
        if self.prompt_type not in PROMPT_TYPES:
            raise ValueError(f"prompt_type must be one of {PROMPT_TYPES}")
        step = 2 ** (self.levels - 1)
        if any(s % step for s in self.input_shape):
            raise ValueError(f"input edges {self.input_shape} must be divisible by {step}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def to_json(self) -> dict:
        return asdict(self)


class ConvBlock(nn.Module):
    """Two 3x3x3 convolutions.

    With ``cond`` > 0 the first convolution output is modulated by a vector,
    ``h * (1 + scale(vec)) + shift(vec)``, per channel.
    """

    def __init__(self, cin: int, cout: int, cond: int = 0):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)
        self.cond = nn.Linear(cond, 2 * cout, bias=False) if cond else None
        if self.cond is not None:
            nn.init.normal_(self.cond.weight, std=0.1 / cond ** 0.5)

    def forward(self, x, vec=None):
        h = self.conv1(x)
        if self.cond is not None:
            scale, shift = self.cond(vec)[:, :, None, None, None].chunk(2, dim=1)
            h = h * (1 + scale) + shift
        h = F.leaky_relu(h, 0.01)
        return F.leaky_relu(self.conv2(h), 0.01)


class Encoder(nn.Module):
    def __init__(self, cin: int, cfg: ModelConfig):
        super().__init__()
        chans = [cfg.channels(k) for k in range(cfg.levels)]
        self.blocks = nn.ModuleList(
            ConvBlock(cin if k == 0 else chans[k - 1], chans[k]) for k in range(cfg.levels))

    def forward(self, x) -> list[torch.Tensor]:
        feats = []
        for k, block in enumerate(self.blocks):
            if k:
                x = F.max_pool3d(x, 2)
            x = block(x)
            feats.append(x)
        return feats


@contextmanager
def flush_denormals():
    """Treat subnormal floats as zero inside the block.

    Tiny activations appear as training progresses and make CPU convolutions
    several times slower. The setting is process-wide, so it is restored on exit.
    """
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(False)


@dataclass
class FusedContext:
    """Per-level mean context maps and mean prompt-pooled descriptors."""

    maps: list[torch.Tensor]
    vectors: list[torch.Tensor]
    count: int
    prompt_type: str


class WSICLNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        L = cfg.levels
        chans = [cfg.channels(k) for k in range(L)]
        self.target_encoder = Encoder(1, cfg)
        self.context_encoder = Encoder(2, cfg)
        # decoder stage k consumes [upsampled | target skip | context map | 2 similarity maps]
        self.decoder = nn.ModuleList()
        for k in range(L):
            up = chans[k + 1] if k < L - 1 else 0
            self.decoder.append(ConvBlock(up + 2 * chans[k] + 2, chans[k], cond=2 * chans[k]))
        self.head = nn.Conv3d(chans[0], 1, 1)
        for m in self.modules():
            if isinstance(m, nn.Conv3d):
                nn.init.kaiming_normal_(m.weight, a=0.01, nonlinearity="leaky_relu")
                nn.init.zeros_(m.bias)
        # channels-last 3D convolutions run 2-3x faster on CPU, most of all in backward
        self.to(memory_format=torch.channels_last_3d)

    # -- context branch ---------------------------------------------------

    def encode_pairs(self, images: torch.Tensor, prompts: torch.Tensor):
        """Per-level (map, descriptor) for a batch of (image, prompt) pairs.

        ``images`` and ``prompts`` are ``(n, 1, D, H, W)``. The descriptor of a
        level is the feature mean under the prompt concatenated with the mean
        outside it.
        """
        feats = self.context_encoder(torch.cat([images, prompts], dim=1))
        out = []
        w = prompts
        for k, f in enumerate(feats):
            if k:
                w = F.avg_pool3d(w, 2)
            inside = (f * w).sum(dim=(2, 3, 4)) / (w.sum(dim=(2, 3, 4)) + _EPS)
            outside = (f * (1 - w)).sum(dim=(2, 3, 4)) / ((1 - w).sum(dim=(2, 3, 4)) + _EPS)
            out.append((f, torch.cat([inside, outside], dim=1)))
        return out

    def fuse(self, images: torch.Tensor, prompts: torch.Tensor, minibatch: int | None = None,
             prompt_type: str | None = None) -> FusedContext:
        """Mean of context features over all pairs, streamed ``minibatch`` pairs at a time."""
        n = images.shape[0]
        if n == 0:
            raise ValueError("empty context set")
        m = minibatch or self.config.context_minibatch
        maps = vecs = None
        for start in range(0, n, m):
            enc = self.encode_pairs(images[start:start + m], prompts[start:start + m])
            # accumulate in float64 so the sum is insensitive to chunking and order
            part_maps = [f.sum(dim=0, keepdim=True, dtype=torch.float64) for f, _ in enc]
            part_vecs = [v.sum(dim=0, keepdim=True, dtype=torch.float64) for _, v in enc]
            if maps is None:
                maps, vecs = part_maps, part_vecs
            else:
                maps = [a + b for a, b in zip(maps, part_maps)]
                vecs = [a + b for a, b in zip(vecs, part_vecs)]
        dtype = images.dtype
        return FusedContext([(a / n).to(dtype) for a in maps], [(v / n).to(dtype) for v in vecs], n,
                            prompt_type or self.config.prompt_type)

    # -- target branch ----------------------------------------------------

    @staticmethod
    def similarity(feats: torch.Tensor, descriptor: torch.Tensor) -> torch.Tensor:
        """Cosine similarity of every target voxel to the inside and outside prototypes."""
        c = feats.shape[1]
        protos = descriptor.reshape(-1, 2, c)[..., None, None, None]  # (1, 2, C, 1, 1, 1)
        f = feats[:, None]
        dot = (f * protos).sum(dim=2)
        norm = f.norm(dim=2) * protos.norm(dim=2) + _EPS
        return dot / norm

    def decode(self, target: torch.Tensor, ctx: FusedContext) -> torch.Tensor:
        """Logits ``(b, 1, D, H, W)`` for targets ``(b, 1, D, H, W)``."""
        skips = self.target_encoder(target)
        b = target.shape[0]
        h = None
        for k in reversed(range(self.config.levels)):
            cmap = ctx.maps[k].expand(b, -1, -1, -1, -1)
            parts = [skips[k], cmap, self.similarity(skips[k], ctx.vectors[k])]
            if h is not None:
                parts.insert(0, F.interpolate(h, scale_factor=2, mode="trilinear", align_corners=False))
            h = self.decoder[k](torch.cat(parts, dim=1), ctx.vectors[k].expand(b, -1))
        return self.head(h)

    def forward(self, target, ctx_images, ctx_prompts, minibatch=None):
        return self.decode(target, self.fuse(ctx_images, ctx_prompts, minibatch))


@dataclass
class Prediction:
    scores: np.ndarray  # sigmoid probabilities, target shape
    threshold: float = 0.5

    @property
    def mask(self) -> np.ndarray:
        return (self.scores >= self.threshold).astype(np.uint8)

    @property
    def shape(self):
        return self.scores.shape


@dataclass
class ModelState:
    net: WSICLNet
    step: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.net.config

    @property
    def prompt_type(self) -> str:
        return self.net.config.prompt_type


def init_state(cfg: ModelConfig, seed: int = 0) -> ModelState:
    torch.manual_seed(seed)
    return ModelState(WSICLNet(cfg), step=0, seed=seed)


def _param(net: nn.Module):
    return next(net.parameters())


def to_tensor(arrays, net: nn.Module) -> torch.Tensor:
    """Stack ``(D, H, W)`` arrays into ``(n, 1, D, H, W)`` on the net's dtype."""
    p = _param(net)
    t = torch.as_tensor(np.stack([np.asarray(a, dtype=np.float64) for a in arrays]), dtype=p.dtype)[:, None]
    return t.contiguous(memory_format=torch.channels_last_3d)


def _check_shapes(state: ModelState, shape):
    if tuple(shape) != state.config.input_shape:
        raise ValueError(f"volume shape {tuple(shape)} does not match model input {state.config.input_shape}")


def encode_context_pair(image, prompt, state: ModelState) -> list[torch.Tensor]:
    """Context-branch feature maps of one pair, one per resolution level."""
    if np.shape(image) != np.shape(prompt):
        raise ValueError("image and prompt shapes differ")
    _check_shapes(state, np.shape(image))
    with torch.no_grad():
        enc = state.net.encode_pairs(to_tensor([image], state.net), to_tensor([prompt], state.net))
    return [f[0] for f, _ in enc]


def fuse_context(context: ContextSet, state: ModelState, minibatch: int | None = None) -> FusedContext:
    if context.prompt_type != state.prompt_type:
        raise ValueError(f"context prompt type {context.prompt_type!r} does not match "
                         f"{state.prompt_type!r} weights")
    _check_shapes(state, context.shape)
    with torch.no_grad():
        return state.net.fuse(to_tensor(context.images, state.net), to_tensor(context.prompts, state.net),
                              minibatch, context.prompt_type)


def predict_fused(targets: Sequence[np.ndarray], fused: FusedContext, state: ModelState,
                  threshold: float = 0.5, batch: int = 4) -> list[Prediction]:
    state.net.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(targets), batch):
            chunk = list(targets[start:start + batch])
            for x in chunk:
                _check_shapes(state, np.shape(x))
            probs = torch.sigmoid(state.net.decode(to_tensor(chunk, state.net), fused))
            out.extend(Prediction(p[0].double().numpy(), threshold) for p in probs)
    return out


def forward_icl(x, context: ContextSet, state: ModelState, minibatch: int | None = None,
                threshold: float = 0.5) -> Prediction:
    """Segment ``x`` conditioned on the prompted context set."""
    state.net.eval()
    fused = fuse_context(context, state, minibatch)
    return predict_fused([x], fused, state, threshold)[0]


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(state: ModelState, directory) -> Path:
    """Write ``checkpoint.json`` (manifest) and ``params.bin`` (little-endian f32)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    index, offset, chunks = [], 0, []
    for name, t in state.net.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    (d / "params.bin").write_bytes(b"".join(chunks))
    manifest = {
        "config": state.config.to_json(),
        "prompt_type": state.prompt_type,
        "step": state.step,
        "seed": state.seed,
        "meta": state.meta,
        "params_file": "params.bin",
        "parameters": index,
    }
    path = d / "checkpoint.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_checkpoint(directory) -> ModelState:
    d = Path(directory)
    manifest = json.loads((d / "checkpoint.json").read_text())
    cfg = ModelConfig(**manifest["config"])
    if manifest["prompt_type"] != cfg.prompt_type:
        raise ValueError("checkpoint prompt_type disagrees with its config")
    net = WSICLNet(cfg)
    blob = (d / manifest.get("params_file", "params.bin")).read_bytes()
    expected = net.state_dict()
    entries = {e["name"]: e for e in manifest["parameters"]}
    if set(entries) != set(expected):
        missing = set(expected) ^ set(entries)
        raise ValueError(f"checkpoint parameter names do not match config: {sorted(missing)[:5]}")
    loaded = {}
    for name, ref in expected.items():
        e = entries[name]
        if tuple(e["shape"]) != tuple(ref.shape):
            raise ValueError(f"parameter {name}: shape {e['shape']} but config implies {list(ref.shape)}")
        if e["offset"] + e["nbytes"] > len(blob):
            raise ValueError(f"parameter {name}: blob truncated")
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(e["shape"])), offset=e["offset"])
        loaded[name] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    net.load_state_dict(loaded)
    return ModelState(net, step=int(manifest["step"]), seed=int(manifest["seed"]),
                      meta=manifest.get("meta", {}))
