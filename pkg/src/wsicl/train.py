"""Loss, optimisation step and the in-context training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .net import (ModelConfig, ModelState, flush_denormals, init_state, load_checkpoint, save_checkpoint,
                  to_tensor)
from .prompts import PromptSpec, simulate_prompts
from .synth import FamilyData

log = logging.getLogger(__name__)

LOSS_COLUMNS = ["step", "loss", "L", "P", "wall_ms"]


@dataclass
class TrainConfig:
    steps: int = 2000
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    L_range: tuple[int, int] = (1, 8)
    P_range: tuple[int, int] = (1, 5)
    targets_per_step: int = 2
    smooth_l1_beta: float = 0.1
    loss: str = "volume_smooth_l1"
    grad_clip: float = 1.0  # max global gradient norm, 0 disables
    lr_schedule: str = "cosine"  # or "constant"
    min_lr_ratio: float = 0.05
    seed: int = 0
    checkpoint_interval: int = 500

    def __post_init__(self):
        self.L_range = tuple(int(v) for v in self.L_range)
        self.P_range = tuple(int(v) for v in self.P_range)
        if self.L_range[0] < 1 or self.L_range[1] < self.L_range[0]:
            raise ValueError(f"bad L_range {self.L_range}")
        if self.P_range[0] < 1 or self.P_range[1] < self.P_range[0]:
            raise ValueError(f"bad P_range {self.P_range}")
        if not self.smooth_l1_beta > 0:
            raise ValueError("smooth_l1_beta must be > 0")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {sorted(LOSSES)}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.grad_clip < 0 or not 0 <= self.min_lr_ratio <= 1:
            raise ValueError("grad_clip must be >= 0 and min_lr_ratio in [0, 1]")
        if self.targets_per_step < 1:
            raise ValueError("targets_per_step must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)

    def lr_at(self, step: int) -> float:
        """Learning rate for ``step``; a function of the step alone so resumes are exact."""
        if self.lr_schedule == "constant" or self.steps <= 1:
            return self.learning_rate
        frac = min(step, self.steps) / self.steps
        scale = self.min_lr_ratio + (1 - self.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * frac))
        return self.learning_rate * scale


def smooth_l1_loss(pred, target, beta: float = 0.1):
    """Mean over voxels of 0.5 e^2 / beta for |e| < beta, else |e| - 0.5 beta.

    Works on tensors (differentiable) and on arrays (returns a float).
    """
    if not beta > 0:
        raise ValueError("beta must be > 0")
    if isinstance(pred, torch.Tensor):
        target = torch.as_tensor(target, dtype=pred.dtype)
        if pred.shape != target.shape:
            raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
        return _elementwise_smooth_l1(pred, target, beta).mean()
    pred = np.asarray(getattr(pred, "scores", pred), dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    e = np.abs(pred - target)
    return float(np.where(e < beta, 0.5 * e * e / beta, e - 0.5 * beta).mean())


def _elementwise_smooth_l1(pred, target, beta):
    e = (pred - target).abs()
    return torch.where(e < beta, 0.5 * e * e / beta, e - 0.5 * beta)


def balanced_smooth_l1_loss(pred: torch.Tensor, target, beta: float = 0.1) -> torch.Tensor:
    """Smooth-L1 averaged separately over foreground and background voxels, then halved.

    Plain voxel averaging on a sigmoid output lets a few-percent foreground
    collapse to all-background; weighting the two classes equally avoids it.
    A class absent from ``target`` is skipped.
    """
    if not beta > 0:
        raise ValueError("beta must be > 0")
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    per_voxel = _elementwise_smooth_l1(pred, target, beta)
    fg = target > 0.5
    terms = [per_voxel[sel].mean() for sel in (fg, ~fg) if bool(sel.any())]
    return sum(terms) / len(terms)


def volume_smooth_l1_loss(pred: torch.Tensor, target, beta: float = 0.1) -> torch.Tensor:
    """Summed smooth-L1 error divided by the predicted plus true foreground volume.

    Computed per item of the leading batch axis and averaged. For binary targets
    and beta -> 0 this is one minus the soft Dice, so false positives on
    look-alike structures cost as much as missed target voxels, however small
    the target is relative to the volume.
    """
    if not beta > 0:
        raise ValueError("beta must be > 0")
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    dims = tuple(range(1, pred.dim()))
    err = _elementwise_smooth_l1(pred, target, beta).sum(dim=dims)
    volume = pred.sum(dim=dims) + target.sum(dim=dims)
    return (err / (volume + 1.0)).mean()


LOSSES = {"smooth_l1": smooth_l1_loss, "balanced_smooth_l1": balanced_smooth_l1_loss,
          "volume_smooth_l1": volume_smooth_l1_loss}


@dataclass
class Episode:
    """One supervised item: targets with dense masks and a prompted context."""

    targets: list[np.ndarray]
    target_masks: list[np.ndarray]
    context_images: list[np.ndarray]
    context_prompts: list[np.ndarray]
    prompt_type: str

    @property
    def L(self) -> int:
        return len(self.context_images)


def episode_loss(state: ModelState, episode: Episode, beta: float,
                 loss: str = "volume_smooth_l1") -> torch.Tensor:
    net = state.net
    logits = net(to_tensor(episode.targets, net), to_tensor(episode.context_images, net),
                 to_tensor(episode.context_prompts, net))
    return LOSSES[loss](torch.sigmoid(logits), to_tensor(episode.target_masks, net), beta)


def make_optimizer(state: ModelState, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(state.net.parameters(), lr=cfg.learning_rate)
    return torch.optim.SGD(state.net.parameters(), lr=cfg.learning_rate)


def train_step(state: ModelState, batch: Sequence[Episode], cfg: TrainConfig,
               optimizer: torch.optim.Optimizer | None = None) -> tuple[ModelState, float]:
    """One optimiser step on the mean loss over ``batch``; updates ``state`` in place."""
    for ep in batch:
        if ep.prompt_type != state.prompt_type:
            raise ValueError(f"episode prompt type {ep.prompt_type!r} does not match "
                             f"{state.prompt_type!r} weights")
    if optimizer is None:
        optimizer = make_optimizer(state, cfg)
    state.net.train()
    optimizer.zero_grad()
    loss = sum(episode_loss(state, ep, cfg.smooth_l1_beta, cfg.loss) for ep in batch) / len(batch)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value} at step {state.step}")
    if cfg.learning_rate > 0:
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(state.net.parameters(), cfg.grad_clip)
        for group in optimizer.param_groups:
            group["lr"] = cfg.lr_at(state.step)
        optimizer.step()
    state.step += 1
    return state, value


def sample_episode(families: Sequence[FamilyData], prompt_type: str, L: int, P: int,
                   n_targets: int, rng: np.random.Generator) -> Episode:
    fam = families[int(rng.integers(len(families)))]
    indices = fam.pool if fam.pool else list(range(len(fam.images)))
    if len(indices) < L + n_targets:
        raise ValueError(f"{fam.name}: {len(indices)} samples cannot supply L={L} + {n_targets} targets")
    chosen = rng.choice(indices, size=L + n_targets, replace=False)
    ctx, tgt = chosen[:L], chosen[L:]
    prompts = [simulate_prompts(fam.masks[i], PromptSpec(prompt_type, P, True, 0), rng) for i in ctx]
    return Episode([fam.images[i] for i in tgt], [fam.masks[i] for i in tgt],
                   [fam.images[i] for i in ctx], prompts, prompt_type)


def step_rng(seed: int, step: int) -> np.random.Generator:
    # one stream per step so a resumed run replays the same episodes
    return np.random.default_rng([int(seed), int(step), 0x7A]).spawn(1)[0]


def _save_optimizer(optimizer, path: Path):
    torch.save(optimizer.state_dict(), path)


def train_loop(families: Sequence[FamilyData], cfg: TrainConfig, model_cfg: ModelConfig,
               out_dir=None, state: ModelState | None = None,
               time_budget_s: float | None = None) -> tuple[ModelState, list[dict]]:
    """Fit a model on the training families.

    Each step samples a family, a context size L, a prompt count P, L context
    pairs and the targets; prompts are simulated for the context only and the
    targets are supervised by their dense masks. With ``out_dir`` set,
    checkpoints and ``loss_log.csv`` are written there and an existing
    checkpoint is resumed.
    """
    families = [f for f in families if f.role == "train"] or list(families)
    out = Path(out_dir) if out_dir is not None else None
    rows: list[dict] = []
    if state is None and out is not None and (out / "checkpoint.json").exists():
        state = load_checkpoint(out)
        log.info("resuming from step %d", state.step)
        if (out / "loss_log.csv").exists():
            with open(out / "loss_log.csv", newline="") as fh:
                rows = [r for r in csv.DictReader(fh) if int(r["step"]) < state.step]
            rows = [{"step": int(r["step"]), "loss": float(r["loss"]), "L": int(r["L"]),
                     "P": int(r["P"]), "wall_ms": float(r["wall_ms"])} for r in rows]
    if state is None:
        state = init_state(model_cfg, cfg.seed)
    torch.manual_seed(cfg.seed + state.step)
    optimizer = make_optimizer(state, cfg)
    if out is not None and (out / "optimizer.pt").exists() and state.step > 0:
        optimizer.load_state_dict(torch.load(out / "optimizer.pt"))

    with flush_denormals():
        _run_steps(families, cfg, state, optimizer, rows, out, time_budget_s)
    if out is not None:
        _persist(state, optimizer, rows, out)
    return state, rows


def _run_steps(families, cfg, state, optimizer, rows, out, time_budget_s):
    started = time.perf_counter()
    elapsed_before = float(state.meta.get("train_seconds", 0.0))
    while state.step < cfg.steps:
        rng = step_rng(cfg.seed, state.step)
        L = int(rng.integers(cfg.L_range[0], cfg.L_range[1] + 1))
        P = int(rng.integers(cfg.P_range[0], cfg.P_range[1] + 1))
        t0 = time.perf_counter()
        ep = sample_episode(families, state.prompt_type, L, P, cfg.targets_per_step, rng)
        step = state.step
        _, loss = train_step(state, [ep], cfg, optimizer)
        rows.append({"step": step, "loss": loss, "L": L, "P": P,
                     "wall_ms": round(1000 * (time.perf_counter() - t0), 3)})
        state.meta["train_seconds"] = elapsed_before + time.perf_counter() - started
        if step % 100 == 0:
            log.info("step %d loss %.5f L=%d P=%d", step, loss, L, P)
        if out is not None and (state.step % cfg.checkpoint_interval == 0 or state.step == cfg.steps):
            _persist(state, optimizer, rows, out)
        if time_budget_s is not None and state.meta["train_seconds"] > time_budget_s:
            log.warning("time budget exhausted at step %d", state.step)
            break


def _persist(state, optimizer, rows, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, out)
    _save_optimizer(optimizer, out / "optimizer.pt")
    write_loss_log(rows, out / "loss_log.csv")


def write_loss_log(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
        w.writeheader()
        w.writerows(rows)


def moving_average(values, window: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return np.convolve(v, np.ones(window) / window, mode="valid")
