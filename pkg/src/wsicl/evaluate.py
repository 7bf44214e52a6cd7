"""Evaluation protocols: repeated-context Dice, sweeps, annotation cost, interactive mode."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .net import ModelState, Prediction, flush_denormals, forward_icl, fuse_context, predict_fused
from .prompts import PromptSpec, simulate_prompts
from .synth import FamilyData, ordered_map
from .volume import ContextSet, dice

SWEEP_COLUMNS = ["prompt_type", "L", "P", "run", "mean_dice"]
EFFICIENCY_COLUMNS = ["prompt_type", "L", "P", "seconds", "mean_dice"]


@dataclass
class EvalProtocol:
    n_runs: int = 8
    L: int = 8
    P: int = 5
    prompt_type: str = "box"
    seed: int = 0
    threshold: float = 0.5

    def __post_init__(self):
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        if self.L < 1 or self.P < 1:
            raise ValueError("L and P must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EfficiencyModel:
    """Seconds per annotation."""

    t_point: int = 5
    t_box: int = 10
    t_mask2d: int = 80
    t_mask3d: int = 1600

    def __post_init__(self):
        if min(self.t_point, self.t_box, self.t_mask2d, self.t_mask3d) <= 0:
            raise ValueError("annotation times must be positive")


ANNOTATION_KINDS = ("point", "box", "mask2d", "mask3d")


def annotation_time(kind: str, L: int, P: int = 1, model: EfficiencyModel = EfficiencyModel()):
    """Seconds spent building a context set of L images with P annotations each.

    A 3D mask is one dense annotation per image, so P is ignored for it.
    """
    if L < 1 or P < 1:
        raise ValueError("L and P must be >= 1")
    if kind == "point":
        return L * P * model.t_point
    if kind == "box":
        return L * P * model.t_box
    if kind == "mask2d":
        return L * P * model.t_mask2d
    if kind == "mask3d":
        return L * model.t_mask3d
    raise ValueError(f"unknown annotation kind {kind!r}; expected one of {ANNOTATION_KINDS}")


class Predictor(Protocol):
    def __call__(self, targets: Sequence[np.ndarray], context: ContextSet) -> list[np.ndarray]: ...


def model_predictor(state: ModelState, minibatch: int | None = None) -> Predictor:
    """Fuses the context once and predicts every target against it."""

    def predict(targets, context):
        with flush_denormals():
            fused = fuse_context(context, state, minibatch)
            return [p.scores for p in predict_fused(targets, fused, state)]

    return predict


def sample_context(fam: FamilyData, L: int, P: int, prompt_type: str, seed: int, run: int) -> ContextSet:
    """Context for one run; the draw depends only on (seed, run), so cells of a sweep are paired.

    The first L of a per-run permutation of the pool are used, so smaller
    contexts are subsets of larger ones. Each member's prompts are seeded by
    (seed, run, sample index).
    """
    if len(fam.pool) < L:
        raise ValueError(f"{fam.name}: context pool of {len(fam.pool)} is smaller than L={L}")
    order = np.random.default_rng([int(seed), int(run), 0xC7]).permutation(len(fam.pool))
    chosen = [fam.pool[i] for i in order[:L]]

    def prompt(i):
        spec = PromptSpec(prompt_type, P, True, 0)
        return simulate_prompts(fam.masks[i], spec, np.random.default_rng([int(seed), int(run), int(i)]))

    prompts = ordered_map(prompt, chosen)
    return ContextSet([fam.images[i] for i in chosen], prompts, prompt_type)


@dataclass
class EvalResult:
    per_run: list[float]
    per_target: list[list[float]] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_run))

    @property
    def std(self) -> float:
        return float(np.std(self.per_run))


def evaluate(state: ModelState | None, fam: FamilyData, protocol: EvalProtocol,
             predictor: Predictor | None = None) -> EvalResult:
    """Dice over the family's eval targets for ``n_runs`` freshly sampled contexts."""
    if set(fam.pool) & set(fam.eval):
        raise ValueError(f"{fam.name}: eval targets overlap the context pool")
    if not fam.eval:
        raise ValueError(f"{fam.name}: no eval targets")
    if predictor is None:
        if state is None:
            raise ValueError("need a model state or a predictor")
        predictor = model_predictor(state)
    targets = [fam.images[i] for i in fam.eval]
    per_run, per_target = [], []
    for run in range(protocol.n_runs):
        ctx = sample_context(fam, protocol.L, protocol.P, protocol.prompt_type, protocol.seed, run)
        scores = predictor(targets, ctx)
        d = [dice(np.asarray(s) >= protocol.threshold, fam.masks[i]) for s, i in zip(scores, fam.eval)]
        per_target.append(d)
        per_run.append(float(np.mean(d)))
    return EvalResult(per_run, per_target)


def context_size_sweep(state: ModelState | None, families: Sequence[FamilyData], sizes: Sequence[int],
                       prompt_counts: Sequence[int], protocol: EvalProtocol,
                       predictor: Predictor | None = None) -> list[dict]:
    """Per-run mean Dice (averaged over families) for every (L, P) cell.

    All cells share the protocol seed, so run r of every cell uses nested
    context draws and comparisons between cells are paired.
    """
    if isinstance(families, FamilyData):
        families = [families]
    for L in sizes:
        for fam in families:
            if L > len(fam.pool):
                raise ValueError(f"{fam.name}: L={L} exceeds context pool of {len(fam.pool)}")
    rows = []
    for L in sizes:
        for P in prompt_counts:
            proto = EvalProtocol(protocol.n_runs, L, P, protocol.prompt_type, protocol.seed, protocol.threshold)
            results = [evaluate(state, fam, proto, predictor).per_run for fam in families]
            for run in range(proto.n_runs):
                rows.append({"prompt_type": proto.prompt_type, "L": L, "P": P, "run": run,
                             "mean_dice": float(np.mean([r[run] for r in results]))})
    return rows


def sweep_summary(rows: Sequence[dict]) -> dict[tuple[int, int], tuple[float, float]]:
    """(L, P) -> (mean, std) over runs."""
    cells: dict[tuple[int, int], list[float]] = {}
    for r in rows:
        cells.setdefault((int(r["L"]), int(r["P"])), []).append(float(r["mean_dice"]))
    return {k: (float(np.mean(v)), float(np.std(v))) for k, v in cells.items()}


def efficiency_table(rows: Sequence[dict], model: EfficiencyModel = EfficiencyModel()) -> list[dict]:
    """One row per (prompt type, L, P): annotation seconds against mean Dice."""
    cells: dict[tuple[str, int, int], list[float]] = {}
    for r in rows:
        cells.setdefault((r["prompt_type"], int(r["L"]), int(r["P"])), []).append(float(r["mean_dice"]))
    out = []
    for (kind, L, P), vals in sorted(cells.items()):
        out.append({"prompt_type": kind, "L": L, "P": P,
                    "seconds": annotation_time(kind, L, P, model), "mean_dice": float(np.mean(vals))})
    return out


def interactive_predict(state: ModelState, x, u, threshold: float = 0.5) -> Prediction:
    """Prompt the target itself: the image goes through both branches, the prompt through the context one."""
    return forward_icl(x, ContextSet([x], [u], state.prompt_type), state, threshold=threshold)


def write_csv(rows: Sequence[dict], path, columns: Sequence[str]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in columns})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
