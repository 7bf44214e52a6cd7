"""Command-line entry point: ``wsicl <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import ConfigError
from .evaluate import (EFFICIENCY_COLUMNS, SWEEP_COLUMNS, EfficiencyModel, EvalProtocol,
                       context_size_sweep, efficiency_table, evaluate, interactive_predict, read_csv,
                       sweep_summary, write_csv)
from .net import ModelConfig, load_checkpoint
from .prompts import BoundingBox2D, PointPrompt, PromptSpec, default_radius, render_box, render_point, simulate_prompts
from .synth import FamilyData, TaskFamily, load_manifest, write_dataset
from .train import TrainConfig, train_loop
from .volume import VolumeFormatError, as_mask, dice, load_volume, save_volume

log = logging.getLogger("wsicl")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_DATA = 5
EXIT_INTERNAL = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _report("usage", message)
        sys.exit(EXIT_USAGE)


def _report(code: str, message: str, key: str | None = None):
    parts = [f"code={code}"]
    if key:
        parts.append(f"key={key}")
    parts.append("message=" + json.dumps(str(message).splitlines()[0] if message else ""))
    print("wsicl: error " + " ".join(parts), file=sys.stderr)


def _resolve(args) -> dict:
    user = config_mod.load(args.config) if args.config else {}
    return config_mod.resolve(user, seed=args.seed)


def _family(cfg: dict, seed: int, n_samples: int) -> TaskFamily:
    return TaskFamily(family_seed=seed, n_samples=n_samples, **cfg["family"])


def _eval_families(data_path) -> list[FamilyData]:
    fams = load_manifest(data_path, roles=("heldout",))
    if not fams:
        fams = [f for f in load_manifest(data_path) if f.eval]
    if not fams:
        raise ValueError(f"{data_path}: no family has evaluation targets")
    return fams


def _build(section: dict, cls, key: str):
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, str(exc)) from exc


# --- subcommands -----------------------------------------------------------

def cmd_gen_data(args, cfg):
    d = cfg["data"]
    fams = []
    for i in range(d["train_families"]):
        fams.append(FamilyData.build(_family(cfg, d["train_seed_base"] + cfg["seed"] * 100_003 + i,
                                             d["train_samples"]), name=f"train{i:03d}", role="train"))
    for i in range(d["heldout_families"]):
        fam = _family(cfg, d["heldout_seed_base"] + cfg["seed"] * 100_003 + i, d["heldout_samples"])
        fams.append(FamilyData.build(fam, d["n_context_pool"], d["n_eval"], name=f"heldout{i:03d}",
                                     role="heldout"))
    path = write_dataset(fams, args.out, {"seed": cfg["seed"], "shape": cfg["family"]["shape"]})
    print(path)


def cmd_simulate_prompts(args, cfg):
    mask = as_mask(load_volume(args.mask))
    spec = PromptSpec(args.type, args.prompts_per_image, not args.no_jitter, cfg["seed"], args.radius)
    channel = simulate_prompts(mask, spec)
    out = Path(args.out)
    save_volume(out / "prompt", channel)
    (out / "prompt_spec.json").write_text(json.dumps(spec.to_json(), indent=1))
    print(out / "prompt.json")


def cmd_train(args, cfg):
    families = load_manifest(args.data, roles=("train",))
    if not families:
        raise ValueError(f"{args.data}: no training families")
    model_cfg = _build(cfg["model"], ModelConfig, "model")
    train_cfg = _build({**cfg["train"], "seed": cfg["seed"]}, TrainConfig, "train")
    if tuple(families[0].images[0].shape) != model_cfg.input_shape:
        raise ConfigError("model.input_shape",
                          f"{model_cfg.input_shape} does not match data shape {families[0].images[0].shape}")
    state, rows = train_loop(families, train_cfg, model_cfg, out_dir=args.out)
    print(f"{Path(args.out) / 'checkpoint.json'} step={state.step} final_loss={rows[-1]['loss']:.6f}")


def _protocol(cfg, state, **over) -> EvalProtocol:
    e = cfg["eval"]
    kw = dict(n_runs=e["n_runs"], L=e["L"], P=e["P"], prompt_type=state.prompt_type, seed=cfg["seed"],
              threshold=e["threshold"])
    kw.update({k: v for k, v in over.items() if v is not None})
    return _build(kw, EvalProtocol, "eval")


def cmd_eval(args, cfg):
    state = load_checkpoint(args.checkpoint)
    protocol = _protocol(cfg, state, n_runs=args.runs)
    rows, summary = [], {}
    for fam in _eval_families(args.data):
        res = evaluate(state, fam, protocol)
        rows.extend({"family": fam.name, "run": r, "mean_dice": d} for r, d in enumerate(res.per_run))
        summary[fam.name] = {"mean": res.mean, "std": res.std, "per_run": res.per_run}
    out = Path(args.out)
    write_csv(rows, out / "eval.csv", ["family", "run", "mean_dice"])
    means = [s["mean"] for s in summary.values()]
    summary["_overall"] = {"mean": float(np.mean(means)), "protocol": protocol.to_json()}
    (out / "eval_summary.json").write_text(json.dumps(summary, indent=1))
    print(f"mean_dice={summary['_overall']['mean']:.4f}")


def cmd_sweep(args, cfg):
    state = load_checkpoint(args.checkpoint)
    protocol = _protocol(cfg, state, n_runs=args.runs)
    fams = _eval_families(args.data)
    rows = context_size_sweep(state, fams, cfg["eval"]["sizes"], cfg["eval"]["prompt_counts"], protocol)
    write_csv(rows, Path(args.out) / "sweep.csv", SWEEP_COLUMNS)
    for (L, P), (m, s) in sorted(sweep_summary(rows).items()):
        print(f"L={L} P={P} mean_dice={m:.4f} std={s:.4f}")


def cmd_efficiency(args, cfg):
    rows = read_csv(args.sweep)
    missing = set(SWEEP_COLUMNS) - set(rows[0] if rows else {})
    if missing:
        raise ValueError(f"{args.sweep}: missing sweep columns {sorted(missing)}")
    model = _build(cfg["efficiency"], EfficiencyModel, "efficiency")
    table = efficiency_table(rows, model)
    write_csv(table, Path(args.out) / "efficiency.csv", EFFICIENCY_COLUMNS)
    for r in table:
        print(f"{r['prompt_type']} L={r['L']} P={r['P']} seconds={r['seconds']} mean_dice={r['mean_dice']:.4f}")


def render_prompt_file(spec: dict, shape) -> np.ndarray:
    """Render an explicit prompt description.

    ``{"type": "box", "boxes": [{"slice", "row_min", "row_max", "col_min", "col_max"}]}`` or
    ``{"type": "point", "points": [{"slice", "row", "col", "radius"?}]}``.
    """
    kind = spec.get("type")
    channel = np.zeros(shape, dtype=np.float32)
    d, h, w = shape
    if kind == "box":
        items = spec.get("boxes") or []
        for b in items:
            box = BoundingBox2D(int(b["slice"]), int(b["row_min"]), int(b["row_max"]),
                                int(b["col_min"]), int(b["col_max"]))
            if not (0 <= box.slice_index < d and 0 <= box.row_min <= box.row_max < h
                    and 0 <= box.col_min <= box.col_max < w):
                raise ValueError(f"box {b} outside volume {tuple(shape)}")
            render_box(channel, box)
    elif kind == "point":
        items = spec.get("points") or []
        for p in items:
            render_point(channel, PointPrompt(int(p["slice"]), int(p["row"]), int(p["col"]),
                                              float(p.get("radius", default_radius(shape)))))
    else:
        raise ConfigError("prompt.type", f"expected 'box' or 'point', got {kind!r}")
    if not items:
        raise ConfigError(f"prompt.{kind}s", "no prompts given")
    return channel


def cmd_interactive(args, cfg):
    state = load_checkpoint(args.checkpoint)
    image = load_volume(args.image)
    try:
        spec = json.loads(Path(args.prompt).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<prompt-json>", f"{args.prompt} is not valid JSON ({exc.msg})") from exc
    if spec.get("type") != state.prompt_type:
        raise ConfigError("prompt.type", f"checkpoint expects {state.prompt_type!r} prompts")
    channel = render_prompt_file(spec, image.shape)
    pred = interactive_predict(state, image, channel, cfg["eval"]["threshold"])
    out = Path(args.out)
    save_volume(out / "prediction", pred.mask)
    save_volume(out / "scores", pred.scores.astype(np.float32))
    save_volume(out / "prompt", channel)
    result = {"foreground_voxels": int(pred.mask.sum())}
    if args.reference:
        result["dice"] = dice(pred.mask, as_mask(load_volume(args.reference)))
    (out / "result.json").write_text(json.dumps(result, indent=1))
    print(json.dumps(result))


# --- wiring ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory (created if missing)")
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="wsicl", description="Weak-prompt in-context segmentation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate synthetic task families")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("simulate-prompts", parents=[common], help="render simulated prompts for a mask")
    p.add_argument("--mask", required=True)
    p.add_argument("--type", choices=["box", "point"], default="box")
    p.add_argument("--prompts-per-image", type=int, default=1)
    p.add_argument("--no-jitter", action="store_true")
    p.add_argument("--radius", type=float, help="point sphere radius in voxels")
    p.set_defaults(func=cmd_simulate_prompts)

    p = sub.add_parser("train", parents=[common], help="train a model on a generated dataset")
    p.add_argument("--data", required=True, help="dataset manifest.json")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "repeated-context Dice on held-out families"),
                                 ("sweep", cmd_sweep, "context size x prompts per image sweep")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", required=True, help="directory holding checkpoint.json")
        p.add_argument("--data", required=True, help="dataset manifest.json")
        p.add_argument("--runs", type=int, help="override eval.n_runs")
        p.set_defaults(func=func)

    p = sub.add_parser("efficiency", parents=[common], help="annotation time vs Dice table from a sweep")
    p.add_argument("--sweep", required=True, help="sweep.csv")
    p.set_defaults(func=cmd_efficiency)

    p = sub.add_parser("interactive", parents=[common], help="segment one image from explicit prompts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="VOLB image")
    p.add_argument("--prompt", required=True, help="prompt JSON with explicit boxes or points")
    p.add_argument("--reference", help="optional VOLB reference mask for Dice")
    p.set_defaults(func=cmd_interactive)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        config_mod.snapshot({**cfg, "command": args.command,
                             "argv": list(sys.argv[1:] if argv is None else argv)}, args.out)
        args.func(args, cfg)
    except ConfigError as exc:
        _report("config", str(exc), exc.key)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        _report("missing-file", f"{exc.filename or exc}")
        return EXIT_MISSING
    except (VolumeFormatError, ValueError, KeyError, IndexError) as exc:
        _report("data", str(exc))
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort one-line report
        _report("internal", f"{type(exc).__name__}: {exc}")
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
