"""Command-line interface: run experiment configs, sweep config values, and
render intensity-sweep visualizations from checkpoints."""

from __future__ import annotations

import argparse
import itertools
import json
import sys
from pathlib import Path

from . import harness
from .evalmetrics import export_intensity_sweep


def _parse_seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip() != ""]


def _parse_grid(text: str) -> tuple[str, list]:
    if "=" not in text:
        raise ValueError(f"grid spec {text!r} must look like key=v1,v2")
    key, values = text.split("=", 1)
    parsed = []
    for v in values.split(","):
        try:
            parsed.append(json.loads(v))
        except json.JSONDecodeError:
            parsed.append(v)
    return key, parsed


def _set_path(cfg: dict, dotted: str, value) -> None:
    node = cfg
    keys = dotted.split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def _load_config(args) -> dict:
    if args.preset:
        return harness.preset(args.preset)
    if not args.config:
        raise ValueError("either a config path or --preset is required")
    with open(args.config) as f:
        return json.load(f)


def cmd_run(args) -> int:
    cfg = _load_config(args)
    out = harness.run(cfg, out=args.out,
                      seeds=_parse_seeds(args.seeds) if args.seeds else None,
                      per_epoch_eval=True if args.per_epoch_eval else None)
    print(out)
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    grids = [_parse_grid(g) for g in args.grid]
    base_out = Path(args.out) if args.out else None
    for combo in itertools.product(*(vals for _, vals in grids)):
        variant = json.loads(json.dumps(cfg))
        tag_parts = []
        for (key, _), value in zip(grids, combo):
            _set_path(variant, key, value)
            tag_parts.append(f"{key.split('.')[-1]}={value}")
        tag = "_".join(tag_parts)
        if base_out is not None:
            out = str(base_out / tag)
        else:
            out = str(Path(variant.get("output_dir", "results")) / tag)
        print(harness.run(variant, out=out,
                          seeds=_parse_seeds(args.seeds) if args.seeds
                          else None))
    return 0


def cmd_visualize(args) -> int:
    state, cfg = harness.checkpoint_load(args.checkpoint)
    if cfg is None or "dataset" not in cfg:
        raise ValueError("checkpoint carries no dataset config; cannot "
                         "regenerate the task stream")
    stream = harness.build_stream(cfg["dataset"], state.seed)
    task = next((t for t in stream if t.tid == args.task), None)
    if task is None:
        raise ValueError(f"task {args.task} is not in the stream")
    model = state.models.get(args.task)
    if model is None:
        raise ValueError(f"checkpoint holds no model for task {args.task}")
    out = args.out or f"sweep_c{args.component}_t{args.task}.pgm"
    export_intensity_sweep(state.comps, model, task, args.component,
                           [0.0, 0.25, 0.5, 0.75, 1.0], out)
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lifecomp",
                                description="compositional lifelong-learning "
                                            "experiment harness")
    sub = p.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment config")
    run_p.add_argument("config", nargs="?", help="path to a JSON config")
    run_p.add_argument("--preset", help="built-in config name")
    run_p.add_argument("--seeds", help="comma-separated seed override")
    run_p.add_argument("--out", help="output directory override")
    run_p.add_argument("--per-epoch-eval", action="store_true")
    run_p.set_defaults(func=cmd_run)

    sweep_p = sub.add_parser("sweep", help="run a config across a value grid")
    sweep_p.add_argument("config", nargs="?", help="path to a JSON config")
    sweep_p.add_argument("--preset", help="built-in config name")
    sweep_p.add_argument("--grid", action="append", required=True,
                         metavar="KEY=V1,V2",
                         help="dotted config key and values, e.g. "
                              "schedule.struct_updates=25,50,99")
    sweep_p.add_argument("--seeds", help="comma-separated seed override")
    sweep_p.add_argument("--out", help="output directory override")
    sweep_p.set_defaults(func=cmd_sweep)

    vis_p = sub.add_parser("visualize",
                           help="render an intensity sweep from a checkpoint")
    vis_p.add_argument("checkpoint")
    vis_p.add_argument("--component", type=int, required=True)
    vis_p.add_argument("--task", type=int, required=True)
    vis_p.add_argument("--out")
    vis_p.set_defaults(func=cmd_visualize)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface a diagnostic, not a traceback
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
