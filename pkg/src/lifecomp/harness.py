"""Experiment orchestration: JSON config schema and validation, built-in
presets, the multi-seed run driver with CSV/figure artifacts, and a
versioned binary checkpoint format for learner state.
"""

from __future__ import annotations

import csv
import json
import os
import struct
import time
from pathlib import Path

import jsonschema
import numpy as np

from .adaptation import AdaptationStrategy, FisherFactors, ReplayBuffer
from .composition import (
    ComponentSet,
    GatingStructure,
    LinearStructure,
    OrderingStructure,
    TaskModel,
)
from .evalmetrics import export_intensity_sweep, forgetting_ratio, forward_final
from .lifelong import (
    REGIMES,
    ArchConfig,
    LearnerState,
    Schedule,
    make_learner,
    run_stream,
)
from .numerics import Param, rng_streams
from .tasks import (
    TaskDataset,
    binary_pairs_stream,
    generate_linear_stream,
    generate_objects,
    load_labeled_images,
    pixel_regression_stream,
)

OUTPUT_ROOT_ENV = "LIFECOMP_OUTPUT_ROOT"

# ---------------------------------------------------------------------------
# configuration schema
# ---------------------------------------------------------------------------

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "arch", "regime", "strategy", "seeds"],
    "properties": {
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "required": ["generator"],
            "properties": {
                "generator": {"enum": ["objects", "linear", "pixels", "file"]},
                # objects
                "setting": {"enum": ["random", "holdout-circle",
                                     "holdout-orange", "holdout-topleft"]},
                "n_train": {"type": "integer", "minimum": 1},
                # linear
                "T": {"type": "integer", "minimum": 1},
                "d": {"type": "integer", "minimum": 1},
                "k_star": {"type": "integer", "minimum": 1},
                "noise": {"type": "number", "minimum": 0},
                "n_val": {"type": "integer", "minimum": 1},
                "n_test": {"type": "integer", "minimum": 1},
                "labels": {"enum": ["regression", "binary"]},
                # pixels
                "n_images": {"type": "integer", "minimum": 1},
                "side": {"type": "integer", "minimum": 4},
                # file
                "path": {"type": "string"},
                "format": {"enum": ["idx", "csv"]},
                "labels_path": {"type": "string"},
                "transform_dim": {"type": "integer", "minimum": 1},
            },
        },
        "arch": {
            "type": "object",
            "additionalProperties": False,
            "required": ["structure"],
            "properties": {
                "structure": {"enum": ["linear", "ordering", "gating"]},
                "k_init": {"type": "integer", "minimum": 1},
                "hidden": {"type": "integer", "minimum": 1},
                "depths": {"type": ["integer", "null"], "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "dropout": {"type": "number", "minimum": 0,
                            "exclusiveMaximum": 1},
            },
        },
        "regime": {"enum": list(REGIMES)},
        "strategy": {
            "type": "object",
            "additionalProperties": False,
            "required": ["tag"],
            "properties": {
                "tag": {"enum": ["er", "ewc", "nft", "fm"]},
                "n_m": {"type": "integer", "minimum": 1},
                "lam": {"type": "number", "minimum": 0},
            },
        },
        "schedule": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "struct_updates": {"type": "integer", "minimum": 1},
                "adapt_freq": {"type": ["integer", "null"], "minimum": 1},
                "comp_updates": {"type": "integer", "minimum": 0},
            },
        },
        "t_init": {"type": "integer", "minimum": 1},
        "tau": {"type": "number", "minimum": 0},
        "seeds": {"type": "array", "items": {"type": "integer"},
                  "minItems": 1},
        "output_dir": {"type": "string"},
        "eval_granularity": {"enum": ["per-task", "per-epoch"]},
    },
}

_DEFAULTS = {
    "schedule": {"struct_updates": 99, "adapt_freq": None, "comp_updates": 1},
    "t_init": 4,
    "tau": 0.05,
    "output_dir": "results",
    "eval_granularity": "per-task",
}

_ARCH_DEFAULTS = {"k_init": 4, "hidden": 64, "depths": None,
                  "lr": 0.01, "batch_size": 32, "dropout": 0.0}
_STRATEGY_DEFAULTS = {"n_m": 32, "lam": 1e-3}

# Benchmark-calibrated settings shared by the presets and the acceptance
# suite.  The objects rate is the largest that trains the 100-epoch budget
# to its plateau without overshooting it; the linear settings are sized so
# the per-task structure solve reaches the least-squares optimum.
OBJECTS_LR = 0.1
LINEAR_LR = 0.01
LINEAR_K_INIT = 4
LINEAR_N_TRAIN = 256
LINEAR_STRUCT_UPDATES = 500


def validate_config(config: dict) -> dict:
    """Schema-check a config and return a copy with defaults filled in."""
    jsonschema.validate(config, CONFIG_SCHEMA)
    cfg = json.loads(json.dumps(config))  # deep copy, JSON-typed
    for key, val in _DEFAULTS.items():
        if key not in cfg:
            cfg[key] = json.loads(json.dumps(val))
        elif isinstance(val, dict):
            for k2, v2 in val.items():
                cfg[key].setdefault(k2, v2)
    for k2, v2 in _ARCH_DEFAULTS.items():
        cfg["arch"].setdefault(k2, v2)
    for k2, v2 in _STRATEGY_DEFAULTS.items():
        cfg["strategy"].setdefault(k2, v2)
    _check_stream_length(cfg)
    return cfg


def _stream_length(dcfg: dict) -> int:
    gen = dcfg["generator"]
    if gen == "objects":
        return 16
    if gen == "linear":
        return dcfg.get("T", 12)
    if gen == "pixels":
        return dcfg.get("n_images", 4)
    return dcfg.get("T", 8)


def _check_stream_length(cfg: dict) -> None:
    t_init = cfg["t_init"]
    n = _stream_length(cfg["dataset"])
    if n < t_init:
        raise ValueError(
            f"stream of {n} tasks is shorter than the {t_init} "
            f"initialization tasks")


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

_REGIME_TOKENS = {"comp": "compositional", "dyncomp": "dyn+comp",
                  "joint": "joint", "nocomp": "no-components"}
_STRATEGY_TOKENS = ("er", "ewc", "nft", "fm")
_OBJECTS_SETTINGS = ("random", "holdout-circle", "holdout-orange",
                     "holdout-topleft")


def preset_names() -> list[str]:
    names = ["pixelgen_vis"]
    for setting in _OBJECTS_SETTINGS:
        for strat in _STRATEGY_TOKENS:
            for reg in _REGIME_TOKENS:
                names.append(f"objects_{setting}_{strat}_{reg}")
    for strat in _STRATEGY_TOKENS:
        for reg in _REGIME_TOKENS:
            names.append(f"linear_{strat}_{reg}")
    return names


def _regime_for(strat: str, reg_token: str) -> str:
    regime = _REGIME_TOKENS[reg_token]
    if strat == "fm" and regime == "compositional":
        return "fm"
    if strat == "fm" and regime == "dyn+comp":
        return "fm-dyn"
    return regime


def preset(name: str) -> dict:
    """One of the built-in experiment configurations, by name."""
    if name == "pixelgen_vis":
        return validate_config({
            "dataset": {"generator": "pixels", "n_images": 4, "side": 16},
            "arch": {"structure": "ordering", "k_init": 4, "hidden": 64,
                     "depths": 4, "lr": 0.1, "batch_size": 32},
            "regime": "compositional",
            "strategy": {"tag": "er", "n_m": 32, "lam": 1e-3},
            "schedule": {"struct_updates": 499, "adapt_freq": 100,
                         "comp_updates": 1},
            "t_init": 2,
            "seeds": [0],
            "output_dir": "results/pixelgen_vis",
        })
    parts = name.split("_")
    if len(parts) == 4 and parts[0] == "objects":
        _, setting, strat, reg = parts
        if setting in _OBJECTS_SETTINGS and strat in _STRATEGY_TOKENS \
                and reg in _REGIME_TOKENS:
            return validate_config({
                "dataset": {"generator": "objects", "setting": setting},
                "arch": {"structure": "ordering", "k_init": 4, "hidden": 64,
                         "depths": 4, "lr": OBJECTS_LR, "batch_size": 32},
                "regime": _regime_for(strat, reg),
                "strategy": {"tag": strat, "n_m": 5, "lam": 1e-3},
                "schedule": {"struct_updates": 99, "adapt_freq": None,
                             "comp_updates": 0 if strat == "fm" else 1},
                "t_init": 4,
                "tau": 0.05,
                "seeds": list(range(10)),
                "output_dir": f"results/{name}",
            })
    if len(parts) == 3 and parts[0] == "linear":
        _, strat, reg = parts
        if strat in _STRATEGY_TOKENS and reg in _REGIME_TOKENS:
            return validate_config({
                "dataset": {"generator": "linear", "T": 12, "d": 20,
                            "k_star": 4, "noise": 0.1,
                            "n_train": LINEAR_N_TRAIN},
                "arch": {"structure": "linear", "k_init": LINEAR_K_INIT,
                         "lr": LINEAR_LR, "batch_size": 32},
                "regime": _regime_for(strat, reg),
                "strategy": {"tag": strat, "n_m": 32, "lam": 1e-3},
                "schedule": {"struct_updates": LINEAR_STRUCT_UPDATES,
                             "adapt_freq": None,
                             "comp_updates": 0 if strat == "fm" else 1},
                "t_init": 4,
                "seeds": list(range(10)),
                "output_dir": f"results/{name}",
            })
    raise ValueError(f"unknown preset: {name}")


# ---------------------------------------------------------------------------
# stream construction
# ---------------------------------------------------------------------------


def blob_images(n: int, side: int, seed: int) -> list[np.ndarray]:
    """Synthetic grayscale images, each a superposition of two soft blobs.

    The blob centers and widths are shared across the batch up to a small
    jitter, so the images form a family of close variants: the right setting
    for studying shared transforms, whose training on every task would
    otherwise erase earlier, dissimilar reconstructions.  Intensities span
    (0, 1) exclusive."""
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    rr, cc = np.mgrid[0:side, 0:side] / (side - 1)
    base = rng.uniform(0.25, 0.75, (2, 2))
    sig = rng.uniform(0.10, 0.2, 2)
    images = []
    for _ in range(n):
        img = np.zeros((side, side))
        for b in range(2):
            cy, cx = base[b] + rng.uniform(-0.08, 0.08, 2)
            s = sig[b] * rng.uniform(0.8, 1.25)
            img += np.exp(-((rr - cy) ** 2 + (cc - cx) ** 2) / (2 * s ** 2))
        img = img / img.max()
        images.append(0.02 + 0.96 * img)
    return images


def build_stream(dcfg: dict, seed: int) -> list[TaskDataset]:
    gen = dcfg["generator"]
    if gen == "objects":
        stream = generate_objects(dcfg.get("setting", "random"), seed)
        if "n_train" in dcfg:
            rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])
            stream = [t.subsample(dcfg["n_train"], rng) for t in stream]
        return stream
    if gen == "linear":
        return generate_linear_stream(
            seed=seed, T=dcfg.get("T", 12), d=dcfg.get("d", 20),
            k_star=dcfg.get("k_star", 4), noise=dcfg.get("noise", 0.1),
            n_train=dcfg.get("n_train", 128), n_val=dcfg.get("n_val", 64),
            n_test=dcfg.get("n_test", 64),
            labels=dcfg.get("labels", "regression"))
    if gen == "pixels":
        images = blob_images(dcfg.get("n_images", 4),
                             dcfg.get("side", 16), seed)
        return pixel_regression_stream(images)
    if gen == "file":
        source = load_labeled_images(dcfg["path"], dcfg.get("format", "idx"),
                                     dcfg.get("labels_path"))
        return binary_pairs_stream(source, dcfg.get("T", 8), seed,
                                   transform_dim=dcfg.get("transform_dim", 64))
    raise ValueError(f"unknown generator: {gen}")


# ---------------------------------------------------------------------------
# artifact writers
# ---------------------------------------------------------------------------


def _write_metrics(path: Path, state: LearnerState, record) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["after_task", "eval_task", "metric", "value"])
        for row in record.rows:
            for tid in sorted(row["evals"]):
                w.writerow([row["after"], tid, state.models[tid].metric,
                            repr(float(row["evals"][tid]))])


def _write_summary(path: Path, record) -> dict:
    summary = forward_final(record)
    ratios = forgetting_ratio(record)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["task", "forward", "final", "forgetting"])
        for tid in sorted(summary["per_task"]):
            fwd, fin = summary["per_task"][tid]
            r = ratios[tid]
            w.writerow([tid, repr(float(fwd)), repr(float(fin)),
                        "" if r is None else repr(float(r))])
        valid = [r for r in ratios.values() if r is not None]
        w.writerow(["mean", repr(summary["forward_mean"]),
                    repr(summary["final_mean"]),
                    repr(float(np.mean(valid))) if valid else ""])
    return summary


def _write_components(path: Path, record) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["task", "k_after", "kept_candidate"])
        for row in record.k_history:
            w.writerow([row["task"], row["k"], int(row["kept"])])


def _write_costs(path: Path, record) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["task", "phase", "macs"])
        for row in record.costs:
            w.writerow([row["task"], row["phase"], row["macs"]])


def _render_figures(out_dir: Path, record) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if record.train_curves:
        fig, ax = plt.subplots(figsize=(7, 4))
        for tid, losses in sorted(record.train_curves.items()):
            ax.plot(losses, label=f"task {tid}")
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss")
        if len(record.train_curves) <= 12:
            ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out_dir / "training_curves.png", dpi=120)
        plt.close(fig)

    tids = sorted(record.rows[-1]["evals"])
    mat = np.full((len(record.rows), len(tids)), np.nan)
    for i, row in enumerate(record.rows):
        for j, tid in enumerate(tids):
            if tid in row["evals"]:
                mat[i, j] = row["evals"][tid]
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(mat, aspect="auto", interpolation="nearest")
    ax.set_xlabel("evaluated task")
    ax.set_ylabel("evaluation round")
    fig.colorbar(im, ax=ax, label="test metric")
    fig.tight_layout()
    fig.savefig(out_dir / "jump_matrix.png", dpi=120)
    plt.close(fig)


def _render_aggregate(out_dir: Path, summaries: dict[int, dict]) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    tids = sorted(next(iter(summaries.values()))["per_task"])
    fwd = np.array([[summaries[s]["per_task"][t][0] for t in tids]
                    for s in summaries])
    fin = np.array([[summaries[s]["per_task"][t][1] for t in tids]
                    for s in summaries])
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(tids, fwd.mean(axis=0), marker="o", label="forward")
    ax.plot(tids, fin.mean(axis=0), marker="s", label="final")
    ax.set_xlabel("task")
    ax.set_ylabel("mean test metric over seeds")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "summary.png", dpi=120)
    plt.close(fig)


def _maybe_export_sweep(out_dir: Path, cfg: dict, state: LearnerState,
                        stream: list[TaskDataset]) -> None:
    if cfg["dataset"]["generator"] != "pixels":
        return
    task = stream[-1]
    model = state.models.get(task.tid)
    if model is None or not isinstance(model.structure, OrderingStructure) \
            or model.structure.logits is None:
        return
    cid = model.structure.comp_ids[0]
    export_intensity_sweep(state.comps, model, task, cid,
                           [0.0, 0.25, 0.5, 0.75, 1.0],
                           str(out_dir / f"sweep_c{cid}_t{task.tid}.pgm"))


# ---------------------------------------------------------------------------
# run driver
# ---------------------------------------------------------------------------


def _resolve_out_dir(cfg: dict, out: str | None) -> Path:
    path = Path(out) if out else Path(cfg["output_dir"])
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def run_single(cfg: dict, seed: int, out_dir: Path) -> tuple[LearnerState, dict]:
    """Train one seed and write its artifact directory; returns the final
    learner state and the forward/final summary."""
    stream = build_stream(cfg["dataset"], seed)
    arch = ArchConfig(**cfg["arch"])
    strategy = AdaptationStrategy(tag=cfg["strategy"]["tag"],
                                  n_m=cfg["strategy"]["n_m"],
                                  lam=cfg["strategy"]["lam"])
    schedule = Schedule(**cfg["schedule"])
    state = make_learner(arch, cfg["regime"], strategy, schedule, seed=seed,
                         t_init=cfg["t_init"], tau=cfg["tau"])
    t0 = time.time()
    record = run_stream(state, stream,
                        per_epoch_eval=cfg["eval_granularity"] == "per-epoch")
    wall = time.time() - t0

    out_dir.mkdir(parents=True, exist_ok=True)
    _write_metrics(out_dir / "metrics.csv", state, record)
    summary = _write_summary(out_dir / "summary.csv", record)
    _write_components(out_dir / "components.csv", record)
    _write_costs(out_dir / "costs.csv", record)
    with open(out_dir / "run.json", "w") as f:
        json.dump({"seed": seed, "wall_time_s": wall,
                   "k_final": state.comps.k,
                   "components_added": state.components_added}, f, indent=2)
    _render_figures(out_dir, record)
    _maybe_export_sweep(out_dir, cfg, state, stream)
    checkpoint_save(state, out_dir / "checkpoint.bin", config=cfg)
    return state, summary


def run(config: dict | str | Path, out: str | None = None,
        seeds: list[int] | None = None,
        per_epoch_eval: bool | None = None) -> Path:
    """Execute a configuration across its seeds; returns the run directory
    containing config.lock.json plus one seed_<s>/ artifact dir per seed."""
    if isinstance(config, (str, Path)):
        with open(config) as f:
            config = json.load(f)
    cfg = validate_config(config)
    if seeds is not None:
        cfg["seeds"] = list(seeds)
    if per_epoch_eval is not None:
        cfg["eval_granularity"] = "per-epoch" if per_epoch_eval else "per-task"
    out_dir = _resolve_out_dir(cfg, out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"output directory {out_dir} is not writable")
    with open(out_dir / "config.lock.json", "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
    summaries = {}
    for seed in cfg["seeds"]:
        _, summary = run_single(cfg, seed, out_dir / f"seed_{seed}")
        summaries[seed] = summary
    _render_aggregate(out_dir, summaries)
    return out_dir


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"LCCP"
CHECKPOINT_VERSION = 1


def _structure_descriptor(s) -> dict:
    ids = [int(c) for c in s.comp_ids]
    if isinstance(s, LinearStructure):
        return {"kind": "linear", "comp_ids": ids}
    if isinstance(s, OrderingStructure):
        return {"kind": "ordering", "comp_ids": ids, "depths": s.depths,
                "fixed_order": None if s.fixed_order is None
                else [int(v) for v in s.fixed_order]}
    if isinstance(s, GatingStructure):
        return {"kind": "gating", "comp_ids": ids,
                "depths": s.depths, "hidden": s.hidden}
    raise TypeError(f"unknown structure type: {type(s)!r}")


def _rebuild_structure(desc: dict):
    if desc["kind"] == "linear":
        return LinearStructure(desc["comp_ids"],
                               init=np.zeros(len(desc["comp_ids"])))
    if desc["kind"] == "ordering":
        fo = desc["fixed_order"]
        if fo is not None:
            return OrderingStructure(desc["comp_ids"], depths=desc["depths"],
                                     fixed_order=tuple(fo))
        return OrderingStructure(
            desc["comp_ids"], depths=desc["depths"],
            logits=np.zeros((len(desc["comp_ids"]), desc["depths"])))
    return GatingStructure(desc["comp_ids"], depths=desc["depths"],
                           hidden=desc["hidden"], rng=None)


def _state_params(state: LearnerState) -> list[Param]:
    """Deterministic enumeration of every parameter block; the save and load
    paths both use it, so block order is consistent by construction."""
    out = list(state.comps.weights) + list(state.comps.biases)
    if state.shared_e is not None:
        out += list(state.shared_e) + list(state.shared_d)
    for tid in sorted(state.models):
        m = state.models[tid]
        out += m.structure.params()
        if m.e_w is not None and not m.shared_transforms:
            out += [m.e_w, m.e_b, m.d_w, m.d_b]
    return out


def _model_descriptor(m: TaskModel) -> dict:
    desc = {"tid": m.tid, "structure": _structure_descriptor(m.structure),
            "loss_kind": m.loss_kind, "e_kind": m.e_kind, "metric": m.metric,
            "shared_transforms": m.shared_transforms}
    if m.e_w is not None and not m.shared_transforms:
        desc["e_shape"] = list(m.e_w.value.shape)
        desc["d_shape"] = list(m.d_w.value.shape)
    return desc


def checkpoint_save(state: LearnerState, path: str | Path,
                    config: dict | None = None) -> None:
    """Versioned binary container: magic, version, JSON header describing
    every block, then the blocks as little-endian 64-bit floats."""
    params = _state_params(state)
    blocks: list[np.ndarray] = [p.value for p in params]
    header = {
        "version": CHECKPOINT_VERSION,
        "config": config,
        "arch": {"structure": state.arch.structure, "k_init": state.arch.k_init,
                 "hidden": state.arch.hidden, "depths": state.arch.depths,
                 "lr": state.arch.lr, "batch_size": state.arch.batch_size,
                 "dropout": state.arch.dropout},
        "regime": state.regime,
        "seed": state.seed,
        "t_init": state.t_init,
        "tau": state.tau,
        "tasks_seen": state.tasks_seen,
        "components_added": state.components_added,
        "schedule": {"struct_updates": state.schedule.struct_updates,
                     "adapt_freq": state.schedule.adapt_freq,
                     "comp_updates": state.schedule.comp_updates},
        "comps": {"kind": state.comps.kind, "dim": state.comps.dim,
                  "k": state.comps.k},
        "shared_transforms": state.shared_e is not None,
        "shared_shapes": None if state.shared_e is None else
        [list(p.value.shape) for p in
         list(state.shared_e) + list(state.shared_d)],
        "models": [_model_descriptor(state.models[t])
                   for t in sorted(state.models)],
        "param_blocks": [{"shape": list(p.value.shape), "frozen": p.frozen}
                         for p in params],
        "strategy": {"tag": state.strategy.tag, "n_m": state.strategy.n_m,
                     "lam": state.strategy.lam},
        "buffer": [{"tid": t, "x_shape": list(x.shape),
                    "y_shape": list(np.asarray(y).shape)}
                   for t, (x, y) in sorted(state.strategy.buffer.items())],
        "factors": [{"tid": t,
                     "comps": [{"cid": c,
                                "a_shape": list(A.shape),
                                "b_shape": list(B.shape),
                                "w_shape": list(
                                    state.strategy.factors.snapshots[t][c].shape)}
                               for c, (A, B) in sorted(f.items())]}
                    for t, f in sorted(state.strategy.factors.per_task.items())],
        "rng": {name: g.bit_generator.state
                for name, g in sorted(state.rngs.items())},
    }
    for t, (x, y) in sorted(state.strategy.buffer.items()):
        blocks += [x, np.asarray(y, dtype=np.float64)]
    for t, f in sorted(state.strategy.factors.per_task.items()):
        for c, (A, B) in sorted(f.items()):
            blocks += [A, B, state.strategy.factors.snapshots[t][c]]
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hdr)))
        f.write(hdr)
        for b in blocks:
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def _read_exact(f, n: int, path) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ValueError(f"corrupt checkpoint {path}: truncated")
    return data


def checkpoint_load(path: str | Path) -> tuple[LearnerState, dict | None]:
    """Inverse of checkpoint_save; refuses version mismatches and truncated
    files without constructing any partial state."""
    with open(path, "rb") as f:
        if _read_exact(f, 4, path) != CHECKPOINT_MAGIC:
            raise ValueError(f"corrupt checkpoint {path}: bad magic")
        version, hdr_len = struct.unpack("<IQ", _read_exact(f, 12, path))
        if version != CHECKPOINT_VERSION:
            raise ValueError(
                f"checkpoint {path} has format version {version}; "
                f"this build reads version {CHECKPOINT_VERSION}")
        header = json.loads(_read_exact(f, hdr_len, path))

        def read_block(shape):
            n = int(np.prod(shape)) if shape else 1
            data = _read_exact(f, n * 8, path)
            arr = np.frombuffer(data, dtype="<f8").astype(np.float64)
            return arr.reshape(shape) if shape else arr[0]

        param_values = [read_block(b["shape"]) for b in header["param_blocks"]]
        buffer_values = [(read_block(b["x_shape"]), read_block(b["y_shape"]))
                         for b in header["buffer"]]
        factor_values = [[(read_block(c["a_shape"]), read_block(c["b_shape"]),
                           read_block(c["w_shape"])) for c in entry["comps"]]
                         for entry in header["factors"]]

    arch = ArchConfig(**header["arch"])
    strategy = AdaptationStrategy(tag=header["strategy"]["tag"],
                                  n_m=header["strategy"]["n_m"],
                                  lam=header["strategy"]["lam"])
    schedule = Schedule(**header["schedule"])
    state = make_learner(arch, header["regime"], strategy, schedule,
                         seed=header["seed"], t_init=header["t_init"],
                         tau=header["tau"])
    state.tasks_seen = header["tasks_seen"]
    state.components_added = header["components_added"]
    state.init_done = True

    comps = ComponentSet(header["comps"]["kind"], header["comps"]["dim"])
    state.comps = comps

    cursor = 0

    def take():
        nonlocal cursor
        v = param_values[cursor]
        cursor += 1
        return v

    for _ in range(header["comps"]["k"]):
        if comps.kind == "linear":
            comps.add(take())
        else:
            comps.add(take(), np.zeros(comps.dim))
    if comps.kind == "layer":  # biases follow all weights in block order
        for b in comps.biases:
            b.replace(take())

    shared_e = shared_d = None
    if header["shared_transforms"]:
        shapes = header["shared_shapes"]
        shared_e = (Param(take(), "Ew"), Param(take(), "Eb"))
        shared_d = (Param(take(), "Dw"), Param(take(), "Db"))
        state.shared_e, state.shared_d = shared_e, shared_d

    for desc in header["models"]:
        s = _rebuild_structure(desc["structure"])
        for p in s.params():
            p.replace(take())
        kwargs = {}
        if desc["shared_transforms"]:
            kwargs = {"e_w": shared_e[0], "e_b": shared_e[1],
                      "d_w": shared_d[0], "d_b": shared_d[1]}
        elif "e_shape" in desc:
            tid = desc["tid"]
            kwargs = {"e_w": Param(take(), f"Ew{tid}"),
                      "e_b": Param(take(), f"Eb{tid}"),
                      "d_w": Param(take(), f"Dw{tid}"),
                      "d_b": Param(take(), f"Db{tid}")}
        state.models[desc["tid"]] = TaskModel(
            tid=desc["tid"], structure=s, loss_kind=desc["loss_kind"],
            e_kind=desc["e_kind"], shared_transforms=desc["shared_transforms"],
            metric=desc["metric"], **kwargs)

    params = _state_params(state)
    if len(params) != len(header["param_blocks"]):
        raise ValueError(f"corrupt checkpoint {path}: block count mismatch")
    for p, meta in zip(params, header["param_blocks"]):
        p.frozen = meta["frozen"]

    for entry, (x, y) in zip(header["buffer"], buffer_values):
        x = x.copy()
        y = y.copy()
        x.setflags(write=False)
        y.setflags(write=False)
        strategy.buffer._store[entry["tid"]] = (x, y)
    for entry, mats in zip(header["factors"], factor_values):
        factors = {c["cid"]: (A, B)
                   for c, (A, B, _) in zip(entry["comps"], mats)}
        snaps = {c["cid"]: W for c, (_, _, W) in zip(entry["comps"], mats)}
        ff = strategy.factors
        ff.per_task[entry["tid"]] = factors
        ff.snapshots[entry["tid"]] = snaps
        for cid, (A, B) in factors.items():
            term = ff._apply(A, snaps[cid], B)
            ff.anchor[cid] = ff.anchor.get(cid, 0) + term

    state.rngs = rng_streams(header["seed"])
    for name, st in header["rng"].items():
        state.rngs[name].bit_generator.state = st

    return state, header["config"]
