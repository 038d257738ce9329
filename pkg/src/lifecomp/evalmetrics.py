"""Post-run analyses: forward/final accuracy, forgetting ratios, component
reuse counts, the closed-form per-epoch MAC cost model, and the
intensity-sweep image export for pixel-regression models.
"""

from __future__ import annotations

import csv

import numpy as np

from .composition import ComponentSet, OrderingStructure, TaskModel
from .lifelong import LearnerState, MetricsRecord, evaluate
from .numerics import softmax

# ---------------------------------------------------------------------------
# jump-matrix summaries
# ---------------------------------------------------------------------------


def forward_final(record: MetricsRecord) -> dict:
    """Per-task (forward, final) metrics plus their means.

    Forward is the evaluation taken in the earliest row containing the task
    (for initialization tasks, the row right after the joint phase); final
    is the last row's value.
    """
    if not record.rows:
        raise ValueError("record holds no evaluation rows")
    final_row = record.rows[-1]["evals"]
    per_task = {}
    for tid in final_row:
        fwd = None
        for row in record.rows:
            if tid in row["evals"]:
                fwd = row["evals"][tid]
                break
        per_task[tid] = (fwd, final_row[tid])
    fwds = np.array([v[0] for v in per_task.values()])
    fins = np.array([v[1] for v in per_task.values()])
    return {
        "per_task": per_task,
        "forward_mean": float(fwds.mean()),
        "final_mean": float(fins.mean()),
        "forward_sem": float(fwds.std(ddof=1) / np.sqrt(len(fwds))) if len(fwds) > 1 else 0.0,
        "final_sem": float(fins.std(ddof=1) / np.sqrt(len(fins))) if len(fins) > 1 else 0.0,
    }


def forgetting_ratio(record: MetricsRecord) -> dict:
    """final/forward per task; 1.0 means nothing was forgotten.  Tasks with
    zero forward metric are reported as None (undefined)."""
    summary = forward_final(record)
    out = {}
    for tid, (fwd, fin) in summary["per_task"].items():
        out[tid] = None if fwd == 0 else fin / fwd
    return out


# ---------------------------------------------------------------------------
# component reuse
# ---------------------------------------------------------------------------


def reuse_analysis(state: LearnerState, tasks, rho: float = 0.05):
    """Count, per component, how many tasks lose more than rho of their test
    metric (relative) when that component is masked out.  Hard one-hot
    structures (the initialization tasks) are excluded: their composition
    admits no renormalized masking.  Returns (component, count) pairs sorted
    by count descending, or None when only one component exists."""
    comps = state.comps
    if comps.k <= 1:
        return None
    counts = {cid: 0 for cid in range(comps.k)}
    for task in tasks:
        model = state.models.get(task.tid)
        if model is None:
            continue
        s = model.structure
        if isinstance(s, OrderingStructure) and s.fixed_order is not None:
            continue
        x, y = (task.x_test, task.y_test) if task.x_test.shape[0] else \
            (task.x_train, task.y_train)
        base = evaluate(comps, model, x, y)
        for cid in counts:
            if cid not in s.comp_ids or len(s.comp_ids) <= 1:
                continue
            masked = evaluate(comps, model, x, y, mask=cid)
            denom = abs(base) if base != 0 else 1.0
            if (base - masked) / denom > rho:
                counts[cid] += 1
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))


# ---------------------------------------------------------------------------
# per-epoch MAC cost model
# ---------------------------------------------------------------------------


def _deep_sample_cost(d: int, dh: int, k: int, depths: int, out: int,
                      phase: str, structure: str = "ordering",
                      transforms: bool = True) -> int:
    """Exact expected multiply-accumulate count per sample for one training
    step of a soft-composition network, mirroring the counter's rules: an
    affine costs out*in forward, again for the weight gradient when the
    weights are trainable, and again for the input gradient when the input
    carries one; a k-way mixture costs width*k forward, again to push
    branch gradients, and again for trainable mixture weights.  A one-way
    ordering mixture is an identity and costs nothing.  Without transforms
    the network is a bare layer stack and every layer is priced as an
    interior layer (constant 3)."""
    if not transforms:
        branch = depths * k * 3 * dh * d
        mix = 0 if (k == 1 and structure == "ordering") else depths * 3 * k * dh
        return branch + mix
    if phase == "assimilation":
        # transforms + structure trainable, components frozen
        enc = 2 * d * dh                    # forward + dE
        branch = depths * k * 2 * dh * dh   # forward + dx (no dW)
        mix = depths * 3 * k * dh
        gate = depths * 3 * k * dh if structure == "gating" else 0
        dec = 3 * out * dh
    elif phase == "adaptation":
        # components trainable, everything task-specific frozen
        enc = d * dh                        # forward only: frozen, data input
        branch = (3 * (depths - 1) + 2) * k * dh * dh  # depth 0 input has no gradient
        mix = depths * 2 * k * dh           # forward + branch push
        # frozen gates still propagate input gradients past depth 0, and
        # their outputs then carry mixture-weight gradients
        gate = (2 * depths - 1) * k * dh if structure == "gating" else 0
        if structure == "gating":
            mix += (depths - 1) * k * dh
        dec = 2 * out * dh                  # forward + dx
    elif phase == "joint":
        # everything trainable at once
        enc = 2 * d * dh
        branch = depths * 3 * k * dh * dh
        mix = depths * 3 * k * dh
        gate = depths * 3 * k * dh if structure == "gating" else 0
        dec = 3 * out * dh
    else:
        raise ValueError(f"unknown phase: {phase}")
    if k == 1 and structure == "ordering":
        mix = 0
    return enc + branch + mix + gate + dec


def _linear_sample_cost(d: int, k: int, phase: str) -> int:
    if phase == "assimilation":
        return k * d + 2 * k     # dot forward + mix forward/weights
    if phase in ("adaptation", "joint"):
        extra = k if phase == "adaptation" else 2 * k
        return 2 * k * d + k + extra
    raise ValueError(f"unknown phase: {phase}")


def complexity_model(n: int, d: int, dh: int, k: int, T: int, n_m: int,
                     regime: str, strategy: str, structure: str = "ordering",
                     out: int = 1, depths: int | None = None,
                     transforms: bool = True) -> dict:
    """Predicted MACs for one assimilation and one adaptation epoch.

    Compositional assimilation is independent of T; replay-based adaptation
    grows affinely in T with slope n_m times the per-sample adaptation
    cost."""
    if regime not in ("compositional", "dyn+comp", "joint", "no-components",
                      "fm", "fm-dyn"):
        raise ValueError(f"unknown regime: {regime}")
    depths = depths or k
    if structure == "linear":
        assim_cost = _linear_sample_cost(d, k, "assimilation")
        adapt_cost = _linear_sample_cost(d, k, "adaptation")
        joint_cost = _linear_sample_cost(d, k, "joint")
    elif regime == "no-components":
        # fixed-order trunk: no mixtures, single component path per depth
        assim_cost = 0
        joint_cost = 2 * d * dh + 3 * depths * dh * dh + 3 * out * dh
        adapt_cost = d * dh + (3 * (depths - 1) + 2) * dh * dh + 2 * out * dh
    else:
        assim_cost = _deep_sample_cost(d, dh, k, depths, out, "assimilation",
                                       structure, transforms)
        adapt_cost = _deep_sample_cost(d, dh, k, depths, out, "adaptation",
                                       structure, transforms)
        joint_cost = _deep_sample_cost(d, dh, k, depths, out, "joint",
                                       structure, transforms)
    replay = (T - 1) * n_m if strategy == "er" else 0
    if regime in ("joint", "no-components"):
        return {"assimilation": n * joint_cost + replay * adapt_cost,
                "adaptation": 0}
    adapt = 0 if strategy == "fm" or regime in ("fm", "fm-dyn") else \
        (n + replay) * adapt_cost
    return {"assimilation": n * assim_cost, "adaptation": adapt}


# ---------------------------------------------------------------------------
# intensity sweep export
# ---------------------------------------------------------------------------


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def reconstruct(comps: ComponentSet, model: TaskModel, x: np.ndarray,
                override: dict[int, np.ndarray] | None = None) -> np.ndarray:
    """Plain-numpy forward pass of a soft-ordering model, with optional
    per-depth mixture-weight overrides; returns the predicted intensities."""
    s = model.structure
    if not isinstance(s, OrderingStructure) or s.logits is None:
        raise ValueError("reconstruction needs a trained soft-ordering structure")
    h = x @ model.e_w.value.T + model.e_b.value
    for j in range(s.depths):
        if override is not None and j in override:
            w = override[j]
        else:
            w = softmax(s.logits.value[:, j])
        out = np.zeros_like(h)
        for i, cid in enumerate(s.comp_ids):
            z = h @ comps.weights[cid].value.T + comps.biases[cid].value
            out += w[i] * (z * (z > 0))
        h = out
    z = h @ model.d_w.value.T + model.d_b.value
    if model.loss_kind == "binary-xent":
        return _stable_sigmoid(z[:, 0])
    return z[:, 0]


def override_weights(trained: np.ndarray, idx: int, alpha: float) -> np.ndarray:
    """Set one component's weight to alpha; the rest share 1-alpha in
    proportion to their trained weights (uniformly if they had none).
    Overriding with the trained weight itself is an exact identity."""
    if alpha == trained[idx]:
        return trained.copy()
    w = trained.copy()
    rest = np.delete(w, idx)
    total = rest.sum()
    if total > 0:
        rest = rest * (1.0 - alpha) / total
    else:
        rest = np.full(rest.size, (1.0 - alpha) / max(rest.size, 1))
    out = np.empty_like(w)
    out[idx] = alpha
    mask = np.arange(w.size) != idx
    out[mask] = rest
    return out


def write_pgm(path: str, img: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255)."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise ValueError(f"{path}: not a binary PGM")
        dims = f.readline().split()
        maxval = int(f.readline())
        w, h = int(dims[0]), int(dims[1])
        data = f.read(w * h)
        if len(data) != w * h:
            raise ValueError(f"{path}: truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w) / maxval


def export_intensity_sweep(comps: ComponentSet, model: TaskModel, task,
                           comp_id: int, intensities, out_path: str,
                           gap: int = 2) -> np.ndarray:
    """Render the model's reconstruction while sweeping one component's
    mixture weight over the given intensities at each depth in turn
    (rows = depths, columns = intensities) and write the tiled grid as a
    P5 image plus a companion CSV of raw pixel values."""
    s = model.structure
    if comp_id not in s.comp_ids:
        raise ValueError(f"component {comp_id} not used by task {model.tid}")
    idx = s.comp_ids.index(comp_id)
    h_img, w_img = task.metadata["shape"]
    x = task.x_train
    rows = []
    for j in range(s.depths):
        trained = softmax(s.logits.value[:, j])
        cells = []
        for alpha in intensities:
            w = override_weights(trained, idx, float(alpha))
            img = reconstruct(comps, model, x, override={j: w})
            cells.append(img.reshape(h_img, w_img))
        rows.append(cells)
    n_rows, n_cols = len(rows), len(rows[0])
    grid = np.ones((n_rows * h_img + gap * (n_rows - 1),
                    n_cols * w_img + gap * (n_cols - 1)))
    for r, cells in enumerate(rows):
        for c, cell in enumerate(cells):
            r0 = r * (h_img + gap)
            c0 = c * (w_img + gap)
            grid[r0:r0 + h_img, c0:c0 + w_img] = cell
    write_pgm(out_path, grid)
    with open(str(out_path) + ".csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["depth", "intensity", "pixel", "value"])
        for r, cells in enumerate(rows):
            for c, cell in enumerate(cells):
                for p, v in enumerate(cell.ravel()):
                    writer.writerow([r, float(intensities[c]), p, repr(float(v))])
    return grid
