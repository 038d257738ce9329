"""Accommodation strategies: experience replay (ER), Kronecker-factored
elastic weight consolidation (EWC), naive fine-tuning (NFT), and the
frozen-components ablation (FM).  Each exposes one "adaptation epoch" over
the shared component parameters; task structures and transforms stay fixed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .composition import ComponentSet, TaskModel, component_gradients, forward
from .numerics import MacCounter, Tape, loss_forward, sgd_step


class ReplayBuffer:
    """Per-task replay memory; contents are write-once."""

    def __init__(self):
        self._store: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def __len__(self):
        return len(self._store)

    def __contains__(self, tid: int) -> bool:
        return tid in self._store

    def store(self, tid: int, x: np.ndarray, y: np.ndarray, n_m: int,
              rng: np.random.Generator) -> None:
        if tid in self._store:
            raise ValueError(f"buffer for task {tid} already written")
        n = x.shape[0]
        if n < n_m:
            warnings.warn(f"task {tid} has only {n} samples; storing all of them")
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=n_m, replace=False)
        xs, ys = x[idx].copy(), y[idx].copy()
        xs.setflags(write=False)
        ys.setflags(write=False)
        self._store[tid] = (xs, ys)

    def get(self, tid: int) -> tuple[np.ndarray, np.ndarray]:
        return self._store[tid]

    def items(self):
        return self._store.items()

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for tid in sorted(self._store):
            xs, ys = self._store[tid]
            h.update(np.int64(tid).tobytes())
            h.update(xs.tobytes())
            h.update(ys.tobytes())
        return h.hexdigest()


class FisherFactors:
    """Per-task, per-component Kronecker curvature factors plus the running
    penalty anchor (sum over stored tasks of A^t W^(t) B^t)."""

    def __init__(self):
        self.per_task: dict[int, dict[int, tuple[np.ndarray, np.ndarray]]] = {}
        self.snapshots: dict[int, dict[int, np.ndarray]] = {}
        self.anchor: dict[int, np.ndarray] = {}

    def _apply(self, A: np.ndarray, w: np.ndarray, B: np.ndarray) -> np.ndarray:
        if w.ndim == 1:  # vector component: B is 1x1
            return (A @ w) * B[0, 0]
        return A @ w @ B

    def add_task(self, tid: int, factors: dict[int, tuple[np.ndarray, np.ndarray]],
                 comps: ComponentSet) -> None:
        if tid in self.per_task:
            raise ValueError(f"factors for task {tid} already stored")
        self.per_task[tid] = factors
        snap = {cid: comps.weights[cid].value.copy() for cid in factors}
        self.snapshots[tid] = snap
        for cid, (A, B) in factors.items():
            term = self._apply(A, snap[cid], B)
            if cid in self.anchor:
                self.anchor[cid] = self.anchor[cid] + term
            else:
                self.anchor[cid] = term

    def penalty_grads(self, comps: ComponentSet) -> dict[int, np.ndarray]:
        """d/dW of the quadratic penalty (without the lambda scale)."""
        out: dict[int, np.ndarray] = {}
        for tid, factors in self.per_task.items():
            for cid, (A, B) in factors.items():
                term = self._apply(A, comps.weights[cid].value, B)
                out[cid] = out.get(cid, 0.0) + term
        for cid in out:
            out[cid] = out[cid] - self.anchor[cid]
        return out

    def penalty_value(self, comps: ComponentSet, lam: float) -> float:
        """(lambda/2) sum_t sum_i tr((W-W^t)^T A (W-W^t) B)."""
        total = 0.0
        for tid, factors in self.per_task.items():
            for cid, (A, B) in factors.items():
                d = comps.weights[cid].value - self.snapshots[tid][cid]
                dm = d[:, None] if d.ndim == 1 else d
                total += float(np.trace(dm.T @ A @ dm @ B))
        return 0.5 * lam * total


def kfac_estimate(comps: ComponentSet, model: TaskModel, x: np.ndarray,
                  y: np.ndarray, macs: MacCounter | None = None,
                  ) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Kronecker factors (A, B) per active component from one mini-batch.

    A is the mixture-weighted second moment of layer inputs, averaged over
    samples and depths; B is the matching weighted second moment of the
    (unweighted) pre-activation gradients of the per-sample summed loss.
    For vector components the input moment is exact and the scalar output
    curvature carries the squared mixture weight, so both stay PSD even
    with unconstrained mixtures.
    """
    n = x.shape[0]
    if n < 1:
        raise ValueError("curvature estimation needs at least one sample")
    comps.set_frozen(False)
    model.set_frozen(False)
    for p in comps.params() + model.params():
        p.zero_grad()
    tape = Tape(macs)

    if comps.kind == "linear":
        pred = forward(tape, comps, model, x)
        loss = loss_forward(tape, pred, y, model.loss_kind)
        tape.backward(loss)
        g = pred.grad * n  # per-sample gradients under the summed loss
        A = (x.T @ x) / n
        gsq = float(np.mean(g * g))
        ids = model.structure.comp_ids
        psi = model.structure.psi.value
        out = {}
        for row, cid in enumerate(ids):
            Ai = 0.5 * (A + A.T)
            Bi = np.array([[psi[row] ** 2 * gsq]])
            out[cid] = (Ai, Bi)
        for p in comps.params() + model.params():
            p.zero_grad()
        return out

    trace: list[dict] = []
    pred = forward(tape, comps, model, x, trace=trace)
    loss = loss_forward(tape, pred, y, model.loss_kind)
    tape.backward(loss)
    d = comps.dim
    ids = model.structure.comp_ids
    acc_a = {cid: np.zeros((d, d)) for cid in ids}
    acc_b = {cid: np.zeros((d, d)) for cid in ids}
    depths = len(trace)
    for rec in trace:
        a = rec["input"].value
        dh = rec["mix"].grad * n  # per-sample dl/dh under the summed loss
        for cid, z in rec["preacts"].items():
            ghat = (z.value > 0) * dh
            w = np.asarray(rec["weights"][cid], dtype=np.float64)
            if w.ndim == 0:
                acc_a[cid] += float(w) * (a.T @ a)
                acc_b[cid] += float(w) * (ghat.T @ ghat)
            else:
                acc_a[cid] += (a * w[:, None]).T @ a
                acc_b[cid] += (ghat * w[:, None]).T @ ghat
    out = {}
    for cid in ids:
        A = acc_a[cid] / (n * depths)
        B = acc_b[cid] / (n * depths)
        out[cid] = (0.5 * (A + A.T), 0.5 * (B + B.T))
    for p in comps.params() + model.params():
        p.zero_grad()
    return out


@dataclass
class AdaptationStrategy:
    """Bundles a strategy tag with its state and hyperparameters."""

    tag: str  # er | ewc | nft | fm
    n_m: int = 32
    lam: float = 1e-3
    buffer: ReplayBuffer = field(default_factory=ReplayBuffer)
    factors: FisherFactors = field(default_factory=FisherFactors)

    def __post_init__(self):
        if self.tag not in ("er", "ewc", "nft", "fm"):
            raise ValueError(f"unknown adaptation strategy: {self.tag}")
        if self.lam < 0:
            raise ValueError("penalty weight must be non-negative")


def _make_batches(n: int, batch_size: int, rng: np.random.Generator | None):
    idx = rng.permutation(n) if rng is not None else np.arange(n)
    return [idx[i:i + batch_size] for i in range(0, n, batch_size)]


def _component_step(comps, model, xb, yb, lr, mask, factors, lam, macs,
                    drop_p=0.0, drop_rng=None):
    """One SGD step on the component parameters: data-loss gradients, plus
    the scaled quadratic-penalty gradient on weight matrices when given."""
    component_gradients(comps, model, xb, yb, mask=mask, macs=macs,
                        drop_p=drop_p, drop_rng=drop_rng)
    if factors is not None and lam != 0.0:
        for cid, g in factors.penalty_grads(comps).items():
            if cid != mask:
                comps.weights[cid].grad += lam * g
    sgd_step(comps.params(), lr)


def _epoch(comps: ComponentSet, items, lr: float, batch_size: int,
           rng: np.random.Generator | None, candidate: int | None,
           factors: FisherFactors | None = None, lam: float = 0.0,
           macs: MacCounter | None = None, drop_p: float = 0.0,
           drop_rng=None) -> int:
    """Shared adaptation-epoch driver.

    `items` is a list of (model, x, y) triples; batches are formed within
    each triple (every sample's loss runs through its own task's model),
    then the batch list is visited in a seed-shuffled order.  With a
    candidate component set, every batch takes two steps: one with the
    full component set (updating the candidate too) and one with the
    candidate masked out (updating only the pre-existing components).
    Returns the number of SGD steps taken.
    """
    if lr == 0.0:
        return 0
    batches = []
    for model, x, y in items:
        if x.shape[0] == 0:
            continue
        for idx in _make_batches(x.shape[0], batch_size, rng):
            batches.append((model, x[idx], y[idx]))
    if not batches:
        warnings.warn("adaptation epoch over an empty sample union; skipping")
        return 0
    if rng is not None and len(batches) > 1:
        order = rng.permutation(len(batches))
        batches = [batches[i] for i in order]
    steps = 0
    for model, xb, yb in batches:
        _component_step(comps, model, xb, yb, lr, None, factors, lam, macs,
                        drop_p, drop_rng)
        steps += 1
        if candidate is not None:
            _component_step(comps, model, xb, yb, lr, candidate, factors,
                            lam, macs, drop_p, drop_rng)
            steps += 1
    return steps


def nft_adapt_epoch(comps: ComponentSet, model: TaskModel, x: np.ndarray,
                    y: np.ndarray, lr: float, batch_size: int = 32,
                    rng: np.random.Generator | None = None,
                    candidate: int | None = None,
                    macs: MacCounter | None = None, drop_p: float = 0.0,
                    drop_rng=None) -> int:
    """One epoch of component-gradient SGD on current-task data only."""
    return _epoch(comps, [(model, x, y)], lr, batch_size, rng, candidate,
                  macs=macs, drop_p=drop_p, drop_rng=drop_rng)


def er_adapt_epoch(comps: ComponentSet, models: dict[int, TaskModel],
                   buffer: ReplayBuffer, tid: int, x: np.ndarray, y: np.ndarray,
                   lr: float, batch_size: int = 32,
                   rng: np.random.Generator | None = None,
                   candidate: int | None = None,
                   macs: MacCounter | None = None, drop_p: float = 0.0,
                   drop_rng=None) -> int:
    """One pass over current-task data plus every buffered task's samples."""
    items = [(models[tid], x, y)]
    for t, (xs, ys) in buffer.items():
        if t == tid:
            continue
        items.append((models[t], xs, ys))
    return _epoch(comps, items, lr, batch_size, rng, candidate, macs=macs,
                  drop_p=drop_p, drop_rng=drop_rng)


def ewc_adapt_epoch(comps: ComponentSet, model: TaskModel,
                    factors: FisherFactors, x: np.ndarray, y: np.ndarray,
                    lr: float, lam: float, batch_size: int = 32,
                    rng: np.random.Generator | None = None,
                    candidate: int | None = None,
                    macs: MacCounter | None = None, drop_p: float = 0.0,
                    drop_rng=None) -> int:
    """Current-task SGD with the Kronecker-factored quadratic penalty added
    to each stored component's weight gradient.  A candidate component has
    no factors yet and receives only the data-loss gradient."""
    if lam < 0:
        raise ValueError("penalty weight must be non-negative")
    return _epoch(comps, [(model, x, y)], lr, batch_size, rng, candidate,
                  factors=factors, lam=lam, macs=macs, drop_p=drop_p,
                  drop_rng=drop_rng)


def adapt_epoch(strategy: AdaptationStrategy, comps: ComponentSet,
                models: dict[int, TaskModel], tid: int, x: np.ndarray,
                y: np.ndarray, lr: float, batch_size: int = 32,
                rng: np.random.Generator | None = None,
                candidate: int | None = None,
                macs: MacCounter | None = None, drop_p: float = 0.0,
                drop_rng=None) -> int:
    """Dispatch one adaptation epoch for the given strategy."""
    if strategy.tag == "fm":
        return 0
    if strategy.tag == "nft":
        return nft_adapt_epoch(comps, models[tid], x, y, lr, batch_size, rng,
                               candidate, macs, drop_p, drop_rng)
    if strategy.tag == "er":
        return er_adapt_epoch(comps, models, strategy.buffer, tid, x, y, lr,
                              batch_size, rng, candidate, macs, drop_p,
                              drop_rng)
    return ewc_adapt_epoch(comps, models[tid], strategy.factors, x, y, lr,
                           strategy.lam, batch_size, rng, candidate, macs,
                           drop_p, drop_rng)


def store_task_memory(strategy: AdaptationStrategy, comps: ComponentSet,
                      model: TaskModel, tid: int, x: np.ndarray, y: np.ndarray,
                      rng: np.random.Generator | None = None,
                      batch_size: int = 32,
                      macs: MacCounter | None = None) -> None:
    """Post-task bookkeeping: ER samples its replay memory, EWC estimates
    curvature factors and folds them into the anchor; NFT and FM keep no
    state."""
    if strategy.tag == "er":
        strategy.buffer.store(tid, x, y, strategy.n_m, rng)
    elif strategy.tag == "ewc":
        n = x.shape[0]
        if rng is not None and n > batch_size:
            idx = rng.choice(n, size=batch_size, replace=False)
        else:
            idx = np.arange(min(n, batch_size))
        factors = kfac_estimate(comps, model, x[idx], y[idx], macs=macs)
        strategy.factors.add_task(tid, factors, comps)
