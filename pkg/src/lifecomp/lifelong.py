"""Stream driver: joint initialization over the first tasks, per-task
assimilation of the structure, scheduled adaptation of the shared
components, and candidate-component expansion, plus the joint /
no-components / frozen-components baseline regimes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .adaptation import AdaptationStrategy, adapt_epoch, store_task_memory
from .composition import (
    ComponentSet,
    GatingStructure,
    LinearStructure,
    OrderingStructure,
    TaskModel,
    batch_loss,
    forward,
    structure_gradients,
)
from .numerics import MacCounter, Param, Tape, rng_streams, sgd_step
from .tasks import TaskDataset

REGIMES = ("compositional", "dyn+comp", "joint", "no-components", "fm", "fm-dyn")


@dataclass
class Schedule:
    """Per-task epoch budget: struct_updates assimilation epochs, with
    comp_updates adaptation epochs after every adapt_freq of them.  The
    default is the all-then-one split (99 + 1)."""

    struct_updates: int = 99
    adapt_freq: int | None = None  # None: adapt once, after all assimilation
    comp_updates: int = 1

    def __post_init__(self):
        if self.struct_updates < 1:
            raise ValueError("need at least one assimilation epoch")
        if self.adapt_freq is not None and self.adapt_freq < 1:
            raise ValueError("adaptation frequency must be positive")

    @property
    def adapt_epochs(self) -> int:
        if self.comp_updates == 0:
            return 0
        freq = self.adapt_freq or self.struct_updates
        return (self.struct_updates // freq) * self.comp_updates

    @property
    def epochs_per_task(self) -> int:
        return self.struct_updates + self.adapt_epochs

    def adapt_now(self, assim_epoch: int) -> bool:
        """True after the given (1-based) assimilation epoch."""
        if self.comp_updates == 0:
            return False
        freq = self.adapt_freq or self.struct_updates
        return assim_epoch % freq == 0


@dataclass
class ArchConfig:
    structure: str  # linear | ordering | gating
    k_init: int = 4
    hidden: int = 64
    depths: int | None = None  # defaults to k_init
    lr: float = 0.01
    batch_size: int = 32
    dropout: float = 0.0

    def __post_init__(self):
        if self.structure not in ("linear", "ordering", "gating"):
            raise ValueError(f"unknown structure kind: {self.structure}")
        if self.depths is None:
            self.depths = self.k_init
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout probability must be in [0, 1)")


@dataclass
class MetricsRecord:
    rows: list = field(default_factory=list)      # {"after", "evals": {tid: val}}
    k_history: list = field(default_factory=list)  # {"task", "k", "kept"}
    costs: list = field(default_factory=list)      # {"task", "phase", "macs"}
    train_curves: dict = field(default_factory=dict)  # tid -> per-epoch loss
    epoch_rows: list = field(default_factory=list)    # per-epoch eval (optional)


@dataclass
class LearnerState:
    arch: ArchConfig
    regime: str
    strategy: AdaptationStrategy
    schedule: Schedule
    seed: int
    t_init: int = 4
    tau: float = 0.05
    comps: ComponentSet | None = None
    models: dict[int, TaskModel] = field(default_factory=dict)
    rngs: dict = None
    macs: MacCounter = field(default_factory=MacCounter)
    init_buffer: list = field(default_factory=list)
    init_done: bool = False
    tasks_seen: int = 0
    components_added: int = 0
    shared_e: tuple | None = None
    shared_d: tuple | None = None
    task_data: dict = field(default_factory=dict)  # tid -> (x_train, y_train)
    epoch_counts: dict = field(default_factory=dict)  # tid -> (assim, adapt)

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime: {self.regime}")
        if self.rngs is None:
            self.rngs = rng_streams(self.seed)

    def fingerprint(self) -> str:
        return self.comps.fingerprint()


def make_learner(arch: ArchConfig, regime: str, strategy: AdaptationStrategy,
                 schedule: Schedule | None = None, seed: int = 0,
                 t_init: int = 4, tau: float = 0.05) -> LearnerState:
    return LearnerState(arch=arch, regime=regime, strategy=strategy,
                        schedule=schedule or Schedule(), seed=seed,
                        t_init=t_init, tau=tau)


# ---------------------------------------------------------------------------
# model construction
# ---------------------------------------------------------------------------


def _loss_kind(task: TaskDataset) -> str:
    if "loss" in task.metadata:
        return task.metadata["loss"]
    if task.n_classes == 0:
        return "mse"
    return "binary-xent" if task.n_classes == 2 else "softmax-xent"


def _uniform_init(rng, shape):
    bound = 1.0 / np.sqrt(shape[1])
    return rng.uniform(-bound, bound, shape)


def _ensure_components(state: LearnerState, task: TaskDataset) -> None:
    if state.comps is not None:
        return
    rng = state.rngs["init"]
    if state.arch.structure == "linear":
        k = 1 if state.regime == "no-components" else state.arch.k_init
        state.comps = ComponentSet("linear", task.dim)
    else:
        k = state.arch.k_init
        state.comps = ComponentSet("layer", state.arch.hidden)
    for _ in range(k):
        state.comps.add_random(rng)


def _make_structure(state: LearnerState, fixed_order=None, one_hot: int | None = None):
    comps = state.comps
    ids = list(range(comps.k))
    arch = state.arch
    if arch.structure == "linear":
        if state.regime == "no-components":
            s = LinearStructure(ids, init=np.ones(1))
            s.psi.frozen = True
            return s
        init = None
        if one_hot is not None:
            init = np.zeros(len(ids))
            init[one_hot] = 1.0
        return LinearStructure(ids, init=init)
    if state.regime == "no-components":
        return OrderingStructure(ids, depths=arch.depths,
                                 fixed_order=tuple(range(comps.k))[:arch.depths])
    if fixed_order is not None:
        return OrderingStructure(ids, depths=arch.depths, fixed_order=fixed_order)
    if arch.structure == "ordering":
        return OrderingStructure(ids, depths=arch.depths,
                                 logits=np.zeros((len(ids), arch.depths)))
    return GatingStructure(ids, depths=arch.depths, hidden=arch.hidden,
                           rng=state.rngs["init"])


def build_model(state: LearnerState, task: TaskDataset,
                fixed_order=None, one_hot=None) -> TaskModel:
    _ensure_components(state, task)
    loss = _loss_kind(task)
    metric = "accuracy" if task.n_classes else "neg-rmse"
    structure = _make_structure(state, fixed_order=fixed_order, one_hot=one_hot)
    if state.arch.structure == "linear":
        return TaskModel(tid=task.tid, structure=structure, loss_kind=loss,
                         metric=metric)
    rng = state.rngs["init"]
    dh = state.arch.hidden
    out = task.n_classes if loss == "softmax-xent" else 1
    shared = task.metadata.get("shared_transforms", False)
    if shared:
        if state.shared_e is None:
            state.shared_e = (Param(_uniform_init(rng, (dh, task.dim)), "Ew"),
                              Param(np.zeros(dh), "Eb"))
            state.shared_d = (Param(_uniform_init(rng, (out, dh)), "Dw"),
                              Param(np.zeros(out), "Db"))
        e_w, e_b = state.shared_e
        d_w, d_b = state.shared_d
        e_kind = "train"
    else:
        e_kind = task.metadata.get("e_kind", "train")
        e_w = Param(_uniform_init(rng, (dh, task.dim)), f"Ew{task.tid}")
        e_b = Param(np.zeros(dh), f"Eb{task.tid}")
        if e_kind == "fixed":
            e_w.frozen = True
            e_b.frozen = True
        d_w = Param(_uniform_init(rng, (out, dh)), f"Dw{task.tid}")
        d_b = Param(np.zeros(out), f"Db{task.tid}")
    return TaskModel(tid=task.tid, structure=structure, loss_kind=loss,
                     e_kind=e_kind, e_w=e_w, e_b=e_b, d_w=d_w, d_b=d_b,
                     shared_transforms=shared, metric=metric)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(comps: ComponentSet, model: TaskModel, x: np.ndarray,
             y: np.ndarray, mask: int | None = None,
             macs: MacCounter | None = None) -> float:
    """Test metric: mean 0/1 correctness for classification, negative RMSE
    for regression (higher is better everywhere)."""
    comps.set_frozen(True)
    model.set_frozen(True)
    out = forward(Tape(macs), comps, model, x, mask=mask).value
    if model.metric == "accuracy":
        if model.loss_kind == "softmax-xent":
            pred = out.argmax(axis=1)
            return float(np.mean(pred == y))
        return float(np.mean((out > 0).astype(float) == y))
    return -float(np.sqrt(np.mean((out - y) ** 2)))


def _eval_task(state: LearnerState, task: TaskDataset) -> float:
    x, y = (task.x_test, task.y_test) if task.x_test.shape[0] else \
        (task.x_train, task.y_train)
    with state.macs.scope("eval"):
        return evaluate(state.comps, state.models[task.tid], x, y,
                        macs=state.macs)


# ---------------------------------------------------------------------------
# training steps
# ---------------------------------------------------------------------------


def _batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    idx = rng.permutation(n)
    return [idx[i:i + batch_size] for i in range(0, n, batch_size)]


def _joint_step(state, model, xb, yb, train_structure: bool,
                train_model: bool = True) -> float:
    """One SGD step on the shared components together with the model's
    transforms (and its structure when train_structure).  With train_model
    False only the components move (replayed tasks stay frozen)."""
    comps = state.comps
    comps.set_frozen(False)
    model.set_frozen(not train_model)
    if train_model and not train_structure:
        for p in model.structure.params():
            p.frozen = True
    params = comps.params() + model.params()
    for p in params:
        p.zero_grad()
    tape = Tape(state.macs)
    drop = state.arch.dropout
    loss = batch_loss(tape, comps, model, xb, yb, train=drop > 0,
                      drop_p=drop, drop_rng=state.rngs["dropout"])
    tape.backward(loss)
    if state.strategy.tag == "ewc" and state.strategy.lam != 0.0:
        for cid, g in state.strategy.factors.penalty_grads(comps).items():
            comps.weights[cid].grad += state.strategy.lam * g
    sgd_step(params, state.arch.lr)
    return float(loss.value)


def _assim_step(state, model, xb, yb, candidate: int | None) -> float:
    """Structure-only step(s); with a candidate, alternate an unmasked step
    (structure + candidate) and a masked step (structure only)."""
    comps, lr = state.comps, state.arch.lr
    drop, drop_rng = state.arch.dropout, state.rngs["dropout"]
    loss = structure_gradients(comps, model, xb, yb, candidate=candidate,
                               macs=state.macs, drop_p=drop, drop_rng=drop_rng)
    sgd_step(comps.params() + model.params(), lr)
    if candidate is not None:
        structure_gradients(comps, model, xb, yb, mask=candidate,
                            macs=state.macs, drop_p=drop, drop_rng=drop_rng)
        sgd_step(comps.params() + model.params(), lr)
    return float(loss.value)


def _assimilation_epoch(state, task, model, candidate=None) -> float:
    losses = []
    for idx in _batches(task.x_train.shape[0], state.arch.batch_size,
                        state.rngs["shuffle"]):
        losses.append(_assim_step(state, model, task.x_train[idx],
                                  task.y_train[idx], candidate))
    return float(np.mean(losses))


def _replay_items(state, task):
    items = [(state.models[task.tid], task.x_train, task.y_train)]
    if state.strategy.tag == "er":
        for t, (xs, ys) in state.strategy.buffer.items():
            if t != task.tid:
                items.append((state.models[t], xs, ys))
    return items


def _baseline_epoch(state, task, model, train_structure: bool) -> float:
    """Joint / no-components epoch: every batch updates the shared trunk
    together with the owning task's transforms (and structure, when the
    regime has one) -- nothing is frozen, replayed tasks included.  EWC
    adds its penalty inside the step."""
    batches = []
    for m, x, y in _replay_items(state, task):
        for idx in _batches(x.shape[0], state.arch.batch_size,
                            state.rngs["shuffle"]):
            batches.append((m, x[idx], y[idx]))
    if len(batches) > 1:
        order = state.rngs["shuffle"].permutation(len(batches))
        batches = [batches[i] for i in order]
    losses = []
    for m, xb, yb in batches:
        losses.append(_joint_step(state, m, xb, yb,
                                  train_structure=train_structure,
                                  train_model=True))
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# initialization phase
# ---------------------------------------------------------------------------


def _init_order(state) -> list:
    """Random coverage assignment: a permutation of the components."""
    return list(state.rngs["init"].permutation(state.comps.k))


def init_phase(state: LearnerState, tasks: list[TaskDataset]) -> None:
    """Train the components (plus the init tasks' transforms) jointly over
    the first tasks, each with a fixed random one-hot structure covering
    every component."""
    if len(tasks) != state.t_init:
        raise ValueError(f"initialization needs exactly {state.t_init} tasks")
    _ensure_components(state, tasks[0])
    k = state.comps.k
    if state.arch.structure == "linear":
        assign = _init_order(state)
        for i, task in enumerate(tasks):
            slot = assign[i % k] if state.regime != "no-components" else None
            state.models[task.tid] = build_model(state, task, one_hot=slot)
            if state.regime != "no-components":
                state.models[task.tid].structure.psi.frozen = True
    else:
        for task in tasks:
            if state.regime == "no-components":
                state.models[task.tid] = build_model(state, task)
            else:
                perm = _init_order(state)
                order = tuple(perm[j % k] for j in range(state.arch.depths))
                state.models[task.tid] = build_model(state, task,
                                                     fixed_order=order)
    with state.macs.scope("init"):
        for _ in range(state.schedule.epochs_per_task):
            batches = []
            for task in tasks:
                m = state.models[task.tid]
                for idx in _batches(task.x_train.shape[0],
                                    state.arch.batch_size,
                                    state.rngs["shuffle"]):
                    batches.append((m, task.x_train[idx], task.y_train[idx]))
            order = state.rngs["shuffle"].permutation(len(batches))
            for i in order:
                m, xb, yb = batches[i]
                _joint_step(state, m, xb, yb, train_structure=False)
    for task in tasks:
        state.task_data[task.tid] = (task.x_train, task.y_train)
        with state.macs.scope("adaptation"):
            store_task_memory(state.strategy, state.comps,
                              state.models[task.tid], task.tid,
                              task.x_train, task.y_train,
                              rng=state.rngs["data"],
                              batch_size=state.arch.batch_size,
                              macs=state.macs)
    state.init_done = True
    state.tasks_seen = len(tasks)


# ---------------------------------------------------------------------------
# expansion
# ---------------------------------------------------------------------------


def expansion_check(state: LearnerState, task: TaskDataset, model: TaskModel,
                    candidate: int) -> bool:
    """Keep the candidate component iff the relative validation improvement
    over the masked model reaches tau; on discard, the model is restored to
    exactly the masked configuration."""
    x, y = (task.x_val, task.y_val) if task.x_val.shape[0] else \
        (task.x_train, task.y_train)
    with state.macs.scope("eval"):
        a1 = evaluate(state.comps, model, x, y, macs=state.macs)
        a2 = evaluate(state.comps, model, x, y, mask=candidate, macs=state.macs)
    if a2 == 0.0:
        keep = a1 > 0.0
    else:
        keep = (a1 - a2) / abs(a2) >= state.tau
    if keep:
        state.components_added += 1
    else:
        model.structure.drop_component(candidate)
        state.comps.pop_last()
    return keep


# ---------------------------------------------------------------------------
# per-task training
# ---------------------------------------------------------------------------


def train_task(state: LearnerState, task: TaskDataset) -> list[float]:
    """Dispatch one task's training by regime; returns per-epoch losses."""
    if not state.init_done:
        raise RuntimeError("initialization phase has not run")
    regime = state.regime
    dynamic = regime in ("dyn+comp", "fm-dyn")
    sched = state.schedule
    losses = []
    model = build_model(state, task)
    state.models[task.tid] = model
    state.task_data[task.tid] = (task.x_train, task.y_train)

    if regime in ("joint", "no-components"):
        train_structure = regime == "joint"
        for _ in range(sched.epochs_per_task):
            with state.macs.scope("assimilation"):
                losses.append(_baseline_epoch(state, task, model,
                                              train_structure=train_structure))
        state.epoch_counts[task.tid] = (sched.epochs_per_task, 0)
    else:
        candidate = None
        if dynamic:
            candidate = state.comps.add_random(state.rngs["init"])
            model.structure.add_component(candidate)
        adapt_allowed = regime in ("compositional", "dyn+comp")
        assim, adapt = 0, 0
        for e in range(1, sched.struct_updates + 1):
            with state.macs.scope("assimilation"):
                losses.append(_assimilation_epoch(state, task, model,
                                                  candidate=candidate))
            assim += 1
            if adapt_allowed and sched.adapt_now(e):
                with state.macs.scope("adaptation"):
                    for _ in range(sched.comp_updates):
                        adapt_epoch(state.strategy, state.comps, state.models,
                                    task.tid, task.x_train, task.y_train,
                                    state.arch.lr, state.arch.batch_size,
                                    rng=state.rngs["shuffle"],
                                    candidate=candidate, macs=state.macs,
                                    drop_p=state.arch.dropout,
                                    drop_rng=state.rngs["dropout"])
                        adapt += 1
        if dynamic:
            expansion_check(state, task, model, candidate)
        state.epoch_counts[task.tid] = (assim, adapt)

    with state.macs.scope("adaptation"):
        store_task_memory(state.strategy, state.comps, model, task.tid,
                          task.x_train, task.y_train, rng=state.rngs["data"],
                          batch_size=state.arch.batch_size, macs=state.macs)
    state.tasks_seen += 1
    return losses


# ---------------------------------------------------------------------------
# stream driver
# ---------------------------------------------------------------------------


def run_stream(state: LearnerState, stream: list[TaskDataset],
               per_epoch_eval: bool = False) -> MetricsRecord:
    """Train the whole stream; after the initialization phase and after
    every subsequent task, evaluate all tasks seen so far."""
    if len(stream) < state.t_init:
        raise ValueError(f"stream shorter than the {state.t_init} initialization tasks")
    record = MetricsRecord()
    seen: list[TaskDataset] = []

    def mac_snapshot(tid):
        for phase in ("init", "assimilation", "adaptation", "eval"):
            record.costs.append({"task": tid, "phase": phase,
                                 "macs": state.macs.get(phase)})
        state.macs.reset()

    for task in stream:
        seen.append(task)
        if not state.init_done:
            state.init_buffer.append(task)
            if len(state.init_buffer) == state.t_init:
                init_phase(state, state.init_buffer)
                record.rows.append({
                    "after": task.tid,
                    "evals": {t.tid: _eval_task(state, t) for t in seen},
                })
                record.k_history.append({"task": task.tid,
                                         "k": state.comps.k, "kept": False})
                mac_snapshot(task.tid)
            continue
        k_before = state.comps.k
        losses = train_task(state, task)
        record.train_curves[task.tid] = losses
        record.rows.append({
            "after": task.tid,
            "evals": {t.tid: _eval_task(state, t) for t in seen},
        })
        record.k_history.append({"task": task.tid, "k": state.comps.k,
                                 "kept": state.comps.k > k_before})
        mac_snapshot(task.tid)
        if per_epoch_eval:
            record.epoch_rows.append({"after": task.tid, "losses": losses})
    if not state.init_done:
        raise ValueError("stream ended before the initialization phase completed")
    return record
