"""Compositional architectures: a shared component set combined per task by
a mixture vector (linear), a per-depth softmax over components (ordering),
or an input-conditioned gate (gating), plus the candidate-component masking
used during expansion.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .numerics import Param, Tape, Var, loss_forward


class ComponentSet:
    """The shared store of k components.

    kind "linear": each component is a vector in R^d.
    kind "layer":  each component is an affine layer (d_h x d_h) + bias,
                   applied under ReLU.
    Appending never mutates existing components.
    """

    def __init__(self, kind: str, dim: int):
        if kind not in ("linear", "layer"):
            raise ValueError(f"unknown component kind: {kind}")
        if dim <= 0:
            raise ValueError("component dim must be positive")
        self.kind = kind
        self.dim = dim
        self.weights: list[Param] = []
        self.biases: list[Param] = []  # unused for linear kind

    @property
    def k(self) -> int:
        return len(self.weights)

    def add(self, w: np.ndarray, b: np.ndarray | None = None) -> int:
        """Append a component; returns its global index."""
        if self.kind == "linear":
            if w.shape != (self.dim,):
                raise ValueError(f"linear component must be ({self.dim},)")
            self.weights.append(Param(w, name=f"phi{self.k}"))
        else:
            if w.shape != (self.dim, self.dim):
                raise ValueError(f"layer component must be ({self.dim},{self.dim})")
            self.weights.append(Param(w, name=f"W{self.k}"))
            if b is None:
                b = np.zeros(self.dim)
            self.biases.append(Param(b, name=f"b{len(self.biases)}"))
        return self.k - 1

    def add_random(self, rng: np.random.Generator) -> int:
        """Append a fan-in-scaled uniform random component."""
        bound = 1.0 / np.sqrt(self.dim)
        if self.kind == "linear":
            return self.add(rng.uniform(-bound, bound, self.dim))
        return self.add(rng.uniform(-bound, bound, (self.dim, self.dim)), np.zeros(self.dim))

    def pop_last(self) -> None:
        if self.k <= 1:
            raise ValueError("component count cannot drop below 1")
        self.weights.pop()
        if self.kind == "layer":
            self.biases.pop()

    def params(self) -> list[Param]:
        return list(self.weights) + list(self.biases)

    def set_frozen(self, frozen: bool, except_ids: set[int] | None = None) -> None:
        for i, w in enumerate(self.weights):
            f = frozen and not (except_ids and i in except_ids)
            w.frozen = f
            if self.kind == "layer":
                self.biases[i].frozen = f

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(p.value.tobytes())
        return h.hexdigest()


class LinearStructure:
    """Unconstrained mixture weights over components, one entry per comp_id."""

    def __init__(self, comp_ids: list[int], init: np.ndarray | None = None):
        self.comp_ids = list(comp_ids)
        if init is None:
            init = np.zeros(len(comp_ids))
        if init.shape != (len(comp_ids),):
            raise ValueError("psi length must track component count")
        self.psi = Param(init, name="psi")

    def add_component(self, cid: int, init: float = 0.0) -> None:
        self.comp_ids.append(cid)
        self.psi.replace(np.append(self.psi.value, init))

    def drop_component(self, cid: int) -> None:
        i = self.comp_ids.index(cid)
        self.comp_ids.pop(i)
        self.psi.replace(np.delete(self.psi.value, i))

    def params(self) -> list[Param]:
        return [self.psi]


class OrderingStructure:
    """Per-depth softmax weights over components, from a logits matrix.

    logits[i, j] scores component comp_ids[i] at depth j. With fixed_order
    set, the structure is a hard (exactly one-hot) composition instead and
    carries no trainable parameters; this is how initialization-phase and
    no-components models are realized bit-exactly.
    """

    def __init__(
        self,
        comp_ids: list[int],
        depths: int,
        logits: np.ndarray | None = None,
        fixed_order: tuple[int, ...] | None = None,
    ):
        self.comp_ids = list(comp_ids)
        self.depths = depths
        self.fixed_order = fixed_order
        if fixed_order is not None:
            if len(fixed_order) != depths:
                raise ValueError("fixed order must name one component per depth")
            self.logits = None
        else:
            if logits is None:
                logits = np.zeros((len(comp_ids), depths))
            if logits.shape != (len(comp_ids), depths):
                raise ValueError("logits must be (k, depths)")
            self.logits = Param(logits, name="psi_logits")

    def add_component(self, cid: int, init: float = 1.0) -> None:
        if self.fixed_order is not None:
            self.comp_ids.append(cid)
            return
        self.comp_ids.append(cid)
        row = np.full((1, self.depths), init)
        self.logits.replace(np.vstack([self.logits.value, row]))

    def drop_component(self, cid: int) -> None:
        i = self.comp_ids.index(cid)
        self.comp_ids.pop(i)
        if self.logits is not None:
            self.logits.replace(np.delete(self.logits.value, i, axis=0))

    def weights(self, depth: int, exclude: int | None = None) -> np.ndarray:
        """Post-softmax weights at one depth (eval-time convenience)."""
        from .numerics import softmax

        rows = [i for i, c in enumerate(self.comp_ids) if c != exclude]
        return softmax(self.logits.value[rows, depth])

    def params(self) -> list[Param]:
        return [] if self.logits is None else [self.logits]


class GatingStructure:
    """Per-depth affine gates mapping the previous hidden state to component
    logits; weights are a per-input softmax."""

    def __init__(self, comp_ids: list[int], depths: int, hidden: int,
                 rng: np.random.Generator | None = None, scale: float = 0.1):
        self.comp_ids = list(comp_ids)
        self.depths = depths
        self.hidden = hidden
        k = len(comp_ids)
        self.gate_w: list[Param] = []
        self.gate_b: list[Param] = []
        for j in range(depths):
            w = np.zeros((k, hidden)) if rng is None else rng.normal(0, scale, (k, hidden))
            self.gate_w.append(Param(w, name=f"gateW{j}"))
            self.gate_b.append(Param(np.zeros(k), name=f"gateb{j}"))

    def add_component(self, cid: int) -> None:
        # the gate's output layer gains one row, initialized to zero
        self.comp_ids.append(cid)
        for j in range(self.depths):
            self.gate_w[j].replace(np.vstack([self.gate_w[j].value, np.zeros((1, self.hidden))]))
            self.gate_b[j].replace(np.append(self.gate_b[j].value, 0.0))

    def drop_component(self, cid: int) -> None:
        i = self.comp_ids.index(cid)
        self.comp_ids.pop(i)
        for j in range(self.depths):
            self.gate_w[j].replace(np.delete(self.gate_w[j].value, i, axis=0))
            self.gate_b[j].replace(np.delete(self.gate_b[j].value, i))

    def params(self) -> list[Param]:
        return list(self.gate_w) + list(self.gate_b)


Structure = LinearStructure | OrderingStructure | GatingStructure


@dataclass
class TaskModel:
    """Everything task-specific: input/output transforms, structure, loss."""

    tid: int
    structure: Structure
    loss_kind: str  # mse | binary-xent | softmax-xent
    e_kind: str = "identity"  # identity | fixed | train
    e_w: Param | None = None
    e_b: Param | None = None
    d_w: Param | None = None
    d_b: Param | None = None
    shared_transforms: bool = False
    metric: str = "accuracy"  # accuracy | neg-rmse

    def params(self) -> list[Param]:
        out = list(self.structure.params())
        if self.e_kind == "train" and self.e_w is not None:
            out += [self.e_w, self.e_b]
        if self.d_w is not None:
            out += [self.d_w, self.d_b]
        return out

    def set_frozen(self, frozen: bool) -> None:
        for p in self.params():
            p.frozen = frozen
        if self.e_kind == "fixed" and self.e_w is not None:
            self.e_w.frozen = True  # never trained, regardless of caller
            if self.e_b is not None:
                self.e_b.frozen = True

    def active_ids(self, mask: int | None = None) -> list[int]:
        return [c for c in self.structure.comp_ids if c != mask]


def _input_var(tape: Tape, model: TaskModel, x: np.ndarray):
    xv = tape.constant(x)
    if model.e_kind == "identity":
        return xv
    eb = tape.param(model.e_b) if model.e_b is not None else None
    return tape.affine(xv, tape.param(model.e_w), eb)


def _squeeze(tape: Tape, v: Var) -> Var:
    """(B, 1) -> (B,) view for scalar-output models."""
    if v.value.ndim == 2 and v.value.shape[1] == 1:
        def backward(node):
            if v.needs_grad:
                v.accumulate(node.grad[:, None])

        return tape._push(Var(v.value[:, 0], v.needs_grad, backward=backward))
    return v


def forward_linear(tape: Tape, comps: ComponentSet, model: TaskModel,
                   x: np.ndarray, mask: int | None = None):
    """psi^T (Phi^T x); (B,) raw outputs (sigmoid lives in the loss)."""
    if comps.kind != "linear":
        raise ValueError("forward_linear requires linear components")
    ids = model.active_ids(mask)
    if not ids:
        raise ValueError("no active components")
    xv = tape.constant(x)
    branches = [tape.dot_columns(xv, tape.param(comps.weights[c])) for c in ids]
    psi_full = tape.param(model.structure.psi)
    rows = [model.structure.comp_ids.index(c) for c in ids]
    psi = tape.gather(psi_full, rows, axis=0)
    return tape.mix(branches, psi)


def _deep_core(tape, comps, model, h, mask, train, drop_p, drop_rng, trace):
    s = model.structure
    ids = model.active_ids(mask)
    if not ids:
        raise ValueError("no active components")
    if isinstance(s, OrderingStructure) and s.fixed_order is not None:
        for j in range(s.depths):
            cid = s.fixed_order[j]
            if cid == mask:
                raise ValueError("cannot mask a hard-selected component")
            z = tape.affine(h, tape.param(comps.weights[cid]),
                            tape.param(comps.biases[cid]))
            out = tape.relu(z)
            if train and drop_p > 0:
                out = tape.dropout(out, drop_p, drop_rng)
            if trace is not None:
                trace.append({"input": h, "preacts": {cid: z}, "mix": out,
                              "weights": {cid: 1.0}})
            h = out
        return h

    rows = [s.comp_ids.index(c) for c in ids]
    logits_var = tape.param(s.logits) if isinstance(s, OrderingStructure) else None
    for j in range(s.depths):
        branches, preacts = [], {}
        for c in ids:
            z = tape.affine(h, tape.param(comps.weights[c]),
                            tape.param(comps.biases[c]))
            a = tape.relu(z)
            if train and drop_p > 0:
                a = tape.dropout(a, drop_p, drop_rng)
            branches.append(a)
            preacts[c] = z
        if isinstance(s, OrderingStructure):
            if len(ids) == 1:
                # a softmax over one logit is exactly 1 with zero gradient;
                # skip the degenerate mixture entirely
                out = branches[0]
                if trace is not None:
                    trace.append({"input": h, "preacts": preacts, "mix": out,
                                  "weights": {ids[0]: 1.0}})
                h = out
                continue
            w = tape.softmax_select(logits_var, (rows, j))
        else:
            gl = tape.affine(h, tape.param(s.gate_w[j]), tape.param(s.gate_b[j]))
            if len(rows) != len(s.comp_ids):
                gl = tape.gather(gl, rows, axis=1)
            w = tape.softmax_rows(gl)
        out = tape.mix(branches, w)
        if trace is not None:
            wv = w.value
            trace.append({
                "input": h, "preacts": preacts, "mix": out,
                "weights": {c: (wv[i] if wv.ndim == 1 else wv[:, i])
                            for i, c in enumerate(ids)},
            })
        h = out
    return h


def forward(tape: Tape, comps: ComponentSet, model: TaskModel, x: np.ndarray,
            mask: int | None = None, train: bool = False, drop_p: float = 0.0,
            drop_rng: np.random.Generator | None = None,
            trace: list | None = None):
    """Task prediction f^t(x) for a batch; returns the tape node.

    Classification outputs are raw logits (the loss applies the link).
    `mask` hides one component entirely: it contributes nothing and each
    depth's softmax renormalizes over the remaining components. `trace`,
    when given a list, collects per-depth inputs/pre-activations/weights
    (used by the curvature estimator).
    """
    if comps.kind == "linear":
        return forward_linear(tape, comps, model, x, mask)
    h = _input_var(tape, model, x)
    h = _deep_core(tape, comps, model, h, mask, train, drop_p, drop_rng, trace)
    if model.d_w is None:
        return h
    out = tape.affine(h, tape.param(model.d_w), tape.param(model.d_b))
    if out.value.shape[1] == 1 and model.loss_kind != "softmax-xent":
        out = _squeeze(tape, out)
    return out


def forward_ordering(tape, comps, model, x, mask=None, **kw):
    if not isinstance(model.structure, OrderingStructure):
        raise ValueError("model does not use soft ordering")
    return forward(tape, comps, model, x, mask, **kw)


def forward_gating(tape, comps, model, x, mask=None, **kw):
    if not isinstance(model.structure, GatingStructure):
        raise ValueError("model does not use soft gating")
    return forward(tape, comps, model, x, mask, **kw)


def batch_loss(tape: Tape, comps: ComponentSet, model: TaskModel,
               x: np.ndarray, y: np.ndarray, mask: int | None = None,
               train: bool = False, drop_p: float = 0.0, drop_rng=None):
    pred = forward(tape, comps, model, x, mask, train=train,
                   drop_p=drop_p, drop_rng=drop_rng)
    return loss_forward(tape, pred, y, model.loss_kind)


def structure_gradients(comps: ComponentSet, model: TaskModel,
                        x: np.ndarray, y: np.ndarray,
                        candidate: int | None = None,
                        mask: int | None = None, macs=None,
                        drop_p: float = 0.0, drop_rng=None):
    """Populate gradients for structure (and candidate/trained transforms)
    with the shared components frozen; component slots stay exactly zero."""
    comps.set_frozen(True, except_ids={candidate} if candidate is not None else None)
    model.set_frozen(False)
    for p in comps.params() + model.params():
        p.zero_grad()
    tape = Tape(macs)
    loss = batch_loss(tape, comps, model, x, y, mask=mask,
                      train=drop_p > 0, drop_p=drop_p, drop_rng=drop_rng)
    tape.backward(loss)
    return loss


def component_gradients(comps: ComponentSet, model: TaskModel,
                        x: np.ndarray, y: np.ndarray,
                        mask: int | None = None, macs=None,
                        drop_p: float = 0.0, drop_rng=None):
    """Populate gradients for the shared components with the structure and
    transforms frozen."""
    comps.set_frozen(False)
    model.set_frozen(True)
    for p in comps.params() + model.params():
        p.zero_grad()
    tape = Tape(macs)
    loss = batch_loss(tape, comps, model, x, y, mask=mask,
                      train=drop_p > 0, drop_p=drop_p, drop_rng=drop_rng)
    tape.backward(loss)
    return loss
