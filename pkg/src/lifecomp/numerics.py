"""Dense reverse-mode differentiation for the small set of graphs this
project needs, plus multiply-accumulate instrumentation.

Not a general autodiff system: the only primitives are affine maps, ReLU,
per-simplex softmax, weighted sums of branches, and the three losses.
Everything is float64 and batch-first (arrays of shape (B, dim)).
"""

from __future__ import annotations

import contextlib

import numpy as np

# Debug switch: when True every op output is checked for NaN/Inf.
CHECK_FINITE = False


def _finite(a: np.ndarray) -> None:
    if CHECK_FINITE and not np.all(np.isfinite(a)):
        raise FloatingPointError("non-finite value in computation graph")


class MacCounter:
    """Monotone multiply-accumulate counter with named phase scopes."""

    def __init__(self):
        self.counts: dict[str, int] = {}
        self._phase = "default"

    def add(self, n: int) -> None:
        if n < 0:
            raise ValueError("MAC increments must be nonnegative")
        self.counts[self._phase] = self.counts.get(self._phase, 0) + int(n)

    def get(self, phase: str = "default") -> int:
        return self.counts.get(phase, 0)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def reset(self, phase: str | None = None) -> None:
        if phase is None:
            self.counts.clear()
        else:
            self.counts.pop(phase, None)

    @contextlib.contextmanager
    def scope(self, phase: str):
        prev = self._phase
        self._phase = phase
        try:
            yield self
        finally:
            self._phase = prev


class Param:
    """A named mutable parameter block with a gradient slot and freeze flag."""

    __slots__ = ("value", "grad", "frozen", "name")

    def __init__(self, value, name: str = ""):
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.frozen = False
        self.name = name

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def replace(self, value) -> None:
        """Swap in a new value array (used when expanding), resetting the grad."""
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Param({self.name or 'unnamed'}, shape={self.value.shape}, frozen={self.frozen})"


class Var:
    """A node in the tape: a value plus how to push gradients to its parents."""

    __slots__ = ("value", "grad", "needs_grad", "param", "_backward")

    def __init__(self, value, needs_grad, param=None, backward=None):
        self.value = value
        self.grad = None
        self.needs_grad = needs_grad
        self.param = param
        self._backward = backward

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g


class Tape:
    """Ordered record of a forward pass; replays exact reverse order on backward."""

    def __init__(self, macs: MacCounter | None = None):
        self.nodes: list[Var] = []
        self.macs = macs
        self._done = False

    def _count(self, n: int) -> None:
        if self.macs is not None:
            self.macs.add(n)

    def _push(self, v: Var) -> Var:
        self.nodes.append(v)
        return v

    # ---- graph inputs ----

    def constant(self, value) -> Var:
        """Non-differentiable input (data)."""
        value = np.asarray(value, dtype=np.float64)
        return self._push(Var(value, needs_grad=False))

    def param(self, p: Param) -> Var:
        """Leaf tied to a parameter block; frozen blocks receive no gradient."""
        return self._push(Var(p.value, needs_grad=not p.frozen, param=p))

    # ---- primitives ----

    def affine(self, x: Var, w: Var, b: Var | None) -> Var:
        """x @ w.T + b with x: (B, nin), w: (nout, nin), b: (nout,)."""
        xv, wv = x.value, w.value
        if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[1]:
            raise ValueError(f"affine dims disagree: x{xv.shape} w{wv.shape}")
        if b is not None and b.value.shape != (wv.shape[0],):
            raise ValueError(f"affine bias dim mismatch: {b.value.shape} vs {wv.shape}")
        bsz, nout, nin = xv.shape[0], wv.shape[0], wv.shape[1]
        out = xv @ wv.T
        if b is not None:
            out += b.value
        _finite(out)
        self._count(bsz * nout * nin)

        parents = (x, w, b)

        def backward(v: Var):
            g = v.grad
            if w.needs_grad:
                w.accumulate(g.T @ xv)
                self._count(bsz * nout * nin)
            if b is not None and b.needs_grad:
                b.accumulate(g.sum(axis=0))
            if x.needs_grad:
                x.accumulate(g @ wv)
                self._count(bsz * nout * nin)

        needs = x.needs_grad or w.needs_grad or (b is not None and b.needs_grad)
        return self._push(Var(out, needs, backward=backward))

    def dot_columns(self, x: Var, phi: Var) -> Var:
        """x @ phi for a single linear component: x (B, d), phi (d,) -> (B,)."""
        xv, pv = x.value, phi.value
        if xv.ndim != 2 or pv.ndim != 1 or xv.shape[1] != pv.shape[0]:
            raise ValueError(f"dot dims disagree: x{xv.shape} phi{pv.shape}")
        out = xv @ pv
        _finite(out)
        self._count(xv.shape[0] * pv.shape[0])

        def backward(v: Var):
            g = v.grad
            if phi.needs_grad:
                phi.accumulate(g @ xv)
                self._count(xv.shape[0] * pv.shape[0])
            if x.needs_grad:
                x.accumulate(np.outer(g, pv))
                self._count(xv.shape[0] * pv.shape[0])

        return self._push(Var(out, x.needs_grad or phi.needs_grad, backward=backward))

    def relu(self, x: Var) -> Var:
        mask = x.value > 0
        out = x.value * mask

        def backward(v: Var):
            if x.needs_grad:
                x.accumulate(v.grad * mask)

        return self._push(Var(out, x.needs_grad, backward=backward))

    def softmax_select(self, logits: Var, sel=None) -> Var:
        """Stabilized softmax over logits[sel] (a 1-D selection of any array).

        Gradients scatter back into the selected entries only; excluded
        entries never participate, which is how masked components get exact
        weight zero.
        """
        lv = logits.value if sel is None else logits.value[sel]
        if lv.ndim != 1:
            raise ValueError("softmax_select expects a 1-D logit selection")
        z = lv - lv.max()
        e = np.exp(z)
        s = e / e.sum()
        _finite(s)

        def backward(v: Var):
            if logits.needs_grad:
                g = v.grad
                dl = s * (g - np.dot(s, g))
                if sel is None:
                    logits.accumulate(dl)
                else:
                    full = np.zeros_like(logits.value)
                    full[sel] = dl
                    logits.accumulate(full)

        return self._push(Var(s, logits.needs_grad, backward=backward))

    def gather(self, x: Var, idx, axis: int = 0) -> Var:
        """Take a subset along an axis, scattering gradients back on reverse."""
        idx = np.asarray(idx, dtype=np.intp)
        out = np.take(x.value, idx, axis=axis)

        def backward(v: Var):
            if x.needs_grad:
                full = np.zeros_like(x.value)
                if axis == 0:
                    full[idx] = v.grad
                elif axis == 1:
                    full[:, idx] = v.grad
                else:
                    raise ValueError("gather supports axis 0 or 1")
                x.accumulate(full)

        return self._push(Var(out, x.needs_grad, backward=backward))

    def dropout(self, x: Var, p: float, rng: np.random.Generator) -> Var:
        """Inverted dropout; only used when the regularizer is switched on."""
        keep = rng.random(x.value.shape) >= p
        scale = 1.0 / (1.0 - p)
        out = x.value * keep * scale

        def backward(v: Var):
            if x.needs_grad:
                x.accumulate(v.grad * keep * scale)

        return self._push(Var(out, x.needs_grad, backward=backward))

    def softmax_rows(self, logits: Var) -> Var:
        """Row-wise stabilized softmax for per-sample gate weights: (B, k)."""
        lv = logits.value
        if lv.ndim != 2:
            raise ValueError("softmax_rows expects a (B, k) logit matrix")
        z = lv - lv.max(axis=1, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=1, keepdims=True)
        _finite(s)

        def backward(v: Var):
            if logits.needs_grad:
                g = v.grad
                dot = np.sum(s * g, axis=1, keepdims=True)
                logits.accumulate(s * (g - dot))

        return self._push(Var(s, logits.needs_grad, backward=backward))

    def mix(self, branches: list[Var], weights: Var) -> Var:
        """Weighted sum of branch outputs.

        weights is either (k,) (one weight per branch, shared across the batch)
        or (B, k) (per-sample gating). Branch values must all share one shape,
        (B,) or (B, d).
        """
        k = len(branches)
        wv = weights.value
        if wv.shape[-1] != k:
            raise ValueError(f"mix got {k} branches but weights shape {wv.shape}")
        vals = [b.value for b in branches]
        shape = vals[0].shape
        for bv in vals[1:]:
            if bv.shape != shape:
                raise ValueError("mix branches must share a shape")
        per_sample = wv.ndim == 2
        bsz = shape[0]
        width = 1 if len(shape) == 1 else shape[1]
        out = np.zeros(shape)
        for i in range(k):
            wi = wv[:, i, None] if per_sample else wv[i]
            if len(shape) == 1 and per_sample:
                wi = wv[:, i]
            out += wi * vals[i]
        _finite(out)
        self._count(bsz * width * k)

        def backward(v: Var):
            g = v.grad
            pushed = False
            for i, br in enumerate(branches):
                wi = wv[:, i, None] if per_sample else wv[i]
                if len(shape) == 1 and per_sample:
                    wi = wv[:, i]
                if br.needs_grad:
                    br.accumulate(wi * g)
                    pushed = True
            if pushed:
                self._count(bsz * width * k)
            if weights.needs_grad:
                if per_sample:
                    dw = np.empty_like(wv)
                    for i in range(k):
                        prod = g * vals[i]
                        dw[:, i] = prod if len(shape) == 1 else prod.sum(axis=1)
                    weights.accumulate(dw)
                else:
                    weights.accumulate(
                        np.array([float(np.sum(g * vals[i])) for i in range(k)])
                    )
                self._count(bsz * width * k)

        needs = weights.needs_grad or any(b.needs_grad for b in branches)
        return self._push(Var(out, needs, backward=backward))

    # ---- losses ----

    def mse_loss(self, pred: Var, target: np.ndarray) -> Var:
        target = np.asarray(target, dtype=np.float64)
        if pred.value.shape != target.shape:
            raise ValueError(f"mse dims disagree: {pred.value.shape} vs {target.shape}")
        diff = pred.value - target
        out = np.array(np.mean(diff**2))

        def backward(v: Var):
            if pred.needs_grad:
                pred.accumulate(v.grad * 2.0 * diff / diff.size)

        return self._push(Var(out, pred.needs_grad, backward=backward))

    def binary_xent_loss(self, logits: Var, target: np.ndarray) -> Var:
        """Sigmoid cross-entropy on raw logits; targets in [0, 1]."""
        target = np.asarray(target, dtype=np.float64)
        z = logits.value
        if z.shape != target.shape:
            raise ValueError(f"xent dims disagree: {z.shape} vs {target.shape}")
        if np.any(target < 0) or np.any(target > 1):
            raise ValueError("binary targets must lie in [0, 1]")
        # max(z,0) - z*t + log(1+exp(-|z|)) is the stabilized form
        per = np.maximum(z, 0) - z * target + np.log1p(np.exp(-np.abs(z)))
        out = np.array(per.mean())
        e = np.exp(-np.abs(z))
        p = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

        def backward(v: Var):
            if logits.needs_grad:
                logits.accumulate(v.grad * (p - target) / z.size)

        return self._push(Var(out, logits.needs_grad, backward=backward))

    def softmax_xent_loss(self, logits: Var, labels: np.ndarray) -> Var:
        """Cross-entropy over class logits (B, C) with integer labels (B,)."""
        z = logits.value
        labels = np.asarray(labels)
        if z.ndim != 2 or labels.shape != (z.shape[0],):
            raise ValueError(f"softmax-xent dims disagree: {z.shape} vs {labels.shape}")
        if labels.min() < 0 or labels.max() >= z.shape[1]:
            raise ValueError("class index out of range")
        labels = labels.astype(np.intp)
        zs = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(zs).sum(axis=1))
        idx = np.arange(z.shape[0])
        out = np.array(np.mean(lse - zs[idx, labels]))
        probs = np.exp(zs - lse[:, None])

        def backward(v: Var):
            if logits.needs_grad:
                g = probs.copy()
                g[idx, labels] -= 1.0
                logits.accumulate(v.grad * g / z.shape[0])

        return self._push(Var(out, logits.needs_grad, backward=backward))

    # ---- reverse pass ----

    def backward(self, loss: Var) -> None:
        if not self.nodes:
            raise RuntimeError("backward before any forward pass was recorded")
        if loss.value.ndim != 0:
            raise ValueError("loss must be scalar")
        loss.grad = np.array(1.0)
        for node in reversed(self.nodes):
            if node.grad is None or not node.needs_grad:
                continue
            if node.param is not None:
                if not node.param.frozen:
                    node.param.grad += node.grad
            elif node._backward is not None:
                node._backward(node)


def loss_forward(tape: Tape, pred: Var, target: np.ndarray, kind: str) -> Var:
    if kind == "mse":
        return tape.mse_loss(pred, target)
    if kind == "binary-xent":
        return tape.binary_xent_loss(pred, target)
    if kind == "softmax-xent":
        return tape.softmax_xent_loss(pred, target)
    raise ValueError(f"unknown loss kind: {kind}")


def softmax(v: np.ndarray) -> np.ndarray:
    """Plain (non-tape) stabilized softmax; always sums to 1 within 1e-12."""
    v = np.asarray(v, dtype=np.float64)
    z = v - v.max()
    e = np.exp(z)
    return e / e.sum()


def sgd_step(params, lr: float) -> None:
    """p <- p - lr * grad for every unfrozen block; clears all grads."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for p in params:
        if not p.frozen:
            if p.grad.shape != p.value.shape:
                raise ValueError(f"grad/value shape mismatch on {p.name}")
            p.value -= lr * p.grad
        p.zero_grad()


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Named child generators off one master seed.

    Each knob owns its own stream so adding a consumer never perturbs the
    randomness seen by the others.
    """
    names = ("data", "init", "shuffle", "dropout")
    root = np.random.SeedSequence(seed)
    children = root.spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}
