from __future__ import annotations

import numpy as np

from lifecomp.numerics import Tape


def finite_difference(loss_fn, params, step=1e-5):
    """Central finite differences of a scalar loss w.r.t. parameter blocks.

    loss_fn() rebuilds the graph from the current param values and returns
    the scalar loss value (a float). Returns one array per param.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.value)
        flat = p.value.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn()
            flat[i] = orig - step
            lo = loss_fn()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def analytic_gradients(build_loss, params):
    """Run one forward/backward and return the gradient of each block."""
    for p in params:
        p.zero_grad()
    tape = Tape()
    loss = build_loss(tape)
    tape.backward(loss)
    return [p.grad.copy() for p in params]


def max_rel_err(a, b, floor=1e-6):
    """Blockwise relative error; entries far below the block scale are
    compared against 1% of the block scale so FD truncation noise on
    near-zero entries does not dominate."""
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), max(floor, 0.01 * scale))
    return float(np.max(np.abs(a - b) / denom))


def grad_close(analytic, numeric, rtol=1e-5, atol=1e-9):
    """Elementwise |a - n| <= atol + rtol * max(|a|, |n|).  The absolute
    term absorbs central-difference rounding noise (~eps/step) on entries
    whose true magnitude sits below the noise floor."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return bool(np.all(np.abs(a - n) <= atol + rtol * np.maximum(np.abs(a), np.abs(n))))
