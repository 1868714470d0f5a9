"""Central-difference verification of tape gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor, backward, parameter


def grad_check(f, point, eps: float = 1e-5) -> float:
    """Max relative error between tape and central-difference gradients.

    ``f`` maps a list of tensors to a scalar tensor. ``point`` is an array or
    a list of arrays (one per argument). The error per coordinate is
    ``|tape - numeric| / max(1, |tape|)``.
    """
    arrays = [np.array(point, dtype=float)] if isinstance(point, np.ndarray) or np.isscalar(point) \
        else [np.array(p, dtype=float) for p in point]
    leaves = [parameter(a) for a in arrays]
    with Tape() as tape:
        loss = f(leaves)
    tape_grads = backward(tape, loss, leaves)

    worst = 0.0
    for k, base in enumerate(arrays):
        flat = base.reshape(-1)
        g = tape_grads[k].reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            up = _value(f, arrays)
            flat[i] = saved - eps
            down = _value(f, arrays)
            flat[i] = saved
            numeric = (up - down) / (2.0 * eps)
            worst = max(worst, abs(g[i] - numeric) / max(1.0, abs(g[i])))
    return worst


def _value(f, arrays) -> float:
    return float(f([Tensor(a) for a in arrays]).value)
