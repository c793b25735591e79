"""MSE loss, Adam with bias correction, and the step-halving LR schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import LayerParams, Tape, _accum
from .tensor import Tensor


def mse_loss(pred: Tensor, target: Tensor, tape: Tape | None = None) -> Tensor:
    """L = (1/(2n)) * sum((pred - target)^2) with n the batch size.

    The sum runs over every element; the gradient wrt pred is
    (pred - target) / n.  ``target`` is treated as a constant.
    """
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    n = pred.shape[0]
    diff = pred.data - target.data
    val = float((diff * diff).sum()) / (2 * n)
    out = Tensor(np.full((1, 1, 1, 1), val, dtype=pred.dtype))
    if tape is not None:

        def bwd(gout):
            _accum(pred, (gout.reshape(())[()] / n) * diff)

        tape.record("mse_loss", out, bwd)
    return out


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0


def adam_step(params: list[LayerParams], state: AdamState) -> None:
    """One Adam update over all params; grads are zeroed afterwards."""
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p in params:
        for theta, g, m, v in (
            (p.weight.data, p.weight.grad, p.adam_m_w, p.adam_v_w),
            (p.bias.data, p.bias.grad, p.adam_m_b, p.adam_v_b),
        ):
            if not np.all(np.isfinite(g)):
                raise ValueError(f"non-finite gradient in parameter block {p.name!r}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            theta -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.zero_grad()


def lr_at(step: int, initial: float = 1e-4, half_every: int = 400_000) -> float:
    """Learning rate at a given step: initial * 0.5^floor(step / half_every)."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    return initial * 0.5 ** (step // half_every)
