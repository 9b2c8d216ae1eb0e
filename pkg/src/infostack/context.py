"""Optional recurrent context module producing aggregate vectors c_t.

A single-layer GRU sits on top of the encoder stack. Its inputs are always
grad-blocked (module isolation); in ``blocked`` mode the hidden state is
additionally grad-blocked at every step, removing backpropagation through
time while leaving forward values untouched. ``absent`` mode means no
context module exists and losses/probes apply to the top encoder directly.

The context module is scored against the encoder outputs below it with the
target side grad-blocked, so its loss trains only the GRU and its head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .contrastive import PredictionHead, score_log_bilinear
from .rng import SeededRng
from .tensor import (Tensor, ShapeError, add, grad_block, matmul, mul,
                     reshape, sigmoid, stack_rows, sub, take_rows, tanh)

BPTT_MODES = ("full", "blocked", "absent")


@dataclass
class AutoregressiveModule:
    """Single-layer GRU: update/reset/candidate gates with input and
    recurrent weights plus biases."""
    d_in: int
    d_h: int
    params: dict[str, Tensor]
    bptt_mode: str = "full"

    def __post_init__(self):
        if self.bptt_mode not in BPTT_MODES:
            raise ValueError(f"bptt_mode must be one of {BPTT_MODES}, got {self.bptt_mode!r}")

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None


@dataclass
class ContextSequence:
    """Context vectors c_t, one per time step; c_t depends only on z_{0..t}."""
    c: Tensor  # [T, d_h] or [T, B, d_h]


def build_autoregressive(d_in: int, d_h: int, rng: SeededRng,
                         bptt_mode: str = "full") -> AutoregressiveModule:
    params = {}
    for gate in ("u", "r", "h"):
        aw = math.sqrt(6.0 / (d_in + d_h))
        au = math.sqrt(6.0 / (d_h + d_h))
        params[f"W{gate}"] = Tensor(rng.uniform(-aw, aw, (d_in, d_h)),
                                    requires_grad=True, name=f"ar.W{gate}")
        params[f"U{gate}"] = Tensor(rng.uniform(-au, au, (d_h, d_h)),
                                    requires_grad=True, name=f"ar.U{gate}")
        params[f"b{gate}"] = Tensor(np.zeros(d_h), requires_grad=True, name=f"ar.b{gate}")
    return AutoregressiveModule(d_in, d_h, params, bptt_mode)


def gru_step(z_t: Tensor, h_prev: Tensor, module: AutoregressiveModule) -> Tensor:
    """One GRU update: h = (1-u) * h_prev + u * h_cand.

    u = sigmoid(z W_u + h U_u + b_u), r = sigmoid(z W_r + h U_r + b_r),
    h_cand = tanh(z W_h + (r * h) U_h + b_h). Accepts [d_in]/[d_h] vectors
    or [B, d_in]/[B, d_h] batches.
    """
    p = module.params
    if z_t.shape[-1] != module.d_in or h_prev.shape[-1] != module.d_h:
        raise ShapeError("gru_step", z_t.shape, h_prev.shape,
                         detail=f"expected trailing dims ({module.d_in},), ({module.d_h},)")
    u = sigmoid(add(add(matmul(z_t, p["Wu"]), matmul(h_prev, p["Uu"])), p["bu"]))
    r = sigmoid(add(add(matmul(z_t, p["Wr"]), matmul(h_prev, p["Ur"])), p["br"]))
    cand = tanh(add(add(matmul(z_t, p["Wh"]), matmul(mul(r, h_prev), p["Uh"])), p["bh"]))
    return add(mul(sub(1.0, u), h_prev), mul(u, cand))


def context_forward(module: AutoregressiveModule, z_seq: Tensor) -> ContextSequence:
    """Run the GRU over a [T, d_in] or [T, B, d_in] sequence from h_0 = 0.

    Inputs are grad-blocked at every step regardless of mode; ``blocked``
    mode additionally grad-blocks the recurrent state, cutting gradient
    flow between time steps while leaving the forward trajectory identical.
    """
    if module.bptt_mode == "absent":
        raise ValueError("context_forward: module is configured as absent")
    if z_seq.ndim not in (2, 3) or z_seq.shape[-1] != module.d_in:
        raise ShapeError("context_forward", z_seq.shape, (module.d_in,))
    T = z_seq.shape[0]
    zd = grad_block(z_seq)
    h_shape = (module.d_h,) if z_seq.ndim == 2 else (z_seq.shape[1], module.d_h)
    h = Tensor(np.zeros(h_shape))
    outs = []
    for t in range(T):
        z_t = reshape(take_rows(zd, np.array([t])), zd.shape[1:])
        h_in = grad_block(h) if module.bptt_mode == "blocked" else h
        h = gru_step(z_t, h_in, module)
        outs.append(h)
    return ContextSequence(stack_rows(outs))


def context_infonce(z_future: Tensor, c_t: Tensor, head: PredictionHead,
                    delay: int) -> Tensor:
    """Altered score for the context module: the future target is
    grad-blocked, so gradients reach only the context path and W."""
    return score_log_bilinear(grad_block(z_future), c_t, head.weights[delay])
