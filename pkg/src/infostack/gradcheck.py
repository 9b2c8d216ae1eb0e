"""Finite-difference and isolation verification suite.

Every differentiable primitive, plus the GRU step, the log-bilinear score,
and the full contrastive composite, is checked against central differences
at h = 1e-5 over random cases; the stop-gradient operator is asserted
analytically (finite differences would see the forward identity and report
a false mismatch, so it is excluded from the FD suite by design). The
isolation suite then verifies that module-local losses cannot reach other
modules' parameters.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .contrastive import build_head, score_log_bilinear
from .context import build_autoregressive, gru_step
from .encoders import LayerSpec, StackConfig
from .rng import SeededRng
from .tensor import Tensor, backward, finite_diff_check, grad_block, tsum
from .training import Trainer, TrainerSettings, build_model, isolation_check

FD_TOLERANCE = 1e-4
FD_STEP = 1e-5


def _away_from_kinks(rng, shape, margin=0.05):
    """Random values bounded away from zero so relu is smooth at the point."""
    x = rng.uniform(0.2, 1.0, shape) * np.where(rng.uniform(0, 1, shape) < 0.5, -1.0, 1.0)
    return x + np.sign(x) * margin


def primitive_cases(rng: SeededRng):
    """(name, f, x) triples; every f maps a tensor to a scalar."""
    g = rng.generator

    def rand(*shape):
        return g.uniform(-1, 1, shape)

    a2 = Tensor(rand(3, 4))
    b2 = Tensor(rand(4, 3))
    v4 = Tensor(rand(4))
    w_c1 = Tensor(rand(4, 3, 3))
    b_c1 = Tensor(rand(4))
    w_c2 = Tensor(rand(2, 3, 3, 3))
    b_c2 = Tensor(rand(2))
    W = Tensor(rand(5, 5))
    anchor = Tensor(rand(5))
    idx = np.asarray(g.integers(0, 4, 3))
    neg_idx = np.asarray(g.integers(0, 6, (2, 3)))
    gru = build_autoregressive(4, 3, rng.child("gru"))
    h_prev = Tensor(rand(3))
    z_in = Tensor(rand(4))

    def sq(t):
        return tsum(T.mul(t, t))

    yield "add", lambda t: sq(T.add(t, a2)), rand(3, 4)
    yield "sub", lambda t: sq(T.sub(a2, t)), rand(3, 4)
    yield "mul", lambda t: tsum(T.mul(t, a2)), rand(3, 4)
    yield "mul_broadcast", lambda t: sq(T.mul(t, v4)), rand(3, 4)
    yield "neg", lambda t: sq(T.neg(t)), rand(2, 3)
    yield "relu", lambda t: sq(T.relu(t)), _away_from_kinks(g, (3, 4))
    yield "sigmoid", lambda t: sq(T.sigmoid(t)), rand(3, 4)
    yield "tanh", lambda t: sq(T.tanh(t)), rand(3, 4)
    yield "sum", lambda t: tsum(T.mul(T.tsum(t, axes=1), T.tsum(t, axes=1))), rand(3, 4)
    yield "mean_pool", lambda t: sq(T.mean_pool(t, axes=(1,))), rand(3, 4)
    yield "log_softmax", lambda t: sq(T.log_softmax(t, axis=1)), rand(3, 4)
    yield "gather_cross_entropy", \
        lambda t: T.gather_cross_entropy(T.log_softmax(t, axis=1), idx), rand(3, 4)
    yield "matmul_left", lambda t: sq(T.matmul(t, b2)), rand(3, 4)
    yield "matmul_right", lambda t: sq(T.matmul(a2, t)), rand(4, 3)
    yield "matmul_vec", lambda t: sq(T.matmul(a2, t)), rand(4)
    yield "batched_dot_a", lambda t: sq(T.batched_dot(t, b2)), rand(4, 2, 3)
    yield "batched_dot_b", lambda t: sq(T.batched_dot(Tensor(rand(4, 2, 3)), t)), rand(4, 3)
    yield "conv1d_x", lambda t: sq(T.conv1d(t, w_c1, b_c1, 2, 1)), rand(2, 3, 8)
    yield "conv1d_w", lambda t: sq(T.conv1d(Tensor(rand(2, 3, 8)), t, b_c1, 1, 0)), rand(4, 3, 3)
    yield "conv2d_x", lambda t: sq(T.conv2d(t, w_c2, b_c2, (2, 1), (1, 0))), rand(2, 3, 6, 5)
    yield "conv2d_w", lambda t: sq(T.conv2d(Tensor(rand(2, 3, 6, 5)), t, b_c2, 1, 1)), rand(2, 3, 3, 3)
    yield "reshape", lambda t: sq(T.reshape(t, (4, 3))), rand(3, 4)
    yield "transpose", lambda t: sq(T.transpose(t, (1, 0))), rand(3, 4)
    yield "take_rows", lambda t: sq(T.take_rows(t, np.array([0, 2, 2, 1]))), rand(3, 4)
    yield "slice_rows", lambda t: sq(T.slice_rows(t, 1, 3)), rand(4, 3)
    yield "concat", lambda t: sq(T.concat([t, a2], axis=0)), rand(2, 4)
    yield "stack_rows", lambda t: sq(T.stack_rows([t, v4])), rand(4)
    yield "score_log_bilinear", lambda t: score_log_bilinear(t, anchor, W), rand(5)
    yield "score_log_bilinear_W", lambda t: score_log_bilinear(Tensor(rand(5)), anchor, t), rand(5, 5)
    yield "gru_step_z", lambda t: sq(gru_step(t, h_prev, gru)), rand(4)
    yield "gru_step_h", lambda t: sq(gru_step(z_in, t, gru)), rand(3)
    yield "gru_step_W", lambda t: _gru_param_case(gru, "Wh", t, z_in, h_prev), rand(4, 3)
    yield "infonce_composite", lambda t: _infonce_case(t, W, neg_idx), rand(6, 5)


def _gru_param_case(gru, key, t, z_in, h_prev):
    old = gru.params[key]
    gru.params[key] = t
    try:
        return tsum(T.mul(gru_step(z_in, h_prev, gru), gru_step(z_in, h_prev, gru)))
    finally:
        gru.params[key] = old


def _infonce_case(flat, W, neg_idx):
    from .contrastive import delay_loss
    return delay_loss(flat, np.array([0, 1]), np.array([2, 3]), W, neg_idx.shape[1],
                      rng=None, neg_idx=neg_idx)


def run_fd_suite(cases: int = 25, seed: int = 0, tolerance: float = FD_TOLERANCE):
    """Max relative FD error per primitive over ``cases`` random draws."""
    results: dict[str, float] = {}
    for case in range(cases):
        rng = SeededRng(seed).child("fd", case)
        for name, f, x in primitive_cases(rng):
            err = finite_diff_check(f, Tensor(np.asarray(x)), h=FD_STEP)
            results[name] = max(results.get(name, 0.0), err)
    failures = {k: v for k, v in results.items() if v >= tolerance}
    return results, failures


def check_grad_block_analytic() -> list[str]:
    """The stop-gradient contract, asserted analytically (excluded from FD)."""
    problems = []
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = grad_block(x)
    if not np.array_equal(y.data, x.data):
        problems.append("grad_block changed forward values")
    loss = tsum(y)
    grads = backward(loss, params=[x])
    if np.any(grads[x] != 0.0):
        problems.append("grad_block leaked gradient on a pure blocked path")
    x2 = Tensor(np.array([3.0]), requires_grad=True)
    loss = tsum(T.mul(grad_block(x2), x2))
    backward(loss, params=[x2])
    if not np.array_equal(x2.grad, x2.data):
        problems.append("blocked factor was not treated as constant")
    return problems


def _tiny_trainer(seed: int):
    def module(cin, cout):
        return [LayerSpec("conv1d", cin, cout, 4, 2, 1), LayerSpec("relu"),
                LayerSpec("conv1d", cout, cout, 3, 1, 1)]

    config = StackConfig([module(4, 8), module(8, 8), module(8, 8)],
                         "sequence", input_channels=4)
    settings = TrainerSettings(input_kind="sequence", delays=[1, 2], n_negatives=4,
                               batch_size=8, epochs=1, context_mode="full",
                               context_hidden=4)
    rng = SeededRng(seed)
    model = build_model(config, settings, rng.child("model"))
    x = rng.child("data").normal(size=(16, 4, 32))
    trainer = Trainer(model, config, x, settings, rng.child("train"))
    return model, trainer, rng


def run_gradcheck(cases: int = 25, seed: int = 0) -> dict:
    lines = []
    results, failures = run_fd_suite(cases=cases, seed=seed)
    for name in sorted(results):
        status = "ok" if name not in failures else "FAIL"
        lines.append(f"fd {name:<24} max_rel_err {results[name]:.3e}  {status}")
    gb_problems = check_grad_block_analytic()
    lines.append("grad_block analytic        " + ("ok" if not gb_problems else "FAIL"))
    model, trainer, rng = _tiny_trainer(seed)
    iso_problems = isolation_check(model, trainer, rng.child("iso"))
    lines.append("gradient isolation         " + ("ok" if not iso_problems else "FAIL"))
    for p in gb_problems + iso_problems:
        lines.append("  " + p)
    ok = not failures and not gb_problems and not iso_problems
    lines.append("gradcheck: " + ("ALL OK" if ok else "FAILURES PRESENT"))
    return {"ok": ok, "results": results, "failures": failures, "lines": lines}
