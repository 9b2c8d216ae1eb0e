"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a tensor that records its parents and
a vector-Jacobian rule, forming a dynamic tape that is rebuilt on each
forward pass. ``backward`` walks the subgraph reachable from a scalar loss
exactly once, in reverse recording order, accumulating gradients additively
into leaf tensors.

Two properties the rest of the package leans on:

- ``grad_block`` is the isolation primitive: identity on forward values
  (the result shares the input's storage) while transmitting exactly zero
  gradient, because the result is created detached from the tape.
- Operations prune themselves from the tape when no input requires grad,
  so forward passes through frozen modules allocate no graph at all.

Everything is float64; the finite-difference harness at the bottom of this
module relies on that for its tolerances.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: non-conformant shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


_seq_counter = itertools.count()

# Stack of active recording scopes; see GradGraph.
_active_graphs: list["GradGraph"] = []


class Tensor:
    """n-dimensional float64 array, optionally part of the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_vjp", "_seq", "_owns")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # ascontiguousarray would promote 0-d to 1-d
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._seq = next(_seq_counter)
        self._owns = arr.base is None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self):
        head = f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}"
        if self.name:
            head += f", name={self.name!r}"
        return head + ")"

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None, keepdims: bool = False):
        return tsum(self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False):
        return mean_pool(self, axes, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


class GradGraph:
    """Recording scope that collects the op nodes created inside it.

    The tape itself lives on the tensors (parents + vjp closures); this scope
    exists to inspect a forward pass: node count, recording order, and the
    bytes of activation storage the tape retains for backward.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "GradGraph":
        _active_graphs.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _active_graphs.pop()
        assert popped is self
        return False

    def activation_bytes(self) -> int:
        """Bytes of storage owned by recorded nodes (views and aliases excluded)."""
        return sum(t.data.nbytes for t in self.nodes if t._owns)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable | None,
            owns: bool = True) -> Tensor:
    """Build an op result; detaches itself when no parent needs gradients."""
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.name = None
    t._seq = next(_seq_counter)
    t._owns = owns and data.base is None
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._vjp = vjp
        if _active_graphs:
            _active_graphs[-1].nodes.append(t)
    else:
        t.requires_grad = False
        t._parents = ()
        t._vjp = None
    return t


# -- backward pass -------------------------------------------------------------


def backward(loss: Tensor, params: Iterable[Tensor] | None = None,
             trace: list | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Fills ``.grad`` (accumulating) on every reachable leaf tensor that
    requires grad. Returns a map from parameter tensor to its gradient
    array. When ``params`` is given, parameters that the loss cannot reach
    (including those severed by ``grad_block``) receive an exactly-zero
    gradient and appear in the map as such.

    ``trace``, when provided, collects the visited nodes in traversal
    order (reverse recording order); used by tests of the tape contract.
    """
    if loss.data.shape != ():
        raise ShapeError("backward", loss.data.shape, (), detail="loss must be scalar")

    # Reachable subgraph; creation order is a topological order by
    # construction, so descending sequence number is a valid reverse
    # traversal that sees every consumer before its producer.
    seen: set[int] = set()
    stack = [loss]
    nodes: list[Tensor] = []
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    reached: dict[Tensor, np.ndarray] = {}
    for t in nodes:
        g = grads.pop(id(t), None)
        if g is None:
            continue  # not on a differentiable path from the loss
        if trace is not None:
            trace.append(t)
        if t._vjp is not None:
            for p, pg in zip(t._parents, t._vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg
        elif t.requires_grad:
            t.grad = np.array(g, dtype=np.float64) if t.grad is None else t.grad + g
            reached[t] = t.grad

    if params is not None:
        out: dict[Tensor, np.ndarray] = {}
        for p in params:
            if p not in reached:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                out[p] = p.grad
            else:
                out[p] = reached[p]
        for p, g in reached.items():
            out.setdefault(p, g)
        return out
    return reached


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- the isolation primitive ----------------------------------------------------


def grad_block(x) -> Tensor:
    """Identity on values, exactly zero gradient.

    The result shares the input's storage and is detached from the tape, so
    a loss downstream of it cannot reach ``x`` or anything before it.
    """
    x = _as_tensor(x)
    t = Tensor.__new__(Tensor)
    t.data = x.data
    t.requires_grad = False
    t.grad = None
    t.name = None
    t._parents = ()
    t._vjp = None
    t._seq = next(_seq_counter)
    t._owns = False
    return t


# -- elementwise and reduction kernels -------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape of a broadcast operand."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    return _result(data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None
    return _result(data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    return _result(data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0)
    return _result(data, (a,), lambda g: (g * (data > 0.0),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # Two-branch form stays finite for any finite input.
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _result(data, (a,), lambda g: (g * data * (1.0 - data),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    data = np.tanh(a.data)
    return _result(data, (a,), lambda g: (g * (1.0 - data * data),))


def tsum(a, axes=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    ax = tuple(axes) if isinstance(axes, (list, tuple)) else axes
    data = a.data.sum(axis=ax, keepdims=keepdims)

    def vjp(g):
        gg = g
        if not keepdims and ax is not None:
            gg = np.expand_dims(gg, ax)
        elif not keepdims and ax is None:
            gg = np.asarray(gg).reshape((1,) * a.ndim)
        return (np.broadcast_to(gg, a.shape),)

    return _result(np.asarray(data), (a,), vjp)


def mean_pool(a, axes=None, keepdims: bool = False) -> Tensor:
    """Mean over the given axes (all axes when None)."""
    a = _as_tensor(a)
    ax = tuple(axes) if isinstance(axes, (list, tuple)) else ((axes,) if isinstance(axes, int) else axes)
    data = a.data.mean(axis=ax, keepdims=keepdims)
    count = a.size if ax is None else int(np.prod([a.shape[i] for i in ax]))

    def vjp(g):
        gg = g
        if not keepdims and ax is not None:
            gg = np.expand_dims(gg, ax)
        elif not keepdims and ax is None:
            gg = np.asarray(gg).reshape((1,) * a.ndim)
        return (np.broadcast_to(gg, a.shape) / count,)

    return _result(np.asarray(data), (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    """Max-shifted log-sum-exp; rows exponentiate-and-sum to one."""
    a = _as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    shifted = x - m
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(data) * g.sum(axis=axis, keepdims=True),)

    return _result(data, (a,), vjp)


def gather_cross_entropy(logp, index) -> Tensor:
    """Mean negative log-probability at the given class index per row.

    ``logp`` is [n, classes] of log-probabilities, ``index`` is [n] ints.
    """
    logp = _as_tensor(logp)
    idx = np.asarray(index)
    if logp.ndim != 2 or idx.ndim != 1 or idx.shape[0] != logp.shape[0]:
        raise ShapeError("gather_cross_entropy", logp.shape, idx.shape)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("gather_cross_entropy: index must be integers")
    n, classes = logp.shape
    if idx.min(initial=0) < 0 or idx.max(initial=0) >= classes:
        raise ValueError(f"gather_cross_entropy: label out of range [0, {classes})")
    rows = np.arange(n)
    data = np.asarray(-logp.data[rows, idx].mean())

    def vjp(g):
        gx = np.zeros_like(logp.data)
        gx[rows, idx] = -g / n
        return (gx,)

    return _result(data, (logp,), vjp)


# -- linear algebra ---------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim > 2 or b.ndim > 2 or a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul", a.shape, b.shape, detail="only 1-D and 2-D operands")
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def vjp(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return b.data @ g, np.outer(a.data, g)
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g * b.data, g * a.data

    return _result(np.asarray(data), (a, b), vjp)


def batched_dot(a, b) -> Tensor:
    """Row-batched inner products: out[i, j] = a[i, j, :] . b[i, :].

    a: [n, m, d], b: [n, d] -> [n, m]. Equivalent to broadcasting a
    multiply and summing the last axis, without materializing the product.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 3 or b.ndim != 2 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError("batched_dot", a.shape, b.shape, detail="expect [n, m, d] and [n, d]")
    data = np.matmul(a.data, b.data[:, :, None])[:, :, 0]

    def vjp(g):
        ga = g[:, :, None] * b.data[:, None, :]
        gb = np.matmul(g[:, None, :], a.data)[:, 0, :]
        return ga, gb

    return _result(data, (a, b), vjp)


# -- shape manipulation -------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _result(data, (a,), lambda g: (np.ascontiguousarray(g).reshape(a.shape),),
                   owns=True)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    data = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _result(data, (a,), lambda g: (np.transpose(g, inv),), owns=False)


def take_rows(a, index) -> Tensor:
    """Gather rows along axis 0; backward scatters additively."""
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("take_rows", a.shape, idx.shape, detail="index must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"take_rows: index out of range for axis of length {a.shape[0]}")
    data = a.data[idx]

    def vjp(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(data, (a,), vjp)


def slice_rows(a, start: int, stop: int) -> Tensor:
    """Contiguous row range along axis 0; the forward result is a view."""
    a = _as_tensor(a)
    if not 0 <= start <= stop <= a.shape[0]:
        raise IndexError(f"slice_rows: [{start}:{stop}] out of range for length {a.shape[0]}")
    data = a.data[start:stop]

    def vjp(g):
        gx = np.zeros_like(a.data)
        gx[start:stop] = g
        return (gx,)

    return _result(data, (a,), vjp, owns=False)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat: empty tensor list")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _result(data, tuple(ts), vjp)


def stack_rows(tensors: Sequence) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("stack_rows: empty tensor list")
    try:
        data = np.stack([t.data for t in ts], axis=0)
    except ValueError:
        raise ShapeError("stack_rows", *[t.shape for t in ts]) from None

    def vjp(g):
        return tuple(g[i] for i in range(len(ts)))

    return _result(data, tuple(ts), vjp)


# -- convolutions ----------------------------------------------------------------


def conv_out_len(L: int, k: int, s: int, p: int) -> int:
    """Output length of a zero-padded strided convolution: floor((L+2p-k)/s)+1."""
    if L < 1 or k < 1 or s < 1 or p < 0:
        raise ValueError(f"conv_out_len: invalid arguments L={L}, k={k}, s={s}, p={p}")
    if L + 2 * p < k:
        raise ValueError(f"conv_out_len: kernel {k} exceeds padded length {L + 2 * p}")
    return (L + 2 * p - k) // s + 1


def conv1d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Strided, zero-padded 1-D convolution via im2col and one matmul.

    x: [batch, c_in, length], w: [c_out, c_in, k], b: [c_out] or None.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv1d", x.shape, w.shape,
                         detail="expect x [B, C_in, L], w [C_out, C_in, k]")
    B, cin, L = x.shape
    cout, _, k = w.shape
    Lout = conv_out_len(L, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad))) if pad else x.data
    cols = np.empty((B, k * cin, Lout))
    for j in range(k):
        cols[:, j * cin:(j + 1) * cin, :] = xp[:, :, j:j + stride * Lout:stride]
    wf = w.data.transpose(0, 2, 1).reshape(cout, k * cin)   # [c_out, k*c_in]
    out = np.matmul(wf, cols)                               # [B, c_out, Lout]
    parents = (x, w)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError("conv1d", b.shape, (cout,), detail="bias")
        out += b.data[None, :, None]
        parents = (x, w, b)

    def vjp(g):
        gwf = np.tensordot(g, cols, axes=([0, 2], [0, 2]))  # [c_out, k*c_in]
        gw = gwf.reshape(cout, k, cin).transpose(0, 2, 1)
        gcols = np.matmul(wf.T, g)                          # [B, k*c_in, Lout]
        gxp = np.zeros((B, cin, L + 2 * pad))
        for j in range(k):
            gxp[:, :, j:j + stride * Lout:stride] += gcols[:, j * cin:(j + 1) * cin, :]
        gx = gxp[:, :, pad:pad + L] if pad else gxp
        gb = g.sum(axis=(0, 2)) if len(parents) == 3 else None
        return (gx, gw, gb)[:len(parents)]

    return _result(out, parents, vjp)


def conv2d(x, w, b=None, stride=1, pad=0) -> Tensor:
    """Strided, zero-padded 2-D convolution via im2col and one matmul.

    x: [batch, c_in, H, W], w: [c_out, c_in, kh, kw]; stride and pad may be
    a single int (applied to both axes) or an (h, w) pair.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape,
                         detail="expect x [B, C_in, H, W], w [C_out, C_in, kh, kw]")
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (pad, pad) if isinstance(pad, int) else pad
    B, cin, H, W = x.shape
    cout, _, kh, kw = w.shape
    Hout = conv_out_len(H, kh, sh, ph)
    Wout = conv_out_len(W, kw, sw, pw)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols = np.empty((B, kh * kw * cin, Hout * Wout))
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, :, u:u + sh * Hout:sh, v:v + sw * Wout:sw]
            cols[:, (u * kw + v) * cin:(u * kw + v + 1) * cin, :] = \
                patch.reshape(B, cin, Hout * Wout)
    wf = w.data.transpose(0, 2, 3, 1).reshape(cout, kh * kw * cin)
    out = np.matmul(wf, cols).reshape(B, cout, Hout, Wout)
    parents = (x, w)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError("conv2d", b.shape, (cout,), detail="bias")
        out += b.data[None, :, None, None]
        parents = (x, w, b)

    def vjp(g):
        gf = g.reshape(B, cout, Hout * Wout)
        gwf = np.tensordot(gf, cols, axes=([0, 2], [0, 2]))
        gw = gwf.reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        gcols = np.matmul(wf.T, gf)
        gxp = np.zeros((B, cin, H + 2 * ph, W + 2 * pw))
        for u in range(kh):
            for v in range(kw):
                gxp[:, :, u:u + sh * Hout:sh, v:v + sw * Wout:sw] += \
                    gcols[:, (u * kw + v) * cin:(u * kw + v + 1) * cin, :].reshape(
                        B, cin, Hout, Wout)
        gx = gxp[:, :, ph:ph + H, pw:pw + W] if (ph or pw) else gxp
        gb = g.sum(axis=(0, 2, 3)) if len(parents) == 3 else None
        return (gx, gw, gb)[:len(parents)]

    return _result(out, parents, vjp)


# -- verification harness ------------------------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map a tensor to a scalar tensor and be deterministic and
    smooth at ``x``. The error per element is
    |analytic - central| / max(|analytic|, |central|, 1e-8).
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    x0 = Tensor(base, requires_grad=True)
    y = f(x0)
    if y.data.shape != ():
        raise ShapeError("finite_diff_check", y.data.shape, (), detail="f must return a scalar")
    if not np.isfinite(y.data):
        raise ValueError("finite_diff_check: f(x) is non-finite")
    backward(y, params=[x0])
    analytic = x0.grad.ravel()

    flat = base.ravel()
    worst = 0.0
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += h
        fp = float(f(Tensor(bumped.reshape(base.shape))).data)
        bumped[i] -= 2 * h
        fm = float(f(Tensor(bumped.reshape(base.shape))).data)
        central = (fp - fm) / (2 * h)
        err = abs(analytic[i] - central) / max(abs(analytic[i]), abs(central), 1e-8)
        worst = max(worst, err)
    return worst
