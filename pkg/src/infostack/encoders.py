"""Gradient-isolated encoder modules and the stacks built from them.

A stack is a list of modules; each module is a short sequence of conv/relu
layers with its own parameters. Module m receives the previous module's
output through ``grad_block``, so a loss on module m's output can only
reach module m's parameters. Forward values are unaffected by the blocking.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .rng import SeededRng
from .tensor import (Tensor, ShapeError, conv1d, conv2d, conv_out_len,
                     grad_block, mean_pool, relu)


@dataclass(frozen=True)
class LayerSpec:
    """One layer of an encoder module.

    kind is one of conv1d, conv2d, relu, mean_pool. Convolutions carry
    channel counts and per-dimension kernel/stride/pad (a single int for
    conv1d, used for both axes of conv2d).
    """
    kind: str
    channels_in: int = 0
    channels_out: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.kind not in ("conv1d", "conv2d", "relu", "mean_pool"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind.startswith("conv"):
            if self.channels_in < 1 or self.channels_out < 1:
                raise ValueError(f"{self.kind}: channel counts must be positive")
            if self.kernel < 1 or self.stride < 1 or self.pad < 0:
                raise ValueError(f"{self.kind}: need kernel >= 1, stride >= 1, pad >= 0")


@dataclass
class StackConfig:
    """Declared architecture: per-module layer lists plus the input kind."""
    modules: list[list[LayerSpec]]
    input_kind: str = "sequence"  # sequence | patch_grid
    input_channels: int = 0

    def __post_init__(self):
        if not self.modules or any(not m for m in self.modules):
            raise ValueError("stack needs at least one module, each with at least one layer")
        if self.input_kind not in ("sequence", "patch_grid"):
            raise ValueError(f"unknown input kind {self.input_kind!r}")

    @property
    def n_modules(self) -> int:
        return len(self.modules)


class EncoderModule:
    """One gradient-isolated encoder: an ordered layer list with parameters."""

    def __init__(self, index: int, specs: list[LayerSpec], params: dict[str, Tensor],
                 out_dim: int):
        self.index = index
        self.specs = specs
        self.params = params
        self.out_dim = out_dim

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    @property
    def frozen(self) -> bool:
        return all(not p.requires_grad for p in self.params.values())

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    def param_hash(self) -> str:
        """SHA-256 over raw parameter bytes in name order; constant once frozen."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def apply_layers(self, h: Tensor) -> Tensor:
        for li, spec in enumerate(self.specs):
            if spec.kind == "conv1d":
                h = conv1d(h, self.params[f"{self.index}.{li}.w"],
                           self.params[f"{self.index}.{li}.b"], spec.stride, spec.pad)
            elif spec.kind == "conv2d":
                h = conv2d(h, self.params[f"{self.index}.{li}.w"],
                           self.params[f"{self.index}.{li}.b"], spec.stride, spec.pad)
            elif spec.kind == "relu":
                h = relu(h)
            elif spec.kind == "mean_pool":
                h = mean_pool(h, axes=tuple(range(2, h.ndim)))
        return h


def _init_conv(spec: LayerSpec, rng: SeededRng, ndim: int) -> tuple[np.ndarray, np.ndarray]:
    kshape = (spec.kernel,) if ndim == 1 else (spec.kernel, spec.kernel)
    fan_in = spec.channels_in * int(np.prod(kshape))
    fan_out = spec.channels_out * int(np.prod(kshape))
    a = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-a, a, (spec.channels_out, spec.channels_in) + kshape)
    b = np.zeros(spec.channels_out)
    return w, b


def build_stack(config: StackConfig, rng: SeededRng) -> list[EncoderModule]:
    """Instantiate all modules with uniform(-a, a), a = sqrt(6/(fan_in+fan_out)).

    Parameter sets of distinct modules are disjoint by construction. Channel
    chaining across layers and module boundaries is validated here; length
    arithmetic is input-dependent and checked by ``audit_shapes``.
    """
    modules: list[EncoderModule] = []
    channels = config.input_channels
    for m, specs in enumerate(config.modules):
        params: dict[str, Tensor] = {}
        init_rng = rng.child(m, "init")
        for li, spec in enumerate(specs):
            if spec.kind.startswith("conv"):
                if channels and spec.channels_in != channels:
                    raise ShapeError(
                        "build_stack", (spec.channels_in,), (channels,),
                        detail=f"module {m} layer {li}: input channels do not chain "
                               f"(boundary between module {max(m - 1, 0)} and module {m})")
                w, b = _init_conv(spec, init_rng, 1 if spec.kind == "conv1d" else 2)
                params[f"{m}.{li}.w"] = Tensor(w, requires_grad=True, name=f"enc{m}.{li}.w")
                params[f"{m}.{li}.b"] = Tensor(b, requires_grad=True, name=f"enc{m}.{li}.b")
                channels = spec.channels_out
        modules.append(EncoderModule(m, list(specs), params, out_dim=channels))
    return modules


def encode(module: EncoderModule, z_prev: Tensor) -> Tensor:
    """Apply one module; inputs of every module except the first are grad-blocked."""
    h = z_prev if module.index == 0 else grad_block(z_prev)
    return module.apply_layers(h)


def stack_forward(stack: list[EncoderModule], x: Tensor,
                  return_intermediates: bool = False):
    """Run the whole stack; optionally return every module's output, in order."""
    intermediates: list[Tensor] = []
    h = x
    for module in stack:
        h = encode(module, h)
        intermediates.append(h)
    if return_intermediates:
        return h, intermediates
    return h


# -- shape auditing ------------------------------------------------------------------


@dataclass(frozen=True)
class ShapeAuditEntry:
    module: int
    layer: int
    kind: str
    in_extent: tuple[int, ...]
    out_extent: tuple[int, ...]
    declared: tuple[int, ...] | None = None

    @property
    def ok(self) -> bool:
        return self.declared is None or self.declared == self.out_extent


def audit_shapes(config: StackConfig, input_extent: tuple[int, ...]) -> list[ShapeAuditEntry]:
    """Walk the declared stack computing every layer's spatial extent."""
    entries = []
    extent = tuple(input_extent)
    for m, specs in enumerate(config.modules):
        for li, spec in enumerate(specs):
            if spec.kind.startswith("conv"):
                out = tuple(conv_out_len(e, spec.kernel, spec.stride, spec.pad) for e in extent)
            elif spec.kind == "mean_pool":
                out = ()
            else:
                out = extent
            entries.append(ShapeAuditEntry(m, li, spec.kind, extent, out))
            extent = out
    return entries


# Reference 1-D encoder outline shipped as a preset: five strided conv
# layers over raw length-20480 input, 512 channels wide, with the declared
# output length of each layer. The declared 128 for the final layer
# (kernel 1, stride 2, padding 1) disagrees with the stride arithmetic,
# which gives floor((257 + 2 - 1)/2) + 1 = 130; the audit reports the row
# rather than silently correcting either side.
AUDIO_OUTLINE_INPUT_LEN = 20480
AUDIO_OUTLINE = [
    # (kernel, stride, pad, declared output length)
    (10, 5, 2, 4095),
    (8, 4, 2, 1023),
    (4, 2, 2, 512),
    (4, 2, 2, 257),
    (1, 2, 1, 128),
]


@dataclass(frozen=True)
class OutlineAuditRow:
    layer: int
    kernel: int
    stride: int
    pad: int
    declared: int
    computed: int

    @property
    def ok(self) -> bool:
        return self.declared == self.computed


def audit_audio_outline() -> list[OutlineAuditRow]:
    """Check the shipped 1-D outline against the stride formula, row by row."""
    rows = []
    length = AUDIO_OUTLINE_INPUT_LEN
    for i, (k, s, p, declared) in enumerate(AUDIO_OUTLINE):
        computed = conv_out_len(length, k, s, p)
        rows.append(OutlineAuditRow(i, k, s, p, declared, computed))
        length = computed
    return rows
