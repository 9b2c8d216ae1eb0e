"""Optimization and the three training schedules.

- ``simultaneous``: one forward pass through the whole stack per step, one
  independent loss per module, every module and its head updated from its
  own loss only.
- ``iterative``: modules trained one at a time to a fixed epoch budget,
  then frozen (hash-verified); later modules consume frozen outputs
  computed live.
- ``cached``: like iterative, but each frozen boundary is persisted to an
  activation store once, and the next module trains from the store without
  ever instantiating its predecessors.

Randomness discipline makes the schedules comparable: every consumer of
randomness (shuffling, negative sampling, loss windows) draws from its own
(module, epoch, purpose) stream, so module m's trajectory is bitwise
identical across schedules when the seed matches.

Memory accounting is logical, not device-level: the instrument sums the
bytes of tape activations, parameters, gradients, and the input buffer a
step actually needs; ``measure_peak_bytes`` computes the same quantities
analytically from the declared architecture.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .contrastive import PredictionHead, build_head, module_loss
from .context import AutoregressiveModule, build_autoregressive, context_forward
from .encoders import EncoderModule, StackConfig, build_stack, encode
from .formats import open_cache, write_cache
from .patching import (build_prediction_pairs_grid, build_prediction_pairs_seq,
                       extract_patch_grid, subsample_loss_window)
from .rng import SeededRng
from .tensor import (GradGraph, Tensor, backward, conv_out_len, grad_block,
                     mean_pool, reshape, take_rows, transpose, zero_grads)


class NonFiniteGradError(RuntimeError):
    """A parameter gradient contained NaN or Inf."""


@dataclass
class AdamState:
    """First/second moment estimates for one parameter set."""
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


class Adam:
    """Standard Adam with bias correction; float64 like everything else."""

    def __init__(self, params, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"Adam: lr must be positive, got {lr}")
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState(
            m={self._key(i): np.zeros_like(p.data) for i, p in enumerate(self.params)},
            v={self._key(i): np.zeros_like(p.data) for i, p in enumerate(self.params)})

    def _key(self, i: int) -> str:
        p = self.params[i]
        return p.name or f"param{i}"

    def step(self) -> None:
        self.state.step += 1
        t = self.state.step
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradError(f"non-finite gradient for {self._key(i)}")
            key = self._key(i)
            m = self.state.m[key]
            v = self.state.v[key]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_for_checkpoint(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "step": self.state.step,
                "m": dict(self.state.m), "v": dict(self.state.v)}


@dataclass
class TrainerSettings:
    """Everything the schedules need, distilled from the run config."""
    input_kind: str                  # sequence | patch_grid
    delays: list[int]
    n_negatives: int
    batch_size: int = 32
    epochs: int = 10
    module_epochs: list[int] | None = None
    loss_window: int = 0
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    context_mode: str = "absent"
    context_hidden: int = 0
    patch_px: int = 16
    overlap_px: int = 8
    eval_batches: int = 20

    def budgets(self, n_modules: int) -> list[int]:
        """Per-module epoch budgets; default splits the total evenly."""
        if self.module_epochs is not None:
            if len(self.module_epochs) != n_modules:
                raise ValueError(
                    f"module_epochs has {len(self.module_epochs)} entries for "
                    f"{n_modules} trainable modules")
            budgets = list(self.module_epochs)
        else:
            budgets = [max(1, self.epochs // n_modules)] * n_modules
        if any(b < 1 for b in budgets):
            raise ValueError("every per-module epoch budget must be >= 1")
        return budgets


@dataclass
class Model:
    """A stack, its scoring heads, and (optionally) the context module."""
    stack: list[EncoderModule]
    heads: list[PredictionHead]
    context: AutoregressiveModule | None = None
    context_head: PredictionHead | None = None

    @property
    def n_trainable(self) -> int:
        return len(self.stack) + (1 if self.context is not None else 0)

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for mod in self.stack:
            for p in mod.parameters():
                out[p.name] = p
        for head in self.heads:
            for p in head.parameters():
                out[p.name] = p
        if self.context is not None:
            for p in self.context.parameters():
                out[p.name] = p
            for p in self.context_head.parameters():
                out[p.name] = p
        return out

    def unit_params(self, m: int) -> list[Tensor]:
        """Parameters updated by unit m's loss: encoder m + head m, or the
        context module + its head for m == len(stack)."""
        if m < len(self.stack):
            return self.stack[m].parameters() + self.heads[m].parameters()
        return self.context.parameters() + self.context_head.parameters()


def build_model(config: StackConfig, settings: TrainerSettings, rng: SeededRng) -> Model:
    stack = build_stack(config, rng)
    heads = [build_head(m.index, m.out_dim, m.out_dim, settings.delays) for m in stack]
    context = None
    context_head = None
    if settings.context_mode != "absent":
        if config.input_kind != "sequence":
            raise ValueError("context module requires sequence input")
        d_top = stack[-1].out_dim
        d_h = settings.context_hidden or d_top // 2
        context = build_autoregressive(d_top, d_h, rng.child("init_ar"),
                                       settings.context_mode)
        context_head = build_head(len(stack), d_top, d_h, settings.delays)
    return Model(stack, heads, context, context_head)


# -- shape bookkeeping --------------------------------------------------------------


def sequence_lengths(config: StackConfig, input_len: int) -> list[int]:
    """Per-module output lengths for a sequence stack."""
    out = []
    length = input_len
    for specs in config.modules:
        for spec in specs:
            if spec.kind == "conv1d":
                length = conv_out_len(length, spec.kernel, spec.stride, spec.pad)
        out.append(length)
    return out


# -- metrics --------------------------------------------------------------------


class MetricsWriter:
    """Append-only JSON-lines sink; one record per optimizer step per unit."""

    def __init__(self, path=None):
        self.path = path
        self.records: list[dict] = []
        self._fh = open(path, "w") if path else None

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


@dataclass
class MemoryMeter:
    """Running/peak logical byte counts for one training run."""
    running: int = 0
    peak: int = 0

    def observe(self, nbytes: int) -> None:
        self.running = int(nbytes)
        self.peak = max(self.peak, self.running)

    def reset(self) -> None:
        self.running = 0
        self.peak = 0


def _param_bytes(params, with_grads: bool = True) -> int:
    factor = 2 if with_grads else 1
    return sum(p.data.nbytes for p in params) * factor


# -- the trainer -------------------------------------------------------------------


class Trainer:
    """Runs one schedule over one model and dataset."""

    def __init__(self, model: Model, config: StackConfig, x_train: np.ndarray,
                 settings: TrainerSettings, rng: SeededRng,
                 metrics: MetricsWriter | None = None, run_dir=None):
        self.model = model
        self.config = config
        self.x = np.asarray(x_train, dtype=np.float64)
        self.s = settings
        self.rng = rng
        self.metrics = metrics or MetricsWriter()
        self.meter = MemoryMeter()
        self.run_dir = run_dir
        self._setup_geometry()

    # geometry: positions per module, pair index arrays per delay

    def _setup_geometry(self) -> None:
        s = self.s
        if s.input_kind == "sequence":
            self.lengths = sequence_lengths(self.config, self.x.shape[2])
            self.pair_arrays = []
            for L in self.lengths:
                Lw = min(L, s.loss_window) if s.loss_window else L
                kmax = max(s.delays)
                if Lw <= kmax:
                    raise ValueError(
                        f"module output length {Lw} too short for max delay {kmax}")
                pairs = build_prediction_pairs_seq(Lw, kmax)
                by = {k: v for k, v in pairs.by_delay().items() if k in s.delays}
                self.pair_arrays.append(self._batch_pairs_seq(by, Lw, s.batch_size))
            self.windows = [min(L, s.loss_window) if s.loss_window else L
                            for L in self.lengths]
        else:
            grid = extract_patch_grid(self.x[0], s.patch_px, s.overlap_px)
            self.grid_dims = (grid.rows, grid.cols)
            skip = min(s.delays) - 1
            kmax_offset = max(s.delays)
            pairs = build_prediction_pairs_grid(self.grid_dims, kmax_offset - skip, skip)
            by = {k: v for k, v in pairs.by_delay().items() if k in s.delays}
            n_pos = grid.rows * grid.cols
            self.pair_arrays = [self._batch_pairs_grid(by, n_pos, s.batch_size)
                                for _ in self.model.stack]

    @staticmethod
    def _batch_pairs_seq(by_delay, Lw: int, B: int):
        """Row ranges into a time-major [Lw*B, d] matrix (row = t*B + b).

        Sequence anchors for delay k are all rows with t < Lw-k and targets
        all rows with t >= k, which are contiguous blocks; slices keep the
        loss graph free of gather copies for the anchor/target sides.
        """
        out = {}
        for k in by_delay:
            out[k] = (slice(0, (Lw - k) * B), slice(k * B, Lw * B))
        return out

    @staticmethod
    def _batch_pairs_grid(by_delay, n_pos: int, B: int):
        """Flat indices into an image-major [B*n_pos, d] matrix: row = b*n_pos + pos."""
        out = {}
        imgs = np.arange(B)[:, None] * n_pos
        for k, (a, t) in by_delay.items():
            out[k] = ((imgs + a[None, :]).ravel(), (imgs + t[None, :]).ravel())
        return out

    # input providers

    def _raw_batch(self, ids: np.ndarray) -> Tensor:
        if self.s.input_kind == "sequence":
            return Tensor(self.x[ids])
        grids = [extract_patch_grid(img, self.s.patch_px, self.s.overlap_px).patches
                 for img in self.x[ids]]
        patches = np.stack(grids)            # [B, R, C, c, p, p]
        B, R, C = patches.shape[:3]
        return Tensor(patches.reshape((B * R * C,) + patches.shape[3:]))

    def _frozen_forward(self, upto: int, ids: np.ndarray) -> Tensor:
        """Output of modules [0, upto) for the given samples (all frozen)."""
        h = self._raw_batch(ids)
        for mod in self.model.stack[:upto]:
            h = encode(mod, h)
        return h

    # loss plumbing

    def _flatten_sequence(self, z: Tensor, m: int, win_rng: SeededRng) -> Tensor:
        zt = transpose(z, (2, 0, 1))                      # [L, B, d]
        w = self.windows[m]
        if w < zt.shape[0]:
            zt = subsample_loss_window(zt, w, win_rng)
        return reshape(zt, (zt.shape[0] * zt.shape[1], z.shape[1]))

    def _module_report(self, m: int, z: Tensor, neg_rng: SeededRng,
                       win_rng: SeededRng, step: int, epoch: int):
        if self.s.input_kind == "sequence":
            flat = self._flatten_sequence(z, m, win_rng)
        else:
            flat = mean_pool(z, axes=(2, 3))              # [B*R*C, d]
        return module_loss(flat, self.pair_arrays[m], self.model.heads[m],
                           self.s.n_negatives, neg_rng, step=step, epoch=epoch)

    def _context_report(self, z_top: Tensor, neg_rng: SeededRng,
                        win_rng: SeededRng, step: int, epoch: int):
        zt = transpose(z_top, (2, 0, 1))                  # [L, B, d]
        ctx = context_forward(self.model.context, zt)
        c = ctx.c
        zd = grad_block(zt)
        w = self.windows[-1]
        if w < c.shape[0]:
            off = int(win_rng.integers(0, c.shape[0] - w + 1))
            idx = np.arange(off, off + w)
            c = take_rows(c, idx)
            zd = Tensor(zd.data[idx])
        c_flat = reshape(c, (c.shape[0] * c.shape[1], c.shape[2]))
        z_flat = Tensor(zd.data.reshape(-1, zd.shape[2]))
        return module_loss(c_flat, self.pair_arrays[-1], self.model.context_head,
                           self.s.n_negatives, neg_rng, target_flat=z_flat,
                           step=step, epoch=epoch)

    def _emit(self, report, lr: float) -> None:
        self.metrics.write({
            "step": report.step,
            "epoch": report.epoch,
            "module": report.module_index,
            "loss_total": report.total_value,
            "loss_per_k": {str(k): v for k, v in sorted(report.per_delay_values.items())},
            "mi_bound_per_k": {str(k): v for k, v in sorted(report.mi_bound_per_delay.items())},
            "lr": lr,
            "peak_bytes": self.meter.peak,
        })

    def _batches(self, epoch: int, n: int):
        order = self.rng.child("shuffle", epoch).permutation(n)
        B = self.s.batch_size
        for i in range(n // B):  # drop-last keeps bag geometry constant
            yield order[i * B:(i + 1) * B]

    # schedules

    def train(self, mode: str) -> dict:
        if mode == "simultaneous":
            return self.train_simultaneous()
        if mode == "iterative":
            return self.train_iterative(cached=False)
        if mode == "cached":
            return self.train_iterative(cached=True)
        raise ValueError(f"unknown schedule mode {mode!r}")

    def train_simultaneous(self) -> dict:
        model, s = self.model, self.s
        opts = [Adam(model.unit_params(m), s.lr, s.beta1, s.beta2, s.eps)
                for m in range(model.n_trainable)]
        n = self.x.shape[0]
        step = 0
        for epoch in range(s.epochs):
            neg_rngs = [self.rng.child("negatives", m, epoch)
                        for m in range(model.n_trainable)]
            win_rngs = [self.rng.child("window", m, epoch)
                        for m in range(model.n_trainable)]
            for ids in self._batches(epoch, n):
                x = self._raw_batch(ids)
                with GradGraph() as tape:
                    h = x
                    reports = []
                    for m, mod in enumerate(model.stack):
                        h = encode(mod, h)
                        reports.append(self._module_report(m, h, neg_rngs[m],
                                                           win_rngs[m], step, epoch))
                    if model.context is not None:
                        mc = len(model.stack)
                        reports.append(self._context_report(h, neg_rngs[mc],
                                                            win_rngs[mc], step, epoch))
                    for m, report in enumerate(reports):
                        zero_grads(model.unit_params(m))
                        backward(report.total)
                    live = (tape.activation_bytes() + x.data.nbytes +
                            sum(_param_bytes(model.unit_params(m))
                                for m in range(model.n_trainable)))
                    self.meter.observe(live)
                for m, report in enumerate(reports):
                    opts[m].step()
                    self._emit(report, s.lr)
                step += 1
        return self._summary(opts)

    def train_iterative(self, cached: bool) -> dict:
        model, s = self.model, self.s
        budgets = s.budgets(model.n_trainable)
        n = self.x.shape[0]
        opts = []
        for m in range(model.n_trainable):
            is_context = m == len(model.stack)
            provider, input_bytes_extra = self._phase_provider(m, cached)
            opt = Adam(model.unit_params(m), s.lr, s.beta1, s.beta2, s.eps)
            opts.append(opt)
            step = 0
            for epoch in range(budgets[m]):
                neg_rng = self.rng.child("negatives", m, epoch)
                win_rng = self.rng.child("window", m, epoch)
                for ids in self._batches(epoch, n):
                    z_in = provider(ids)
                    with GradGraph() as tape:
                        if is_context:
                            report = self._context_report(z_in, neg_rng, win_rng,
                                                          step, epoch)
                        else:
                            z = encode(model.stack[m], z_in)
                            report = self._module_report(m, z, neg_rng, win_rng,
                                                         step, epoch)
                        zero_grads(model.unit_params(m))
                        backward(report.total)
                        live = (tape.activation_bytes() + z_in.data.nbytes +
                                _param_bytes(model.unit_params(m)) + input_bytes_extra)
                        self.meter.observe(live)
                    opt.step()
                    self._emit(report, s.lr)
                    step += 1
            if not is_context:
                model.stack[m].freeze()
                model.heads[m].freeze()
        return self._summary(opts)

    def _phase_provider(self, m: int, cached: bool):
        """Input provider for phase m, plus extra live bytes the mode needs."""
        is_context = m == len(self.model.stack)
        upto = len(self.model.stack) if is_context else m
        if upto == 0:
            return self._raw_batch, 0
        for mod in self.model.stack[:upto]:
            if not mod.frozen:
                raise RuntimeError(f"module {mod.index} must be frozen before phase {m}")
        if not cached:
            frozen_bytes = sum(_param_bytes(mod.parameters(), with_grads=False)
                               for mod in self.model.stack[:upto])
            return (lambda ids: self._frozen_forward(upto, ids)), frozen_bytes
        path = self._cache_path(upto - 1)
        cache_activations(self.model.stack[:upto], self.x, path,
                          input_kind=self.s.input_kind, patch_px=self.s.patch_px,
                          overlap_px=self.s.overlap_px)
        store = open_cache(path)
        if store.sample_count != self.x.shape[0]:
            raise RuntimeError(
                f"cache has {store.sample_count} samples, dataset has {self.x.shape[0]}")

        def provider(ids, _store=store):
            z = _store.read(ids)
            if self.s.input_kind == "patch_grid":
                z = z.reshape((-1,) + z.shape[2:])
            return Tensor(z)

        return provider, 0

    def _cache_path(self, module_index: int):
        base = self.run_dir if self.run_dir else "."
        return os.path.join(str(base), f"cache_module{module_index}.gima")

    def _summary(self, opts) -> dict:
        per_module = {}
        for rec in self.metrics.records:
            per_module[rec["module"]] = rec
        return {
            "final_loss": {str(m): r["loss_total"] for m, r in sorted(per_module.items())},
            "final_mi_bound_per_k": {str(m): r["mi_bound_per_k"]
                                     for m, r in sorted(per_module.items())},
            "peak_bytes": self.meter.peak,
            "optimizer_steps": {str(i): o.state.step for i, o in enumerate(opts)},
            "param_hashes": {str(mod.index): mod.param_hash() for mod in self.model.stack},
        }

    # evaluation

    def evaluate_bounds(self, x_eval: np.ndarray, n_batches: int | None = None) -> dict:
        """Per-(unit, delay) MI lower bounds over eval batches; no updates.

        Returns {unit index: {delay: np.ndarray of per-batch bound values}}.
        """
        s = self.s
        x_eval = np.asarray(x_eval, dtype=np.float64)
        B = s.batch_size
        total = x_eval.shape[0] // B
        nb = total if n_batches is None else min(n_batches, total)
        if nb < 1:
            raise ValueError("evaluate_bounds: eval split smaller than one batch")
        out: dict[int, dict[int, list[float]]] = {}
        for bi in range(nb):
            ids = np.arange(bi * B, (bi + 1) * B)
            if s.input_kind == "sequence":
                x = Tensor(x_eval[ids])
            else:
                grids = [extract_patch_grid(img, s.patch_px, s.overlap_px).patches
                         for img in x_eval[ids]]
                patches = np.stack(grids)
                x = Tensor(patches.reshape((-1,) + patches.shape[3:]))
            h = x
            outputs = []
            for mod in self.model.stack:
                h = encode(mod, h)
                outputs.append(h)
            for m, z in enumerate(outputs):
                report = self._module_report(
                    m, z, self.rng.child("eval_negatives", m, bi),
                    self.rng.child("eval_window", m, bi), bi, -1)
                for k, bound in report.mi_bound_per_delay.items():
                    out.setdefault(m, {}).setdefault(k, []).append(bound)
            if self.model.context is not None:
                mc = len(self.model.stack)
                report = self._context_report(
                    outputs[-1], self.rng.child("eval_negatives", mc, bi),
                    self.rng.child("eval_window", mc, bi), bi, -1)
                for k, bound in report.mi_bound_per_delay.items():
                    out.setdefault(mc, {}).setdefault(k, []).append(bound)
        return {m: {k: np.asarray(v) for k, v in ks.items()} for m, ks in out.items()}


# -- activation caching ---------------------------------------------------------------


def cache_activations(frozen_chain: list[EncoderModule], x: np.ndarray, path,
                      input_kind: str = "sequence", patch_px: int = 16,
                      overlap_px: int = 8, chunk: int = 256) -> None:
    """Persist the frozen chain's outputs for every sample to a GIMA store.

    Per-sample values are bitwise identical to a live forward pass because
    no kernel mixes samples across the batch axis.
    """
    for mod in frozen_chain:
        if not mod.frozen:
            raise RuntimeError(f"cache_activations: module {mod.index} is not frozen")
    outs = []
    n = x.shape[0]
    for lo in range(0, n, chunk):
        xb = np.asarray(x[lo:lo + chunk], dtype=np.float64)
        if input_kind == "patch_grid":
            grids = [extract_patch_grid(img, patch_px, overlap_px).patches for img in xb]
            patches = np.stack(grids)
            B, R, C = patches.shape[:3]
            h = Tensor(patches.reshape((B * R * C,) + patches.shape[3:]))
        else:
            h = Tensor(xb)
        for mod in frozen_chain:
            h = encode(mod, h)
        z = h.data
        if input_kind == "patch_grid":
            z = z.reshape((xb.shape[0], R * C) + z.shape[1:])
        outs.append(z)
    acts = np.concatenate(outs, axis=0)
    write_cache(path, frozen_chain[-1].index, acts)


# -- gradient-isolation verification ------------------------------------------------


def isolation_check(model: Model, trainer: Trainer, rng: SeededRng) -> list[str]:
    """Backward each unit's loss and verify it touches only that unit.

    Returns a list of violation descriptions; empty means isolated. Checks
    both directions: parameters outside the unit get exactly-zero gradients,
    and at least one parameter inside the unit is actually reached. Heads
    still at their zero init are filled with small random values first,
    because a zero head transmits no gradient into the encodings and would
    make the check vacuous.
    """
    problems = []
    heads = list(model.heads) + ([model.context_head] if model.context_head else [])
    for head in heads:
        for w in head.weights.values():
            if not w.data.any():
                w.data += 0.01 * rng.child("head_fill").normal(size=w.shape)
    all_params = list(model.named_params().values())
    h = trainer._raw_batch(np.arange(trainer.s.batch_size))
    outputs = []
    for mod in model.stack:
        h = encode(mod, h)
        outputs.append(h)
    units = list(range(len(model.stack)))
    if model.context is not None:
        units.append(len(model.stack))
    for m in units:
        zero_grads(all_params)
        if m < len(model.stack):
            report = trainer._module_report(m, outputs[m], rng.child("iso", m),
                                            rng.child("isow", m), 0, 0)
        else:
            report = trainer._context_report(outputs[-1], rng.child("iso", m),
                                             rng.child("isow", m), 0, 0)
        grads = backward(report.total, params=all_params)
        own = {id(p) for p in model.unit_params(m)}
        touched_any = False
        for p, g in grads.items():
            inside = id(p) in own
            nonzero = bool(np.any(g != 0.0))
            if nonzero and not inside:
                problems.append(f"unit {m}: gradient leaked into {p.name}")
            if nonzero and inside:
                touched_any = True
        if not touched_any:
            problems.append(f"unit {m}: loss reached none of its own parameters")
    return problems


# -- analytical peak-byte model -------------------------------------------------------


@dataclass
class ModeBytes:
    """Byte accounting for one schedule at its worst step."""
    parameters: int
    gradients: int
    activations: int

    @property
    def total(self) -> int:
        return self.parameters + self.gradients + self.activations


def _conv_param_bytes(spec) -> int:
    if spec.kind == "conv1d":
        return (spec.channels_out * spec.channels_in * spec.kernel + spec.channels_out) * 8
    if spec.kind == "conv2d":
        return (spec.channels_out * spec.channels_in * spec.kernel ** 2 + spec.channels_out) * 8
    return 0


def _layer_walk_bytes(specs, rows: int, extent: tuple[int, ...], channels_in: int):
    """Retained tape bytes of one module's layers on a batch of ``rows`` items.

    Mirrors the engine: each conv retains its padded input copy (only when
    pad > 0) and its output; each relu retains its output.
    Returns (param_bytes, act_bytes, out_extent, out_channels).
    """
    ext = tuple(extent)
    ch = channels_in
    act = 0
    params = 0
    for spec in specs:
        if spec.kind in ("conv1d", "conv2d"):
            params += _conv_param_bytes(spec)
            if spec.pad:
                padded = tuple(e + 2 * spec.pad for e in ext)
                act += rows * ch * int(np.prod(padded)) * 8
            ext = tuple(conv_out_len(e, spec.kernel, spec.stride, spec.pad) for e in ext)
            ch = spec.channels_out
            act += rows * ch * int(np.prod(ext)) * 8
        elif spec.kind == "relu":
            act += rows * ch * int(np.prod(ext)) * 8
        elif spec.kind == "mean_pool":
            ext = ()
            act += rows * ch * 8
    return params, act, ext, ch


def _loss_graph_bytes(pairs_per_delay: dict[int, int], d: int, n_neg: int,
                      gathered_sides: int) -> int:
    """Retained bytes of ``delay_loss`` per delay: u and the elementwise
    product [n, d] each, gathered negatives [n*neg, d], neg scores [n, neg],
    pos scores [n], bag and log-softmax [n, N] each. ``gathered_sides`` is
    how many of the anchor/target selections are copies (0 for sequence
    slices, 2 for grid gathers)."""
    N = n_neg + 1
    per_pair_floats = (2 + gathered_sides) * d + n_neg * d + n_neg + 2 * N + 1
    return sum(n * per_pair_floats * 8 for n in pairs_per_delay.values())


def measure_peak_bytes(config: StackConfig, batch_size: int, input_extent,
                       delays, n_negatives: int, loss_window: int = 0,
                       grid_positions: int = 0,
                       grid_pair_counts: dict[int, int] | None = None) -> dict[str, ModeBytes]:
    """Analytical worst-step bytes per schedule for an encoder stack.

    Counts parameters, gradients, and activations retained for backward
    (including the loss graph and the batch input buffer) at the worst
    optimizer step of each schedule. Sequence stacks pass ``input_extent =
    (length,)``; patch-grid stacks pass the per-patch extent plus
    ``grid_positions`` (rows * cols) and ``grid_pair_counts`` (pairs per
    delay per image, from the pair set).
    """
    in_ext = tuple(input_extent)
    is_seq = config.input_kind == "sequence"
    if not is_seq and (not grid_positions or grid_pair_counts is None):
        raise ValueError("grid stacks need grid_positions and grid_pair_counts")
    rows = batch_size if is_seq else batch_size * grid_positions

    per_module = []
    ext = in_ext
    ch = config.input_channels
    input_bytes = rows * ch * int(np.prod(in_ext)) * 8
    boundary = input_bytes
    for specs in config.modules:
        p, a, ext, ch = _layer_walk_bytes(specs, rows, ext, ch)
        if is_seq:
            n_pos = ext[0]
            windowed = min(n_pos, loss_window) if loss_window else n_pos
            if loss_window and windowed < n_pos:
                a += windowed * rows * ch * 8  # windowed take_rows copy
            a += windowed * rows * ch * 8      # time-major flatten copy
            pairs = {k: max(0, windowed - k) * rows for k in delays}
            loss = _loss_graph_bytes(pairs, ch, n_negatives, gathered_sides=0)
        else:
            a += rows * ch * 8                 # spatial mean-pool output
            pairs = {k: grid_pair_counts.get(k, 0) * batch_size for k in delays}
            loss = _loss_graph_bytes(pairs, ch, n_negatives, gathered_sides=2)
        head = len(list(delays)) * ch * ch * 8
        per_module.append({"params": p, "acts": a, "loss": loss, "head": head,
                           "in_bytes": boundary})
        boundary = rows * ch * int(np.prod(ext)) * 8

    sim_params = sum(e["params"] + e["head"] for e in per_module)
    sim_acts = input_bytes + sum(e["acts"] + e["loss"] for e in per_module)
    simultaneous = ModeBytes(sim_params, sim_params, sim_acts)

    cached_candidates = []
    iterative_candidates = []
    frozen_so_far = 0
    for e in per_module:
        own_params = e["params"] + e["head"]
        acts = e["in_bytes"] + e["acts"] + e["loss"]
        cached_candidates.append(ModeBytes(own_params, own_params, acts))
        iterative_candidates.append(ModeBytes(own_params + frozen_so_far,
                                              own_params, acts))
        frozen_so_far += e["params"]
    cached = max(cached_candidates, key=lambda mb: mb.total)
    iterative = max(iterative_candidates, key=lambda mb: mb.total)
    return {"simultaneous": simultaneous, "iterative": iterative, "cached": cached}
