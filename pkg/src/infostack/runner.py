"""Orchestration: a RunConfig in, a run directory out.

A run directory contains:
  config.resolved   canonical key=value rendering of the full config
  metrics.jsonl     one record per optimizer step per module
  checkpoint.gimc   final parameters (+ optimizer state of the last unit)
  run.json          digest, seed, schedule, summary, eval bounds
  report.json       summary plus probe results (probes appended later)
  cache_module*.gima  only for cached-schedule runs

Two runs share a config digest exactly when they describe the same
experiment (schedule, seed, and output paths are excluded from the hash),
which is what lets ``report`` aggregate schedule or seed sweeps safely.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .config import RunConfig, config_digest, to_flat_lines
from .data import generate
from .encoders import encode
from .formats import load_checkpoint, read_dataset, save_checkpoint
from .probe import fit_and_score
from .rng import SeededRng
from .tensor import Tensor
from .context import context_forward
from .training import (MetricsWriter, Model, Trainer, TrainerSettings,
                       build_model)


def settings_from_config(cfg: RunConfig) -> TrainerSettings:
    return TrainerSettings(
        input_kind=cfg.stack.input_kind,
        delays=cfg.delays,
        n_negatives=cfg.contrastive.n_negatives,
        batch_size=cfg.schedule.batch_size,
        epochs=cfg.schedule.epochs,
        module_epochs=cfg.schedule.module_epochs or None,
        loss_window=cfg.contrastive.loss_window,
        lr=cfg.lr,
        beta1=cfg.optimizer.beta1,
        beta2=cfg.optimizer.beta2,
        eps=cfg.optimizer.eps,
        context_mode=cfg.context.mode,
        context_hidden=cfg.context.hidden_dim,
        patch_px=cfg.patching.patch_px,
        overlap_px=cfg.patching.overlap_px,
        eval_batches=cfg.schedule.eval_batches,
    )


def load_data(cfg: RunConfig):
    """(train, eval) splits of (x, labels) per the configured source."""
    if cfg.data.source == "file":
        x, labels = read_dataset(cfg.data.path)
        if labels is None:
            raise ValueError(f"dataset {cfg.data.path} carries no labels")
    else:
        x, labels = generate(cfg.data.synthetic_spec(cfg.seed))
    n_train = int(round(x.shape[0] * cfg.data.train_fraction))
    return (x[:n_train], labels[:n_train]), (x[n_train:], labels[n_train:])


def run_training(cfg: RunConfig, out_dir=None, schedule_mode: str | None = None) -> dict:
    """Train per the config; returns the summary written to run.json."""
    out = out_dir or cfg.out_dir
    os.makedirs(out, exist_ok=True)
    mode = schedule_mode or cfg.schedule.mode
    digest = config_digest(cfg)

    with open(os.path.join(out, "config.resolved"), "w") as f:
        f.write("\n".join(to_flat_lines(cfg, include_schedule=True)) + "\n")

    (x_train, _), (x_eval, _) = load_data(cfg)
    settings = settings_from_config(cfg)
    rng = SeededRng(cfg.seed)
    model = build_model(cfg.stack, settings, rng.child("model"))

    metrics = MetricsWriter(os.path.join(out, "metrics.jsonl"))
    trainer = Trainer(model, cfg.stack, x_train, settings, rng.child("train"),
                      metrics=metrics, run_dir=out)
    summary = trainer.train(mode)
    metrics.close()

    bounds = trainer.evaluate_bounds(x_eval, settings.eval_batches)
    eval_bounds = {
        str(m): {str(k): {"mean": float(v.mean()),
                          "sem": float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0,
                          "batches": int(len(v))}
                 for k, v in ks.items()}
        for m, ks in bounds.items()}

    params = {name: p.data for name, p in model.named_params().items()}
    save_checkpoint(os.path.join(out, "checkpoint.gimc"), params, digest)

    run_record = {
        "digest": digest,
        "seed": cfg.seed,
        "schedule": mode,
        "modules": len(model.stack),
        "context": cfg.context.mode,
        "summary": summary,
        "eval_bounds": eval_bounds,
    }
    with open(os.path.join(out, "run.json"), "w") as f:
        json.dump(run_record, f, indent=2, sort_keys=True)
    with open(os.path.join(out, "report.json"), "w") as f:
        json.dump({"digest": digest, "seed": cfg.seed, "schedule": mode,
                   "summary": summary, "eval_bounds": eval_bounds, "probes": []},
                  f, indent=2, sort_keys=True)
    return run_record


def rebuild_model(cfg: RunConfig, checkpoint_path) -> Model:
    """Model with parameters restored from a GIMC checkpoint."""
    settings = settings_from_config(cfg)
    model = build_model(cfg.stack, settings, SeededRng(cfg.seed).child("model"))
    params, digest, _ = load_checkpoint(checkpoint_path)
    own = model.named_params()
    if set(params) != set(own):
        missing = set(own) ^ set(params)
        raise ValueError(f"checkpoint does not match config; mismatched params: {sorted(missing)[:6]}")
    if digest and digest != config_digest(cfg):
        raise ValueError("checkpoint config digest does not match this config")
    for name, arr in params.items():
        if own[name].data.shape != arr.shape:
            raise ValueError(f"checkpoint shape mismatch for {name}")
        own[name].data = arr
    return model


def _per_step_features(z: np.ndarray, labels: np.ndarray, per_step_labels: bool):
    """Per-time-step rows from [n, d, L] module outputs, labels aligned.

    For per-step labels the raw-rate labels are mapped to module steps by
    sampling the receptive-field left edge (stride-1 stacks keep this the
    identity; strided stacks downsample the label track).
    """
    n, d, L = z.shape
    feats = z.transpose(0, 2, 1).reshape(n * L, d)
    if per_step_labels:
        T = labels.shape[1]
        idx = np.minimum((np.arange(L) * (T // L)).astype(int), T - 1)
        y = labels[:, idx].reshape(n * L)
    else:
        y = np.repeat(labels, L)
    return feats, y


def extract_module_features(model: Model, x: np.ndarray, labels: np.ndarray,
                            input_kind: str, patch_px: int = 16, overlap_px: int = 8,
                            chunk: int = 256):
    """Per-module probe features plus one context entry when present.

    Sequences yield per-step features without pooling; patch grids yield one
    mean-pooled vector per image.
    """
    per_step = labels.ndim == 2
    collected: list[list[np.ndarray]] = [[] for _ in model.stack]
    ctx_chunks: list[np.ndarray] = []
    for lo in range(0, x.shape[0], chunk):
        xb = np.asarray(x[lo:lo + chunk], dtype=np.float64)
        if input_kind == "patch_grid":
            from .patching import extract_patch_grid
            grids = [extract_patch_grid(img, patch_px, overlap_px).patches for img in xb]
            patches = np.stack(grids)
            B, R, C = patches.shape[:3]
            h = Tensor(patches.reshape((B * R * C,) + patches.shape[3:]))
        else:
            h = Tensor(xb)
        for m, mod in enumerate(model.stack):
            h = encode(mod, h)
            collected[m].append(h.data)
        if model.context is not None:
            zt = h.data.transpose(2, 0, 1)             # [L, B, d]
            ctx = context_forward(model.context, Tensor(zt))
            ctx_chunks.append(ctx.c.data.transpose(1, 2, 0))   # back to [B, d_h, L]
    results = []
    for m, parts in enumerate(collected):
        z = np.concatenate(parts)
        if input_kind == "patch_grid":
            # [n*R*C, ch, h, w] -> mean over patches and space -> [n, ch]
            n_img = x.shape[0]
            per_img = z.reshape((n_img, -1) + z.shape[1:])
            feats = per_img.transpose(0, 2, 1, 3, 4).reshape(n_img, z.shape[1], -1).mean(axis=2)
            y = labels
        else:
            feats, y = _per_step_features(z, labels, per_step)
        results.append((m, feats, y))
    if ctx_chunks:
        c = np.concatenate(ctx_chunks)
        feats, y = _per_step_features(c, labels, per_step)
        results.append((len(model.stack), feats, y))
    return results


def probe_per_module(model: Model, cfg: RunConfig, train_split, eval_split,
                     modules: list[int] | None = None):
    """Fit a linear probe on every requested module output; deepest last."""
    (x_tr, y_tr), (x_ev, y_ev) = train_split, eval_split
    kind = cfg.stack.input_kind
    tr_feats = extract_module_features(model, x_tr, y_tr, kind,
                                       cfg.patching.patch_px, cfg.patching.overlap_px)
    ev_feats = extract_module_features(model, x_ev, y_ev, kind,
                                       cfg.patching.patch_px, cfg.patching.overlap_px)
    results = []
    for (m, ftr, ytr), (_, fev, yev) in zip(tr_feats, ev_feats):
        if modules is not None and m not in modules:
            continue
        res = fit_and_score(ftr, ytr, fev, yev, cfg.data.n_classes,
                            lr=cfg.probe.lr, epochs=cfg.probe.epochs, module_index=m)
        results.append(res)
    return results


def append_probe_results(run_dir, results) -> dict:
    path = os.path.join(run_dir, "report.json")
    with open(path) as f:
        report = json.load(f)
    report["probes"] = [r.as_dict() for r in results]
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    return report
