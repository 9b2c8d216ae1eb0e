"""Command-line entry point.

Subcommands:
  synth      write a synthetic dataset to a GIMD file
  train      run the configured schedule; writes checkpoints + metrics
  cache      persist a frozen module chain's outputs to a GIMA store
  probe      fit linear probes on a trained checkpoint (per-module sweeps)
  gradcheck  run the finite-difference and isolation suites
  report     aggregate run directories into a summary table

Exit codes: 0 success, 1 validation error, 2 runtime error, 3 check
failure. Errors are emitted as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_CHECK_FAILED = 3


def _fail(code: int, err: Exception | str, **extra) -> int:
    payload = {"error": str(err), "type": type(err).__name__ if isinstance(err, Exception) else "Error"}
    payload.update(extra)
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def _load_config(path):
    from .config import parse_config
    return parse_config(path)


def cmd_synth(args) -> int:
    from .data import generate
    from .formats import write_dataset
    cfg = _load_config(args.config)
    x, labels = generate(cfg.data.synthetic_spec(cfg.seed))
    write_dataset(args.out, x, labels)
    print(json.dumps({"written": args.out, "shape": list(x.shape),
                      "kind": cfg.data.kind, "seed": cfg.seed}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .runner import run_training
    cfg = _load_config(args.config)
    record = run_training(cfg, out_dir=args.out, schedule_mode=args.schedule)
    print(json.dumps({"run_dir": args.out or cfg.out_dir,
                      "schedule": record["schedule"],
                      "peak_bytes": record["summary"]["peak_bytes"],
                      "final_loss": record["summary"]["final_loss"]}, sort_keys=True))
    return EXIT_OK


def cmd_cache(args) -> int:
    from .runner import rebuild_model, load_data
    from .training import cache_activations
    cfg = _load_config(args.config)
    model = rebuild_model(cfg, args.checkpoint)
    upto = args.module + 1
    if upto > len(model.stack):
        raise ValueError(f"--module {args.module} out of range for {len(model.stack)} modules")
    for mod in model.stack[:upto]:
        mod.freeze()
    if args.dataset:
        from .formats import read_dataset
        x, _ = read_dataset(args.dataset)
    else:
        (x, _), _ = load_data(cfg)
    cache_activations(model.stack[:upto], x, args.out,
                      input_kind=cfg.stack.input_kind,
                      patch_px=cfg.patching.patch_px,
                      overlap_px=cfg.patching.overlap_px)
    print(json.dumps({"written": args.out, "module": args.module,
                      "samples": int(x.shape[0])}))
    return EXIT_OK


def cmd_probe(args) -> int:
    from .runner import (append_probe_results, load_data, probe_per_module,
                         rebuild_model)
    cfg = _load_config(args.config)
    ckpt = args.checkpoint or os.path.join(args.run, "checkpoint.gimc")
    model = rebuild_model(cfg, ckpt)
    train_split, eval_split = load_data(cfg)
    modules = None if args.module == "all" else [int(args.module)]
    results = probe_per_module(model, cfg, train_split, eval_split, modules)
    out = [r.as_dict() for r in results]
    if args.run:
        append_probe_results(args.run, results)
    print(json.dumps({"probes": out}, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck
    report = run_gradcheck(cases=args.cases, seed=args.seed)
    for line in report["lines"]:
        print(line)
    if not report["ok"]:
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    digests = set()
    for run_dir in args.runs:
        with open(os.path.join(run_dir, "run.json")) as f:
            rec = json.load(f)
        report_path = os.path.join(run_dir, "report.json")
        probes = []
        if os.path.exists(report_path):
            with open(report_path) as f:
                probes = json.load(f).get("probes", [])
        digests.add(rec["digest"])
        if len(digests) > 1:
            raise ValueError(
                "refusing to aggregate runs with mismatched config digests: "
                + ", ".join(sorted(d[:12] for d in digests)))
        probe_by_module = {p["module"]: p["accuracy"] for p in probes}
        for m_str, loss in sorted(rec["summary"]["final_loss"].items()):
            m = int(m_str)
            bounds = rec.get("eval_bounds", {}).get(m_str, {})
            rows.append({
                "run": run_dir,
                "schedule": rec["schedule"],
                "seed": rec["seed"],
                "module": m,
                "final_loss": loss,
                "mi_bound_mean": {k: v["mean"] for k, v in bounds.items()},
                "probe_accuracy": probe_by_module.get(m),
                "peak_bytes": rec["summary"]["peak_bytes"],
            })
    if args.json:
        print(json.dumps({"digest": next(iter(digests)), "rows": rows}, sort_keys=True))
    else:
        hdr = f"{'run':<28} {'sched':<12} {'seed':>4} {'mod':>3} {'loss':>9} {'probe':>7} {'peak_bytes':>12}"
        print(hdr)
        print("-" * len(hdr))
        for r in rows:
            probe = f"{r['probe_accuracy']:.3f}" if r["probe_accuracy"] is not None else "-"
            print(f"{os.path.basename(r['run'].rstrip('/')):<28} {r['schedule']:<12} "
                  f"{r['seed']:>4} {r['module']:>3} {r['final_loss']:>9.4f} "
                  f"{probe:>7} {r['peak_bytes']:>12}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="infostack",
        description="Greedy stacks of gradient-isolated encoders with "
                    "module-local contrastive training.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset (GIMD file)")
    sp.add_argument("-c", "--config", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("train", help="train per the configured schedule")
    sp.add_argument("-c", "--config", required=True)
    sp.add_argument("--out", default=None, help="run directory (default: config out_dir)")
    sp.add_argument("--schedule", default=None,
                    choices=["simultaneous", "iterative", "cached"],
                    help="override schedule.mode")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("cache", help="write a frozen chain's outputs to a GIMA store")
    sp.add_argument("-c", "--config", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--module", type=int, required=True,
                    help="last module index included in the frozen chain")
    sp.add_argument("--dataset", default=None, help="GIMD file (default: config data)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_cache)

    sp = sub.add_parser("probe", help="fit linear probes on frozen representations")
    sp.add_argument("-c", "--config", required=True)
    sp.add_argument("--run", default=None, help="run directory to append results to")
    sp.add_argument("--checkpoint", default=None,
                    help="GIMC checkpoint (default: <run>/checkpoint.gimc)")
    sp.add_argument("--module", default="all",
                    help="'all' for a per-module sweep or one module index")
    sp.set_defaults(fn=cmd_probe)

    sp = sub.add_parser("gradcheck", help="finite-difference + isolation suite")
    sp.add_argument("--cases", type=int, default=25, help="random cases per primitive")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("report", help="aggregate run directories")
    sp.add_argument("runs", nargs="+", help="run directories to aggregate")
    sp.add_argument("--json", action="store_true", help="machine-readable output")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, KeyError, FileNotFoundError, OSError) as e:
        return _fail(EXIT_VALIDATION, e)
    except Exception as e:  # anything else is a runtime failure
        return _fail(EXIT_RUNTIME, e)


if __name__ == "__main__":
    sys.exit(main())
