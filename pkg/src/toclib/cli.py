"""Command-line front end.

Every subcommand reads one JSON experiment config (or a named preset) plus
optional --set key=value overrides; all heavy lifting lives in the library.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .channel import ChannelSpec
from .checkpoint import load_checkpoint, save_checkpoint
from .data import to_onehot
from .dynamic_model import build_dynamic_pipeline
from .experiment import (
    ExperimentConfig,
    build_dataset,
    emit_report,
    exit_confidences,
    make_channel_spec,
    make_dynamic_config,
    make_static_config,
    make_train_config,
    parse_report,
    run_dynamic_cell,
    run_static_cell,
    sweep,
)
from .flops import profile_graph
from .presets import PRESETS
from .scheduler import CostVector, ExitPolicy, calibrate_thresholds, exit_probs, solve_rate
from .static_model import build_static, evaluate_accuracy


def _load_config(args) -> ExperimentConfig:
    if args.preset:
        cfg = PRESETS[args.preset]()
    elif args.config:
        cfg = ExperimentConfig.from_file(args.config)
    else:
        cfg = ExperimentConfig()
    if args.set:
        cfg.apply_overrides(args.set)
    return cfg


def _single_channel(cfg: ExperimentConfig) -> ChannelSpec:
    ch = cfg.channel
    kind = ch.get("kind") or (ch.get("kinds") or ["awgn"])[0]
    psnr = ch.get("psnr_db", 0.0)
    if isinstance(psnr, (list, tuple)):
        psnr = psnr[0]
    return make_channel_spec(kind, psnr)


def _outdir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.sweep.get("outdir", "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args):
    cfg = _load_config(args)
    ds = build_dataset(cfg, seed=args.seed)
    out = _outdir(cfg) / "dataset.npz"
    np.savez_compressed(out, images=ds.images, labels=ds.labels,
                        num_classes=ds.num_classes,
                        noise_levels=ds.noise_levels if ds.noise_levels is not None else np.array([]),
                        **{f"split_{k}": v for k, v in ds.splits.items()})
    print(f"wrote {out} ({len(ds.labels)} samples, {ds.num_classes} classes)")


def cmd_train_static(args):
    cfg = _load_config(args)
    ds = build_dataset(cfg, seed=args.seed)
    spec = _single_channel(cfg)
    pipe, row, trace = run_static_cell(cfg, ds, spec, args.seed)
    out = _outdir(cfg)
    save_checkpoint(pipe.params, out / "static.ckpt")
    trace.save_csv(out / "static_trace.csv")
    print(f"test accuracy {row.accuracy:.4f} @ {spec.kind} {spec.psnr_db} dB; "
          f"checkpoint {out / 'static.ckpt'}")


def cmd_train_dynamic(args):
    cfg = _load_config(args)
    ds = build_dataset(cfg, seed=args.seed)
    spec = _single_channel(cfg)
    cell = run_dynamic_cell(cfg, ds, spec, args.seed)
    out = _outdir(cfg)
    save_checkpoint(cell.pipeline.params, out / "dynamic.ckpt")
    cell.trace.save_csv(out / "dynamic_trace.csv")
    (out / "flops.json").write_text(json.dumps(
        profile_graph(cell.pipeline.graph).to_dict(), indent=2))
    (out / "placement.json").write_text(json.dumps(cell.pipeline.graph.meta["placement"], indent=2))
    emit_report(cell.rows, out, stem="dynamic_budgets")
    print(f"exit costs {cell.costs.costs.tolist()}; reports in {out}")


def _rebuild_dynamic(cfg, ds, spec, ckpt):
    dcfg = make_dynamic_config(cfg, ds, spec)
    pipe = build_dynamic_pipeline(dcfg, np.random.default_rng(0))
    pipe.params = load_checkpoint(ckpt)
    return pipe


def cmd_calibrate(args):
    cfg = _load_config(args)
    ds = build_dataset(cfg, seed=args.seed)
    spec = _single_channel(cfg)
    pipe = _rebuild_dynamic(cfg, ds, spec, args.checkpoint)
    costs = CostVector(np.asarray(profile_graph(pipe.graph).exit_costs, dtype=float))
    r_up = solve_rate(args.budget, args.batch, costs)
    probs = exit_probs(r_up, len(costs))
    va = ds.split("val")
    cal = calibrate_thresholds(exit_confidences(pipe, va.images), probs)
    policy = ExitPolicy(r=r_up, probs=probs, thresholds=cal.thresholds,
                        costs=costs.costs, budget=args.budget, batch=args.batch)
    out = _outdir(cfg) / "policy.json"
    policy.save(out)
    print(f"r_up={r_up:.6g} probs={probs.round(4).tolist()} -> {out}")


def cmd_eval(args):
    cfg = _load_config(args)
    ds = build_dataset(cfg, seed=args.seed)
    spec = _single_channel(cfg)
    te = ds.split("test")
    if cfg.model == "static":
        scfg = make_static_config(cfg, ds, spec)
        pipe = build_static(scfg, np.random.default_rng(0))
        pipe.params = load_checkpoint(args.checkpoint)
        acc = evaluate_accuracy(pipe, te.images, te.labels, rng=np.random.default_rng(args.seed))
        print(f"accuracy {acc:.4f}")
        return
    from .scheduler import budgeted_run

    pipe = _rebuild_dynamic(cfg, ds, spec, args.checkpoint)
    policy = ExitPolicy.load(args.policy)
    run = budgeted_run(pipe, te.images, te.labels, policy.thresholds, policy.costs,
                       rng=np.random.default_rng(args.seed))
    print(f"accuracy {run.accuracy:.4f} avg_tx_flops {run.avg_tx_flops:.0f} "
          f"exit_hist {run.histogram.tolist()}")


def cmd_flops(args):
    cfg = _load_config(args)
    ds = build_dataset(cfg, seed=args.seed)
    spec = _single_channel(cfg)
    if cfg.model == "static":
        graph = build_static(make_static_config(cfg, ds, spec), np.random.default_rng(0)).graph
    else:
        from .dynamic_model import build_dynamic

        graph = build_dynamic(make_dynamic_config(cfg, ds, spec))
    profile = profile_graph(graph, convention=args.convention)
    out = _outdir(cfg) / "flops.json"
    out.write_text(json.dumps(profile.to_dict(), indent=2))
    print(f"total {profile.total} exits {profile.exit_costs} -> {out}")


def cmd_sweep(args):
    cfg = _load_config(args)
    rows = sweep(cfg)
    print(f"{len(rows)} rows -> {cfg.sweep.get('outdir', 'out')}")


def cmd_report(args):
    rows = parse_report(args.rows)
    csv_path, json_path = emit_report(rows, args.outdir)
    print(f"rewrote {csv_path} and {json_path}")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="toclib", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, policy=False):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--preset", choices=sorted(PRESETS), help="named built-in config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, e.g. train.epochs=30")
        p.add_argument("--seed", type=int, default=0)
        if checkpoint:
            p.add_argument("--checkpoint", required=True)
        if policy:
            p.add_argument("--policy", help="exit policy JSON (dynamic eval)")

    common(sub.add_parser("gen-data", help="generate and save a dataset"))
    common(sub.add_parser("train-static", help="train the single-exit pipeline"))
    common(sub.add_parser("train-dynamic", help="train the multi-exit pipeline and budget table"))
    p = sub.add_parser("calibrate", help="solve the rate and calibrate thresholds for a budget")
    common(p, checkpoint=True)
    p.add_argument("--budget", type=float, required=True, help="total FLOPs budget B for the batch")
    p.add_argument("--batch", type=int, required=True, help="batch size N the budget covers")
    p = sub.add_parser("eval", help="evaluate a checkpoint (static accuracy or budgeted run)")
    common(p, checkpoint=True, policy=True)
    p = sub.add_parser("flops", help="emit the per-layer / per-exit FLOPs profile")
    common(p)
    p.add_argument("--convention", choices=["conv-linear", "all"], default="conv-linear")
    common(sub.add_parser("sweep", help="run the full channel x budget x seed sweep"))
    p = sub.add_parser("report", help="re-emit CSV/JSON reports from a rows file")
    p.add_argument("--rows", required=True, help="existing report CSV")
    p.add_argument("--outdir", default="out")

    args = ap.parse_args(argv)
    handlers = {
        "gen-data": cmd_gen_data,
        "train-static": cmd_train_static,
        "train-dynamic": cmd_train_dynamic,
        "calibrate": cmd_calibrate,
        "eval": cmd_eval,
        "flops": cmd_flops,
        "sweep": cmd_sweep,
        "report": cmd_report,
    }
    handlers[args.command](args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
