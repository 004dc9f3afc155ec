"""Experiment configuration, PSNR x budget sweeps, and report emission.

A sweep cell is (channel kind, PSNR, seed): the model is trained once per cell
and, for dynamic models, evaluated across the whole budget grid. Reports are
written as CSV (fixed header) and a JSON mirror, plus plot-ready curve files.
Identical config + seed reproduces byte-identical files.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .channel import ChannelSpec
from .data import Dataset, gen_synthetic, parse_cifar, to_onehot
from .dynamic_model import DynamicConfig, build_dynamic_pipeline
from .engine import forward
from .errors import InfeasibleBudgetError, TocError
from .flops import profile_graph
from .scheduler import CostVector, budgeted_run, calibrate_thresholds, exit_probs, solve_rate
from .static_model import StaticConfig, build_static, evaluate_accuracy
from .training import TrainConfig, train

CSV_HEADER = "model,channel,psnr_db,budget,seed,accuracy,avg_tx_flops,exit_hist,tx_dim"


@dataclass
class ReportRow:
    model: str
    channel: str
    psnr_db: float | None
    budget: float | None
    seed: int
    accuracy: float | None
    avg_tx_flops: float | None
    exit_hist: list[int] | None
    tx_dim: int
    status: str = "ok"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _hist_str(hist) -> str:
    return "|".join(str(int(h)) for h in hist) if hist is not None else ""


def emit_report(rows: list[ReportRow], outdir, stem: str = "report") -> tuple[Path, Path]:
    """Write rows as CSV (exact fixed header) and JSON; returns the two paths."""
    if not rows:
        raise TocError("refusing to emit an empty report")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    csv_path = outdir / f"{stem}.csv"
    with open(csv_path, "w", newline="") as f:
        f.write(CSV_HEADER + "\n")
        for r in rows:
            f.write(",".join([
                r.model, r.channel, _fmt(r.psnr_db), _fmt(r.budget), str(r.seed),
                _fmt(r.accuracy), _fmt(r.avg_tx_flops), _hist_str(r.exit_hist), str(r.tx_dim),
            ]) + "\n")
    json_path = outdir / f"{stem}.json"
    json_path.write_text(json.dumps([asdict(r) for r in rows], indent=2))
    return csv_path, json_path


def parse_report(csv_path) -> list[ReportRow]:
    """Read a report CSV back; inverse of emit_report for the CSV fields."""
    rows = []
    with open(csv_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if ",".join(header) != CSV_HEADER:
            raise TocError(f"unexpected report header {header}")
        for rec in reader:
            model, channel, psnr, budget, seed, acc, flops, hist, tx_dim = rec
            rows.append(ReportRow(
                model=model, channel=channel,
                psnr_db=float(psnr) if psnr else None,
                budget=float(budget) if budget else None,
                seed=int(seed),
                accuracy=float(acc) if acc else None,
                avg_tx_flops=float(flops) if flops else None,
                exit_hist=[int(x) for x in hist.split("|")] if hist else None,
                tx_dim=int(tx_dim),
            ))
    return rows


def write_curve(path, points) -> None:
    """Plot-ready (x, y) pairs, one per line."""
    with open(path, "w", newline="") as f:
        f.write("x,y\n")
        for x, y in points:
            f.write(f"{_fmt(float(x))},{_fmt(float(y))}\n")


# -- configuration ---------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """One sweep: model kind, dataset recipe, channel grid, budgets, seeds."""

    model: str = "dynamic"                       # static | dynamic
    dataset: dict = field(default_factory=lambda: {
        "kind": "synthetic", "n": 2500, "size": 16, "classes": 4, "noise": 0.6, "jitter": 2,
    })
    channel: dict = field(default_factory=lambda: {
        "kinds": ["awgn"], "psnr_db": [0.0, 18.0], "include_noiseless": True,
    })
    static: dict = field(default_factory=dict)   # StaticConfig overrides
    dynamic: dict = field(default_factory=dict)  # DynamicConfig overrides (scales/exits/growth/blocks)
    train: dict = field(default_factory=dict)    # TrainConfig overrides
    sweep: dict = field(default_factory=lambda: {"seeds": [0, 1, 2], "budget_points": 6, "outdir": "out"})

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        cfg = cls()
        for key in ("model",):
            if key in d:
                setattr(cfg, key, d[key])
        for section in ("dataset", "channel", "static", "dynamic", "train", "sweep"):
            if section in d:
                getattr(cfg, section).update(d[section])
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def apply_overrides(self, pairs: list[str]) -> None:
        """Apply dotted key=value overrides, e.g. train.epochs=30."""
        for pair in pairs:
            key, _, raw = pair.partition("=")
            if not _:
                raise TocError(f"override {pair!r} is not key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            section, _, leaf = key.partition(".")
            if not leaf:
                setattr(self, section, value)
                continue
            target = getattr(self, section)
            target[leaf] = value


def _channel_cells(cfg: ExperimentConfig):
    ch = cfg.channel
    psnrs = ch.get("psnr_db", [0.0])
    if not isinstance(psnrs, (list, tuple)):
        psnrs = [psnrs]
    kinds = ch.get("kinds") or [ch.get("kind", "awgn")]
    cells = [(kind, float(p)) for kind in kinds for p in psnrs]
    if ch.get("include_noiseless"):
        cells.append(("noiseless", None))
    return cells


def build_dataset(cfg: ExperimentConfig, seed: int) -> Dataset:
    d = cfg.dataset
    if d.get("kind", "synthetic") == "synthetic":
        return gen_synthetic(n=d.get("n", 2500), size=d.get("size", 16),
                             classes=d.get("classes", 4), noise=d.get("noise", 0.6),
                             jitter=d.get("jitter", 2), seed=seed,
                             val_fraction=d.get("val_fraction", 0.2),
                             test_fraction=d.get("test_fraction", 0.2))
    return parse_cifar(d.get("path"), variant=d["kind"])


def make_channel_spec(kind: str, psnr_db) -> ChannelSpec:
    return ChannelSpec("noiseless") if kind == "noiseless" else ChannelSpec(kind, float(psnr_db))


def make_static_config(cfg: ExperimentConfig, dataset: Dataset, spec: ChannelSpec) -> StaticConfig:
    s = cfg.static
    h, w, c = dataset.images.shape[1:]
    return StaticConfig(depth=s.get("depth", "tiny-8"),
                        num_classes=s.get("num_classes", dataset.num_classes),
                        input_shape=(h, w, c), channel=spec,
                        tx_dim=s.get("tx_dim", 16),
                        tiny_width=s.get("tiny_width", 8))


def make_dynamic_config(cfg: ExperimentConfig, dataset: Dataset, spec: ChannelSpec) -> DynamicConfig:
    d = cfg.dynamic
    h, w, c = dataset.images.shape[1:]
    kwargs = dict(
        input_shape=(h, w, c),
        num_classes=d.get("num_classes", dataset.num_classes),
        num_scales=d.get("scales", 2),
        num_exits=d.get("exits", 3),
        blocks=d.get("blocks", 6),
        growth=d.get("growth", 4),
        stem_channels=d.get("stem_channels", 6),
        bottleneck=d.get("bottleneck", 4.0),
        channel=spec,
        tx_dim=d.get("tx_dim", 16),
    )
    if "tau" in d:
        kwargs["tau"] = tuple(d["tau"])
    if "iota" in d:
        kwargs["iota"] = tuple(d["iota"])
    if "exit_blocks" in d and d["exit_blocks"] is not None:
        kwargs["exit_blocks"] = tuple(d["exit_blocks"])
    return DynamicConfig(**kwargs)


def make_train_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    t = dict(cfg.train)
    t.setdefault("epochs", 20)
    t.setdefault("lr", 0.05)
    t.setdefault("weight_decay", 1e-4)
    t["seed"] = seed
    known = {f for f in TrainConfig.__dataclass_fields__}
    return TrainConfig(**{k: v for k, v in t.items() if k in known})


def exit_confidences(pipeline, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """(N, K) matrix of transmitter confidences at every exit (deterministic)."""
    from .dynamic_model import confidence

    g = pipeline.graph
    exits = g.meta["exits"]
    nodes = [ex["conf_logits"] for ex in exits]
    chunks = []
    for lo in range(0, len(images), batch_size):
        res = forward(g, pipeline.params, images[lo : lo + batch_size], mode="eval", nodes=nodes)
        chunks.append(np.stack([np.asarray(confidence(res[n])) for n in nodes], axis=1))
    return np.concatenate(chunks)


@dataclass
class DynamicCellResult:
    """Everything one (channel, psnr, seed) dynamic cell produces."""

    pipeline: object
    costs: CostVector
    rows: list[ReportRow]
    runs: dict  # budget -> BudgetedRunResult
    trace: object


def run_dynamic_cell(cfg: ExperimentConfig, dataset: Dataset, spec: ChannelSpec, seed: int,
                     budgets=None, model_label: str = "dynamic") -> DynamicCellResult:
    """Train one dynamic model, then calibrate and evaluate every budget."""
    dcfg = make_dynamic_config(cfg, dataset, spec)
    tcfg = make_train_config(cfg, seed)
    rng = np.random.default_rng(seed)
    pipe = build_dynamic_pipeline(dcfg, rng, dtype=tcfg.dtype)
    tr, va, te = dataset.split("train"), dataset.split("val"), dataset.split("test")
    m = dcfg.num_classes
    xtr, xva, xte = (s.images.astype(tcfg.dtype) for s in (tr, va, te))
    result = train(pipe, xtr, to_onehot(tr.labels, m), tcfg,
                   val_images=xva, val_labels_onehot=to_onehot(va.labels, m))
    profile = profile_graph(pipe.graph, convention=tcfg.flops_convention)
    costs = CostVector(np.asarray(profile.exit_costs, dtype=float))

    n_test = len(te)
    if budgets is None:
        points = int(cfg.sweep.get("budget_points", 6))
        budgets = np.linspace(costs.costs[0] * n_test, costs.costs[-1] * n_test, points)
    val_conf = exit_confidences(pipe, xva)

    rows, runs = [], {}
    for b in budgets:
        b = float(b)
        try:
            r_up = solve_rate(b, n_test, costs)
        except InfeasibleBudgetError:
            rows.append(ReportRow(model=model_label, channel=spec.kind, psnr_db=None if spec.kind == "noiseless" else spec.psnr_db,
                                  budget=b, seed=seed, accuracy=None, avg_tx_flops=None,
                                  exit_hist=None, tx_dim=dcfg.tx_dim, status="infeasible"))
            continue
        cal = calibrate_thresholds(val_conf, exit_probs(r_up, dcfg.num_exits))
        run = budgeted_run(pipe, xte, te.labels, cal.thresholds, costs,
                           rng=np.random.default_rng(seed + 1))
        runs[b] = run
        rows.append(ReportRow(model=model_label, channel=spec.kind,
                              psnr_db=None if spec.kind == "noiseless" else spec.psnr_db,
                              budget=b, seed=seed, accuracy=run.accuracy,
                              avg_tx_flops=run.avg_tx_flops,
                              exit_hist=[int(h) for h in run.histogram], tx_dim=dcfg.tx_dim))
    return DynamicCellResult(pipeline=pipe, costs=costs, rows=rows, runs=runs, trace=result.trace)


def run_static_cell(cfg: ExperimentConfig, dataset: Dataset, spec: ChannelSpec, seed: int):
    scfg = make_static_config(cfg, dataset, spec)
    tcfg = make_train_config(cfg, seed)
    rng = np.random.default_rng(seed)
    pipe = build_static(scfg, rng, dtype=tcfg.dtype)
    tr, va, te = dataset.split("train"), dataset.split("val"), dataset.split("test")
    m = scfg.num_classes
    xtr, xva, xte = (s.images.astype(tcfg.dtype) for s in (tr, va, te))
    result = train(pipe, xtr, to_onehot(tr.labels, m), tcfg,
                   val_images=xva, val_labels_onehot=to_onehot(va.labels, m))
    acc = evaluate_accuracy(pipe, xte, te.labels, rng=np.random.default_rng(seed + 1))
    label = f"static-{scfg.depth}"
    row = ReportRow(model=label, channel=spec.kind,
                    psnr_db=None if spec.kind == "noiseless" else spec.psnr_db,
                    budget=None, seed=seed, accuracy=acc, avg_tx_flops=None,
                    exit_hist=None, tx_dim=scfg.tx_dim)
    return pipe, row, result.trace


def sweep(cfg: ExperimentConfig) -> list[ReportRow]:
    """Run every (channel, PSNR, seed) cell, write reports and curve files."""
    outdir = Path(cfg.sweep.get("outdir", "out"))
    outdir.mkdir(parents=True, exist_ok=True)
    seeds = cfg.sweep.get("seeds", [0])
    cells = _channel_cells(cfg)
    rows: list[ReportRow] = []
    budget_curves: dict[tuple, dict] = {}
    psnr_curves: dict[str, dict] = {}

    for seed in seeds:
        dataset = build_dataset(cfg, seed)
        for kind, psnr in cells:
            spec = make_channel_spec(kind, psnr)
            if cfg.model == "static":
                _, row, trace = run_static_cell(cfg, dataset, spec, seed)
                rows.append(row)
                if row.accuracy is not None and kind != "noiseless":
                    psnr_curves.setdefault(kind, {}).setdefault(psnr, []).append(row.accuracy)
                curve = list(zip(trace.epochs, trace.train_loss))
            else:
                cell = run_dynamic_cell(cfg, dataset, spec, seed)
                rows.extend(cell.rows)
                for r in cell.rows:
                    if r.accuracy is not None:
                        budget_curves.setdefault((kind, psnr), {}).setdefault(r.budget, []).append(r.accuracy)
                curve = list(zip(cell.trace.epochs, cell.trace.train_loss))
            tag = f"{kind}" + ("" if psnr is None else f"_{psnr:g}dB")
            write_curve(outdir / f"loss_vs_epoch_{cfg.model}_{tag}_seed{seed}.csv", curve)

    emit_report(rows, outdir)
    for (kind, psnr), by_budget in sorted(budget_curves.items(), key=str):
        tag = f"{kind}" + ("" if psnr is None else f"_{psnr:g}dB")
        pts = [(b, float(np.mean(a))) for b, a in sorted(by_budget.items())]
        write_curve(outdir / f"accuracy_vs_budget_{tag}.csv", pts)
    for kind, by_psnr in sorted(psnr_curves.items()):
        pts = [(p, float(np.mean(a))) for p, a in sorted(by_psnr.items())]
        write_curve(outdir / f"accuracy_vs_psnr_{kind}.csv", pts)
    return rows
