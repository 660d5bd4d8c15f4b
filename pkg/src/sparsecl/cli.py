"""Command-line front end: ``sparsecl run|sweep|report|dump-activations``."""

from __future__ import annotations

import argparse
import copy
import csv
import io
import logging
import re
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from .allocation import average_class_activation
from .config import ExperimentConfig, load_config
from .data import build_benchmark
from .exceptions import ConfigError, DomainError, GroupingError, SparseCLError
from .metrics import METRIC_COLUMNS, metrics_row
from .runner import RunRecord, run_sequence
from .snapshot import load_network

log = logging.getLogger("sparsecl")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3
SWEEP_AXES = ("l_reuse", "candidate_fraction", "density")
ABSENT = "n/a"


def _slug(text):
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text).strip("_")


def load_benchmark(cfg: ExperimentConfig):
    b = cfg.benchmark
    spec, seq = build_benchmark(b.name, roots=b.roots or None, max_per_class=b.max_per_class, seed=b.data_seed, **b.synthetic)
    if b.reuse_start_task is not None:
        spec.reuse_start_task = b.reuse_start_task
    return seq


def record_stem(benchmark, method, seed):
    return f"{_slug(benchmark)}__{_slug(method.label)}__seed{seed}"


def run_experiment(cfg: ExperimentConfig, out: Path, overwrite=False, seq=None, tag=""):
    """Run every (method, seed) pair; returns the written records."""
    out.mkdir(parents=True, exist_ok=True)
    stems = [record_stem(cfg.benchmark.name, m, s) + tag for m in cfg.methods for s in cfg.seeds]
    clash = [s for s in stems if (out / f"{s}.json").exists()]
    if clash and not overwrite:
        raise ConfigError([("output", f"{out / clash[0]}.json exists; pass --overwrite to replace it")])
    seq = load_benchmark(cfg) if seq is None else seq
    records = []
    for method in cfg.methods:
        for seed in cfg.seeds:
            stem = record_stem(cfg.benchmark.name, method, seed) + tag
            snap = out / f"{stem}.net" if cfg.snapshots else None
            with open(out / f"{stem}.log.jsonl", "w") as lf:
                rec = run_sequence(seq, method, cfg.allocation, cfg.training, seed, cfg.model, snapshot_path=snap, log_file=lf)
            rec.data = cfg.benchmark.to_dict()
            rec.save(out / f"{stem}.json")
            if rec.failure:
                log.warning("%s stopped at task %d: %s", stem, rec.failure["task"], rec.failure["error"])
            log.info("%s ACC=%.4f", stem, rec.metrics()["ACC"] or 0.0)
            records.append(rec)
    _append_metrics(out / "metrics.csv", records)
    return records


def _append_metrics(path, records):
    new = not path.exists()
    with open(path, "a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        if new:
            w.writeheader()
        for r in records:
            if r.n_completed == 0:
                continue
            row = metrics_row(r.method.label, r.benchmark, r.seed, r.class_il.truncated(r.n_completed),
                              min(r.reuse_start_task, r.n_completed), r.cost)
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# -- sweep ----------------------------------------------------------------------


def sweep_point(cfg: ExperimentConfig, axis, value):
    """Copy of ``cfg`` with one knob changed and validated."""
    c = copy.deepcopy(cfg)
    if axis == "l_reuse":
        if float(value) != int(float(value)):
            raise ConfigError([("allocation.l_reuse", f"{value} is not an integer")])
        c.allocation.l_reuse = int(float(value))
    elif axis == "candidate_fraction":
        c.allocation.candidate_fraction = float(value)
    elif axis == "density":
        d = c.allocation.density
        if isinstance(d, dict):
            c.allocation.density = {**{k: float(value) for k in d if k != "output"}, "output": d.get("output", float(value))}
        else:
            c.allocation.density = [float(value)] * (len(d) - 1) + [d[-1]]
    else:
        raise DomainError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    return c.validate()


def default_sweep_values(cfg: ExperimentConfig, axis):
    if axis == "l_reuse":
        from .network import Architecture

        shape, n_classes, _ = cfg.benchmark_shape()
        L = Architecture(shape, cfg.model.layers(n_classes)).n_layers
        return list(range(2, L - 1))
    if axis == "candidate_fraction":
        return [0.1, 0.2, 0.3, 0.4, 0.5]
    raise ConfigError([("--values", f"required for axis {axis}")])


def minmax(values):
    v = np.asarray(values, dtype=np.float64)
    lo, hi = np.nanmin(v), np.nanmax(v)
    if not hi > lo:
        return np.where(np.isnan(v), np.nan, 1.0)
    return (v - lo) / (hi - lo)


def run_sweep(cfg: ExperimentConfig, axis, values, out: Path, overwrite=False):
    """One run per value per seed per method; returns the summary rows."""
    if axis not in SWEEP_AXES:
        raise DomainError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    seq = load_benchmark(cfg)
    rows = []
    for value in values:
        try:
            point = sweep_point(cfg, axis, value)
        except ConfigError as e:
            log.warning("skipping %s=%s: %s", axis, value, "; ".join(f"{f}: {m}" for f, m in e.errors))
            continue
        recs = run_experiment(point, out, overwrite, seq=seq, tag=f"__{axis}={value}")
        by_method = defaultdict(list)
        for r in recs:
            by_method[r.method.label].append(r)
        for label, rs in by_method.items():
            ms = [r.metrics() for r in rs if r.n_completed]
            mean = {k: _mean([m[k] for m in ms]) for k in ("ACC", "BWT", "LA")}
            rows.append({"axis": axis, "value": value, "method": label, **mean})
    for label in {r["method"] for r in rows}:
        mine = [r for r in rows if r["method"] == label]
        for k in ("ACC", "BWT", "LA"):
            vals = [np.nan if r[k] is None else r[k] for r in mine]
            for r, n in zip(mine, minmax(vals)):
                r[f"{k}_norm"] = None if np.isnan(n) else float(n)
    cols = ["axis", "value", "method", "ACC", "BWT", "LA", "ACC_norm", "BWT_norm", "LA_norm"]
    with open(out / f"sweep_{axis}.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else repr(r[k]) if isinstance(r[k], float) else r[k]) for k in cols})
    return rows


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


# -- report ---------------------------------------------------------------------


def _stats(vals, scale=1.0):
    vals = [v * scale for v in vals if v is not None]
    if not vals:
        return None, None
    sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return float(np.mean(vals)), sd


def report(records):
    """Mean and standard deviation across seeds per (method, benchmark)."""
    if not records:
        raise DomainError("report needs at least one run record")
    benches = sorted({r.benchmark for r in records})
    if len(benches) > 1:
        raise GroupingError(f"records mix benchmarks {benches}; report one benchmark per table")
    groups = defaultdict(list)
    for r in records:
        groups[(r.method.label, r.benchmark)].append(r)
    rows = []
    for (label, bench), rs in sorted(groups.items()):
        done = [r for r in rs if r.n_completed]
        ms = [r.metrics() for r in done]
        row = {"method": label, "benchmark": bench, "runs": len(rs)}
        for k in ("ACC", "BWT", "LA"):
            row[f"{k}_mean"], row[f"{k}_std"] = _stats([m[k] for m in ms], 100.0)
        row["params_mean"], row["params_std"] = _stats([r.cost.params if r.cost else None for r in done])
        row["flops_ratio_mean"], row["flops_ratio_std"] = _stats([r.cost.flops_ratio if r.cost else None for r in done])
        rows.append(row)
    return rows


REPORT_COLUMNS = ["method", "benchmark", "runs"] + [
    f"{k}_{s}" for k in ("ACC", "BWT", "LA", "params", "flops_ratio") for s in ("mean", "std")
]


def report_csv(rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r[k] is None else repr(r[k]) if isinstance(r[k], float) else r[k]) for k in REPORT_COLUMNS})
    return buf.getvalue()


def report_text(rows):
    def cell(r, k, fmt):
        m, s = r[f"{k}_mean"], r[f"{k}_std"]
        return ABSENT if m is None else f"{m:{fmt}} ± {s:{fmt}}"

    head = ["method", "benchmark", "runs", "ACC", "BWT", "LA", "#params", "FLOPs ratio"]
    body = [
        [r["method"], r["benchmark"], str(r["runs"]), cell(r, "ACC", ".2f"), cell(r, "BWT", ".2f"), cell(r, "LA", ".2f"),
         cell(r, "params", ".0f"), cell(r, "flops_ratio", ".4f")]
        for r in rows
    ]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    lines = ["  ".join(x.ljust(w) for x, w in zip(line, widths)) for line in [head, *body]]
    return "\n".join(lines) + "\n"


# -- activations ----------------------------------------------------------------


def dump_activations(record: RunRecord, layer, classes, split="train"):
    """Rows ``(class, a_1, ..., a_n)`` of the average activation of ``layer`` per class."""
    if not record.snapshot:
        raise DomainError("run record has no network snapshot")
    net, _ = load_network(record.snapshot)
    if not 1 <= layer <= net.n_layers:
        raise DomainError(f"layer {layer} outside 1..{net.n_layers}")
    d = record.data or {"name": record.benchmark}
    spec, seq = build_benchmark(
        d["name"], roots=d.get("roots") or None, max_per_class=d.get("max_per_class"), seed=d.get("data_seed", 0),
        **d.get("synthetic", {}),
    )
    pool = {}
    for t in seq:
        x, y = (t.x_train, t.y_train) if split == "train" else (t.x_test, t.y_test)
        for c in t.classes:
            pool[c] = x[y == c]
    rows = []
    for c in classes:
        if c not in pool:
            raise DomainError(f"class {c} is not part of benchmark {d['name']}")
        rows.append([c] + average_class_activation(net, pool[c])[layer - 1].tolist())
    return rows


def activations_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n = len(rows[0]) - 1 if rows else 0
    w.writerow(["class"] + [f"n{i}" for i in range(n)])
    for r in rows:
        w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
    return buf.getvalue()


# -- entry point ----------------------------------------------------------------


def _csv_list(text, cast):
    return [cast(v) for v in text.split(",") if v.strip()]


def build_parser():
    p = argparse.ArgumentParser(prog="sparsecl", description="Sparse continual learning experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run every method and seed of a config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (overrides the config)")
    r.add_argument("--overwrite", action="store_true")

    s = sub.add_parser("sweep", help="vary one allocation knob")
    s.add_argument("config")
    s.add_argument("--axis", required=True, choices=SWEEP_AXES)
    s.add_argument("--values", help="comma-separated values")
    s.add_argument("--out")
    s.add_argument("--overwrite", action="store_true")

    rep = sub.add_parser("report", help="aggregate run records")
    rep.add_argument("records", nargs="+")
    rep.add_argument("--out", help="write report.csv and report.txt here")

    d = sub.add_parser("dump-activations", help="average activation per class from a run's snapshot")
    d.add_argument("record")
    d.add_argument("--layer", type=int, required=True)
    d.add_argument("--classes", required=True, help="comma-separated class ids")
    d.add_argument("--split", choices=("train", "test"), default="train")
    d.add_argument("--out", help="CSV file (default: stdout)")
    return p


def _dispatch(args):
    if args.command == "run":
        cfg = load_config(args.config)
        run_experiment(cfg, Path(args.out or cfg.output), args.overwrite)
    elif args.command == "sweep":
        cfg = load_config(args.config)
        values = _csv_list(args.values, str) if args.values else default_sweep_values(cfg, args.axis)
        run_sweep(cfg, args.axis, values, Path(args.out or cfg.output), args.overwrite)
    elif args.command == "report":
        rows = report([RunRecord.load(p) for p in args.records])
        text = report_text(rows)
        sys.stdout.write(text)
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "report.csv").write_text(report_csv(rows))
            (out / "report.txt").write_text(text)
    elif args.command == "dump-activations":
        rec = RunRecord.load(args.record)
        text = activations_csv(dump_activations(rec, args.layer, _csv_list(args.classes, int), args.split))
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _dispatch(args)
    except ConfigError as e:
        for fld, msg in e.errors:
            print(f"config error: {fld}: {msg}", file=sys.stderr)
        return EXIT_VALIDATION
    except (GroupingError, DomainError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SparseCLError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
