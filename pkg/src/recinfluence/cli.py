"""Command-line entry point.

    recinfluence stats           --config exp.json
    recinfluence train-eval      --config exp.json
    recinfluence influence-users --config exp.json --workers 4 --sample-size 100
    recinfluence influence-items --config exp.json
    recinfluence ablate          --config exp.json --kind users --direction least --n 10
    recinfluence cost-estimate   --config exp.json --kind users

Report files are a pure function of the config and the dataset. Anything
that depends on the clock (wall times, cost estimates, the run log) goes to
``<output_dir>/runlog/``.

Exit codes: 0 success, 1 runtime failure, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import diagnostics as dg
from .ingest import DataError, EntityNotFound, load, ratings_per_entity, stats
from .metrics import METRIC_NAMES, MetricError
from .ncf import NcfConfig, TrainingDiverged

log = logging.getLogger("recinfluence")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class ExperimentConfig:
    dataset_path: str = "data/ml-100k/u.data"
    dataset_format: str = "movielens"
    model_kind: str = "ncf"
    ncf: NcfConfig = field(default_factory=NcfConfig)
    svd: dg.SvdConfig = field(default_factory=lambda: dg.SvdConfig(k=15, fill="binary"))
    train_fraction: float = 0.75
    seed: int = 0
    stratify: bool = False
    negative_ratio: int = 4
    k: int = 10
    relevance_threshold: float | None = None
    metric: str = "map"
    sample_size: int | None = None
    sample_seed: int = 0
    entities: list | None = None
    seed_mode: str = "per_entity"
    workers: int = 1
    output_dir: str = "out"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        if "ncf" in d:
            d["ncf"] = NcfConfig.from_dict(d["ncf"])
        if "svd" in d:
            d["svd"] = dg.SvdConfig(**d["svd"])
        cfg = cls(**d)
        cfg.check()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"no such config file: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise UsageError(f"bad config {path}: {exc}") from None

    def check(self):
        if self.model_kind not in ("ncf", "svd"):
            raise UsageError(f"model_kind must be 'ncf' or 'svd', not {self.model_kind!r}")
        if self.metric not in METRIC_NAMES:
            raise UsageError(f"metric must be one of {METRIC_NAMES}")
        if self.k < 1:
            raise UsageError("k must be >= 1")
        if self.workers < 1:
            raise UsageError("workers must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ncf"] = self.ncf.to_dict()
        return d

    def config_hash(self) -> str:
        # Worker count and output location do not change any result.
        d = self.to_dict()
        d.pop("workers")
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    # ---- views used by the library

    def model_spec(self) -> dg.ModelSpec:
        return dg.ModelSpec(self.model_kind, self.ncf.replace(seed=self.seed), self.svd)

    def settings(self) -> dg.EvalSettings:
        return dg.EvalSettings(self.train_fraction, self.seed, self.k, self.relevance_threshold,
                               self.stratify, self.negative_ratio)

    def plan(self, kind: str) -> dg.SweepPlan:
        return dg.SweepPlan(kind, tuple(self.entities) if self.entities else None,
                            self.sample_size, self.sample_seed, self.workers, self.seed,
                            self.seed_mode)


# ------------------------------------------------------------------ output

class Outputs:
    """Writes report files under ``root`` and clock-dependent files under
    ``root/runlog``. Directories are created on first write."""

    def __init__(self, root):
        self.root = Path(root)
        self.runlog = self.root / "runlog"

    def write(self, name: str, text: str) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / name
        path.write_text(text)
        return path

    def log(self, name: str, text: str) -> Path:
        self.runlog.mkdir(parents=True, exist_ok=True)
        path = self.runlog / name
        path.write_text(text)
        return path

    def event(self, message: str):
        self.runlog.mkdir(parents=True, exist_ok=True)
        stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
        with open(self.runlog / "run.log", "a") as fh:
            fh.write(f"{stamp} {message}\n")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _entity_kind(arg: str) -> str:
    return {"users": dg.USER, "user": dg.USER, "items": dg.ITEM, "item": dg.ITEM}[arg]


# ----------------------------------------------------------------- commands

def cmd_stats(cfg: ExperimentConfig, out: Outputs):
    data = load(cfg.dataset_path, cfg.dataset_format)
    s = stats(data)
    out.write("stats.json", s.to_json())
    title = Path(cfg.dataset_path).parent.name or cfg.dataset_format
    out.write("stats.txt", s.to_table(title))
    print(s.to_table(title), end="")
    return s


def cmd_train_eval(cfg: ExperimentConfig, out: Outputs):
    data = load(cfg.dataset_path, cfg.dataset_format)
    t0 = time.perf_counter()
    report, model, _ = dg.run_pipeline(data, cfg.model_spec(), cfg.settings(), cfg.seed,
                                       return_model=True)
    out.event(f"train-eval {cfg.model_kind} took {time.perf_counter() - t0:.2f}s")
    table = report.to_table()
    note = mae_scale_note(cfg, data)
    if note:
        table += f"note: {note}\n"
    out.write("metrics.json", report.to_json())
    out.write("metrics.txt", table)
    out.write("config.json", json.dumps({"config": cfg.to_dict(),
                                         "config_hash": cfg.config_hash(),
                                         "notes": [note] if note else []},
                                        indent=2, sort_keys=True) + "\n")
    if cfg.model_kind == "ncf":
        out.root.mkdir(parents=True, exist_ok=True)
        model.save(out.root / "model.npz")
        out.write("loss.csv", model.loss_csv())
    else:
        out.write("svd_factors.json", model.factorization.to_json())
    print(table, end="")
    return report


def mae_scale_note(cfg: ExperimentConfig, data) -> str | None:
    """Describe a mismatch between the model's output scale and the raw
    ratings that MAE and explained variance are computed against."""
    if data.kind != "explicit":
        return None
    lo, hi = data.rating_scale
    if cfg.model_kind == "ncf" and cfg.ncf.target == "binary":
        return (f"MAE/explained variance compare NCF scores in (0, 1) with raw ratings in "
                f"[{lo:g}, {hi:g}]; scale mismatch")
    if cfg.model_kind == "svd" and cfg.svd.fill == "binary":
        return (f"MAE/explained variance compare SVD scores of the 0/1 interaction matrix "
                f"with raw ratings in [{lo:g}, {hi:g}]; scale mismatch")
    return None


def cmd_influence(cfg: ExperimentConfig, out: Outputs, kind: str):
    data = load(cfg.dataset_path, cfg.dataset_format)
    plan = cfg.plan(kind)
    t0 = time.perf_counter()
    report = dg.influence_sweep(data, cfg.model_spec(), plan, cfg.settings(), cfg.metric)
    out.event(f"influence sweep over {len(report.records)} {kind}s took "
              f"{time.perf_counter() - t0:.2f}s with {plan.workers} worker(s)")
    stem = f"influence_{kind}s"
    out.write(f"{stem}.csv", report.to_csv())
    out.write(f"{stem}.json", report.to_json())
    out.log(f"{stem}_timing.csv", report.timing_csv())
    out.write(f"plot_{kind}s.csv", plot_csv(report))
    counts = ratings_per_entity(data, kind)
    out.write(f"hist_{kind}s.csv", _csv(("entity_id", "n_ratings"), sorted(counts.items())))
    ok = report.ok_records()
    if ok:
        best = report.sorted_records()[0]
        worst = report.sorted_records(descending=False)[0]
        print(f"baseline {cfg.metric}={report.baseline_report.values()[cfg.metric]:.6f}; "
              f"most influential {kind} {best.entity_id} ({best.influence:+.6f}); "
              f"least influential {kind} {worst.entity_id} ({worst.influence:+.6f})")
    return report


def plot_csv(report: dg.InfluenceReport) -> str:
    """(index, entity_id, influence) rows in entity-id order, one per
    successful record: enough to redraw the per-entity influence bar plots."""
    rows = [(j, r.entity_id, repr(r.influence)) for j, r in enumerate(report.ok_records())]
    return _csv(("index", "entity_id", "influence"), rows)


def cmd_ablate(cfg: ExperimentConfig, out: Outputs, kind: str, direction: str, n: int,
               report_path=None):
    data = load(cfg.dataset_path, cfg.dataset_format)
    if n < 0:
        raise UsageError("n must be >= 0")
    if n == 0:
        entities = []
    else:
        path = Path(report_path) if report_path else out.root / f"influence_{kind}s.json"
        if not path.exists():
            raise FileNotFoundError(f"influence report not found: {path}")
        entities = dg.top_influencers(dg.InfluenceReport.from_json(path.read_text()), n,
                                      direction)
    ab = dg.ablate(data, cfg.model_spec(), kind, entities, cfg.settings(), cfg.seed, direction)
    stem = f"ablation_{kind}s_{direction}_{n}"
    out.write(f"{stem}.json", ab.to_json())
    out.write(f"{stem}.txt", ab.to_table())
    print(ab.to_table(), end="")
    return ab


def cmd_cost_estimate(cfg: ExperimentConfig, out: Outputs, kind: str):
    data = load(cfg.dataset_path, cfg.dataset_format)
    t_train = dg.time_one_retrain(data, cfg.model_spec(), cfg.settings(), cfg.seed)
    est = dg.estimate_cost(cfg.plan(kind), t_train, data=data)
    out.log(f"cost_estimate_{kind}s.json", json.dumps(est.to_dict(), indent=2) + "\n")
    print(f"{est.n_entities} {kind}s x {est.t_train:.2f}s / {est.workers} worker(s) "
          f"= {est.projected_seconds:.1f}s projected")
    return est


# --------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--dataset", help="dataset file (overrides config)")
    common.add_argument("--format", dest="dataset_format",
                        choices=["movielens", "amazon", "amazon-csv", "amazon-tsv"])
    common.add_argument("--model", dest="model_kind", choices=["ncf", "svd"])
    common.add_argument("--workers", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--output-dir")
    common.add_argument("--metric", choices=METRIC_NAMES)
    common.add_argument("--k", type=int)
    common.add_argument("--sample-size", type=int)
    common.add_argument("--epochs", type=int, help="NCF epochs (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="recinfluence", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("stats", parents=[common], help="dataset summary table")
    sub.add_parser("train-eval", parents=[common], help="train one model and evaluate it")
    sub.add_parser("influence-users", parents=[common], help="leave-one-user-out sweep")
    sub.add_parser("influence-items", parents=[common], help="leave-one-item-out sweep")
    ab = sub.add_parser("ablate", parents=[common], help="remove the top-n entities jointly")
    ab.add_argument("--kind", choices=["users", "items"], default="users")
    ab.add_argument("--direction", choices=["most", "least"], default="least")
    ab.add_argument("--n", type=int, default=10)
    ab.add_argument("--report", help="influence report JSON (default: from output dir)")
    ce = sub.add_parser("cost-estimate", parents=[common], help="project sweep wall time")
    ce.add_argument("--kind", choices=["users", "items"], default="users")
    return p


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    overrides = {name: getattr(args, name) for name in
                 ("dataset_format", "model_kind", "workers", "seed", "metric", "k",
                  "sample_size")
                 if getattr(args, name) is not None}
    if args.dataset is not None:
        overrides["dataset_path"] = args.dataset
    if args.output_dir is not None:
        overrides["output_dir"] = args.output_dir
    cfg = dataclasses.replace(cfg, **overrides)
    if args.epochs is not None:
        cfg.ncf = cfg.ncf.replace(epochs=args.epochs)
    cfg.check()
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        out = Outputs(cfg.output_dir)
        cmd = args.command
        if cmd == "stats":
            cmd_stats(cfg, out)
        elif cmd == "train-eval":
            cmd_train_eval(cfg, out)
        elif cmd in ("influence-users", "influence-items"):
            cmd_influence(cfg, out, dg.USER if cmd.endswith("users") else dg.ITEM)
        elif cmd == "ablate":
            cmd_ablate(cfg, out, _entity_kind(args.kind), args.direction, args.n, args.report)
        elif cmd == "cost-estimate":
            cmd_cost_estimate(cfg, out, _entity_kind(args.kind))
    except (MetricError, TrainingDiverged, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FileNotFoundError, UsageError, DataError, EntityNotFound, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
