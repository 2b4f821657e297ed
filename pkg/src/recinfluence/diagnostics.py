"""Deletion diagnostics: leave-one-user/item-out retraining sweeps, influence
ranking, top-N removal ablations and a retraining cost model.

The influence of entity e on metric M is ``M(full) - M(without e)``, where
the "without" model is retrained from scratch on the data with every row of
e removed and re-split with the same split seed.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import ncf as ncf_mod
from .ingest import (IMPLICIT, DataError, Dataset, delete_entities, negative_sample,
                     split)
from .metrics import (DISPLAY_NAMES, LOWER_IS_BETTER, METRIC_NAMES, MetricError,
                      MetricReport, evaluate, percent_change)
from .svd import fit_svd_recommender

log = logging.getLogger(__name__)

USER = "user"
ITEM = "item"
_KIND_CODE = {USER: 1, ITEM: 2}

OK = "ok"
SKIPPED = "skipped_not_in_train"
FAILED = "failed"


@dataclass(frozen=True)
class SvdConfig:
    k: int = 10
    fill: str = "user_mean"

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ModelSpec:
    """Which recommender to train and how."""
    kind: str = "ncf"                       # "ncf" | "svd"
    ncf: ncf_mod.NcfConfig = field(default_factory=ncf_mod.NcfConfig)
    svd: SvdConfig = field(default_factory=SvdConfig)

    def __post_init__(self):
        if self.kind not in ("ncf", "svd"):
            raise ValueError(f"unknown model kind {self.kind!r}")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        d["config"] = self.ncf.to_dict() if self.kind == "ncf" else self.svd.to_dict()
        return d


@dataclass(frozen=True)
class EvalSettings:
    """Everything about a run other than the model: split, K, relevance."""
    train_fraction: float = 0.75
    split_seed: int = 0
    k: int = 10
    relevance_threshold: float | None = None
    stratify: bool = False
    negative_ratio: int = 4

    def to_dict(self):
        return asdict(self)


def derive_seed(master_seed: int, entity_kind: str, entity_id: int) -> int:
    """Per-entity retraining seed; depends only on its three arguments."""
    ss = np.random.SeedSequence([int(master_seed), _KIND_CODE[entity_kind], int(entity_id)])
    hi, lo = ss.generate_state(2, dtype=np.uint32)
    return int((int(hi) << 31) ^ int(lo))


# ------------------------------------------------------------- pipeline

def fit_model(train: Dataset, spec: ModelSpec, seed: int, user_ids=None, item_ids=None):
    if spec.kind == "ncf":
        return ncf_mod.train(train, spec.ncf.replace(seed=seed), user_ids, item_ids)
    return fit_svd_recommender(train, spec.svd.k, spec.svd.fill, user_ids, item_ids, seed=seed)


def prepare_split(data: Dataset, settings: EvalSettings, seed: int):
    """Split ``data``; implicit data first gets seeded negatives so the test
    side also holds zero-rated pairs."""
    if data.kind == IMPLICIT:
        data = negative_sample(data, settings.negative_ratio, seed)
    return split(data, settings.train_fraction, settings.split_seed, settings.stratify)


def run_pipeline(data: Dataset, spec: ModelSpec, settings: EvalSettings, seed: int,
                 return_model: bool = False):
    """split -> train -> evaluate. The model's user/item tables cover every id
    in ``data`` so test-only entities are scored from untrained embeddings."""
    sp = prepare_split(data, settings, seed)
    model = fit_model(sp.train, spec, seed, data.user_ids, data.item_ids)
    report = evaluate(model, sp, settings.k, settings.relevance_threshold)
    if return_model:
        return report, model, sp
    return report


# ------------------------------------------------------------ sweep plan

@dataclass(frozen=True)
class SweepPlan:
    entity_kind: str = USER
    entities: tuple | None = None     # explicit ids; None = all
    sample_size: int | None = None    # uniform random subset of the candidates
    sample_seed: int = 0
    workers: int = 1
    master_seed: int = 0
    seed_mode: str = "per_entity"     # "per_entity" | "shared"

    def __post_init__(self):
        if self.entity_kind not in (USER, ITEM):
            raise ValueError(f"entity_kind must be {USER!r} or {ITEM!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.seed_mode not in ("per_entity", "shared"):
            raise ValueError(f"unknown seed mode {self.seed_mode!r}")
        if self.entities is not None:
            object.__setattr__(self, "entities", tuple(int(e) for e in self.entities))

    def resolve(self, data: Dataset) -> list[int]:
        ids = data.user_ids if self.entity_kind == USER else data.item_ids
        if self.entities is not None:
            present = set(ids.tolist())
            missing = [e for e in self.entities if e not in present]
            if missing:
                raise DataError(f"{self.entity_kind} ids not in dataset: {missing[:5]}")
            ids = np.array(sorted(set(self.entities)), dtype=np.int64)
        if self.sample_size is not None and self.sample_size < len(ids):
            rng = np.random.default_rng(self.sample_seed)
            ids = np.sort(rng.choice(ids, size=self.sample_size, replace=False))
        return [int(e) for e in ids]

    def seed_for(self, entity_id: int) -> int:
        if self.seed_mode == "shared":
            return self.master_seed
        return derive_seed(self.master_seed, self.entity_kind, entity_id)

    def to_dict(self):
        d = asdict(self)
        d["entities"] = list(self.entities) if self.entities is not None else None
        return d


# ----------------------------------------------------------------- records

@dataclass(frozen=True)
class InfluenceRecord:
    entity_id: int
    entity_kind: str
    baseline_eval: float
    deleted_eval: float
    influence: float
    metric_name: str
    retrain_seed: int
    status: str = OK
    message: str = ""


CSV_FIELDS = ("entity_id", "kind", "baseline", "deleted", "influence", "metric", "seed",
              "status", "message")


@dataclass
class InfluenceReport:
    records: list
    baseline_report: MetricReport
    model_kind: str
    config: dict
    dataset_fingerprint: str
    metric_name: str = "map"
    wall_times: dict = field(default_factory=dict)

    def ok_records(self) -> list[InfluenceRecord]:
        return [r for r in self.records if r.status == OK]

    def sorted_records(self, descending: bool = True) -> list[InfluenceRecord]:
        sign = -1.0 if descending else 1.0
        return sorted(self.ok_records(), key=lambda r: (sign * r.influence, r.entity_id))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.records:
            w.writerow([r.entity_id, r.entity_kind, repr(r.baseline_eval), repr(r.deleted_eval),
                        repr(r.influence), r.metric_name, r.retrain_seed, r.status, r.message])
        return buf.getvalue()

    def timing_csv(self) -> str:
        lines = ["entity_id,wall_time"]
        lines += [f"{e},{self.wall_times[e]!r}" for e in sorted(self.wall_times)]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "model_kind": self.model_kind,
            "metric": self.metric_name,
            "dataset_fingerprint": self.dataset_fingerprint,
            "config": self.config,
            "baseline": self.baseline_report.to_dict(),
            "records": [asdict(r) for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "InfluenceReport":
        d = json.loads(text)
        return cls([InfluenceRecord(**r) for r in d["records"]],
                   MetricReport.from_dict(d["baseline"]), d["model_kind"], d["config"],
                   d["dataset_fingerprint"], d["metric"])


def records_from_csv(text: str) -> list[InfluenceRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [InfluenceRecord(int(r["entity_id"]), r["kind"], float(r["baseline"]),
                            float(r["deleted"]), float(r["influence"]), r["metric"],
                            int(r["seed"]), r["status"], r["message"]) for r in rows]


# ------------------------------------------------------------------ sweep

# Shared read-only state for pool workers, installed once per process.
_WORKER_STATE: dict = {}


def _install_state(state):
    _WORKER_STATE.clear()
    _WORKER_STATE.update(state)


def _entity_task(entity_id: int):
    st = _WORKER_STATE
    plan: SweepPlan = st["plan"]
    seed = plan.seed_for(entity_id)
    t0 = time.perf_counter()
    with threadpool_limits(1):
        try:
            reduced = delete_entities(st["data"], plan.entity_kind, [entity_id])
            report = run_pipeline(reduced, st["spec"], st["settings"], seed)
            value = float(getattr(report, st["metric"]))
            status, message = OK, ""
        except (ncf_mod.TrainingDiverged, MetricError, DataError, FloatingPointError) as exc:
            value, status, message = math.nan, FAILED, f"{type(exc).__name__}: {exc}"
    return entity_id, seed, value, status, message, time.perf_counter() - t0


def _map_entities(entities, state, workers):
    if workers == 1 or len(entities) <= 1:
        _install_state(state)
        return [_entity_task(e) for e in entities]
    methods = multiprocessing.get_all_start_methods()
    ctx = multiprocessing.get_context("fork" if "fork" in methods else "spawn")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx,
                             initializer=_install_state, initargs=(state,)) as pool:
        return list(pool.map(_entity_task, entities))


def influence_sweep(data: Dataset, spec: ModelSpec, plan: SweepPlan,
                    settings: EvalSettings = EvalSettings(), metric: str = "map",
                    baseline: MetricReport | None = None) -> InfluenceReport:
    """Retrain once per entity in ``plan`` without that entity.

    The baseline run uses ``plan.master_seed``. Entities with no rows in the
    baseline training split are recorded as skipped; runs that diverge or
    cannot be evaluated are recorded as failed. Records come back sorted by
    entity id whatever the worker count.
    """
    if metric not in METRIC_NAMES:
        raise ValueError(f"unknown metric {metric!r}")
    entities = plan.resolve(data)
    with threadpool_limits(1):
        base_report, _, base_split = run_pipeline(data, spec, settings, plan.master_seed,
                                                  return_model=True)
    if baseline is not None and baseline != base_report:
        raise ValueError("supplied baseline does not match the recomputed baseline")
    base_value = float(getattr(base_report, metric))
    train_pos = base_split.train.positives()
    in_train = set((train_pos.users if plan.entity_kind == USER else train_pos.items).tolist())

    runnable = [e for e in entities if e in in_train]
    state = {"data": data, "spec": spec, "settings": settings, "plan": plan, "metric": metric}
    results = {r[0]: r for r in _map_entities(runnable, state, plan.workers)}

    records, times = [], {}
    for e in entities:
        if e not in results:
            records.append(InfluenceRecord(e, plan.entity_kind, base_value, math.nan, math.nan,
                                           metric, plan.seed_for(e), SKIPPED,
                                           "no interactions in the training split"))
            continue
        _, seed, value, status, message, wall = results[e]
        records.append(InfluenceRecord(e, plan.entity_kind, base_value, value,
                                       base_value - value, metric, seed, status, message))
        times[e] = wall
    return InfluenceReport(records, base_report, spec.kind,
                           {"model": spec.to_dict(), "settings": settings.to_dict(),
                            "plan": {k: v for k, v in plan.to_dict().items()
                                     if k != "workers"}},
                           data.fingerprint(), metric, times)


def influence_sweep_users(data, spec, plan, settings=EvalSettings(), metric="map"):
    return influence_sweep(data, spec, replace(plan, entity_kind=USER), settings, metric)


def influence_sweep_items(data, spec, plan, settings=EvalSettings(), metric="map"):
    return influence_sweep(data, spec, replace(plan, entity_kind=ITEM), settings, metric)


def top_influencers(report: InfluenceReport, n: int, direction: str = "most") -> list[int]:
    """Ids of the n largest ("most") or smallest ("least") influences among
    successful records; ties go to the smaller id."""
    if n <= 0:
        raise ValueError("n must be positive")
    if direction not in ("most", "least"):
        raise ValueError("direction must be 'most' or 'least'")
    ranked = report.sorted_records(descending=(direction == "most"))
    if n > len(ranked):
        raise ValueError(f"n={n} exceeds the {len(ranked)} usable records")
    return [r.entity_id for r in ranked[:n]]


# --------------------------------------------------------------- ablation

@dataclass
class AblationReport:
    removed_entities: list
    entity_kind: str
    direction: str
    before: MetricReport
    after: MetricReport

    @property
    def percent_delta(self) -> dict:
        b, a = self.before.values(), self.after.values()
        return {m: percent_change(a[m], b[m]) for m in METRIC_NAMES}

    def improved(self) -> dict:
        """metric -> True if it moved in its better direction."""
        b, a = self.before.values(), self.after.values()
        return {m: (a[m] < b[m]) if m in LOWER_IS_BETTER else (a[m] > b[m])
                for m in METRIC_NAMES}

    def to_dict(self) -> dict:
        return {"removed_entities": list(self.removed_entities), "entity_kind": self.entity_kind,
                "direction": self.direction, "before": self.before.to_dict(),
                "after": self.after.to_dict(), "percent_delta": self.percent_delta}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        head = ("Metric", f"Value wo. {self.direction} influential", "Original", "Difference")
        rows = []
        for m in METRIC_NAMES:
            pct = self.percent_delta[m]
            rows.append((DISPLAY_NAMES[m], f"{getattr(self.after, m):.6f}",
                         f"{getattr(self.before, m):.6f}",
                         "n/a" if pct is None else f"{pct:+.2f}%"))
        widths = [max(len(head[j]), *(len(r[j]) for r in rows)) for j in range(4)]
        fmt = " | ".join(f"{{:<{w}}}" for w in widths)
        lines = [fmt.format(*head), "-" * (sum(widths) + 9)]
        lines += [fmt.format(*r) for r in rows]
        return "\n".join(line.rstrip() for line in lines) + "\n"


def ablate(data: Dataset, spec: ModelSpec, entity_kind: str, entities,
           settings: EvalSettings = EvalSettings(), master_seed: int = 0,
           direction: str = "listed", baseline: MetricReport | None = None) -> AblationReport:
    """Remove all ``entities`` jointly, retrain once with the master seed and
    compare every metric with the baseline run."""
    entities = sorted(set(int(e) for e in entities))
    with threadpool_limits(1):
        before = baseline if baseline is not None else run_pipeline(
            data, spec, settings, master_seed)
        reduced = delete_entities(data, entity_kind, entities) if entities else data
        if len(reduced) == 0:
            raise DataError("removing these entities leaves no interactions")
        after = run_pipeline(reduced, spec, settings, master_seed)
    return AblationReport(entities, entity_kind, direction, before, after)


# ------------------------------------------------------------- cost model

@dataclass(frozen=True)
class CostEstimate:
    n_entities: int
    t_train: float
    workers: int
    projected_seconds: float

    def to_dict(self):
        return asdict(self)


def estimate_cost(plan_or_count, measured_t_train: float, workers: int | None = None,
                  data: Dataset | None = None) -> CostEstimate:
    """n_entities x t_train / workers: one full retrain per swept entity."""
    if isinstance(plan_or_count, SweepPlan):
        if data is None and plan_or_count.entities is None:
            raise ValueError("need the dataset to count entities for this plan")
        n = len(plan_or_count.resolve(data)) if data is not None else len(plan_or_count.entities)
        if plan_or_count.sample_size is not None:
            n = min(n, plan_or_count.sample_size)
        workers = workers or plan_or_count.workers
    else:
        n = int(plan_or_count)
        workers = workers or 1
    if measured_t_train <= 0:
        raise ValueError("measured_t_train must be positive")
    return CostEstimate(n, float(measured_t_train), workers, n * measured_t_train / workers)


def time_one_retrain(data: Dataset, spec: ModelSpec, settings: EvalSettings,
                     seed: int = 0) -> float:
    """Wall time of one split -> train -> evaluate run."""
    t0 = time.perf_counter()
    with threadpool_limits(1):
        run_pipeline(data, spec, settings, seed)
    return time.perf_counter() - t0
