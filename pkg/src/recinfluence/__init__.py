"""Deletion diagnostics for collaborative-filtering recommenders.

Retrain a recommender without one user (or item) at a time, measure how the
evaluation metrics move, and rank entities by that influence.
"""
from .diagnostics import (AblationReport, EvalSettings, InfluenceRecord, InfluenceReport,
                          ModelSpec, SvdConfig, SweepPlan, ablate, estimate_cost,
                          influence_sweep, influence_sweep_items, influence_sweep_users,
                          run_pipeline, top_influencers)
from .ingest import (Dataset, SplitDataset, delete_entities, delete_item, delete_user, load,
                     load_amazon, load_movielens, negative_sample, split, stats)
from .metrics import MetricReport, evaluate
from .ncf import NcfConfig, NcfModel
from .ncf import train as train_ncf
from .svd import SvdRecommender, compact_svd, fit_svd_recommender, truncated_svd

__version__ = "0.1.0"
