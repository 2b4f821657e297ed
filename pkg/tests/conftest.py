import os
from pathlib import Path

import numpy as np
import pytest

from recinfluence.ingest import EXPLICIT, IMPLICIT, Dataset

ROOT = Path(__file__).resolve().parents[1]


def movielens_path() -> Path:
    return Path(os.environ.get("MOVIELENS_PATH", ROOT / "data" / "ml-100k" / "u.data"))


def amazon_path() -> Path | None:
    p = os.environ.get("AMAZON_PATH")
    return Path(p) if p else None


def toy_explicit(n_users=6, n_items=8, density=0.6, seed=0) -> Dataset:
    """Small explicit dataset where every user and item has at least two
    ratings, so deleting any single entity still leaves a splittable set."""
    rng = np.random.default_rng(seed)
    mask = rng.random((n_users, n_items)) < density
    for u in range(n_users):
        mask[u, rng.choice(n_items, 2, replace=False)] = True
    for i in range(n_items):
        if mask[:, i].sum() < 2:
            mask[rng.choice(n_users, 2, replace=False), i] = True
    users, items = np.nonzero(mask)
    ratings = rng.integers(1, 6, size=len(users)).astype(float)
    return Dataset(users + 1, items + 1, ratings, kind=EXPLICIT, rating_scale=(1, 5))


def toy_implicit(n_users=6, n_items=8, density=0.4, seed=0) -> Dataset:
    d = toy_explicit(n_users, n_items, density, seed)
    return Dataset(d.users, d.items, np.ones(len(d)), kind=IMPLICIT, rating_scale=(0, 1))


@pytest.fixture
def toy():
    return toy_explicit()


@pytest.fixture(scope="session")
def movielens():
    path = movielens_path()
    if not path.exists():
        pytest.skip(f"MovieLens 100K not found at {path}; run scripts/fetch_movielens.py "
                    "or set MOVIELENS_PATH")
    from recinfluence.ingest import load_movielens
    return load_movielens(path)


# ---- acceptance reporting: one PASS/FAIL/SKIP line per criterion, echoed
# immediately and repeated in the terminal summary.

ACCEPTANCE_LINES: list[str] = []


class AcceptanceRecorder:
    def __init__(self, capsys):
        self.capsys = capsys

    def _emit(self, line):
        ACCEPTANCE_LINES.append(line)
        with self.capsys.disabled():
            print("\n" + line)

    def record(self, name: str, ok: bool, detail: str = "") -> bool:
        self._emit(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        return ok

    def skip(self, name: str, reason: str):
        self._emit(f"SKIP  {name}: {reason}")
        pytest.skip(reason)


@pytest.fixture
def acceptance(capsys):
    return AcceptanceRecorder(capsys)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
