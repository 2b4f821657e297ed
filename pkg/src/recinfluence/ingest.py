"""Interaction datasets: loading, validation, splitting, negative sampling and
deletion views.

Datasets are immutable column stores (numpy arrays) so they can be shared
between worker processes and deleted-from without copying more than needed.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

EXPLICIT = "explicit"
IMPLICIT = "implicit"

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


class DataError(ValueError):
    """Raised for malformed or inconsistent interaction data."""


class EntityNotFound(KeyError):
    """Raised when a user or item id is not present in a dataset."""


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    rating: float
    timestamp: int | None = None


class Dataset:
    """An ordered, immutable collection of interactions.

    Columns are exposed as read-only numpy arrays. ``timestamps`` uses -1 for
    missing values.
    """

    def __init__(self, users, items, ratings, timestamps=None, *, kind=EXPLICIT,
                 rating_scale=(1.0, 5.0), validate=True):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        ratings = np.asarray(ratings, dtype=np.float64)
        if timestamps is None:
            timestamps = np.full(len(users), -1, dtype=np.int64)
        timestamps = np.asarray(timestamps, dtype=np.int64)
        if not (len(users) == len(items) == len(ratings) == len(timestamps)):
            raise DataError("column lengths differ")
        if kind not in (EXPLICIT, IMPLICIT):
            raise DataError(f"unknown dataset kind {kind!r}")
        for arr in (users, items, ratings, timestamps):
            arr.setflags(write=False)
        self.users = users
        self.items = items
        self.ratings = ratings
        self.timestamps = timestamps
        self.kind = kind
        self.rating_scale = (float(rating_scale[0]), float(rating_scale[1]))
        self._user_index = None
        self._item_index = None
        if validate:
            self._validate()

    def _validate(self):
        if len(self) == 0:
            return
        if not np.all(np.isfinite(self.ratings)):
            raise DataError("ratings must be finite")
        if self.users.min() < 0 or self.items.min() < 0:
            raise DataError("user and item ids must be non-negative")
        if self.kind == EXPLICIT:
            lo, hi = self.rating_scale
            if self.ratings.min() < lo or self.ratings.max() > hi:
                raise DataError(f"ratings outside scale [{lo}, {hi}]")
        elif not np.all((self.ratings == 0.0) | (self.ratings == 1.0)):
            raise DataError("implicit ratings must be 0.0 or 1.0")
        keys = pair_keys(self.users, self.items)
        _, counts = np.unique(keys, return_counts=True)
        if np.any(counts > 1):
            raw = keys[np.isin(keys, np.unique(keys)[counts > 1])][0]
            raise DataError(f"duplicate (user, item) pair {divmod(int(raw), 1 << 32)}")

    def __len__(self):
        return len(self.users)

    def __iter__(self) -> Iterator[Interaction]:
        for u, i, r, t in zip(self.users, self.items, self.ratings, self.timestamps):
            yield Interaction(int(u), int(i), float(r), None if t < 0 else int(t))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.kind == other.kind and self.rating_scale == other.rating_scale
                and np.array_equal(self.users, other.users)
                and np.array_equal(self.items, other.items)
                and np.array_equal(self.ratings, other.ratings)
                and np.array_equal(self.timestamps, other.timestamps))

    def __repr__(self):
        return f"Dataset(kind={self.kind!r}, n={len(self)})"

    @property
    def interactions(self) -> list[Interaction]:
        return list(self)

    @property
    def user_index(self) -> dict[int, np.ndarray]:
        """user_id -> positions of that user's interactions (ascending)."""
        if self._user_index is None:
            self._user_index = _group_positions(self.users)
        return self._user_index

    @property
    def item_index(self) -> dict[int, np.ndarray]:
        if self._item_index is None:
            self._item_index = _group_positions(self.items)
        return self._item_index

    @property
    def user_ids(self) -> np.ndarray:
        return np.unique(self.users)

    @property
    def item_ids(self) -> np.ndarray:
        return np.unique(self.items)

    def subset(self, mask_or_positions) -> "Dataset":
        """New dataset holding the selected rows, order preserved."""
        sel = np.asarray(mask_or_positions)
        if sel.dtype != bool:
            sel = np.sort(sel)
        return Dataset(self.users[sel], self.items[sel], self.ratings[sel],
                       self.timestamps[sel], kind=self.kind,
                       rating_scale=self.rating_scale, validate=False)

    def positives(self) -> "Dataset":
        return self.subset(self.ratings > 0)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.kind}|{self.rating_scale}".encode())
        for arr in (self.users, self.items, self.ratings, self.timestamps):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def _group_positions(ids: np.ndarray) -> dict[int, np.ndarray]:
    order = np.argsort(ids, kind="stable")
    uniq, starts = np.unique(ids[order], return_index=True)
    bounds = np.append(starts, len(ids))
    return {int(u): order[bounds[j]:bounds[j + 1]] for j, u in enumerate(uniq)}


def pair_keys(users, items) -> np.ndarray:
    """Pack (user, item) pairs into one int64 key. Ids must fit in 31 bits."""
    return (np.asarray(users, dtype=np.int64) << 32) | np.asarray(items, dtype=np.int64)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64)
    with np.errstate(over="ignore"):
        x = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
        x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
        x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
    return x ^ (x >> np.uint64(31))


def hash_keys(seed: int, *columns) -> np.ndarray:
    """Seeded pseudo-random uint64 per row, a function of (seed, row values)
    only. Columns must hold non-negative integers below 2**32."""
    h = _splitmix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
    for col in columns:
        h = _splitmix64(h ^ np.asarray(col).astype(np.uint64))
    return h


def interaction_keys(data: Dataset, seed: int) -> np.ndarray:
    """Seeded key per interaction, a function of (seed, user, item) only.
    Removing rows leaves the other keys untouched."""
    return hash_keys(seed, data.users, data.items)


# ---------------------------------------------------------------- loaders

def _read_lines(path) -> list[str]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such dataset file: {path}")
    with open(path, encoding="utf-8", errors="replace") as fh:
        return fh.read().splitlines()


def load_movielens(path) -> Dataset:
    """Read a MovieLens ``u.data`` style file (user, item, rating, timestamp,
    tab separated)."""
    rows = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"line {lineno}: expected 4 tab-separated fields, got {len(parts)}")
        try:
            rows.append([int(p) for p in parts])
        except ValueError:
            raise DataError(f"line {lineno}: non-integer field in {line!r}") from None
    if not rows:
        raise DataError("no interactions")
    arr = np.array(rows, dtype=np.int64)
    return Dataset(arr[:, 0], arr[:, 1], arr[:, 2].astype(np.float64), arr[:, 3],
                   kind=EXPLICIT, rating_scale=(1.0, 5.0))


def load_amazon(path, sep: str | None = None) -> Dataset:
    """Read (user, item[, rating, timestamp]) records as implicit feedback.

    ``sep`` is "," or "\\t"; by default it is sniffed from the first record.
    Every record becomes a positive with rating 1.0; any rating column is
    ignored. Non-integer ids (e.g. ASINs) are mapped to integers in order of
    first appearance, one table for users and one for items.
    """
    lines = [ln for ln in _read_lines(path) if ln.strip()]
    if not lines:
        raise DataError("no interactions")
    if sep is None:
        sep = "\t" if "\t" in lines[0] else ","
    user_codes: dict[str, int] = {}
    item_codes: dict[str, int] = {}
    users, items, stamps = [], [], []
    numeric = True
    parsed = []
    for lineno, line in enumerate(lines, start=1):
        parts = [p.strip() for p in line.split(sep)]
        if len(parts) < 2 or not parts[0] or not parts[1]:
            raise DataError(f"line {lineno}: expected at least user{sep}item")
        parsed.append(parts)
        if numeric and not (parts[0].isdigit() and parts[1].isdigit()):
            numeric = False
    for lineno, parts in enumerate(parsed, start=1):
        if numeric:
            u, i = int(parts[0]), int(parts[1])
        else:
            u = user_codes.setdefault(parts[0], len(user_codes))
            i = item_codes.setdefault(parts[1], len(item_codes))
        users.append(u)
        items.append(i)
        ts = -1
        if len(parts) >= 4:
            try:
                ts = int(float(parts[3]))
            except ValueError:
                raise DataError(f"line {lineno}: bad timestamp {parts[3]!r}") from None
        stamps.append(ts)
    return Dataset(users, items, np.ones(len(users)), stamps, kind=IMPLICIT,
                   rating_scale=(0.0, 1.0))


def load(path, fmt: str = "movielens") -> Dataset:
    if fmt == "movielens":
        return load_movielens(path)
    if fmt in ("amazon", "amazon-csv", "amazon-tsv"):
        sep = {"amazon-csv": ",", "amazon-tsv": "\t"}.get(fmt)
        return load_amazon(path, sep=sep)
    raise DataError(f"unknown dataset format {fmt!r}")


# ------------------------------------------------------- transformations

def sample_negatives(users, items, catalogue, ratio: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """For each user (ascending id), draw up to ``ratio`` x #positives items
    uniformly without replacement from ``catalogue`` minus that user's items.

    Each user's draw uses its own generator seeded by (seed, user_id), so
    removing one user leaves every other user's negatives unchanged.
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    catalogue = np.unique(np.asarray(catalogue, dtype=np.int64))
    neg_users, neg_items = [], []
    for u, positions in sorted(_group_positions(users).items()):
        pool = np.setdiff1d(catalogue, items[positions], assume_unique=False)
        want = min(ratio * len(positions), len(pool))
        if want == 0:
            continue
        if want == len(pool):
            chosen = pool
        else:
            rng = np.random.default_rng([seed & 0xFFFFFFFF, seed >> 32, u])
            chosen = np.sort(rng.choice(pool, size=want, replace=False))
        neg_users.append(np.full(want, u, dtype=np.int64))
        neg_items.append(chosen)
    if not neg_users:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    return np.concatenate(neg_users), np.concatenate(neg_items)


def negative_sample(data: Dataset, ratio: int = 4, seed: int = 0, catalogue=None) -> Dataset:
    """Append ``ratio`` unobserved (user, item) pairs per positive, rating 0.0.

    Items are drawn uniformly without replacement from each user's unobserved
    pool over ``catalogue`` (default: the items of ``data``). A user whose
    pool is too small gets the whole pool. Any existing negatives are dropped
    first; new ones follow the positives, grouped by ascending user id.
    """
    if data.kind != IMPLICIT:
        raise DataError("negative sampling requires an implicit dataset")
    if ratio < 1:
        raise DataError("ratio must be a positive integer")
    pos = data.positives()
    if catalogue is None:
        catalogue = pos.item_ids
    nu, ni = sample_negatives(pos.users, pos.items, catalogue, ratio, seed)
    return Dataset(np.concatenate([pos.users, nu]), np.concatenate([pos.items, ni]),
                   np.concatenate([pos.ratings, np.zeros(len(nu))]),
                   np.concatenate([pos.timestamps, np.full(len(nu), -1)]),
                   kind=IMPLICIT, rating_scale=data.rating_scale, validate=False)


@dataclass(frozen=True)
class SplitDataset:
    train: Dataset
    test: Dataset
    split_seed: int
    train_fraction: float

    @property
    def full(self) -> Dataset:
        return concat(self.train, self.test)


def concat(a: Dataset, b: Dataset) -> Dataset:
    return Dataset(np.concatenate([a.users, b.users]), np.concatenate([a.items, b.items]),
                   np.concatenate([a.ratings, b.ratings]),
                   np.concatenate([a.timestamps, b.timestamps]),
                   kind=a.kind, rating_scale=a.rating_scale, validate=False)


def split(data: Dataset, train_fraction: float = 0.75, seed: int = 0,
          stratify: bool = False) -> SplitDataset:
    """Seeded uniform random train/test partition of the interactions.

    Each interaction gets a key hashed from (seed, user, item); the
    ``round(train_fraction * n)`` smallest keys go to train. Because keys do
    not depend on the other rows, deleting a user or item moves at most a
    handful of the remaining interactions across the boundary. With
    ``stratify`` the same rule is applied within each user.
    """
    if not 0.0 < train_fraction < 1.0:
        raise DataError("train_fraction must lie in (0, 1)")
    n = len(data)
    if n < 2:
        raise DataError("need at least 2 interactions to split")
    keys = interaction_keys(data, seed)
    in_train = np.zeros(n, dtype=bool)
    if stratify:
        for positions in data.user_index.values():
            k = int(round(train_fraction * len(positions)))
            order = positions[np.argsort(keys[positions], kind="stable")]
            in_train[order[:k]] = True
    else:
        n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
        order = np.argsort(keys, kind="stable")
        in_train[order[:n_train]] = True
    return SplitDataset(data.subset(in_train), data.subset(~in_train), seed, train_fraction)


def delete_user(data: Dataset, user_id: int) -> Dataset:
    if int(user_id) not in data.user_index:
        raise EntityNotFound(f"user {user_id} not in dataset")
    return data.subset(data.users != user_id)


def delete_item(data: Dataset, item_id: int) -> Dataset:
    if int(item_id) not in data.item_index:
        raise EntityNotFound(f"item {item_id} not in dataset")
    return data.subset(data.items != item_id)


def delete_entities(data: Dataset, kind: str, ids) -> Dataset:
    """Remove every listed user (kind="user") or item (kind="item") at once."""
    ids = np.asarray(sorted(set(int(x) for x in ids)), dtype=np.int64)
    index = data.user_index if kind == "user" else data.item_index
    missing = [int(x) for x in ids if int(x) not in index]
    if missing:
        raise EntityNotFound(f"{kind} ids not in dataset: {missing[:5]}")
    col = data.users if kind == "user" else data.items
    return data.subset(~np.isin(col, ids))


# ----------------------------------------------------------------- stats

@dataclass(frozen=True)
class DatasetStats:
    n_ratings: int
    n_items: int
    n_users: int
    density: float
    avg_ratings_per_item: float
    avg_ratings_per_user: float
    min_ratings_per_item: int
    min_ratings_per_user: int
    max_ratings_per_item: int
    max_ratings_per_user: int
    avg_rating: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    def to_table(self, title: str = "Dataset") -> str:
        rows = [
            ("# Ratings", f"{self.n_ratings:,}"),
            ("# Items", f"{self.n_items:,}"),
            ("# Users", f"{self.n_users:,}"),
            ("Density", _fmt_density(self.density)),
            ("Average # ratings/item", f"{self.avg_ratings_per_item:.2f}"),
            ("Average # ratings/user", f"{self.avg_ratings_per_user:.2f}"),
            ("Min # ratings/item", str(self.min_ratings_per_item)),
            ("Min # ratings/user", str(self.min_ratings_per_user)),
            ("Max # ratings/item", str(self.max_ratings_per_item)),
            ("Max # ratings/user", str(self.max_ratings_per_user)),
        ]
        if self.avg_rating is not None:
            rows.append(("Average rating", f"{self.avg_rating:.2f}"))
        return _text_table(("Metric", title), rows)


def _fmt_density(d: float) -> str:
    return f"{d:.3f}" if d >= 1e-3 else f"{d:.2e}"


def _text_table(header, rows) -> str:
    w0 = max(len(header[0]), *(len(r[0]) for r in rows))
    w1 = max(len(header[1]), *(len(r[1]) for r in rows))
    lines = [f"{header[0]:<{w0}} | {header[1]:>{w1}}", "-" * (w0 + w1 + 3)]
    lines += [f"{a:<{w0}} | {b:>{w1}}" for a, b in rows]
    return "\n".join(lines) + "\n"


def stats(data: Dataset) -> DatasetStats:
    """Summary counts and averages. For implicit data only positives are counted."""
    if data.kind == IMPLICIT:
        data = data.positives()
    if len(data) == 0:
        raise DataError("no interactions")
    per_user = np.bincount(np.unique(data.users, return_inverse=True)[1])
    per_item = np.bincount(np.unique(data.items, return_inverse=True)[1])
    n = len(data)
    return DatasetStats(
        n_ratings=n,
        n_items=len(per_item),
        n_users=len(per_user),
        density=n / (len(per_user) * len(per_item)),
        avg_ratings_per_item=n / len(per_item),
        avg_ratings_per_user=n / len(per_user),
        min_ratings_per_item=int(per_item.min()),
        min_ratings_per_user=int(per_user.min()),
        max_ratings_per_item=int(per_item.max()),
        max_ratings_per_user=int(per_user.max()),
        avg_rating=float(data.ratings.mean()) if data.kind == EXPLICIT else None,
    )


def ratings_per_entity(data: Dataset, kind: str) -> dict[int, int]:
    col = data.positives().users if kind == "user" else data.positives().items
    ids, counts = np.unique(col, return_counts=True)
    return dict(zip(ids.tolist(), counts.tolist()))
