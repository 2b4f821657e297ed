"""Independent, deliberately naive reference implementations used as test
oracles. Nothing here imports the code under test beyond data containers."""
import math

import numpy as np


class ScoreTable:
    """A 'model' that looks scores up in a dict-like table."""

    trained = True

    def __init__(self, scores: dict, default=0.0):
        self.scores = scores
        self.default = default

    def score_matrix(self, user_ids, item_ids):
        return np.array([[self.scores.get((int(u), int(i)), self.default) for i in item_ids]
                         for u in user_ids], dtype=float)

    def predict(self, user_ids, item_ids):
        return np.array([self.scores.get((int(u), int(i)), self.default)
                         for u, i in zip(user_ids, item_ids)], dtype=float)


def brute_force_evaluate(scores: dict, train_rows, test_rows, k, default=0.0,
                         threshold=None) -> dict:
    """train_rows / test_rows: lists of (user, item, rating)."""
    catalogue = sorted({i for _, i, _ in train_rows} | {i for _, i, _ in test_rows})
    seen = {}
    for u, i, r in train_rows:
        if r > 0:
            seen.setdefault(u, set()).add(i)
    relevant = {}
    for u, i, r in test_rows:
        if r > 0 and (threshold is None or r >= threshold):
            relevant.setdefault(u, {})[i] = r
    ap_all, ap_k, ndcgs, precs, recs = [], [], [], [], []
    for u in sorted(relevant):
        rel = relevant[u]
        cands = [i for i in catalogue if i not in seen.get(u, set())]
        ranked = sorted(cands, key=lambda i: (-scores.get((u, i), default), i))
        hits, total, total_k = 0, 0.0, 0.0
        for pos, item in enumerate(ranked, start=1):
            if item in rel:
                hits += 1
                total += hits / pos
                if pos <= k:
                    total_k += hits / pos
        ap_all.append(total / len(rel))
        ap_k.append(total_k / min(len(rel), k))
        dcg = sum(rel.get(item, 0.0) / math.log2(pos + 1)
                  for pos, item in enumerate(ranked[:k], start=1))
        ideal = sorted(rel.values(), reverse=True)[:k]
        idcg = sum(g / math.log2(pos + 1) for pos, g in enumerate(ideal, start=1))
        ndcgs.append(dcg / idcg)
        top = sum(1 for item in ranked[:k] if item in rel)
        precs.append(top / k)
        recs.append(top / len(rel))
    preds = [scores.get((u, i), default) for u, i, _ in test_rows]
    actual = [r for _, _, r in test_rows]
    n = len(actual)
    mean_a = sum(actual) / n
    var_a = sum((a - mean_a) ** 2 for a in actual) / n
    resid = [a - p for a, p in zip(actual, preds)]
    mean_r = sum(resid) / n
    var_r = sum((x - mean_r) ** 2 for x in resid) / n
    m = len(ap_all)
    return {
        "map": sum(ap_all) / m,
        "map_at_k": sum(ap_k) / m,
        "ndcg": sum(ndcgs) / m,
        "precision_at_k": sum(precs) / m,
        "recall_at_k": sum(recs) / m,
        "explained_variance": 1 - var_r / var_a if var_a > 0 else float("nan"),
        "mae": sum(abs(x) for x in resid) / n,
    }


def random_instance(rng, max_users=10, max_items=10, implicit=False, tie_prob=0.3):
    """Random train/test rows plus a score table with deliberate ties."""
    n_users = int(rng.integers(2, max_users + 1))
    n_items = int(rng.integers(3, max_items + 1))
    cells = [(u, i) for u in range(n_users) for i in range(n_items)
             if rng.random() < 0.6]
    if len(cells) < 4:
        cells = [(u, i) for u in range(n_users) for i in range(n_items)][:4]
    rows = []
    for u, i in cells:
        r = float(rng.integers(0, 2)) if implicit else float(rng.integers(1, 6))
        rows.append((u, i, r))
    order = rng.permutation(len(rows))
    cut = max(1, int(0.7 * len(rows)))
    train = [rows[j] for j in order[:cut]]
    test = [rows[j] for j in order[cut:]]
    if not any(r > 0 for _, _, r in test):
        u, i, _ = test[0]
        test[0] = (u, i, 1.0)
    levels = rng.normal(size=4)
    scores = {}
    for u in range(n_users):
        for i in range(n_items):
            scores[(u, i)] = float(levels[rng.integers(4)] if rng.random() < tie_prob
                                   else rng.normal() * 2 + 3)
    k = int(rng.integers(1, n_items + 2))
    return train, test, scores, k


def finite_difference_gradient(loss_fn, tensors, eps=1e-6):
    """Central differences of ``loss_fn()`` w.r.t. every entry of every array
    in ``tensors`` (modified in place and restored)."""
    out = []
    for t in tensors:
        g = np.zeros(t.shape)
        flat, gflat = t.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + eps
            up = loss_fn()
            flat[j] = old - eps
            down = loss_fn()
            flat[j] = old
            gflat[j] = (up - down) / (2 * eps)
        out.append(g)
    return out


def relative_error(a, b):
    a, b = np.concatenate([x.ravel() for x in a]), np.concatenate([x.ravel() for x in b])
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-300))


def loo_oracle(data, kind, entity_ids, fit, k, train_fraction, split_seed, base_seed,
               seed_for):
    """Influence by the definition: drop every row of the entity, re-split,
    retrain from scratch, evaluate MAP, subtract. ``fit(train, universe,
    seed)`` returns a trained model. Returns (baseline, {entity: deleted})."""
    from recinfluence.ingest import Dataset, split
    from recinfluence.metrics import evaluate

    def run(d, seed):
        sp = split(d, train_fraction, split_seed)
        return evaluate(fit(sp.train, d, seed), sp, k).map

    col = data.users if kind == "user" else data.items
    out = {}
    for e in entity_ids:
        keep = col != e
        reduced = Dataset(data.users[keep], data.items[keep], data.ratings[keep],
                          data.timestamps[keep], kind=data.kind,
                          rating_scale=data.rating_scale)
        out[e] = run(reduced, seed_for(e))
    return run(data, base_seed), out
