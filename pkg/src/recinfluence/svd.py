"""Singular value decomposition and an SVD latent-factor recommender.

``compact_svd`` is a one-sided (Hestenes) Jacobi SVD. Rotations are applied
to disjoint column pairs in round-robin order so that each step is a single
vectorised update. The recommender only needs the leading factors of a
users x items matrix, so it uses block subspace iteration with a Jacobi
Rayleigh-Ritz step (``truncated_svd``).
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingest import EXPLICIT, DataError, Dataset

log = logging.getLogger(__name__)

FILL_POLICIES = ("user_mean", "global_mean", "zero", "binary")
# Policies whose matrix is factorised as-is (no per-user mean offset).
UNCENTRED = frozenset({"zero", "binary"})


class SvdError(ValueError):
    pass


@dataclass(frozen=True)
class SvdFactorization:
    u_factors: np.ndarray        # m x r, orthonormal columns
    singular_values: np.ndarray  # r, non-increasing, > 0
    v_factors: np.ndarray        # n x r, orthonormal columns

    @property
    def rank(self) -> int:
        return len(self.singular_values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.u_factors.shape[0], self.v_factors.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u_factors * self.singular_values) @ self.v_factors.T

    def to_json(self) -> str:
        m, n = self.shape
        return json.dumps({
            "rows": m, "cols": n, "rank": self.rank,
            "u_factors": self.u_factors.ravel().tolist(),
            "singular_values": self.singular_values.tolist(),
            "v_factors": self.v_factors.ravel().tolist(),
        }) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SvdFactorization":
        d = json.loads(text)
        m, n, r = d["rows"], d["cols"], d["rank"]
        return cls(np.array(d["u_factors"], dtype=np.float64).reshape(m, r),
                   np.array(d["singular_values"], dtype=np.float64),
                   np.array(d["v_factors"], dtype=np.float64).reshape(n, r))


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 rounds (n even) of n/2 disjoint pairs that
    together cover every pair once."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        p, q = [], []
        for j in range(size // 2):
            a, b = players[j], players[size - 1 - j]
            if a >= 0 and b >= 0:
                p.append(min(a, b))
                q.append(max(a, b))
        rounds.append((np.array(p, dtype=np.intp), np.array(q, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi(a: np.ndarray, tol: float, max_sweeps: int):
    """One-sided Jacobi on the columns of ``a`` (m x n, m >= n).

    Returns (W, V) with W = A V having mutually orthogonal columns.
    """
    w = a.copy()
    n = w.shape[1]
    v = np.eye(n)
    if n < 2:
        return w, v
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        off = 0.0
        for p, q in rounds:
            wp, wq = w[:, p], w[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            scale = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = np.where(scale > 0, np.abs(gamma) / scale, 0.0)
            active = rel > tol
            if not np.any(active):
                continue
            off = max(off, float(rel.max()))
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[zeta == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            wp, wq = w[:, p], w[:, q]
            w[:, p] = c * wp - s * wq
            w[:, q] = s * wp + c * wq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if off <= tol:
            break
    else:
        warnings.warn("Jacobi SVD did not converge", RuntimeWarning, stacklevel=3)
    return w, v


def compact_svd(matrix, tol: float = 1e-15, rank_tol: float | None = None,
                max_sweeps: int = 60) -> SvdFactorization:
    """Economy SVD keeping only the non-zero singular values.

    Singular values below ``rank_tol`` (default: max(m, n) * eps * sigma_1)
    are treated as zero and dropped.
    """
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2:
        raise SvdError("expected a 2-d matrix")
    if not np.all(np.isfinite(a)):
        raise SvdError("matrix has non-finite entries")
    m, n = a.shape
    if m == 0 or n == 0:
        raise SvdError("empty matrix")
    transposed = m < n
    if transposed:
        a = a.T
        m, n = n, m
    # A QR pre-step shrinks the Jacobi work to an n x n triangle.
    if m > n:
        q_mat, r_mat = np.linalg.qr(a)
    else:
        q_mat, r_mat = None, a
    w, v = _jacobi(r_mat, tol, max_sweeps)
    sigma = np.linalg.norm(w, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, w, v = sigma[order], w[:, order], v[:, order]
    if rank_tol is None:
        rank_tol = max(m, n) * np.finfo(np.float64).eps * (sigma[0] if len(sigma) else 0.0)
    keep = sigma > rank_tol
    sigma, w, v = sigma[keep], w[:, keep], v[:, keep]
    u = w / sigma
    if q_mat is not None:
        u = q_mat @ u
    u, v = _fix_signs(u, v)
    if transposed:
        u, v = v, u
    return SvdFactorization(u, sigma, v)


def _fix_signs(u: np.ndarray, v: np.ndarray):
    """Make the largest-magnitude entry of each left vector positive."""
    if u.shape[1] == 0:
        return u, v
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, v * signs


def truncate(f: SvdFactorization, k: int) -> SvdFactorization:
    if not 1 <= k <= f.rank:
        raise SvdError(f"k must lie in [1, {f.rank}]")
    return SvdFactorization(f.u_factors[:, :k], f.singular_values[:k], f.v_factors[:, :k])


def rank_k_approximation(f: SvdFactorization, k: int) -> np.ndarray:
    """Sum of the k leading rank-one terms sigma_i u_i v_i^T."""
    return truncate(f, k).reconstruct()


def frobenius_tail(f: SvdFactorization, k: int) -> float:
    """sqrt(sum_{i>k} sigma_i^2): the rank-k approximation error."""
    return float(np.sqrt(np.sum(f.singular_values[k:] ** 2)))


def pseudoinverse(f: SvdFactorization) -> np.ndarray:
    return (f.v_factors / f.singular_values) @ f.u_factors.T


def truncated_svd(matrix, k: int, oversample: int = 10, tol: float = 1e-10,
                  max_iter: int = 500, seed: int = 0) -> SvdFactorization:
    """Leading-k SVD by block subspace iteration.

    Iterates Y = A (A^T Q) on an orthonormal block of k + oversample columns
    and extracts Ritz values with ``compact_svd`` of the projected matrix.
    Stops once every leading residual ||A v_i - sigma_i u_i|| falls below
    ``tol * sigma_1``.
    """
    a = np.asarray(matrix, dtype=np.float64)
    m, n = a.shape
    if not np.all(np.isfinite(a)):
        raise SvdError("matrix has non-finite entries")
    block = min(k + oversample, m, n)
    if block <= k or min(m, n) <= 2 * block:
        f = compact_svd(a)
        return truncate(f, min(k, f.rank))
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(a @ rng.standard_normal((n, block)))
    f = None
    for _ in range(max_iter):
        z, _ = np.linalg.qr(a.T @ q)
        q, _ = np.linalg.qr(a @ z)
        small = compact_svd(q.T @ a)
        kk = min(k, small.rank)
        u = q @ small.u_factors[:, :kk]
        s = small.singular_values[:kk]
        v = small.v_factors[:, :kk]
        f = SvdFactorization(u, s, v)
        resid = np.linalg.norm(a @ v - u * s, axis=0)
        if kk == 0 or resid.max() <= tol * s[0]:
            break
    else:
        warnings.warn("truncated SVD did not reach tolerance", RuntimeWarning, stacklevel=2)
    u, v = _fix_signs(f.u_factors, f.v_factors)
    return SvdFactorization(u, f.singular_values, v)


class SvdRecommender:
    """Rank-k SVD of the mean-filled, row-centred rating matrix.

    Unknown users or items fall back to the global training mean; the
    fallback is counted in ``n_fallbacks``.
    """

    def __init__(self, factorization, user_means, global_mean, user_ids, item_ids,
                 k, fill="user_mean"):
        self.factorization = factorization
        self.user_means = np.asarray(user_means, dtype=np.float64)
        self.global_mean = float(global_mean)
        self.user_ids = np.asarray(user_ids, dtype=np.int64)
        self.item_ids = np.asarray(item_ids, dtype=np.int64)
        self.k = k
        self.fill = fill
        self.trained = True
        self.n_fallbacks = 0
        self._user_pos = {int(u): j for j, u in enumerate(self.user_ids)}
        self._item_pos = {int(i): j for j, i in enumerate(self.item_ids)}
        f = factorization
        self._user_vecs = f.u_factors * f.singular_values
        self._item_vecs = f.v_factors

    def _lookup(self, table, ids):
        idx = np.array([table.get(int(x), -1) for x in np.asarray(ids)], dtype=np.intp)
        return idx, idx >= 0

    def score_matrix(self, user_ids, item_ids) -> np.ndarray:
        ui, uok = self._lookup(self._user_pos, user_ids)
        ii, iok = self._lookup(self._item_pos, item_ids)
        out = np.full((len(ui), len(ii)), self.global_mean)
        if uok.any() and iok.any():
            block = (self._user_vecs[ui[uok]] @ self._item_vecs[ii[iok]].T
                     + self.user_means[ui[uok], None])
            out[np.ix_(uok, iok)] = block
        self.n_fallbacks += int((~uok).sum() * len(ii) + uok.sum() * (~iok).sum())
        return out

    def predict(self, user_ids, item_ids) -> np.ndarray:
        ui, uok = self._lookup(self._user_pos, user_ids)
        ii, iok = self._lookup(self._item_pos, item_ids)
        ok = uok & iok
        out = np.full(len(ui), self.global_mean)
        out[ok] = (np.einsum("ij,ij->i", self._user_vecs[ui[ok]], self._item_vecs[ii[ok]])
                   + self.user_means[ui[ok]])
        self.n_fallbacks += int((~ok).sum())
        return out

    def predict_one(self, user_id, item_id) -> float:
        return float(self.predict([user_id], [item_id])[0])


def rating_matrix(train: Dataset, user_ids, item_ids, fill: str = "user_mean"):
    """Dense users x items matrix with missing cells imputed.

    Returns (matrix, user_means, global_mean). Users without ratings get the
    global mean as their mean. ``binary`` puts 1 on every observed cell and 0
    elsewhere.
    """
    if fill not in FILL_POLICIES:
        raise SvdError(f"unknown fill policy {fill!r}")
    user_pos = {int(u): j for j, u in enumerate(user_ids)}
    item_pos = {int(i): j for j, i in enumerate(item_ids)}
    rows = np.array([user_pos[int(u)] for u in train.users], dtype=np.intp)
    cols = np.array([item_pos[int(i)] for i in train.items], dtype=np.intp)
    global_mean = float(train.ratings.mean())
    sums = np.bincount(rows, weights=train.ratings, minlength=len(user_ids))
    counts = np.bincount(rows, minlength=len(user_ids))
    user_means = np.where(counts > 0, sums / np.maximum(counts, 1), global_mean)
    if fill == "user_mean":
        mat = np.repeat(user_means[:, None], len(item_ids), axis=1)
    elif fill == "global_mean":
        mat = np.full((len(user_ids), len(item_ids)), global_mean)
    else:
        mat = np.zeros((len(user_ids), len(item_ids)))
    mat[rows, cols] = 1.0 if fill == "binary" else train.ratings
    return mat, user_means, global_mean


def fit_svd_recommender(train: Dataset, k: int = 10, fill: str = "user_mean",
                        user_ids=None, item_ids=None, seed: int = 0) -> SvdRecommender:
    """Factorise the imputed rating matrix at rank k.

    Mean fills (``user_mean``, ``global_mean``) subtract each user's mean
    before factorising and add it back when predicting. ``zero`` and
    ``binary`` factorise the filled matrix directly (PureSVD style); their
    cold-start fallback is the matrix mean. ``user_ids`` / ``item_ids`` fix
    the matrix rows and columns (e.g. the whole catalogue, so test-only items
    get a column); they default to the ids present in ``train``.
    """
    if train.kind != EXPLICIT:
        raise DataError("the SVD recommender needs explicit ratings")
    if len(train) == 0:
        raise DataError("empty training data")
    if k < 1:
        raise SvdError("k must be >= 1")
    user_ids = np.unique(train.users if user_ids is None else np.asarray(user_ids))
    item_ids = np.unique(train.items if item_ids is None else np.asarray(item_ids))
    mat, user_means, global_mean = rating_matrix(train, user_ids, item_ids, fill)
    if fill in UNCENTRED:
        user_means = np.zeros(len(user_ids))
        global_mean = float(mat.mean())
    f = truncated_svd(mat - user_means[:, None], k, seed=seed)
    if f.rank < k:
        warnings.warn(f"rank {k} not achievable, clamped to {f.rank}", RuntimeWarning,
                      stacklevel=2)
        log.warning("SVD rank clamped from %d to %d", k, f.rank)
    return SvdRecommender(f, user_means, global_mean, user_ids, item_ids, f.rank, fill)


def save_factorization(f: SvdFactorization, path) -> None:
    Path(path).write_text(f.to_json())


def load_factorization(path) -> SvdFactorization:
    return SvdFactorization.from_json(Path(path).read_text())
