"""Neural Collaborative Filtering (GMF + MLP towers fused by a NeuMF head),
trained from scratch with numpy.

The GMF tower multiplies user and item embeddings elementwise; the MLP tower
runs the concatenated (separate) MLP embeddings through ReLU layers. The
fusion layer is a linear map over [gmf, mlp_top] followed by a sigmoid.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .ingest import IMPLICIT, DataError, Dataset, hash_keys, sample_negatives
from .metrics import RankedList

log = logging.getLogger(__name__)

COLD_START_SCORE = 0.5


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class NcfConfig:
    latent_dim: int = 4
    mlp_layers: tuple = (16, 8, 4)
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 10
    seed: int = 0
    negative_ratio: int = 4
    optimizer: str = "sgd"          # "sgd" | "adam"
    init_scale: float = 0.05
    activation: str = "relu"
    target: str = "binary"          # "binary" | "scaled_rating"

    def __post_init__(self):
        object.__setattr__(self, "mlp_layers", tuple(int(w) for w in self.mlp_layers))
        if self.latent_dim < 1 or not self.mlp_layers or min(self.mlp_layers) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.negative_ratio < 0:
            raise ValueError("negative_ratio must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.activation != "relu":
            raise ValueError("only relu activation is supported")
        if self.target not in ("binary", "scaled_rating"):
            raise ValueError(f"unknown target mode {self.target!r}")

    def replace(self, **changes) -> "NcfConfig":
        d = asdict(self)
        d.update(changes)
        return NcfConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_layers"] = list(self.mlp_layers)
        return d

    @classmethod
    def from_dict(cls, d) -> "NcfConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class NcfParameters:
    gmf_user: np.ndarray
    gmf_item: np.ndarray
    mlp_user: np.ndarray
    mlp_item: np.ndarray
    mlp_weights: list
    mlp_biases: list
    neumf_weights: np.ndarray
    output_bias: np.ndarray = field(default_factory=lambda: np.zeros(()))

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [("gmf_user", self.gmf_user), ("gmf_item", self.gmf_item),
               ("mlp_user", self.mlp_user), ("mlp_item", self.mlp_item)]
        for j, (w, b) in enumerate(zip(self.mlp_weights, self.mlp_biases)):
            out += [(f"mlp_w{j}", w), (f"mlp_b{j}", b)]
        out += [("neumf_weights", self.neumf_weights), ("output_bias", self.output_bias)]
        return out

    def copy(self) -> "NcfParameters":
        return NcfParameters(self.gmf_user.copy(), self.gmf_item.copy(),
                             self.mlp_user.copy(), self.mlp_item.copy(),
                             [w.copy() for w in self.mlp_weights],
                             [b.copy() for b in self.mlp_biases],
                             self.neumf_weights.copy(), self.output_bias.copy())

    def zeros_like(self) -> "NcfParameters":
        return NcfParameters(*(np.zeros_like(getattr(self, n)) for n in
                               ("gmf_user", "gmf_item", "mlp_user", "mlp_item")),
                             [np.zeros_like(w) for w in self.mlp_weights],
                             [np.zeros_like(b) for b in self.mlp_biases],
                             np.zeros_like(self.neumf_weights), np.zeros(()))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for _, t in self.tensors())

    @classmethod
    def init(cls, user_ids, item_ids, config: NcfConfig) -> "NcfParameters":
        """Uniform(-init_scale, init_scale) weights, zero biases.

        Embedding rows are hashed from (seed, table, id, column) so an
        entity's initial vector does not depend on which other ids exist.
        """
        d, a = config.latent_dim, config.init_scale
        cols = np.arange(d)

        def table(tag, ids):
            ids = np.asarray(ids, dtype=np.int64)
            keys = hash_keys(config.seed, np.full((len(ids), d), tag),
                             ids[:, None] + np.zeros((1, d), dtype=np.int64),
                             np.broadcast_to(cols, (len(ids), d)))
            unit = (keys >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
            return a * (2.0 * unit - 1.0)

        rng = np.random.default_rng([config.seed & 0xFFFFFFFF, config.seed >> 32, 7])
        widths = (2 * d,) + config.mlp_layers
        return cls(table(0, user_ids), table(1, item_ids), table(2, user_ids), table(3, item_ids),
                   [rng.uniform(-a, a, size=(widths[j], widths[j + 1]))
                    for j in range(len(widths) - 1)],
                   [np.zeros(w) for w in config.mlp_layers],
                   rng.uniform(-a, a, size=d + config.mlp_layers[-1]), np.zeros(()))


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def forward_logits(params: NcfParameters, u_idx, i_idx, cache: bool = False):
    """Pre-sigmoid fusion output for aligned dense index arrays."""
    gu, gi = params.gmf_user[u_idx], params.gmf_item[i_idx]
    gmf = gu * gi
    x = np.concatenate([params.mlp_user[u_idx], params.mlp_item[i_idx]], axis=1)
    acts = [x]
    for w, b in zip(params.mlp_weights, params.mlp_biases):
        x = np.maximum(x @ w + b, 0.0)
        acts.append(x)
    h = np.concatenate([gmf, x], axis=1)
    logits = h @ params.neumf_weights + params.output_bias
    if cache:
        return logits, (gu, gi, h, acts)
    return logits


def batch_loss(params: NcfParameters, u_idx, i_idx, targets) -> float:
    """Mean binary cross-entropy of sigmoid(logit) against targets in [0, 1]."""
    z = forward_logits(params, u_idx, i_idx)
    return float(np.mean(np.logaddexp(0.0, z) - targets * z))


def gradient(params: NcfParameters, u_idx, i_idx, targets, dense: bool = True):
    """Analytic gradient of ``batch_loss``.

    With ``dense`` the embedding gradients are full tables; otherwise they
    are returned as per-row contributions (row index arrays are u_idx/i_idx).
    Returns (loss, grads).
    """
    u_idx = np.asarray(u_idx)
    i_idx = np.asarray(i_idx)
    targets = np.asarray(targets, dtype=np.float64)
    n = len(targets)
    if n == 0:
        raise ValueError("empty batch")
    z, (gu, gi, h, acts) = forward_logits(params, u_idx, i_idx, cache=True)
    loss = float(np.mean(np.logaddexp(0.0, z) - targets * z))
    dz = (_sigmoid(z) - targets) / n
    d = params.gmf_user.shape[1]
    g_neumf = h.T @ dz
    g_bias = np.array(dz.sum())
    dh = np.outer(dz, params.neumf_weights)
    dgmf, dx = dh[:, :d], dh[:, d:]
    g_w, g_b = [], []
    for j in range(len(params.mlp_weights) - 1, -1, -1):
        dpre = dx * (acts[j + 1] > 0)
        g_w.append(acts[j].T @ dpre)
        g_b.append(dpre.sum(axis=0))
        dx = dpre @ params.mlp_weights[j].T
    g_w.reverse()
    g_b.reverse()
    rows = (dgmf * gi, dgmf * gu, dx[:, :d], dx[:, d:])
    if not dense:
        return loss, NcfParameters(*rows, g_w, g_b, g_neumf, g_bias)
    tables = []
    for row_grad, idx, ref in zip(rows, (u_idx, i_idx, u_idx, i_idx),
                                  (params.gmf_user, params.gmf_item,
                                   params.mlp_user, params.mlp_item)):
        t = np.zeros_like(ref)
        np.add.at(t, idx, row_grad)
        tables.append(t)
    return loss, NcfParameters(*tables, g_w, g_b, g_neumf, g_bias)


class _Adam:
    def __init__(self, params: NcfParameters, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(t) for _, t in params.tensors()]
        self.v = [np.zeros_like(t) for _, t in params.tensors()]
        self.t = 0

    def step(self, params: NcfParameters, grads: NcfParameters):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for (_, p), (_, g), m, v in zip(params.tensors(), grads.tensors(), self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _sgd_step(params: NcfParameters, grads: NcfParameters, u_idx, i_idx, lr):
    np.subtract.at(params.gmf_user, u_idx, lr * grads.gmf_user)
    np.subtract.at(params.gmf_item, i_idx, lr * grads.gmf_item)
    np.subtract.at(params.mlp_user, u_idx, lr * grads.mlp_user)
    np.subtract.at(params.mlp_item, i_idx, lr * grads.mlp_item)
    for w, gw in zip(params.mlp_weights, grads.mlp_weights):
        w -= lr * gw
    for b, gb in zip(params.mlp_biases, grads.mlp_biases):
        b -= lr * gb
    params.neumf_weights -= lr * grads.neumf_weights
    params.output_bias -= lr * grads.output_bias


class NcfModel:
    def __init__(self, params: NcfParameters, config: NcfConfig, user_ids, item_ids,
                 trained: bool = False, loss_history=None):
        self.params = params
        self.config = config
        self.user_ids = np.asarray(user_ids, dtype=np.int64)
        self.item_ids = np.asarray(item_ids, dtype=np.int64)
        self.trained = trained
        self.loss_history = list(loss_history or [])
        self.n_fallbacks = 0
        self._user_pos = {int(u): j for j, u in enumerate(self.user_ids)}
        self._item_pos = {int(i): j for j, i in enumerate(self.item_ids)}

    def user_index(self, ids) -> np.ndarray:
        return np.array([self._user_pos.get(int(x), -1) for x in np.asarray(ids)], dtype=np.intp)

    def item_index(self, ids) -> np.ndarray:
        return np.array([self._item_pos.get(int(x), -1) for x in np.asarray(ids)], dtype=np.intp)

    def _check(self):
        if not self.trained:
            raise RuntimeError("model is not trained")

    def forward(self, user_id, item_id) -> float:
        """Score one pair in (0, 1); unknown ids get the cold-start score 0.5."""
        return float(self.predict([user_id], [item_id])[0])

    def predict(self, user_ids, item_ids) -> np.ndarray:
        self._check()
        u = self.user_index(user_ids)
        i = self.item_index(item_ids)
        ok = (u >= 0) & (i >= 0)
        out = np.full(len(u), COLD_START_SCORE)
        if ok.any():
            out[ok] = _sigmoid(forward_logits(self.params, u[ok], i[ok]))
        self.n_fallbacks += int((~ok).sum())
        return out

    def score_matrix(self, user_ids, item_ids) -> np.ndarray:
        """len(user_ids) x len(item_ids) sigmoid scores, computed in bulk."""
        self._check()
        p = self.params
        u = self.user_index(user_ids)
        i = self.item_index(item_ids)
        uok, iok = u >= 0, i >= 0
        out = np.full((len(u), len(i)), COLD_START_SCORE)
        if not (uok.any() and iok.any()):
            return out
        uu, ii = u[uok], i[iok]
        d = p.gmf_user.shape[1]
        w_gmf, w_mlp = p.neumf_weights[:d], p.neumf_weights[d:]
        gmf = p.gmf_user[uu] @ (p.gmf_item[ii] * w_gmf).T
        w0 = p.mlp_weights[0]
        x = ((p.mlp_user[uu] @ w0[:d])[:, None, :] + (p.mlp_item[ii] @ w0[d:])[None, :, :]
             + p.mlp_biases[0])
        x = np.maximum(x, 0.0)
        for w, b in zip(p.mlp_weights[1:], p.mlp_biases[1:]):
            x = np.maximum(x @ w + b, 0.0)
        logits = gmf + x @ w_mlp + p.output_bias
        out[np.ix_(uok, iok)] = _sigmoid(logits)
        return out

    def rank_items(self, user_id, candidates) -> RankedList:
        """Candidates by descending score, ties broken by ascending item id."""
        self._check()
        candidates = np.unique(np.asarray(list(candidates), dtype=np.int64))
        if len(candidates) == 0:
            raise ValueError("empty candidate set")
        scores = self.score_matrix([user_id], candidates)[0]
        return RankedList.from_scores(user_id, candidates, scores)

    # ---- persistence

    def save(self, path) -> None:
        arrays = {name: t for name, t in self.params.tensors()}
        arrays["user_ids"] = self.user_ids
        arrays["item_ids"] = self.item_ids
        meta = {"config": self.config.to_dict(), "config_hash": self.config.config_hash(),
                "loss_history": self.loss_history}
        arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "NcfModel":
        z = np.load(path)
        meta = json.loads(bytes(z["meta"]).decode())
        config = NcfConfig.from_dict(meta["config"])
        n_layers = len(config.mlp_layers)
        params = NcfParameters(z["gmf_user"], z["gmf_item"], z["mlp_user"], z["mlp_item"],
                               [z[f"mlp_w{j}"] for j in range(n_layers)],
                               [z[f"mlp_b{j}"] for j in range(n_layers)],
                               z["neumf_weights"], z["output_bias"])
        return cls(params, config, z["user_ids"], z["item_ids"], trained=True,
                   loss_history=meta["loss_history"])

    def loss_csv(self) -> str:
        lines = ["epoch,loss"] + [f"{e + 1},{loss!r}" for e, loss in enumerate(self.loss_history)]
        return "\n".join(lines) + "\n"


def training_examples(train: Dataset, config: NcfConfig, item_catalogue):
    """(users, items, targets) fed to the optimiser.

    Implicit data is used as given (it must already contain negatives).
    Explicit ratings become positives (target 1) plus ``negative_ratio``
    sampled unrated items per rating (target 0); in ``scaled_rating`` mode
    the target is the rating rescaled to [0, 1] instead.
    """
    if train.kind == IMPLICIT:
        if not np.any(train.ratings == 0):
            raise DataError("implicit training data must include sampled negatives")
        return train.users, train.items, train.ratings.astype(np.float64)
    if config.target == "scaled_rating":
        lo, hi = train.rating_scale
        return train.users, train.items, (train.ratings - lo) / (hi - lo)
    nu, ni = (sample_negatives(train.users, train.items, item_catalogue,
                               config.negative_ratio, config.seed)
              if config.negative_ratio > 0 else (np.empty(0, np.int64),) * 2)
    users = np.concatenate([train.users, nu])
    items = np.concatenate([train.items, ni])
    targets = np.concatenate([np.ones(len(train)), np.zeros(len(nu))])
    return users, items, targets


def epoch_order(users, items, seed: int, epoch: int) -> np.ndarray:
    keys = hash_keys(seed, np.full(len(users), epoch), users, items)
    return np.argsort(keys, kind="stable")


def train(train_data: Dataset, config: NcfConfig = NcfConfig(), user_ids=None,
          item_ids=None) -> NcfModel:
    """Fit an NCF model by minibatch gradient descent on binary cross-entropy.

    ``user_ids`` / ``item_ids`` set the embedding tables (default: ids seen
    in ``train_data``); ids that never occur in training keep their initial
    embeddings. Every random draw comes from ``config.seed``.
    """
    if len(train_data) == 0:
        raise DataError("empty training data")
    user_ids = np.unique(train_data.users if user_ids is None else
                         np.union1d(user_ids, train_data.users))
    item_ids = np.unique(train_data.items if item_ids is None else
                         np.union1d(item_ids, train_data.items))
    params = NcfParameters.init(user_ids, item_ids, config)
    model = NcfModel(params, config, user_ids, item_ids)
    users, items, targets = training_examples(train_data, config, item_ids)
    u_all = model.user_index(users)
    i_all = model.item_index(items)
    opt = _Adam(params, config.learning_rate) if config.optimizer == "adam" else None
    n, bs = len(targets), config.batch_size
    for epoch in range(config.epochs):
        perm = epoch_order(users, items, config.seed, epoch)
        total = 0.0
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            u, i = u_all[idx], i_all[idx]
            if opt is None:
                loss, g = gradient(params, u, i, targets[idx], dense=False)
                _sgd_step(params, g, u, i, config.learning_rate)
            else:
                loss, g = gradient(params, u, i, targets[idx], dense=True)
                opt.step(params, g)
            total += loss * len(idx)
        epoch_loss = total / n
        if not np.isfinite(epoch_loss) or not params.all_finite():
            raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}: {epoch_loss}")
        model.loss_history.append(epoch_loss)
        log.debug("epoch %d loss %.6f", epoch + 1, epoch_loss)
    model.trained = True
    return model
