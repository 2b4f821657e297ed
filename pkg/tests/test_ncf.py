import math

import numpy as np
import pytest

from recinfluence.ingest import IMPLICIT, DataError, Dataset, negative_sample
from recinfluence.ncf import (COLD_START_SCORE, NcfConfig, NcfModel, NcfParameters,
                              TrainingDiverged, batch_loss, forward_logits, gradient, train,
                              training_examples)

from conftest import toy_explicit, toy_implicit
from oracles import finite_difference_gradient, relative_error

SMALL = NcfConfig(latent_dim=3, mlp_layers=(6, 4, 2), init_scale=0.5)


def random_batch(seed, n_users=4, n_items=5, n=12):
    rng = np.random.default_rng(seed)
    params = NcfParameters.init(np.arange(n_users), np.arange(n_items), SMALL.replace(seed=seed))
    for b in params.mlp_biases:
        b[:] = rng.uniform(-0.3, 0.3, b.shape)
    params.output_bias[...] = rng.normal() * 0.1
    return (params, rng.integers(0, n_users, n), rng.integers(0, n_items, n),
            rng.random(n).round())


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(seed):
    params, u, i, y = random_batch(seed)
    _, grads = gradient(params, u, i, y)
    fd = finite_difference_gradient(lambda: batch_loss(params, u, i, y),
                                    [t for _, t in params.tensors()])
    assert relative_error([t for _, t in grads.tensors()], fd) < 1e-4


def test_sparse_gradient_rows_sum_to_dense():
    params, u, i, y = random_batch(3)
    _, dense = gradient(params, u, i, y)
    _, sparse = gradient(params, u, i, y, dense=False)
    table = np.zeros_like(params.gmf_user)
    np.add.at(table, u, sparse.gmf_user)
    np.testing.assert_allclose(table, dense.gmf_user, atol=1e-15)


def test_forward_matches_hand_computation():
    params, _, _, _ = random_batch(4)
    u, i = 2, 3
    d = params.gmf_user.shape[1]
    gmf = [params.gmf_user[u, c] * params.gmf_item[i, c] for c in range(d)]
    x = list(params.mlp_user[u]) + list(params.mlp_item[i])
    for w, b in zip(params.mlp_weights, params.mlp_biases):
        x = [max(0.0, sum(x[r] * w[r, c] for r in range(len(x))) + b[c])
             for c in range(w.shape[1])]
    h = gmf + x
    z = sum(h[j] * params.neumf_weights[j] for j in range(len(h))) + float(params.output_bias)
    got = forward_logits(params, np.array([u]), np.array([i]))[0]
    assert got == pytest.approx(z, abs=1e-14)
    model = NcfModel(params, SMALL, np.arange(4), np.arange(5), trained=True)
    assert model.forward(u, i) == pytest.approx(1 / (1 + math.exp(-z)), abs=1e-14)


def test_overfits_tiny_dataset():
    d = negative_sample(toy_implicit(n_users=4, n_items=6), 1, seed=0)
    cfg = NcfConfig(latent_dim=4, mlp_layers=(8, 4), learning_rate=0.05, batch_size=8,
                    epochs=300, optimizer="adam", init_scale=0.3)
    model = train(d, cfg)
    assert model.loss_history[-1] < 0.05 < model.loss_history[0]
    preds = model.predict(d.users, d.items)
    assert np.all((preds > 0.5) == (d.ratings > 0))


def test_sgd_reduces_loss():
    d = negative_sample(toy_implicit(n_users=5, n_items=8), 2, seed=0)
    model = train(d, NcfConfig(learning_rate=0.5, batch_size=4, epochs=40, init_scale=0.3))
    assert model.loss_history[-1] < model.loss_history[0]


def test_training_is_deterministic_and_seed_sensitive():
    d = toy_explicit()
    cfg = NcfConfig(epochs=3, batch_size=4, learning_rate=0.05, optimizer="adam")
    a, b = train(d, cfg), train(d, cfg)
    for (_, x), (_, y) in zip(a.params.tensors(), b.params.tensors()):
        np.testing.assert_array_equal(x, y)
    c = train(d, cfg.replace(seed=1))
    assert not np.array_equal(a.params.gmf_user, c.params.gmf_user)


def test_embedding_init_independent_of_other_ids():
    p1 = NcfParameters.init([1, 2, 3], [1], SMALL)
    p2 = NcfParameters.init([2, 3], [1], SMALL)
    np.testing.assert_array_equal(p1.gmf_user[1:], p2.gmf_user)


def test_cold_start_and_score_matrix_consistency():
    d = toy_explicit()
    model = train(d, NcfConfig(epochs=2, batch_size=8))
    assert model.predict([999], [1])[0] == COLD_START_SCORE
    users, items = np.array([1, 2, 999]), np.array([1, 3, 5, 888])
    mat = model.score_matrix(users, items)
    uu, ii = np.meshgrid(users, items, indexing="ij")
    np.testing.assert_allclose(mat, model.predict(uu.ravel(), ii.ravel()).reshape(mat.shape),
                               atol=1e-15)
    ranked = model.rank_items(1, [1, 3, 5])
    assert sorted(ranked.items) == [1, 3, 5]


def test_save_load_roundtrip(tmp_path):
    model = train(toy_explicit(), NcfConfig(epochs=2, batch_size=8))
    model.save(tmp_path / "m.npz")
    again = NcfModel.load(tmp_path / "m.npz")
    assert again.config == model.config and again.loss_history == model.loss_history
    np.testing.assert_array_equal(again.predict([1, 2], [1, 2]), model.predict([1, 2], [1, 2]))
    assert model.loss_csv().splitlines()[0] == "epoch,loss"


def test_untrained_model_refuses_to_predict():
    d = toy_explicit()
    params = NcfParameters.init(d.user_ids, d.item_ids, SMALL)
    with pytest.raises(RuntimeError):
        NcfModel(params, SMALL, d.user_ids, d.item_ids).predict([1], [1])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    d = toy_explicit()
    with pytest.raises(TrainingDiverged):
        train(d, NcfConfig(learning_rate=1e305, epochs=3, batch_size=4, init_scale=1.0))


def test_training_examples_modes():
    d = toy_explicit()
    u, i, y = training_examples(d, NcfConfig(negative_ratio=2), np.arange(1, 9))
    assert (y == 1).sum() == len(d) and (y == 0).sum() <= 2 * len(d)
    assert not set(zip(u[y == 0], i[y == 0])) & set(zip(d.users, d.items))
    _, _, y = training_examples(d, NcfConfig(target="scaled_rating"), None)
    assert y.min() >= 0 and y.max() <= 1
    with pytest.raises(DataError):
        training_examples(toy_implicit(), NcfConfig(), None)


@pytest.mark.parametrize("bad", [dict(latent_dim=0), dict(learning_rate=0), dict(epochs=0),
                                 dict(optimizer="rmsprop"), dict(activation="tanh")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        NcfConfig(**bad)


def test_config_roundtrip_and_hash():
    cfg = NcfConfig(mlp_layers=[8, 4])
    assert NcfConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.config_hash() != cfg.replace(seed=1).config_hash()


def zero_model(n_users=2, n_items=4, cfg=SMALL):
    params = NcfParameters.init(np.arange(n_users), np.arange(n_items), cfg)
    for _, t in params.tensors():
        t[...] = 0.0
    return NcfModel(params, cfg, np.arange(n_users), np.arange(n_items), trained=True)


def test_zero_network_outputs_one_half():
    model = zero_model()
    np.testing.assert_array_equal(model.score_matrix([0, 1], [0, 1, 2, 3]), 0.5)
    assert model.rank_items(0, [3, 1, 2]).items == (1, 2, 3)


def test_one_dimensional_hand_set_network():
    cfg = NcfConfig(latent_dim=1, mlp_layers=(1,))
    p = NcfParameters(np.array([[2.0]]), np.array([[0.5]]), np.array([[1.0]]),
                      np.array([[-3.0]]), [np.array([[0.4], [0.1]])], [np.array([0.2])],
                      np.array([1.5, -2.0]), np.array(0.25))
    # gmf = 2 * 0.5 = 1; mlp = relu(1*0.4 - 3*0.1 + 0.2) = 0.3
    # logit = 1.5*1 - 2*0.3 + 0.25 = 1.15
    model = NcfModel(p, cfg, [7], [9], trained=True)
    assert model.forward(7, 9) == pytest.approx(1 / (1 + math.exp(-1.15)), abs=1e-15)


def test_output_increases_with_fusion_preactivation():
    params, u, i, _ = random_batch(11)
    model = NcfModel(params, SMALL, np.arange(4), np.arange(5), trained=True)
    before = model.predict(u, i)
    params.output_bias[...] += 0.5
    assert np.all(model.predict(u, i) > before)
    assert np.all((before > 0) & (before < 1))


def test_overfits_single_pair():
    d = Dataset([1, 1], [1, 2], [1.0, 0.0], kind=IMPLICIT, rating_scale=(0, 1))
    cfg = NcfConfig(latent_dim=2, mlp_layers=(4, 2), learning_rate=0.1, batch_size=2,
                    epochs=500, init_scale=0.3)
    model = train(d, cfg)
    assert model.loss_history[-1] < 0.1
    assert model.forward(1, 1) > 0.5 > model.forward(1, 2)


def test_full_batch_loss_non_increasing_after_burn_in():
    d = negative_sample(toy_implicit(n_users=4, n_items=6), 1, seed=0)
    cfg = NcfConfig(latent_dim=3, mlp_layers=(6, 3), learning_rate=0.1, batch_size=len(d),
                    epochs=60, init_scale=0.3)
    losses = train(d, cfg).loss_history
    assert all(b <= a + 1e-12 for a, b in zip(losses[3:], losses[4:]))


def test_output_bias_gradient_closed_form():
    params = zero_model().params
    y = np.array([1.0, 0.0, 1.0, 0.0])
    _, g = gradient(params, np.array([0, 1, 0, 1]), np.array([0, 1, 2, 3]), y)
    assert float(g.output_bias) == pytest.approx(np.mean(0.5 - y))


def test_duplicated_batch_has_same_mean_gradient():
    params, u, i, y = random_batch(12)
    _, g1 = gradient(params, u, i, y)
    _, g2 = gradient(params, np.tile(u, 2), np.tile(i, 2), np.tile(y, 2))
    for (_, a), (_, b) in zip(g1.tensors(), g2.tensors()):
        np.testing.assert_allclose(a, b, atol=1e-15)


def test_rank_items_contracts():
    model = train(toy_explicit(), NcfConfig(epochs=3, batch_size=8, optimizer="adam",
                                            learning_rate=0.05))
    assert model.rank_items(1, [4]).items == (4,)
    with pytest.raises(ValueError):
        model.rank_items(1, [])
    cands = [1, 2, 3, 4, 5, 6, 7, 8]
    scores = {c: model.forward(1, c) for c in cands}
    assert list(model.rank_items(1, cands).items) == sorted(cands, key=lambda c: (-scores[c], c))


def test_parameters_finite_and_outputs_open_interval_every_step(monkeypatch):
    import recinfluence.ncf as ncf_mod
    real = ncf_mod._sgd_step
    checked = []

    def checked_step(params, *a):
        real(params, *a)
        assert params.all_finite()
        checked.append(1)

    monkeypatch.setattr(ncf_mod, "_sgd_step", checked_step)
    d = toy_explicit()
    cfg = NcfConfig(epochs=3, batch_size=8, learning_rate=0.1)
    model = train(d, cfg)
    n_examples = len(training_examples(d, cfg, d.item_ids)[2])
    assert len(checked) == 3 * math.ceil(n_examples / 8)
    users, items = np.meshgrid(d.user_ids, d.item_ids, indexing="ij")
    p = model.predict(users.ravel(), items.ravel())
    assert np.all((p > 0) & (p < 1))
