import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from structpretrain import autodiff as ad
from structpretrain.autodiff import constant, grad_check
from structpretrain.features import assemble_features
from structpretrain.graph import build_graph, norm_adjacency
from structpretrain.model import (N_CENTRALITIES, ModelConfig, cluster_embed, cluster_logits, embed_features,
                                  encode, encoder_param_names, from_arrays, gcn_block, init_pretrain_params,
                                  layer_weights, link_logits, mix_layers, ntn_forward, ntn_head, rank_scores, snapshot,
                                  task_representation)

from conftest import small_graphs

CFG8 = ModelConfig(hidden_dim=8, num_layers=2)


def instance(seed, n=12, p=0.3):
    rng = np.random.default_rng(seed)
    g = build_graph(oracles.random_edges(rng, n, p), n)
    return g, assemble_features(g).normalized, norm_adjacency(g), rng


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(hidden_dim=3)
    with pytest.raises(ValueError):
        ModelConfig(num_layers=0)
    with pytest.raises(ValueError):
        ModelConfig(activation="swish")
    cfg = ModelConfig(hidden_dim=16, num_layers=2, tasks=["rec"])
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_parameter_shapes_and_unique_names():
    params = init_pretrain_params(ModelConfig(hidden_dim=16, num_layers=3), np.random.default_rng(0))
    assert params["embed.E"].shape == (4, 16)
    assert params["gcn.3.W2"].shape == (16, 16)
    assert params["rec.ntn.W"].shape == (4, 16, 16)
    assert params["rec.ntn.V"].shape == (4, 32)
    assert params["rank.0.W1"].shape == (16, 8) and params["rank.3.W2"].shape == (8, 1)
    assert params["cluster.attn.q"].shape == (16,)
    assert params["mix.rank.psi"].value.tolist() == [0.0, 0.0, 0.0]
    assert all(p.name == k for k, p in params.items())
    assert sum(len(g) for g in encoder_param_names(ModelConfig(num_layers=3))) == 13


def test_embed_examples(rng):
    x = rng.random((5, 4))
    assert (embed_features(x, constant(np.zeros((4, 8)))).value == 0).all()
    e = constant(rng.normal(size=(4, 8)))
    assert (embed_features(np.zeros((5, 4)), e).value == 0).all()
    h = embed_features(x, e).value
    assert (np.abs(h) < 1).all()
    with pytest.raises(ad.ShapeError):
        embed_features(np.zeros((5, 3)), e)


def test_block_on_isolated_node_has_identity_propagation(rng):
    g = build_graph([], 1)
    a = norm_adjacency(g)
    assert a.toarray().tolist() == [[1.0]]
    h = constant(rng.normal(size=(1, 8)))
    p = [constant(rng.normal(size=(8, 8))) for _ in range(2)] + [constant(np.ones(8)), constant(rng.normal(size=8))]
    out = gcn_block(h, a, *p).value
    z = ad.relu(ad.matmul(ad.relu(ad.matmul(h, p[0])), p[1]))
    expect = ad.relu(ad.batch_norm(ad.matmul(ad.relu(ad.matmul(h, p[0])), p[1]), p[2], p[3])).value
    np.testing.assert_array_equal(out, expect)
    # a single-row batch norm returns the shift, so the block output is relu(kappa)
    np.testing.assert_allclose(out[0], np.maximum(p[3].value, 0), atol=1e-12)
    assert z.shape == (1, 8)


@given(small_graphs(min_n=2, max_n=12), st.integers(0, 2 ** 32 - 1))
def test_encoder_permutation_equivariant(g, seed):
    params = init_pretrain_params(CFG8, np.random.default_rng(seed))
    perm = np.random.default_rng(seed + 1).permutation(g.n)
    h = build_graph(perm[g.edges()], g.n)
    fa = encode(assemble_features(g).normalized, norm_adjacency(g), params, CFG8)
    fb = encode(assemble_features(h).normalized, norm_adjacency(h), params, CFG8)
    for la, lb in zip(fa, fb):
        np.testing.assert_allclose(lb.value[perm], la.value, rtol=1e-9, atol=1e-10)


def test_encode_shapes_and_determinism():
    g, x, a, _ = instance(1)
    cfg1 = ModelConfig(hidden_dim=8, num_layers=1)
    assert len(encode(x, a, init_pretrain_params(cfg1, np.random.default_rng(0)), cfg1)) == 1
    cfg = ModelConfig(hidden_dim=8, num_layers=3)
    l1 = encode(x, a, init_pretrain_params(cfg, np.random.default_rng(4)), cfg)
    l2 = encode(x, a, init_pretrain_params(cfg, np.random.default_rng(4)), cfg)
    assert [h.shape for h in l1] == [(12, 8)] * 3
    assert all(np.array_equal(u.value, v.value) for u, v in zip(l1, l2))


def test_mixing_examples(rng):
    layers = [constant(rng.normal(size=(5, 8))) for _ in range(3)]
    alpha = constant(rng.normal(size=8))
    np.testing.assert_allclose(layer_weights(constant(np.zeros(3))).value, 1 / 3, rtol=1e-15)
    sat = mix_layers(layers, constant([800.0, -800.0, -800.0]), alpha).value
    np.testing.assert_allclose(sat, alpha.value * layers[0].value, rtol=1e-12)
    one = mix_layers(layers[:1], constant([0.3]), constant(np.ones(8))).value
    np.testing.assert_array_equal(one, layers[0].value)
    with pytest.raises(ad.ShapeError):
        mix_layers(layers, constant(np.zeros(2)), alpha)


@given(st.lists(st.floats(-20, 20), min_size=1, max_size=6), st.floats(-50, 50))
def test_beta_shift_invariant_and_normalized(psi, c):
    b = layer_weights(constant(psi)).value
    assert abs(b.sum() - 1) <= 1e-12
    np.testing.assert_allclose(layer_weights(constant(np.array(psi) + c)).value, b, rtol=1e-9, atol=1e-15)


def test_ntn_zero_params_and_range(rng):
    d = 8
    zeros = {"z.W": constant(np.zeros((4, d, d))), "z.V": constant(np.zeros((4, 2 * d))), "z.b": constant(np.zeros(4))}
    x = constant(rng.normal(size=(3, d)))
    assert (ntn_forward(x, x, zeros, "z").value == 0).all()
    params = init_pretrain_params(CFG8, rng)
    for k in ("W", "V", "b"):
        params[f"rec.ntn.{k}"].value *= 50
    out = ntn_forward(x, constant(rng.normal(size=(3, d))), params, "rec.ntn").value
    assert out.shape == (3, 4) and (np.abs(out) <= 1).all()


def test_link_logits_symmetric(rng):
    params = init_pretrain_params(CFG8, rng)
    f = constant(rng.normal(size=(6, 8)))
    pairs = np.array([[0, 1], [2, 5], [3, 4]])
    np.testing.assert_allclose(link_logits(f, pairs, params).value, link_logits(f, pairs[:, ::-1], params).value,
                               rtol=1e-13, atol=1e-15)


def test_rank_heads(rng):
    params = init_pretrain_params(CFG8, rng)
    f = constant(rng.normal(size=(5, 8)))
    scores = rank_scores(f, params)
    assert len(scores) == N_CENTRALITIES and all(s.shape == (5,) for s in scores)
    for s in range(N_CENTRALITIES):
        for k in ("W1", "b1", "W2", "b2"):
            params[f"rank.{s}.{k}"].value[...] = 0
    assert all((s.value == 0).all() for s in rank_scores(f, params))


def test_cluster_embed_examples(rng):
    params = init_pretrain_params(CFG8, rng)
    row = rng.normal(size=(1, 8))
    np.testing.assert_array_equal(cluster_embed(constant(row), params).value, row)
    same = np.repeat(row, 4, axis=0)
    np.testing.assert_allclose(cluster_embed(constant(same), params).value, row, rtol=1e-15)
    members = rng.normal(size=(6, 8))
    out = cluster_embed(constant(members), params).value
    # a convex combination stays inside the coordinate-wise hull
    assert (out >= members.min(axis=0) - 1e-12).all() and (out <= members.max(axis=0) + 1e-12).all()
    with pytest.raises(ad.ContractError):
        cluster_embed(constant(np.zeros((0, 8))), params)


def test_cluster_logits_match_paired_ntn(rng):
    params = init_pretrain_params(CFG8, rng)
    q = constant(rng.normal(size=(3, 8)))
    c = constant(rng.normal(size=(4, 8)))
    s = cluster_logits(q, c, params).value
    assert s.shape == (3, 4)
    for v in range(3):
        xi = constant(np.repeat(q.value[v:v + 1], 4, axis=0))
        ref = ntn_head(ntn_forward(xi, c, params, "cluster.ntn"), params, "cluster.ntn").value.reshape(-1)
        np.testing.assert_allclose(s[v], ref, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("seed", range(3))
def test_block_gradient(seed):
    g, x, a, rng = instance(seed)
    params = init_pretrain_params(CFG8, rng)
    h0 = ad.parameter(rng.normal(size=(12, 8)))
    names = ["gcn.1.W1", "gcn.1.W2", "gcn.1.bn_gamma", "gcn.1.bn_kappa"]
    c = constant(rng.normal(size=(12, 8)))
    f = lambda: ad.sum_all(ad.mul(gcn_block(h0, a, *[params[k] for k in names]), c))
    assert grad_check(f, [h0] + [params[k] for k in names], max_coords=None) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_decoder_composite_gradient(seed):
    g, x, a, rng = instance(seed)
    params = init_pretrain_params(CFG8, rng)
    pairs = np.array([[0, 1], [2, 3], [4, 11], [7, 5]])
    c = [constant(rng.normal(size=12)) for _ in range(N_CENTRALITIES)]

    def f():
        layers = encode(x, a, params, CFG8)
        link = ad.sum_all(ad.tanh(link_logits(task_representation(layers, params, "rec"), pairs, params)))
        fr = task_representation(layers, params, "rank")
        rank = ad.sum_all(ad.concat([ad.mul(s, ci) for s, ci in zip(rank_scores(fr, params), c)]))
        fc = task_representation(layers, params, "cluster")
        emb = ad.concat([cluster_embed(ad.gather_rows(fc, np.arange(0, 6)), params),
                         cluster_embed(ad.gather_rows(fc, np.arange(6, 12)), params)])
        clus = ad.cross_entropy(cluster_logits(fc, emb, params), np.repeat([0, 1], 6))
        return link + rank + clus

    assert grad_check(f, list(params.values()), max_coords=6, rng=np.random.default_rng(seed)) < 1e-4


def test_snapshot_round_trip(rng):
    params = init_pretrain_params(CFG8, rng)
    again = from_arrays(snapshot(params))
    assert list(again) == list(params)
    assert all(np.array_equal(again[k].value, params[k].value) for k in params)
    again["embed.E"].value[0, 0] += 1
    assert not np.array_equal(again["embed.E"].value, params["embed.E"].value)
