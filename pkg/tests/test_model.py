import numpy as np
import pytest

from adhocloc import autodiff as ad
from adhocloc.autodiff import ShapeError, Tensor
from adhocloc.model import (ModelConfig, NodeInput, assemble, config_path_for, forward,
                            forward_probs, fusion_layer, init_params, node_encode,
                            parameter_count, position_encode, spatial_layer, temporal_layer)

from gradcheck import numeric_grad, rel_error

TINY = ModelConfig(m_total=4, n_features=6, d_embed=4, n_heads=2, pos_hidden=5,
                   node_hidden=(7, 5), ffn_width=6, head_widths=(6, 5))
SMALL = ModelConfig(m_total=16, n_features=512, d_embed=16, n_heads=4, pos_hidden=32,
                    node_hidden=(64, 32), ffn_width=32, head_widths=(64, 64))


def _inputs(cfg, n, t, seed=0, batch=()):
    rng = np.random.default_rng(seed)
    areas = rng.integers(0, cfg.m_total, size=batch + (n,))
    onehots = np.eye(cfg.m_total)[areas]
    feats = rng.standard_normal(batch + (n, cfg.n_features, t))
    return onehots, feats


def _nodes(onehots, feats):
    return [NodeInput(o, f) for o, f in zip(onehots, feats)]


@pytest.fixture(scope="module")
def small_params():
    return init_params(SMALL, seed=0, dtype=np.float64)


def test_parameter_count_matches_store():
    for cfg in (TINY, SMALL, ModelConfig(m_total=225)):
        assert parameter_count(cfg) == init_params(cfg, 0).n_values()


def test_default_parameter_count_frozen():
    # full-size widths, 15x15 grid
    assert parameter_count(ModelConfig(m_total=225)) == 9276129


def test_assemble_shape(small_params):
    oh, f = _inputs(SMALL, 3, 5)
    assert assemble(_nodes(oh, f), small_params, SMALL).shape == (5, 32, 3)
    full = ModelConfig(m_total=16)
    e = assemble(_nodes(*_inputs(full, 3, 5)), init_params(full, 0), full)
    assert e.shape == (5, 512, 3)


def test_assemble_single_node(small_params):
    oh, f = _inputs(SMALL, 1, 4)
    assert assemble(_nodes(oh, f), small_params, SMALL).shape == (4, 32, 1)


def test_assemble_rejects_ragged_frames(small_params):
    oh, f = _inputs(SMALL, 2, 4)
    nodes = [NodeInput(oh[0], f[0]), NodeInput(oh[1], f[1][:, :3])]
    with pytest.raises(ShapeError):
        assemble(nodes, small_params, SMALL)


def test_assemble_halves(small_params):
    oh, f = _inputs(SMALL, 2, 3)
    e = assemble(_nodes(oh, f), small_params, SMALL).data
    u = position_encode(oh, small_params, SMALL).data  # (N, E)
    s = node_encode(np.transpose(f, (2, 0, 1)), small_params, SMALL).data  # (T, N, E)
    np.testing.assert_allclose(e[:, :16, :], np.broadcast_to(u.T, (3, 16, 2)), atol=1e-12)
    np.testing.assert_allclose(e[:, 16:, :], np.transpose(s, (0, 2, 1)), atol=1e-12)


def test_encoders_determinism_and_zero_weights():
    p = init_params(SMALL, 0, np.float64)
    u = np.eye(16)[[4, 4]]
    a = position_encode(u, p, SMALL).data
    np.testing.assert_array_equal(a[0], a[1])
    for name, t in p.items():
        if name.startswith(("pos.", "node.")):
            t.data[...] = 0
    assert not position_encode(u, p, SMALL).data.any()
    assert not node_encode(np.zeros((3, 512)), p, SMALL).data.any()
    with pytest.raises(ShapeError):
        position_encode(np.zeros(15), p, SMALL)
    with pytest.raises(ShapeError):
        node_encode(np.zeros((2, 511)), p, SMALL)


def test_identity_activation_encoder_is_affine():
    cfg = ModelConfig(m_total=16, d_embed=16, n_heads=4, pos_hidden=32, node_hidden=(64, 32),
                      ffn_width=32, head_widths=(64, 64), activation="identity")
    p = init_params(cfg, 1, np.float64)
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 512))
    z = node_encode(np.zeros(512), p, cfg).data
    enc = lambda v: node_encode(v, p, cfg).data - z
    np.testing.assert_allclose(enc(2 * a - b), 2 * enc(a) - enc(b), atol=1e-10)


def test_encoder_layers_end_in_relu(small_params):
    rng = np.random.default_rng(3)
    s = node_encode(rng.standard_normal((50, 512)), small_params, SMALL).data
    assert (s >= 0).all()


def test_spatial_single_node_attention_is_value_path(small_params):
    oh, f = _inputs(SMALL, 1, 3)
    e = assemble(_nodes(oh, f), small_params, SMALL)
    out = spatial_layer(e, small_params, SMALL, 0).data
    # oracle: one token, so attention weight 1 and the output is x @ Wv @ Wo
    p = {k: v.data for k, v in small_params.items() if k.startswith("spatial.0.")}
    x = e.data[:, :, 0]

    def ln(v, g, b):
        mu = v.mean(-1, keepdims=True)
        return (v - mu) / np.sqrt(v.var(-1, keepdims=True) + 1e-5) * g + b
    h = ln(x + x @ p["spatial.0.attn.wv"] @ p["spatial.0.attn.wo"],
           p["spatial.0.ln1.g"], p["spatial.0.ln1.b"])
    ff = np.maximum(h @ p["spatial.0.ffn.0.w"] + p["spatial.0.ffn.0.b"], 0)
    ff = ff @ p["spatial.0.ffn.1.w"] + p["spatial.0.ffn.1.b"]
    expected = ln(h + ff, p["spatial.0.ln2.g"], p["spatial.0.ln2.b"])
    np.testing.assert_allclose(out[:, :, 0], expected, atol=1e-6)


def test_spatial_layer_node_equivariant(small_params):
    rng = np.random.default_rng(2)
    e = rng.standard_normal((3, 32, 4))
    perm = [2, 0, 3, 1]
    a = spatial_layer(e, small_params, SMALL).data
    b = spatial_layer(e[:, :, perm], small_params, SMALL).data
    np.testing.assert_allclose(b, a[:, :, perm], atol=1e-10)


def test_fusion_identical_channels_match_single(small_params):
    rng = np.random.default_rng(4)
    one = rng.standard_normal((5, 32, 1))
    many = np.repeat(one, 4, axis=2)
    a = fusion_layer(one, small_params, SMALL).data
    b = fusion_layer(many, small_params, SMALL).data
    assert a.shape == (5, 32)
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_fusion_invariant_to_node_order(small_params):
    e = np.random.default_rng(5).standard_normal((2, 32, 5))
    a = fusion_layer(e, small_params, SMALL).data
    b = fusion_layer(e[:, :, ::-1], small_params, SMALL).data
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_temporal_layer_frame_equivariant(small_params):
    e = np.random.default_rng(6).standard_normal((6, 32))
    perm = [3, 1, 5, 0, 2, 4]
    a = temporal_layer(e, small_params, SMALL).data
    b = temporal_layer(e[perm], small_params, SMALL).data
    np.testing.assert_allclose(b, a[perm], atol=1e-10)
    single = temporal_layer(e[:1], small_params, SMALL).data
    assert single.shape == (1, 32)


def test_forward_rows_sum_to_one_and_permutation_invariant(small_params):
    oh, f = _inputs(SMALL, 5, 7, seed=8)
    pred = forward(_nodes(oh, f), small_params, SMALL)
    assert pred.frame_probs.shape == (7, 16)
    np.testing.assert_allclose(pred.frame_probs.sum(-1), 1, atol=1e-5)
    np.testing.assert_allclose(pred.pooled, pred.frame_probs.mean(0))
    assert pred.decided == int(np.argmax(pred.pooled)) + 1
    perm = [4, 2, 0, 1, 3]
    other = forward(_nodes(oh[perm], f[perm]), small_params, SMALL)
    np.testing.assert_allclose(other.frame_probs, pred.frame_probs, atol=1e-5)
    assert other.decided == pred.decided
    assert [m for m, _ in pred.top(5)][0] == pred.decided


def test_forward_any_node_and_frame_count(small_params):
    for n in (1, 2, 7, 10):
        for t in (1, 3, 16):
            p = forward(_nodes(*_inputs(SMALL, n, t, seed=n * t)), small_params, SMALL)
            assert p.frame_probs.shape == (t, 16)


def test_batched_matches_per_sample(small_params):
    oh, f = _inputs(SMALL, 3, 4, seed=9, batch=(2,))
    batched = forward_probs(oh, f, small_params, SMALL).data
    for i in range(2):
        single = forward_probs(oh[i], f[i], small_params, SMALL).data
        np.testing.assert_allclose(batched[i], single, atol=1e-10)


def test_forward_rejects_wrong_m(small_params):
    oh, f = _inputs(SMALL, 2, 3)
    with pytest.raises(ShapeError, match="M=16"):
        forward_probs(oh[:, :15], f, small_params, SMALL)


@pytest.mark.parametrize("seed", range(3))
def test_full_model_gradient(seed):
    params = init_params(TINY, seed, np.float64)
    rng = np.random.default_rng(seed + 100)
    for name, t in params.items():
        # zero-initialised biases put ReLU inputs exactly on the kink
        if name.endswith(".b"):
            t.data[...] = 0.1 * rng.standard_normal(t.shape)
    oh, f = _inputs(TINY, 3, 4, seed=seed)
    target = np.eye(4)[seed % 4]

    def loss():
        return ad.cross_entropy(forward_probs(oh, f, params, TINY), target)

    loss().backward()
    names = [k for k, _ in params.items()]
    analytic = [params[k].grad.copy() for k in names]
    numeric = numeric_grad(lambda: float(loss().data), [params[k].data for k in names], eps=1e-5)
    flat_a = np.concatenate([a.ravel() for a in analytic])
    flat_n = np.concatenate([n.ravel() for n in numeric])
    assert rel_error(flat_a, flat_n) < 1e-4


def test_config_round_trip(tmp_path):
    path = tmp_path / "m.ckpt"
    SMALL.save(config_path_for(path))
    assert ModelConfig.load(config_path_for(path)) == SMALL
    with pytest.raises(ValueError):
        ModelConfig(m_total=4, d_embed=5, n_heads=4)


def test_init_seeded():
    a, b = init_params(TINY, 3), init_params(TINY, 3)
    for k, t in a.items():
        np.testing.assert_array_equal(t.data, b[k].data)
    assert isinstance(a["fusion.query"], Tensor)
