"""Network semantics: adjacency gathering, relation-kernel attention, dense
concatenation widths, permutation invariance, locality, and the parameter
container round trip."""

import io

import numpy as np
import pytest

from gcrl.autodiff import ParamSet, StructuralError, Tensor
from gcrl.model import (
    GraphQNetwork,
    ModelConfig,
    attention_weights,
    build_adjacency,
    conv_forward,
    encode_observation,
    init_params,
    layer_param_views,
    mean_kernel_forward,
    plan_for_graph,
    read_params,
    write_params,
)


def tiny_config(**kw):
    base = dict(obs_dim=6, n_actions=3, encoder_units=(16, 8), feature_dim=8,
                conv_layers=2, attention_heads=2, head_dim=4, tau=0.25,
                neighbor_limit=3, init_std=0.3)
    base.update(kw)
    return ModelConfig(**base)


def paper_dims_config(**kw):
    base = dict(obs_dim=47, n_actions=3)
    base.update(kw)
    return ModelConfig(**base)


# --- encoder -----------------------------------------------------------------

def test_encoder_zero_obs_zero_weights():
    cfg = tiny_config()
    params = init_params(cfg, np.random.default_rng(0))
    for name in ("enc.w1", "enc.b1", "enc.w2", "enc.b2"):
        params[name] = Tensor(np.zeros(params[name].shape))
    out = encode_observation(np.zeros(cfg.obs_dim), params, cfg)
    assert np.array_equal(out, np.zeros(cfg.feature_dim))


def test_encoder_output_length_matches_table_dims():
    for obs_dim in (607, 47):
        cfg = ModelConfig(obs_dim=obs_dim, n_actions=9)
        params = init_params(cfg, np.random.default_rng(1))
        out = encode_observation(np.random.default_rng(2).random(obs_dim), params, cfg)
        assert out.shape == (128,)


def test_encoder_matches_independent_matrix_math():
    cfg = tiny_config()
    rng = np.random.default_rng(3)
    params = init_params(cfg, rng)
    obs = rng.standard_normal(cfg.obs_dim)
    got = encode_observation(obs, params, cfg)
    h = np.maximum(obs @ params["enc.w1"].data + params["enc.b1"].data, 0.0)
    expected = np.maximum(h @ params["enc.w2"].data + params["enc.b2"].data, 0.0)
    assert np.array_equal(got, expected)


def test_encoder_rejects_wrong_length():
    cfg = tiny_config()
    params = init_params(cfg, np.random.default_rng(0))
    with pytest.raises(StructuralError):
        encode_observation(np.zeros(cfg.obs_dim + 1), params, cfg)


# --- adjacency ---------------------------------------------------------------

def test_adjacency_lone_agent():
    assert np.array_equal(build_adjacency(0, (), 3), [[1.0, 0.0, 0.0]])


def test_adjacency_rows_and_gather():
    c = build_adjacency(2, (0, 3), 4)
    assert np.array_equal(c, [[0, 0, 1, 0], [1, 0, 0, 0], [0, 0, 0, 1]])
    f = np.random.default_rng(4).standard_normal((4, 5))
    assert np.array_equal(c @ f, f[[2, 0, 3]])


def test_adjacency_gather_equals_row_gather_100_cases():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n = int(rng.integers(2, 12))
        i = int(rng.integers(n))
        others = [j for j in range(n) if j != i]
        rng.shuffle(others)
        nbrs = tuple(others[:int(rng.integers(0, min(4, n)))])
        c = build_adjacency(i, nbrs, n)
        f = rng.standard_normal((n, int(rng.integers(1, 9))))
        assert np.array_equal(c @ f, f[[i, *nbrs]])


def test_adjacency_errors():
    with pytest.raises(StructuralError):
        build_adjacency(5, (), 3)
    with pytest.raises(StructuralError):
        build_adjacency(1, (1,), 3)


# --- attention weights -------------------------------------------------------

def test_attention_single_entity():
    w = np.random.default_rng(6).standard_normal((4, 4))
    alpha = attention_weights(np.ones((1, 4)), w, w, 0.25)
    assert np.array_equal(alpha, [1.0])


def test_attention_tau_zero_uniform():
    rng = np.random.default_rng(7)
    local = rng.standard_normal((5, 4))
    alpha = attention_weights(local, rng.standard_normal((4, 4)),
                              rng.standard_normal((4, 4)), 0.0)
    assert np.allclose(alpha, 0.2, atol=1e-15)


def test_attention_hand_softmax():
    # identity projections, h_i=[1,0], h_j=[0,1], tau=1: softmax([1, 0])
    local = np.array([[1.0, 0.0], [0.0, 1.0]])
    alpha = attention_weights(local, np.eye(2), np.eye(2), 1.0)
    e = np.exp([1.0, 0.0])
    assert np.allclose(alpha, e / e.sum(), atol=1e-12)
    assert abs(alpha[0] - 0.7311) < 5e-4 and abs(alpha[1] - 0.2689) < 5e-4


def test_attention_rows_are_distributions():
    rng = np.random.default_rng(8)
    for _ in range(50):
        local = rng.standard_normal((int(rng.integers(1, 6)), 4)) * 3
        alpha = attention_weights(local, rng.standard_normal((4, 4)),
                                  rng.standard_normal((4, 4)), 0.25)
        assert abs(alpha.sum() - 1.0) < 1e-9
        assert np.all(alpha > 0)


# --- conv kernels ------------------------------------------------------------

def _hand_conv(local, lp, tau, heads, dim):
    """Scalar re-computation of the relation kernel, written long-hand."""
    k1 = local.shape[0]
    pieces = []
    alphas = []
    for m in range(heads):
        wq = lp["wq"][:, m * dim:(m + 1) * dim]
        wk = lp["wk"][:, m * dim:(m + 1) * dim]
        wv = lp["wv"][:, m * dim:(m + 1) * dim]
        e = np.empty(k1)
        for j in range(k1):
            e[j] = np.exp(tau * float((local[0] @ wq) @ (local[j] @ wk)))
        alpha = e / e.sum()
        out = np.zeros(dim)
        for j in range(k1):
            out += alpha[j] * (local[j] @ wv)
        pieces.append(out)
        alphas.append(alpha)
    mixed = np.concatenate(pieces)
    return np.maximum(mixed @ lp["mix.w"] + lp["mix.b"], 0.0), np.array(alphas)


def test_conv_forward_matches_hand_computation():
    cfg = tiny_config(conv_layers=1, reg_layer=1)
    rng = np.random.default_rng(9)
    params = init_params(cfg, rng)
    lp = layer_param_views(params, 1)
    local = rng.standard_normal((3, cfg.feature_dim))
    got, alphas = conv_forward(local, lp, cfg.tau, cfg.attention_heads, cfg.head_dim)
    want, want_alphas = _hand_conv(local, lp, cfg.tau, cfg.attention_heads,
                                   cfg.head_dim)
    assert np.allclose(got, want, atol=1e-12)
    assert np.allclose(alphas, want_alphas, atol=1e-12)


def test_conv_forward_single_entity_passthrough():
    # one entity, value/mix projections both identity, positive features
    cfg = tiny_config(conv_layers=1, reg_layer=1, attention_heads=1, head_dim=8)
    rng = np.random.default_rng(10)
    params = init_params(cfg, rng)
    lp = layer_param_views(params, 1)
    lp["wv"] = np.eye(8)
    lp["mix.w"] = np.eye(8)
    lp["mix.b"] = np.zeros(8)
    h = np.abs(rng.standard_normal((1, 8))) + 0.1
    out, alphas = conv_forward(h, lp, cfg.tau, 1, 8)
    assert np.allclose(out, h[0], atol=1e-12)
    assert np.array_equal(alphas, [[1.0]])


def test_mean_kernel_identical_rows():
    cfg = tiny_config(conv_layers=1, reg_layer=1)
    rng = np.random.default_rng(11)
    params = init_params(cfg, rng)
    lp = layer_param_views(params, 1)
    row = rng.standard_normal(cfg.feature_dim)
    stacked = np.tile(row, (4, 1))
    got = mean_kernel_forward(stacked, lp, cfg.attention_heads, cfg.head_dim)
    single = mean_kernel_forward(row[None, :], lp, cfg.attention_heads, cfg.head_dim)
    assert np.allclose(got, single, atol=1e-12)


def test_mean_kernel_equals_attention_at_tau_zero():
    cfg = tiny_config(conv_layers=1, reg_layer=1)
    rng = np.random.default_rng(12)
    params = init_params(cfg, rng)
    lp = layer_param_views(params, 1)
    local = rng.standard_normal((4, cfg.feature_dim))
    via_attention, _ = conv_forward(local, lp, 0.0, cfg.attention_heads, cfg.head_dim)
    via_mean = mean_kernel_forward(local, lp, cfg.attention_heads, cfg.head_dim)
    assert np.allclose(via_attention, via_mean, atol=1e-12)


def test_mean_kernel_matches_hand_mean_then_mlp():
    cfg = tiny_config(conv_layers=1, reg_layer=1)
    rng = np.random.default_rng(13)
    params = init_params(cfg, rng)
    lp = layer_param_views(params, 1)
    local = rng.standard_normal((3, cfg.feature_dim))
    got = mean_kernel_forward(local, lp, cfg.attention_heads, cfg.head_dim)
    mean_feat = local.mean(axis=0)
    want = np.maximum(mean_feat @ lp["wv"] @ lp["mix.w"] + lp["mix.b"], 0.0)
    assert np.allclose(got, want, atol=1e-12)


# --- full forward ------------------------------------------------------------

def test_q_input_widths():
    assert paper_dims_config().q_input_dim == 384
    assert paper_dims_config(conv_layers=1, reg_layer=1).q_input_dim == 256
    assert paper_dims_config(conv_layers=0).q_input_dim == 128


def test_forward_single_agent_no_neighbors():
    cfg = tiny_config()
    params = init_params(cfg, np.random.default_rng(14))
    net = GraphQNetwork(cfg)
    obs = np.random.default_rng(15).random((1, cfg.obs_dim))
    plan = plan_for_graph([()], cfg.neighbor_limit + 1)
    res = net.forward(obs, plan, params)
    assert res.q.data.shape == (1, cfg.n_actions)
    for att in res.attention:
        assert np.array_equal(att.data[0, :, 0], np.ones(cfg.attention_heads))
        assert np.array_equal(att.data[0, :, 1:], np.zeros((cfg.attention_heads, 3)))


def test_forward_deterministic():
    cfg = tiny_config()
    rng = np.random.default_rng(16)
    params = init_params(cfg, rng)
    net = GraphQNetwork(cfg)
    obs = rng.random((4, cfg.obs_dim))
    nbrs = [(1,), (0, 2), (1, 3), (2,)]
    q1 = net.q_values(obs, nbrs, params)
    q2 = net.q_values(obs, nbrs, params)
    assert np.array_equal(q1, q2)


def test_forward_matches_per_agent_reference():
    """Batched path equals composing the unbatched reference ops."""
    cfg = tiny_config()
    rng = np.random.default_rng(17)
    params = init_params(cfg, rng)
    net = GraphQNetwork(cfg)
    n = 5
    obs = rng.random((n, cfg.obs_dim))
    nbrs = [(1, 2), (0,), (4, 0, 1), (), (2, 3)]
    plan = plan_for_graph(nbrs, cfg.neighbor_limit + 1)
    res = net.forward(obs, plan, params)

    h = np.stack([encode_observation(obs[i], params, cfg) for i in range(n)])
    feats = [h]
    for layer in (1, 2):
        lp = layer_param_views(params, layer)
        prev = feats[-1]
        nxt = np.empty_like(prev)
        for i in range(n):
            local = prev[[i, *nbrs[i]]]
            nxt[i], _ = conv_forward(local, lp, cfg.tau, cfg.attention_heads,
                                     cfg.head_dim)
        feats.append(nxt)
    qin = np.concatenate(feats, axis=1)
    q_ref = qin @ params["q.w"].data + params["q.b"].data
    assert np.allclose(res.q.data, q_ref, atol=1e-10)


def test_permutation_invariance_100_instances():
    cfg = tiny_config()
    net = GraphQNetwork(cfg)
    rng = np.random.default_rng(18)
    worst = 0.0
    for _ in range(100):
        params = init_params(cfg, rng)
        n = int(rng.integers(2, 7))
        obs = rng.random((n, cfg.obs_dim))
        nbrs = []
        for i in range(n):
            others = [j for j in range(n) if j != i]
            rng.shuffle(others)
            nbrs.append(tuple(others[:int(rng.integers(0, min(4, n)))]))
        q1 = net.q_values(obs, nbrs, params)
        permuted = [tuple(rng.permutation(list(t))) for t in nbrs]
        q2 = net.q_values(obs, permuted, params)
        worst = max(worst, float(np.max(np.abs(q1 - q2))))
    assert worst < 1e-10, f"permutation changed outputs by {worst}"


def test_locality_two_hop():
    """Q of an agent is exactly unchanged by anything outside its 2-hop set."""
    cfg = tiny_config()
    rng = np.random.default_rng(19)
    params = init_params(cfg, rng)
    net = GraphQNetwork(cfg)
    # chain: 0-1-2-3-4; two-hop set of 0 is {0,1,2}
    nbrs = [(1,), (0, 2), (1, 3), (2, 4), (3,)]
    obs = rng.random((5, cfg.obs_dim))
    q1 = net.q_values(obs, nbrs, params)
    obs2 = obs.copy()
    obs2[3] = rng.random(cfg.obs_dim)
    obs2[4] = 0.0
    q2 = net.q_values(obs2, nbrs, params)
    assert np.array_equal(q1[0], q2[0])
    assert not np.array_equal(q1[3], q2[3])


def test_attention_maps_are_distributions():
    cfg = tiny_config()
    rng = np.random.default_rng(20)
    params = init_params(cfg, rng)
    net = GraphQNetwork(cfg)
    obs = rng.random((4, cfg.obs_dim))
    nbrs = [(1, 2, 3), (0,), (3, 0), ()]
    plan = plan_for_graph(nbrs, cfg.neighbor_limit + 1)
    res = net.forward(obs, plan, params)
    for layer, att in enumerate(res.attention):
        a = att.data
        assert np.max(np.abs(a.sum(axis=-1) - 1.0)) < 1e-9
        for i, t in enumerate(nbrs):
            valid = a[i, :, :len(t) + 1]
            padded = a[i, :, len(t) + 1:]
            assert np.all(valid > 0.0)
            assert np.array_equal(padded, np.zeros_like(padded))


def test_mean_variant_forward_runs():
    cfg = tiny_config(kernel="mean")
    rng = np.random.default_rng(21)
    params = init_params(cfg, rng)
    net = GraphQNetwork(cfg)
    obs = rng.random((3, cfg.obs_dim))
    q = net.q_values(obs, [(1,), (0, 2), ()], params)
    assert q.shape == (3, cfg.n_actions)
    assert "conv1.wq" not in params


# --- parameter container -----------------------------------------------------

def test_params_roundtrip_bit_exact():
    cfg = tiny_config()
    params = init_params(cfg, np.random.default_rng(22))
    buf = io.BytesIO()
    write_params(buf, params, cfg)
    buf.seek(0)
    loaded, loaded_cfg = read_params(buf)
    assert loaded_cfg == cfg
    assert loaded.names() == params.names()
    for name in params.names():
        assert np.array_equal(loaded[name].data, params[name].data)

    buf2 = io.BytesIO()
    write_params(buf2, loaded, loaded_cfg)
    assert buf.getvalue() == buf2.getvalue()
