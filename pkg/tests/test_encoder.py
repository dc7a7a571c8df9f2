import numpy as np
import pytest

from cgsolver import tensor as T
from cgsolver.encoder import MLP, AttentionGNLayer, Encoder, EncoderConfig, encode, layer_forward, mlp_forward
from cgsolver.exceptions import ConfigError, DimensionError
from cgsolver.graph import Graph, batch
from fd_oracle import central_grad, rel_err


def random_graph(rng, p, e, node_dim=2, edge_dim=3):
    edges = rng.integers(0, p, size=(e, 2))
    return Graph(p, edges, rng.normal(size=(p, node_dim)), rng.normal(size=(e, edge_dim)))


def small_encoder(node_dim=2, edge_dim=3, layers=2, hidden=6, heads=3, seed=0):
    return Encoder(EncoderConfig(layers, hidden, heads), node_dim, edge_dim, np.random.default_rng(seed))


def test_mlp_zero_weights_give_zero_output():
    mlp = MLP([3, 4, 2])
    for t in mlp.parameters():
        t.data[...] = 0.0
    assert np.all(mlp_forward(mlp, np.ones((5, 3))).data == 0.0)


def test_single_identity_layer_reproduces_input():
    mlp = MLP([3, 3])
    mlp.weights[0].data[...] = np.eye(3)
    mlp.biases[0].data[...] = 0.0
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(mlp(x).data, x)


def test_mlp_width_mismatch():
    with pytest.raises(DimensionError):
        MLP([3, 2])(np.ones((2, 4)))


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    mlp = MLP([3, 5, 2], rng=rng)
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(4, 2))
    mlp.zero_grad()
    T.reduce_sum(T.mul(mlp(x), T.Tensor(w))).backward()
    for t in mlp.parameters():
        def f():
            with T.no_grad():
                return float((mlp(x).data * w).sum())

        assert rel_err(t.grad, central_grad(f, t.data)) <= 1e-5


def test_init_is_fan_in_uniform():
    mlp = MLP([400, 300], rng=np.random.default_rng(2))
    W = mlp.weights[0].data
    bound = 1 / np.sqrt(400)
    assert np.abs(W).max() <= bound
    assert np.abs(W).max() > 0.95 * bound


def test_parameter_count_is_function_of_widths():
    layer = AttentionGNLayer(2, 3, 8, 4, 5)
    z = 2 * 2 + 3
    expected = (z * 8 + 8 + 8 * 5 + 5) + (z * 8 + 8 + 8 + 1) + ((2 + 5) * 8 + 8 + 8 * 4 + 4)
    assert layer.num_parameters() == expected


def test_parameter_names_are_hierarchical():
    enc = small_encoder(layers=2)
    names = {n for n, _ in enc.named_parameters("encoder.")}
    assert "encoder.layer0.edge.W0" in names
    assert "encoder.layer1.attn.b1" in names
    assert "encoder.layer1.node.W1" in names


def test_layer_matches_explicit_formula():
    rng = np.random.default_rng(3)
    g = random_graph(rng, 5, 9)
    layer = AttentionGNLayer(2, 3, 6, 4, 5, rng=rng)
    h_new, m = layer_forward(layer, g, g.node_feat, g.edge_feat)

    def mlp_np(mlp, x):
        for j, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):
            x = x @ W.data + b.data
            if j < len(mlp.weights) - 1:
                x = np.where(x > 0, x, 0.01 * x)
        return x

    z = np.concatenate([g.node_feat[g.src], g.node_feat[g.dst], g.edge_feat], axis=1)
    m_ref = mlp_np(layer.edge, z)
    a_ref = 1 / (1 + np.exp(-mlp_np(layer.attn, z)))
    agg = np.zeros((5, 5))
    np.add.at(agg, g.dst, a_ref * m_ref)
    h_ref = mlp_np(layer.node, np.concatenate([g.node_feat, agg], axis=1))
    np.testing.assert_allclose(m.data, m_ref, atol=1e-12)
    np.testing.assert_allclose(h_new.data, h_ref, atol=1e-12)


def test_edgeless_graph_aggregates_zero():
    rng = np.random.default_rng(4)
    g = Graph(3, [], rng.normal(size=(3, 2)), np.zeros((0, 3)))
    layer = AttentionGNLayer(2, 3, 6, 4, 5, rng=rng)
    h_new, m = layer(g, T.Tensor(g.node_feat), T.Tensor(g.edge_feat))
    expected = layer.node(np.concatenate([g.node_feat, np.zeros((3, 5))], axis=1)).data
    np.testing.assert_array_equal(h_new.data, expected)
    assert m.shape == (0, 5)


def test_layer_dimension_mismatch():
    g = random_graph(np.random.default_rng(5), 3, 4)
    layer = AttentionGNLayer(3, 3, 4, 4, 4)
    with pytest.raises(DimensionError):
        layer(g, T.Tensor(g.node_feat), T.Tensor(g.edge_feat))


def test_encode_shapes_for_one_head():
    g = random_graph(np.random.default_rng(6), 3, 4)
    node_out, edge_out = encode(small_encoder(heads=1), g)
    assert node_out.shape == (3, 1)
    assert edge_out.shape == (4, 1)


@pytest.mark.parametrize("p", [1, 7, 40])
def test_output_width_is_independent_of_graph_size(p):
    g = random_graph(np.random.default_rng(p), p, 3 * p)
    node_out, edge_out = small_encoder(heads=5)(g)
    assert node_out.shape == (p, 5) and edge_out.shape == (3 * p, 5)


def test_encode_is_deterministic():
    g = random_graph(np.random.default_rng(7), 6, 12)
    a = small_encoder(seed=9)(g)
    b = small_encoder(seed=9)(g)
    assert a[0].data.tobytes() == b[0].data.tobytes()
    assert a[1].data.tobytes() == b[1].data.tobytes()


def test_permutation_equivariance():
    rng = np.random.default_rng(8)
    g = random_graph(rng, 6, 14)
    perm = rng.permutation(6)
    enc = small_encoder()
    n1, e1 = enc(g)
    n2, e2 = enc(g.permute(perm))
    np.testing.assert_allclose(n2.data[perm], n1.data, atol=1e-12)
    np.testing.assert_allclose(e2.data, e1.data, atol=1e-12)


def test_batched_forward_equals_stacked_singles():
    rng = np.random.default_rng(9)
    gs = [random_graph(rng, p, 2 * p) for p in (3, 5, 4)]
    enc = small_encoder()
    nb, eb = enc(batch(gs))
    singles = [enc(g) for g in gs]
    np.testing.assert_allclose(nb.data, np.concatenate([s[0].data for s in singles]), atol=1e-12)
    np.testing.assert_allclose(eb.data, np.concatenate([s[1].data for s in singles]), atol=1e-12)


def test_feature_width_mismatch():
    g = random_graph(np.random.default_rng(10), 3, 3, node_dim=4)
    with pytest.raises(DimensionError):
        small_encoder()(g)


def test_encoder_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    g = random_graph(rng, 4, 7)
    enc = small_encoder(layers=2, hidden=4, heads=2, seed=12)
    wn, we = rng.normal(size=(4, 2)), rng.normal(size=(7, 2))

    def loss():
        n, e = enc(g)
        return T.add(T.reduce_sum(T.mul(n, T.Tensor(wn))), T.reduce_sum(T.mul(e, T.Tensor(we))))

    enc.zero_grad()
    loss().backward()
    for t in enc.parameters():
        def f():
            with T.no_grad():
                return float(loss().data)

        assert rel_err(t.grad, central_grad(f, t.data)) <= 1e-4


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(num_heads=0)
    with pytest.raises(ConfigError):
        EncoderConfig(num_layers=0)
    cfg = EncoderConfig()
    assert (cfg.num_layers, cfg.hidden_dim, cfg.node_out_dim, cfg.edge_out_dim) == (3, 128, 16, 16)
