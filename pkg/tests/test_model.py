import numpy as np
import pytest

from cgsolver import tensor as T
from cgsolver.encoder import EncoderConfig
from cgsolver.exceptions import DimensionError
from cgsolver.graph import Graph, batch
from cgsolver.model import CGSModel, decode, forward
from cgsolver.solver import SolverConfig
from fd_oracle import central_grad, rel_err


def graph(rng, p, deg=2, node_dim=1):
    src = np.repeat(np.arange(p), deg)
    dst = rng.integers(0, p, size=p * deg)
    return Graph(p, np.stack([src, dst], axis=1), rng.normal(size=(p, node_dim)), rng.normal(size=(p * deg, 1)))


def model(heads=4, layers=2, hidden=8, seed=0, **solver):
    sol = SolverConfig(**{"tol": 1e-10, "max_iter": 200, **solver})
    return CGSModel(1, 1, EncoderConfig(layers, hidden, heads), sol, decoder_hidden=(8, 4), seed=seed)


def test_forward_shapes_and_result():
    g = graph(np.random.default_rng(0), 6)
    y, res = forward(model(), g)
    assert y.shape == (6, 1)
    assert res.H_star.shape == (6, 4)
    assert res.iterations >= 1


def test_direct_and_iterative_predictions_agree():
    rng = np.random.default_rng(1)
    g = graph(rng, 12, deg=3)
    m = model(seed=3)
    iterative = m.predict(g)
    y_direct, _ = m.forward(g, SolverConfig(tol=1e-6, mode="direct"))
    assert np.abs(iterative - y_direct.data).max() <= 1e-5


def test_batch_forward_equals_stacked_singles():
    rng = np.random.default_rng(2)
    gs = [graph(rng, p) for p in (3, 7, 5)]
    m = model()
    b = batch(gs)
    stacked = np.concatenate([m.predict(g) for g in gs])
    np.testing.assert_allclose(m.predict(b), stacked, atol=1e-9)


def test_zero_decoder_gives_zero_predictions():
    m = model()
    for t in m.decoder.parameters():
        t.data[...] = 0.0
    assert np.all(m.predict(graph(np.random.default_rng(3), 5)) == 0.0)


def test_decode_is_rowwise():
    rng = np.random.default_rng(4)
    g = graph(rng, 6)
    m = model()
    H = rng.normal(size=(6, 4))
    perm = rng.permutation(6)
    out = decode(H, g, m.decoder).data
    permuted = Graph(6, [], g.node_feat[perm])
    np.testing.assert_allclose(decode(H[perm], permuted, m.decoder).data, out[perm], atol=1e-14)


def test_decode_width_mismatch():
    g = graph(np.random.default_rng(5), 4)
    with pytest.raises(DimensionError, match="decoder"):
        decode(np.zeros((4, 3)), g, model(heads=4).decoder)


def test_output_affine():
    rng = np.random.default_rng(6)
    g = graph(rng, 5)
    m = model()
    raw = m.predict(g)
    m.calibrate([np.array([1.0, 3.0]), np.array([5.0])])
    assert m.target_shift == pytest.approx(3.0)
    assert m.target_scale == pytest.approx(np.sqrt(8 / 3))
    np.testing.assert_allclose(m.predict(g), 3.0 + np.sqrt(8 / 3) * raw, atol=1e-12)
    assert m.is_calibrated
    m.calibrate([np.full(4, 2.0)])
    assert (m.target_shift, m.target_scale) == (2.0, 1.0)


def test_full_forward_is_permutation_equivariant():
    rng = np.random.default_rng(7)
    g = graph(rng, 8)
    perm = rng.permutation(8)
    m = model()
    np.testing.assert_allclose(m.predict(g.permute(perm))[perm], m.predict(g), atol=1e-9)


@pytest.mark.parametrize("phi", ["identity", "tanh"])
def test_end_to_end_gradient_matches_finite_differences(phi):
    rng = np.random.default_rng(8)
    g = graph(rng, 5)
    m = model(heads=2, layers=1, hidden=6, seed=1, phi=phi, tol=1e-13, max_iter=400)
    w = rng.normal(size=(5, 1))

    def loss():
        y, _ = m.forward(g)
        return T.reduce_sum(T.mul(y, T.Tensor(w)))

    m.zero_grad()
    loss().backward()
    for name, t in m.named_parameters():
        def f():
            with T.no_grad():
                return float(loss().data)

        assert rel_err(t.grad, central_grad(f, t.data)) <= 1e-4, name


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    g = graph(rng, 6)
    m = model(seed=5, phi="leaky_relu", gamma=0.7)
    m.calibrate([rng.normal(5, 2, size=10)])
    path = tmp_path / "ckpt"
    m.save(path)
    back = CGSModel.load(path)
    assert back.config() == m.config()
    for (n1, a), (n2, b) in zip(m.named_parameters(), back.named_parameters()):
        assert n1 == n2 and a.data.tobytes() == b.data.tobytes()
    assert back.predict(g).tobytes() == m.predict(g).tobytes()


def test_load_state_dict_rejects_mismatch():
    m = model()
    state = m.state_dict()
    state.pop(next(iter(state)))
    with pytest.raises(DimensionError, match="missing"):
        m.load_state_dict(state)
    state = m.state_dict()
    key = next(iter(state))
    state[key] = np.zeros((1, 1))
    with pytest.raises(DimensionError):
        m.load_state_dict(state)


def test_same_seed_same_model():
    a, b = model(seed=4), model(seed=4)
    g = graph(np.random.default_rng(10), 6)
    assert a.predict(g).tobytes() == b.predict(g).tobytes()
    assert model(seed=5).predict(g).tobytes() != a.predict(g).tobytes()
