"""Parameter-generating graph network: attention GN layers and the MLPs they use."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, DimensionError
from .graph import GraphBatch

ACTIVATIONS = ("leaky_relu", "tanh", "swish", "sigmoid")


class Module:
    """Minimal parameter container: subclasses register tensors and children."""

    def __init__(self):
        self._params = {}
        self._children = {}

    def add_param(self, name, value):
        t = T.Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, t in self._params.items():
            yield f"{prefix}{name}", t
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def num_parameters(self):
        return sum(t.size for t in self.parameters())

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None


def init_uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class MLP(Module):
    """Affine layers with ``activation`` between them and none after the last."""

    def __init__(self, widths, activation="leaky_relu", rng=None):
        super().__init__()
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ConfigError(f"MLP widths must list >= 2 positive sizes, got {widths}")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.widths = widths
        self.activation = activation
        self.weights = []
        self.biases = []
        for j, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
            self.weights.append(self.add_param(f"W{j}", init_uniform(rng, fi, (fi, fo))))
            self.biases.append(self.add_param(f"b{j}", init_uniform(rng, fi, (fo,))))

    @property
    def in_dim(self):
        return self.widths[0]

    @property
    def out_dim(self):
        return self.widths[-1]

    def __call__(self, x):
        x = T.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"MLP expects input width {self.in_dim}, got shape {x.shape}")
        return self.forward_from(T.linear(x, self.weights[0], self.biases[0]))

    def forward_from(self, pre):
        """Continue the forward pass from the first layer's pre-activation."""
        h = pre
        for W, b in zip(self.weights[1:], self.biases[1:]):
            h = T.linear(T.activation(self.activation, h), W, b)
        return h


def mlp_forward(mlp, x):
    return mlp(x)


class AttentionGNLayer(Module):
    """Graph-network layer with MLP edge, attention and node functions.

    Per edge ``e = (s, d)`` with input ``z_e = [h_s || h_d || e]``::

        m_e = edge_mlp(z_e)
        a_e = sigmoid(attn_mlp(z_e))
        agg_i = sum_{e: d = i} a_e * m_e
        h_i' = node_mlp([h_i || agg_i])

    The returned edge embedding is ``m_e``.
    """

    def __init__(self, node_in, edge_in, hidden, node_out, edge_out, activation="leaky_relu", rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        z = 2 * node_in + edge_in
        self.node_in, self.edge_in = node_in, edge_in
        self.node_out, self.edge_out = node_out, edge_out
        self.edge = self.add_child("edge", MLP([z, hidden, edge_out], activation, rng))
        self.attn = self.add_child("attn", MLP([z, hidden, 1], activation, rng))
        self.node = self.add_child("node", MLP([node_in + edge_out, hidden, node_out], activation, rng))

    def _edge_pre(self, mlp, h, e, src, dst):
        # concat-then-affine, split so the node blocks run per node, not per edge
        W, b = mlp.weights[0], mlp.biases[0]
        n = self.node_in
        from_src = T.gather_rows(T.matmul(h, W[:n]), src)
        from_dst = T.gather_rows(T.matmul(h, W[n:2 * n]), dst)
        return from_src + from_dst + T.linear(e, W[2 * n:], b)

    def __call__(self, g, h, e):
        if h.shape != (g.num_nodes, self.node_in):
            raise DimensionError(f"node embedding {h.shape} != ({g.num_nodes}, {self.node_in})")
        if e.shape != (g.num_edges, self.edge_in):
            raise DimensionError(f"edge embedding {e.shape} != ({g.num_edges}, {self.edge_in})")
        src, dst = g.src, g.dst
        m = self.edge.forward_from(self._edge_pre(self.edge, h, e, src, dst))
        a = T.sigmoid(self.attn.forward_from(self._edge_pre(self.attn, h, e, src, dst)))
        gated = m * T.matmul(a, np.ones((1, self.edge_out)))
        agg = T.segment_sum(gated, dst, g.num_nodes)
        h_new = self.node(T.concat([h, agg], axis=1))
        return h_new, m


def layer_forward(layer, g, node_emb, edge_emb):
    return layer(g, T.as_tensor(node_emb), T.as_tensor(edge_emb))


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 3
    hidden_dim: int = 128
    num_heads: int = 16
    activation: str = "leaky_relu"

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.num_heads < 1:
            raise ConfigError("num_heads must be >= 1")
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def node_out_dim(self):
        return self.num_heads

    @property
    def edge_out_dim(self):
        return self.num_heads

    def to_dict(self):
        return asdict(self)


class Encoder(Module):
    """Stack of attention GN layers; the last layer emits ``num_heads`` channels.

    Intermediate node and edge embeddings have width ``hidden_dim``.
    """

    def __init__(self, cfg, node_dim, edge_dim, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.node_dim, self.edge_dim = node_dim, edge_dim
        self.layers = []
        ni, ei = node_dim, edge_dim
        for k in range(cfg.num_layers):
            last = k == cfg.num_layers - 1
            no = cfg.num_heads if last else cfg.hidden_dim
            eo = cfg.num_heads if last else cfg.hidden_dim
            layer = AttentionGNLayer(ni, ei, cfg.hidden_dim, no, eo, cfg.activation, rng)
            self.layers.append(self.add_child(f"layer{k}", layer))
            ni, ei = no, eo

    def __call__(self, g):
        if isinstance(g, GraphBatch):
            g = g.merged
        if g.node_dim != self.node_dim or g.edge_dim != self.edge_dim:
            raise DimensionError(
                f"graph features ({g.node_dim}, {g.edge_dim}) do not match encoder "
                f"({self.node_dim}, {self.edge_dim})"
            )
        h, e = T.Tensor(g.node_feat), T.Tensor(g.edge_feat)
        for layer in self.layers:
            h, e = layer(g, h, e)
        return h, e


def encode(encoder, g):
    """``(node_out [p x M], edge_out [E x M])`` for graph ``g``."""
    return encoder(g)
