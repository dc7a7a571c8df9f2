"""Three-way gradient comparison: implicit adjoint, unrolled tape, finite differences.

Each case is a small random graph pushed through a one-layer encoder, the
fixed-point layer and a decoder.  The scalar loss is ``sum(Y * R)`` for a
fixed random ``R``, which exercises every output without special structure.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig
from .graph import Graph
from .model import CGSModel
from .solver import SolverConfig

GAMMAS = (0.3, 0.5, 0.7)
FD_STEP = 1e-6
# forward solves inside the checks run far below float64 noise of the FD step
TIGHT = dict(tol=1e-13, max_iter=400)


@dataclass
class GradcheckCase:
    num_nodes: int
    num_heads: int
    phi: str
    gamma: float
    err_implicit_unrolled: float
    err_implicit_fd: float
    err_unrolled_fd: float

    @property
    def max_error(self):
        return max(self.err_implicit_unrolled, self.err_implicit_fd, self.err_unrolled_fd)


def random_graph(rng, p, node_dim=2, edge_dim=2):
    """Random digraph on ``p`` nodes where every node has 1 to 3 successors."""
    edges = []
    for i in range(p):
        k = int(rng.integers(1, min(3, p) + 1))
        edges.extend((i, int(j)) for j in rng.choice(p, k, replace=False))
    return Graph(p, edges, rng.normal(size=(p, node_dim)), rng.normal(size=(len(edges), edge_dim)))


def _rel(a, b):
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def _loss(model, g, R, cfg):
    y, _ = model.forward(g, cfg)
    return T.reduce_sum(T.mul(y, T.Tensor(R)))


def _grads(model, g, R, cfg):
    model.zero_grad()
    _loss(model, g, R, cfg).backward()
    return np.concatenate([p.grad.reshape(-1) for p in model.parameters()])


def check_case(rng, p, num_heads, phi, gamma=None, n_coords=12):
    gamma = float(rng.choice(GAMMAS)) if gamma is None else gamma
    g = random_graph(rng, p)
    cfg = SolverConfig(gamma=gamma, phi=phi, **TIGHT)
    enc = EncoderConfig(num_layers=1, hidden_dim=8, num_heads=num_heads)
    model = CGSModel(g.node_dim, g.edge_dim, enc, cfg, decoder_hidden=(8,), rng=rng)
    R = rng.normal(size=(p, 1))

    implicit = _grads(model, g, R, cfg)
    unrolled = _grads(model, g, R, replace(cfg, backward_mode="unrolled"))

    params = model.parameters()
    flat = [(k, idx) for k, t in enumerate(params) for idx in np.ndindex(t.shape)]
    offsets = np.cumsum([0] + [t.size for t in params])
    pick = rng.choice(len(flat), size=min(n_coords, len(flat)), replace=False)
    fd, pos = [], []
    with T.no_grad():
        for c in pick:
            k, idx = flat[c]
            t = params[k]
            orig = t.data[idx]
            t.data[idx] = orig + FD_STEP
            up = float(_loss(model, g, R, cfg).data)
            t.data[idx] = orig - FD_STEP
            down = float(_loss(model, g, R, cfg).data)
            t.data[idx] = orig
            fd.append((up - down) / (2 * FD_STEP))
            pos.append(offsets[k] + np.ravel_multi_index(idx, t.shape))

        # one directional derivative over all parameters at once
        direction = rng.normal(size=implicit.shape)
        saved = [t.data.copy() for t in params]
        for sign, store in ((1.0, "up"), (-1.0, "down")):
            for t, s, lo, hi in zip(params, saved, offsets[:-1], offsets[1:]):
                t.data = s + sign * FD_STEP * direction[lo:hi].reshape(s.shape)
            val = float(_loss(model, g, R, cfg).data)
            if store == "up":
                up = val
            else:
                down = val
        for t, s in zip(params, saved):
            t.data = s
    fd_dir = (up - down) / (2 * FD_STEP)

    fd = np.array(fd + [fd_dir])
    pos = np.array(pos)

    def project(gr):
        return np.concatenate([gr[pos], [gr @ direction]])

    return GradcheckCase(
        p,
        num_heads,
        phi,
        gamma,
        _rel(implicit, unrolled),
        _rel(project(implicit), fd),
        _rel(project(unrolled), fd),
    )


def run_gradcheck(count=50, max_nodes=8, max_heads=4, phis=("identity", "leaky_relu"), seed=0):
    rng = np.random.default_rng(seed)
    cases = []
    for n in range(count):
        p = int(rng.integers(2, max_nodes + 1))
        m = int(rng.integers(1, max_heads + 1))
        cases.append(check_case(rng, p, m, phis[n % len(phis)]))
    return cases
