"""scikit-learn style wrapper: node-level regression on collections of graphs.

``X`` is a sequence of :class:`~cgsolver.graph.Graph` (or problem instances,
which carry their own targets) and ``y`` a matching sequence of per-node
target arrays.  Predictions come back as one array per graph.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.metrics import r2_score
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .encoder import EncoderConfig
from .exceptions import DimensionError, ValidationError
from .graph import Graph, ProblemInstance, batch
from .model import CGSModel
from .seeding import stream
from .solver import SolverConfig, build_maps, fixed_point
from .training import AdamState, cosine_lr, gradient_step


def check_graphs(X, y=None, node_dim=None, edge_dim=None):
    """Validate a graph collection; returns ``(graphs, targets or None)``.

    Instances supply targets when ``y`` is omitted.  Every graph must share
    feature widths (and match ``node_dim``/``edge_dim`` when given).
    """
    if isinstance(X, (Graph, ProblemInstance)):
        raise ValidationError("X must be a sequence of graphs, not a single graph")
    X = list(X)
    if not X:
        raise ValidationError("X is empty")
    graphs, targets = [], []
    for k, item in enumerate(X):
        if isinstance(item, ProblemInstance):
            graphs.append(item.graph)
            targets.append(item.node_target)
        elif isinstance(item, Graph):
            graphs.append(item)
            targets.append(None)
        else:
            raise ValidationError(f"X[{k}] is {type(item).__name__}, expected Graph or ProblemInstance")
    if y is not None:
        y = list(y)
        if len(y) != len(graphs):
            raise ValidationError(f"{len(graphs)} graphs but {len(y)} targets")
        targets = y
    widths = {(g.node_dim, g.edge_dim) for g in graphs}
    if len(widths) != 1:
        raise DimensionError(f"graphs have mixed feature widths {sorted(widths)}")
    nd, ed = widths.pop()
    if node_dim is not None and (nd, ed) != (node_dim, edge_dim):
        raise DimensionError(f"features ({nd}, {ed}) do not match the fitted ({node_dim}, {edge_dim})")
    if any(t is None for t in targets):
        return graphs, None
    out = []
    for k, (g, t) in enumerate(zip(graphs, targets)):
        t = np.asarray(t, dtype=np.float64)
        if t.size != g.num_nodes:
            raise DimensionError(f"target {k} has {t.size} values for {g.num_nodes} nodes")
        if not np.isfinite(t).all():
            raise ValidationError(f"target {k} contains NaN or Inf")
        out.append(t.reshape(-1, 1))
    return graphs, out


class CGSRegressor(RegressorMixin, TransformerMixin, BaseEstimator):
    """Convergent graph solver as a node-value regressor.

    ``transform`` returns the fixed-point embedding ``H*`` of every graph.
    """

    def __init__(
        self,
        num_heads=16,
        num_layers=3,
        hidden_dim=128,
        gamma=0.5,
        phi="identity",
        solver_mode="iterative",
        tol=1e-6,
        max_iter=50,
        decoder_hidden=(64, 32),
        n_steps=200,
        batch_size=32,
        lr=1e-3,
        lr_min=0.0,
        random_state=0,
    ):
        self.num_heads = num_heads
        self.num_layers = num_layers
        self.hidden_dim = hidden_dim
        self.gamma = gamma
        self.phi = phi
        self.solver_mode = solver_mode
        self.tol = tol
        self.max_iter = max_iter
        self.decoder_hidden = decoder_hidden
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.lr = lr
        self.lr_min = lr_min
        self.random_state = random_state

    def _configs(self):
        enc = EncoderConfig(self.num_layers, self.hidden_dim, self.num_heads)
        sol = SolverConfig(self.gamma, self.tol, self.max_iter, self.solver_mode, "implicit", self.phi)
        return enc, sol

    def fit(self, X, y=None):
        graphs, targets = check_graphs(X, y)
        if targets is None:
            raise ValidationError("fit needs targets: pass y or ProblemInstance objects")
        enc, sol = self._configs()
        seed = int(self.random_state or 0)
        model = CGSModel(
            graphs[0].node_dim,
            graphs[0].edge_dim,
            enc,
            sol,
            decoder_hidden=self.decoder_hidden,
            seed=seed,
            rng=stream(seed, "init"),
        )
        model.calibrate(targets)
        data = [ProblemInstance(g, t) for g, t in zip(graphs, targets)]
        order_rng = stream(seed, "batch")
        state = AdamState.for_params(model.parameters(), self.lr)
        size = min(int(self.batch_size), len(data))
        order, pos = order_rng.permutation(len(data)), 0
        self.loss_curve_ = []
        for step in range(int(self.n_steps)):
            if pos + size > len(order):
                order, pos = order_rng.permutation(len(data)), 0
            chunk = [data[i] for i in order[pos:pos + size]]
            pos += size
            lr = cosine_lr(step, self.n_steps, self.lr, self.lr_min)
            loss, _ = gradient_step(model, chunk, state, lr)
            self.loss_curve_.append(loss)
        self.model_ = model
        self.n_node_features_ = graphs[0].node_dim
        self.n_edge_features_ = graphs[0].edge_dim
        self.n_iter_ = int(self.n_steps)
        return self

    def _check(self, X):
        check_is_fitted(self, "model_")
        graphs, _ = check_graphs(X, None, self.n_node_features_, self.n_edge_features_)
        return graphs

    def predict(self, X):
        graphs = self._check(X)
        b = batch(graphs)
        return [p.reshape(-1) for p in b.split_rows(self.model_.predict(b))]

    def transform(self, X):
        graphs = self._check(X)
        b = batch(graphs)
        model = self.model_
        with T.no_grad():
            node_out, edge_out = model.encoder(b)
            maps = build_maps(b, node_out, edge_out, model.solver_cfg.gamma, model.solver_cfg.phi)
            H, _ = fixed_point(maps, model.solver_cfg)
        return b.split_rows(H.data)

    def score(self, X, y=None, sample_weight=None):
        """R^2 over all nodes of all graphs."""
        graphs, targets = check_graphs(X, y)
        if targets is None:
            raise ValidationError("score needs targets")
        pred = np.concatenate(self.predict(graphs))
        return float(r2_score(np.concatenate(targets).reshape(-1), pred, sample_weight=sample_weight))
