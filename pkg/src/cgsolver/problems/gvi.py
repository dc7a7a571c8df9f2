"""Graph value iteration: deterministic MDPs encoded as graphs.

States are nodes, allowed transitions are edges and the edge feature is the
transition reward.  Targets are optimal state values under the Bellman
optimality backup ``V_i = max_{j in N(i)} r_ij + alpha * V_j``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..exceptions import ConfigError, ValidationError
from ..graph import Graph, ProblemInstance


@dataclass(frozen=True)
class GviSpec:
    n_s: int = 20
    n_a: int = 5
    alpha: float = 0.9
    reward_low: float = -1.0
    reward_high: float = 1.0
    vi_tol: float = 1e-3

    def __post_init__(self):
        if self.n_s < 1:
            raise ConfigError("n_s must be >= 1")
        if not 1 <= self.n_a <= self.n_s:
            raise ConfigError(f"n_a must lie in [1, n_s={self.n_s}], got {self.n_a}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.reward_low < self.reward_high:
            raise ConfigError("reward_low must be < reward_high")
        if not self.vi_tol > 0:
            raise ConfigError("vi_tol must be positive")

    def to_dict(self):
        return asdict(self)


def mdp_graph(num_states, edges, rewards):
    """Graph with constant node feature 1 and edge feature = reward."""
    rewards = np.asarray(rewards, dtype=np.float64).reshape(-1, 1)
    return Graph(num_states, edges, np.ones((num_states, 1)), rewards)


def _successor_table(g):
    """Padded ``(p, k)`` arrays of successors, rewards and edge ids."""
    deg = g.out_degrees
    if g.num_nodes and deg.min() == 0:
        sinks = np.flatnonzero(deg == 0).tolist()
        raise ValidationError(f"states without outgoing transitions: {sinks[:10]}")
    order = np.argsort(g.src, kind="stable")
    k = int(deg.max()) if g.num_nodes else 0
    succ = np.zeros((g.num_nodes, k), dtype=np.int64)
    eid = np.full((g.num_nodes, k), -1, dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(deg)[:-1]])
    slot = np.arange(len(order)) - starts[g.src[order]]
    succ[g.src[order], slot] = g.dst[order]
    eid[g.src[order], slot] = order
    reward = np.full((g.num_nodes, k), -np.inf)
    reward[g.src[order], slot] = g.edge_feat[order, 0]
    return succ, reward, eid


def bellman_backup(g, V, alpha, table=None):
    succ, reward, _ = table or _successor_table(g)
    V = np.asarray(V, dtype=np.float64).reshape(-1)
    return (reward + alpha * V[succ]).max(axis=1)


def value_iteration_oracle(g, alpha, tol, max_iter=100_000, return_iterates=False):
    """Value iteration from ``V = 0`` until the sup-norm change drops below ``tol``."""
    table = _successor_table(g)
    V = np.zeros(g.num_nodes)
    iterates = [V]
    for _ in range(max_iter):
        V_next = bellman_backup(g, V, alpha, table)
        change = np.abs(V_next - V).max(initial=0.0)
        V = V_next
        if return_iterates:
            iterates.append(V)
        if change < tol:
            break
    V = V.reshape(-1, 1)
    return (V, iterates) if return_iterates else V


def policy_values(g, policy_edges, alpha):
    """Exact value of a deterministic policy by a direct linear solve."""
    p = g.num_nodes
    P = np.zeros((p, p))
    P[np.arange(p), g.dst[policy_edges]] = 1.0
    r = g.edge_feat[policy_edges, 0]
    return np.linalg.solve(np.eye(p) - alpha * P, r).reshape(-1, 1)


def greedy_policy_edges(g, V, alpha):
    """Edge index of the greedy successor per state; ties go to the lowest edge index."""
    succ, reward, eid = _successor_table(g)
    V = np.asarray(V, dtype=np.float64).reshape(-1)
    q = reward + alpha * V[succ]
    best = q.max(axis=1, keepdims=True)
    cand = np.where(q == best, eid, np.iinfo(np.int64).max)
    cand = np.where(eid >= 0, cand, np.iinfo(np.int64).max)
    return cand.min(axis=1)


def greedy_policy(g, V, alpha):
    """Chosen successor state per node under the greedy policy for ``V``."""
    return g.dst[greedy_policy_edges(g, V, alpha)]


def policy_iteration_oracle(g, alpha, max_iter=1000):
    """Exact optimal values by policy iteration (independent of value iteration)."""
    succ, reward, eid = _successor_table(g)
    rows = np.arange(g.num_nodes)
    slot = np.zeros(g.num_nodes, dtype=np.int64)
    for _ in range(max_iter):
        V = policy_values(g, eid[rows, slot], alpha)
        q = reward + alpha * V.reshape(-1)[succ]
        best = q.argmax(axis=1)
        improve = q[rows, best] > q[rows, slot] + 1e-12
        if not improve.any():
            break
        slot[improve] = best[improve]
    return V


def generate_gvi(spec, seed):
    """Random MDP graph with ``n_a`` distinct successors per state."""
    rng = np.random.default_rng(seed)
    src = np.repeat(np.arange(spec.n_s), spec.n_a)
    dst = np.concatenate([rng.choice(spec.n_s, spec.n_a, replace=False) for _ in range(spec.n_s)])
    rewards = rng.uniform(spec.reward_low, spec.reward_high, size=len(src))
    g = mdp_graph(spec.n_s, np.stack([src, dst], axis=1), rewards)
    V = value_iteration_oracle(g, spec.alpha, spec.vi_tol)
    meta = {"problem": "gvi", "alpha": spec.alpha, "spec": spec.to_dict(), "seed": int(seed)}
    return ProblemInstance(g, V, meta)
