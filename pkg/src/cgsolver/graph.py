"""Directed graphs with per-node / per-edge features, batching and JSONL I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .exceptions import DimensionError, ParseError, ValidationError


def _frozen(arr, dtype, ndim):
    arr = np.array(arr, dtype=dtype)
    if ndim == 2 and arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 0)
    arr.flags.writeable = False
    return arr


class Graph:
    """Immutable directed graph.

    Parameters
    ----------
    num_nodes : int
    edges : array-like of shape (E, 2)
        ``(src, dst)`` pairs. Parallel edges and self-loops are allowed.
    node_feat : array-like of shape (num_nodes, f_v)
    edge_feat : array-like of shape (E, f_e)
    """

    def __init__(self, num_nodes, edges, node_feat=None, edge_feat=None):
        num_nodes = int(num_nodes)
        if num_nodes < 0:
            raise ValidationError("num_nodes must be non-negative")
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2) if len(edges) else np.zeros((0, 2), np.int64)
        if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
            raise ValidationError(f"edge endpoint out of range for {num_nodes} nodes")
        if node_feat is None:
            node_feat = np.ones((num_nodes, 1))
        if edge_feat is None:
            edge_feat = np.ones((len(edges), 1))
        node_feat = np.asarray(node_feat, dtype=np.float64)
        edge_feat = np.asarray(edge_feat, dtype=np.float64)
        if node_feat.ndim == 1:
            node_feat = node_feat.reshape(num_nodes, -1) if num_nodes else node_feat.reshape(0, 1)
        if edge_feat.ndim == 1:
            edge_feat = edge_feat.reshape(len(edges), -1) if len(edges) else edge_feat.reshape(0, 1)
        if node_feat.shape[0] != num_nodes:
            raise DimensionError(f"node_feat has {node_feat.shape[0]} rows for {num_nodes} nodes")
        if edge_feat.shape[0] != len(edges):
            raise DimensionError(f"edge_feat has {edge_feat.shape[0]} rows for {len(edges)} edges")
        self.num_nodes = num_nodes
        self.edges = _frozen(edges, np.int64, 2)
        self.node_feat = _frozen(node_feat, np.float64, 2)
        self.edge_feat = _frozen(edge_feat, np.float64, 2)

    @property
    def num_edges(self):
        return self.edges.shape[0]

    @property
    def src(self):
        return self.edges[:, 0]

    @property
    def dst(self):
        return self.edges[:, 1]

    @property
    def node_dim(self):
        return self.node_feat.shape[1]

    @property
    def edge_dim(self):
        return self.edge_feat.shape[1]

    @cached_property
    def out_degrees(self):
        deg = np.bincount(self.src, minlength=self.num_nodes)
        deg.flags.writeable = False
        return deg

    @cached_property
    def out_adjacency(self):
        """Per node, the list of ``(neighbor, edge_index)`` for outgoing edges."""
        adj = [[] for _ in range(self.num_nodes)]
        for k, (s, d) in enumerate(self.edges.tolist()):
            adj[s].append((d, k))
        return adj

    def out_degree(self, i):
        if not 0 <= i < self.num_nodes:
            raise IndexError(f"node {i} out of range for {self.num_nodes} nodes")
        return int(self.out_degrees[i])

    def permute(self, perm):
        """Relabel node ``i`` as ``perm[i]``; edge order is preserved."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return Graph(self.num_nodes, perm[self.edges], self.node_feat[inv], self.edge_feat)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.num_nodes == other.num_nodes
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.node_feat, other.node_feat)
            and np.array_equal(self.edge_feat, other.edge_feat)
        )

    __hash__ = None

    def __repr__(self):
        return (
            f"Graph(num_nodes={self.num_nodes}, num_edges={self.num_edges}, "
            f"node_dim={self.node_dim}, edge_dim={self.edge_dim})"
        )


@dataclass(frozen=True)
class GraphBatch:
    """Disjoint union of graphs with bookkeeping to split results back."""

    graphs: tuple
    node_offsets: np.ndarray
    edge_offsets: np.ndarray
    merged: Graph

    @property
    def num_graphs(self):
        return len(self.graphs)

    @property
    def sizes(self):
        return np.array([g.num_nodes for g in self.graphs], dtype=np.int64)

    def node_slices(self):
        return [slice(o, o + g.num_nodes) for o, g in zip(self.node_offsets, self.graphs)]

    def graph_index(self):
        """Component id of every node of the merged graph."""
        return np.repeat(np.arange(self.num_graphs), self.sizes)

    def split_rows(self, arr):
        return [arr[s] for s in self.node_slices()]


def batch(graphs):
    graphs = tuple(graphs)
    if not graphs:
        raise ValueError("batch() needs at least one graph")
    nd, ed = graphs[0].node_dim, graphs[0].edge_dim
    for g in graphs[1:]:
        if g.node_dim != nd or g.edge_dim != ed:
            raise DimensionError(
                f"mixed feature widths in batch: ({nd}, {ed}) vs ({g.node_dim}, {g.edge_dim})"
            )
    n_sizes = np.array([g.num_nodes for g in graphs], dtype=np.int64)
    e_sizes = np.array([g.num_edges for g in graphs], dtype=np.int64)
    node_offsets = np.concatenate([[0], np.cumsum(n_sizes)[:-1]]).astype(np.int64)
    edge_offsets = np.concatenate([[0], np.cumsum(e_sizes)[:-1]]).astype(np.int64)
    edges = np.concatenate([g.edges + o for g, o in zip(graphs, node_offsets)], axis=0)
    merged = Graph(
        int(n_sizes.sum()),
        edges,
        np.concatenate([g.node_feat for g in graphs], axis=0),
        np.concatenate([g.edge_feat for g in graphs], axis=0),
    )
    return GraphBatch(graphs, node_offsets, edge_offsets, merged)


def as_batch(g):
    return g if isinstance(g, GraphBatch) else batch([g])


def unbatch(b):
    out = []
    for g, no, eo in zip(b.graphs, b.node_offsets, b.edge_offsets):
        m = b.merged
        edges = m.edges[eo:eo + g.num_edges] - no
        out.append(
            Graph(
                g.num_nodes,
                edges,
                m.node_feat[no:no + g.num_nodes],
                m.edge_feat[eo:eo + g.num_edges],
            )
        )
    return out


@dataclass
class ProblemInstance:
    """A graph with its ground-truth node targets and generator metadata."""

    graph: Graph
    node_target: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.node_target, dtype=np.float64).reshape(-1, 1)
        if t.shape[0] != self.graph.num_nodes:
            raise DimensionError(f"{t.shape[0]} targets for {self.graph.num_nodes} nodes")
        if not np.isfinite(t).all():
            raise ValidationError("node targets must be finite")
        self.node_target = t

    @property
    def problem(self):
        return self.meta.get("problem")


def instance_to_record(inst):
    g = inst.graph
    return {
        "num_nodes": g.num_nodes,
        "edges": g.edges.tolist(),
        "node_feat": g.node_feat.tolist(),
        "edge_feat": g.edge_feat.tolist(),
        "node_target": inst.node_target.reshape(-1).tolist(),
        "meta": inst.meta,
    }


def record_to_instance(rec, line=None):
    try:
        p = int(rec["num_nodes"])
        edges = rec["edges"]
        node_feat = np.asarray(rec["node_feat"], dtype=np.float64)
        edge_feat = np.asarray(rec["edge_feat"], dtype=np.float64)
        target = rec["node_target"]
        meta = rec.get("meta", {})
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed record ({exc!r})", line) from exc
    if len(edges):
        arr = np.asarray(edges)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ParseError("edges must be [src, dst] pairs", line)
        if arr.max() >= p or arr.min() < 0:
            raise ValidationError(f"line {line}: edge endpoint out of range for {p} nodes")
    if node_feat.size == 0:
        node_feat = node_feat.reshape(p, 0)
    if edge_feat.size == 0:
        edge_feat = edge_feat.reshape(len(edges), 0)
    try:
        return ProblemInstance(Graph(p, edges, node_feat, edge_feat), target, meta)
    except DimensionError as exc:
        raise ParseError(str(exc), line) from exc


def write_jsonl(path, instances):
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_to_record(inst), separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path):
    out = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", lineno) from exc
        if not isinstance(rec, dict):
            raise ParseError("record must be a JSON object", lineno)
        out.append(record_to_instance(rec, lineno))
    return out
