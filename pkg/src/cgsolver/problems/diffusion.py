"""Steady Darcy flow in random pore networks.

Pores are points in a cube, throats link each pore to its ``k`` nearest
neighbours.  A throat of radius ``r`` and length ``l`` has hydraulic
conductance ``pi r^4 / (8 mu l)``; interior pores satisfy flux balance
``sum_j g_ij (p_i - p_j) = 0`` and boundary pores are pinned.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from ..exceptions import ConfigError, SolverError, ValidationError
from ..graph import Graph, ProblemInstance

MAX_REGENERATIONS = 20


@dataclass(frozen=True)
class DiffusionSpec:
    num_pores: int = 50
    domain_width: float = 0.1
    diameter_low: float = 9.9e-3
    diameter_high: float = 10.1e-3
    mu: float = 1e-3
    boundary_pressure: float = 101_325.0
    knn: int = 4
    boundary_fraction: float = 0.1

    def __post_init__(self):
        if self.num_pores < 3:
            raise ConfigError("num_pores must be >= 3")
        if not 1 <= self.knn < self.num_pores:
            raise ConfigError(f"knn must lie in [1, num_pores), got {self.knn}")
        for name in ("domain_width", "diameter_low", "diameter_high", "mu", "boundary_pressure"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not self.diameter_low <= self.diameter_high:
            raise ConfigError("diameter_low must be <= diameter_high")
        if not 0 < self.boundary_fraction < 0.5:
            raise ConfigError("boundary_fraction must lie in (0, 0.5)")

    def to_dict(self):
        return asdict(self)


def throat_conductance(radius, length, mu):
    """Hagen-Poiseuille conductance of a cylindrical throat."""
    return np.pi * np.asarray(radius) ** 4 / (8.0 * mu * np.asarray(length))


def knn_edges(points, k):
    """Undirected k-nearest-neighbour pairs ``(i < j)``, each listed once."""
    tree = cKDTree(points)
    _, idx = tree.query(points, k=k + 1)
    i = np.repeat(np.arange(len(points)), k)
    j = idx[:, 1:].reshape(-1)
    pairs = np.stack([np.minimum(i, j), np.maximum(i, j)], axis=1)
    return np.unique(pairs, axis=0)


def diffusion_oracle(g, conductance, dirichlet):
    """Pressures solving the weighted-Laplacian system with pinned nodes.

    Pinned values are copied exactly; only the interior block is solved.

    ``g`` stores each undirected throat as two antiparallel edges;
    ``conductance`` has one entry per directed edge.  ``dirichlet`` maps
    node index to its prescribed pressure.
    """
    if not dirichlet:
        raise SolverError("at least one Dirichlet node is required")
    p = g.num_nodes
    cond = np.asarray(conductance, dtype=np.float64).reshape(-1)
    if cond.shape[0] != g.num_edges:
        raise ValidationError(f"{cond.shape[0]} conductances for {g.num_edges} edges")
    adj = coo_matrix((np.ones(g.num_edges), (g.src, g.dst)), shape=(p, p))
    n_comp, labels = connected_components(adj, directed=False)
    fixed = np.array(sorted(dirichlet), dtype=np.int64)
    pinned_comps = set(labels[fixed].tolist())
    if len(pinned_comps) != n_comp:
        raise SolverError("a connected component has no Dirichlet node; the system is singular")

    # conductances enter only through ratios; rescale for conditioning
    w = cond / cond.mean() if g.num_edges else cond
    L = np.zeros((p, p))
    np.add.at(L, (g.src, g.dst), -w)
    L[np.diag_indices(p)] -= L.sum(axis=1)
    pressure = np.zeros(p)
    pressure[fixed] = [dirichlet[i] for i in fixed.tolist()]
    free = np.setdiff1d(np.arange(p), fixed)
    if free.size:
        rhs = -L[np.ix_(free, fixed)] @ pressure[fixed]
        try:
            pressure[free] = np.linalg.solve(L[np.ix_(free, free)], rhs)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"singular pressure system: {exc}") from exc
    return pressure.reshape(-1, 1)


def interior_flux_residual(g, conductance, pressure, dirichlet):
    """Per interior node, ``|sum_j g_ij (p_i - p_j)| / sum_j g_ij``."""
    pr = np.asarray(pressure).reshape(-1)
    cond = np.asarray(conductance).reshape(-1)
    flux = np.zeros(g.num_nodes)
    total = np.zeros(g.num_nodes)
    np.add.at(flux, g.src, cond * (pr[g.src] - pr[g.dst]))
    np.add.at(total, g.src, cond)
    interior = np.ones(g.num_nodes, dtype=bool)
    interior[list(dirichlet)] = False
    return np.abs(flux[interior]) / np.maximum(total[interior], np.finfo(float).tiny)


def _build_network(spec, rng):
    pts = rng.uniform(0.0, spec.domain_width, size=(spec.num_pores, 3))
    diam = rng.uniform(spec.diameter_low, spec.diameter_high, size=spec.num_pores)
    pairs = knn_edges(pts, spec.knn)
    i, j = pairs[:, 0], pairs[:, 1]
    length = np.linalg.norm(pts[i] - pts[j], axis=1)
    radius = 0.5 * np.minimum(diam[i], diam[j])
    cond = throat_conductance(radius, length, spec.mu)
    edges = np.concatenate([pairs, pairs[:, ::-1]], axis=0)
    cond = np.concatenate([cond, cond])
    return pts, diam, edges, cond


def _is_connected(num_nodes, edges):
    adj = coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(num_nodes, num_nodes))
    return connected_components(adj, directed=False)[0] == 1


def generate_diffusion(spec, seed):
    """Random pore network with normalised steady pressures as targets."""
    seq = np.random.SeedSequence(seed)
    for attempt, child in enumerate(seq.spawn(MAX_REGENERATIONS)):
        rng = np.random.default_rng(child)
        pts, diam, edges, cond = _build_network(spec, rng)
        if _is_connected(spec.num_pores, edges):
            break
    else:
        raise ValidationError(f"no connected network after {MAX_REGENERATIONS} attempts (seed {seed})")

    n_b = max(1, int(round(spec.boundary_fraction * spec.num_pores)))
    order = np.argsort(pts[:, 0], kind="stable")
    inlet, outlet = order[:n_b], order[-n_b:]
    dirichlet = {int(i): spec.boundary_pressure for i in inlet}
    dirichlet.update({int(i): 0.0 for i in outlet})

    log_c = np.log(cond)
    std = log_c.std()
    edge_feat = ((log_c - log_c.mean()) / (std if std > 0 else 1.0)).reshape(-1, 1)
    node_feat = np.zeros((spec.num_pores, 2))
    node_feat[inlet] = [1.0, 1.0]
    node_feat[outlet] = [1.0, 0.0]

    g = Graph(spec.num_pores, edges, node_feat, edge_feat)
    pressure = diffusion_oracle(g, cond, dirichlet)
    target = pressure / pressure.max()
    meta = {
        "problem": "diffusion",
        "mu": spec.mu,
        "spec": spec.to_dict(),
        "seed": int(seed),
        "attempt": attempt,
        "inlet": sorted(int(i) for i in inlet),
        "outlet": sorted(int(i) for i in outlet),
        "conductance": cond.tolist(),
    }
    return ProblemInstance(g, target, meta)
