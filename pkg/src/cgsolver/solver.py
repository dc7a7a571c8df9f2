"""Contracting linear maps built from graphs, their fixed points and gradients.

For every head ``m`` the map is ``T_m(H) = phi(gamma * A_m H + B_m)`` with

    [A_m]_ij = sigmoid(edge_logit_e[m]) / outdeg(i)   for each edge e = (i, j)

so every row of ``A_m`` sums to at most one and ``T_m`` is a
``gamma``-contraction in the infinity norm.  ``A_m`` is never materialised
on the iterative path: products are computed edge-wise, which keeps batches
of many graphs cheap.  The direct path assembles dense blocks per graph.

Backward follows the implicit function theorem.  The forward solve runs off
the tape; one extra application of the map is recorded at the fixed point
and a hook on its output swaps the incoming gradient ``g`` for the solution
of the adjoint fixed point ``y = gamma * (D A)^T y + g`` (``D`` the
activation slope at the fixed point).  Memory does not grow with the number
of forward iterations.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, ConvergenceWarning, SolverError, UnsupportedModeError
from .graph import GraphBatch

PHIS = ("identity", "leaky_relu", "tanh", "swish")
# global Lipschitz constant of each map activation; swish peaks at x ~ 2.3994,
# so its maps contract with factor ~1.1 * gamma rather than gamma
PHI_LIPSCHITZ = {"identity": 1.0, "leaky_relu": 1.0, "tanh": 1.0, "swish": 1.0998393201288670}
MODES = ("direct", "iterative")
BACKWARD_MODES = ("implicit", "unrolled")


def _check_gamma(gamma):
    if not 0.0 < gamma < 1.0:
        raise ConfigError(f"gamma must lie in (0, 1), got {gamma}")


@dataclass(frozen=True)
class SolverConfig:
    gamma: float = 0.5
    tol: float = 1e-6
    max_iter: int = 50
    mode: str = "iterative"
    backward_mode: str = "implicit"
    phi: str = "identity"

    def __post_init__(self):
        _check_gamma(self.gamma)
        if not self.tol > 0:
            raise ConfigError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ConfigError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.backward_mode not in BACKWARD_MODES:
            raise ConfigError(f"backward_mode must be one of {BACKWARD_MODES}")
        if self.phi not in PHIS:
            raise ConfigError(f"phi must be one of {PHIS}, got {self.phi!r}")
        if self.mode == "direct" and self.phi != "identity":
            raise ConfigError("direct mode needs phi='identity'")

    def to_dict(self):
        return asdict(self)


@dataclass
class FixedPointResult:
    H_star: np.ndarray
    iterations_per_head: np.ndarray
    final_residuals: np.ndarray
    converged: bool = True

    @property
    def iterations(self):
        return int(self.iterations_per_head.max(initial=0))


@dataclass
class ContractingMapSet:
    """Per-head transition weights (edge-wise) and biases.

    ``weights[e, m]`` is the entry ``[A_m]_{src_e, dst_e}`` contributed by
    edge ``e``; parallel edges add up.  ``bias`` is ``B`` with one column per
    head.  Both are tensors so the construction stays on the tape.
    """

    num_nodes: int
    src: np.ndarray
    dst: np.ndarray
    weights: T.Tensor
    bias: T.Tensor
    gamma: float
    phi: str = "identity"
    sizes: np.ndarray = None
    _scatter: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        _check_gamma(self.gamma)
        if self.phi not in PHIS:
            raise ConfigError(f"phi must be one of {PHIS}, got {self.phi!r}")
        if self.sizes is None:
            self.sizes = np.array([self.num_nodes], dtype=np.int64)

    @property
    def num_heads(self):
        return self.bias.shape[1]

    @property
    def num_edges(self):
        return len(self.src)

    def _rows(self, which):
        if which not in self._scatter:
            ids = self.src if which == "src" else self.dst
            self._scatter[which] = T.scatter_matrix(ids, self.num_nodes)
        return self._scatter[which]

    def matvec(self, H):
        """``A_m H_m`` for every head at once (``H`` is ``p x M``)."""
        if self.num_edges == 0:
            return np.zeros_like(H)
        return np.asarray(self._rows("src") @ (self.weights.data * H[self.dst]))

    def rmatvec(self, Y):
        """``A_m^T Y_m`` for every head at once."""
        if self.num_edges == 0:
            return np.zeros_like(Y)
        return np.asarray(self._rows("dst") @ (self.weights.data * Y[self.src]))

    def pre_activation(self, H):
        return self.gamma * self.matvec(H) + self.bias.data

    def apply(self, H):
        return T.activation_apply(self.phi, self.pre_activation(H))

    def dense(self):
        """Dense ``A`` of shape ``(M, p, p)``; for tests and small graphs."""
        A = np.zeros((self.num_heads, self.num_nodes, self.num_nodes))
        for m in range(self.num_heads):
            np.add.at(A[m], (self.src, self.dst), self.weights.data[:, m])
        return A

    def components(self):
        """Node offsets and sizes of the independent graph blocks."""
        offsets = np.concatenate([[0], np.cumsum(self.sizes)[:-1]]).astype(np.int64)
        return offsets, self.sizes


def build_maps(g, node_out, edge_out, gamma, phi="identity"):
    """Assemble the contracting maps of every head from encoder outputs."""
    _check_gamma(gamma)
    sizes = None
    if isinstance(g, GraphBatch):
        sizes = g.sizes
        g = g.merged
    node_out, edge_out = T.as_tensor(node_out), T.as_tensor(edge_out)
    if node_out.shape[0] != g.num_nodes or edge_out.shape[0] != g.num_edges:
        raise ConfigError(
            f"encoder outputs {node_out.shape}/{edge_out.shape} do not fit graph "
            f"with {g.num_nodes} nodes and {g.num_edges} edges"
        )
    if node_out.shape[1] != edge_out.shape[1]:
        raise ConfigError("node and edge outputs must have the same number of heads")
    deg = g.out_degrees[g.src].astype(np.float64)
    inv_deg = np.repeat((1.0 / np.maximum(deg, 1.0))[:, None], edge_out.shape[1], axis=1)
    weights = T.sigmoid(edge_out) * inv_deg
    return ContractingMapSet(g.num_nodes, g.src.copy(), g.dst.copy(), weights, node_out, gamma, phi, sizes)


# forward solvers -----------------------------------------------------------
def _dense_blocks(maps, transpose=False, scale=None):
    """Yield ``(node_index, I - gamma * A)`` blocks grouped by graph size.

    The block array has shape ``(G, M, p, p)``.  ``scale`` (``p x M``)
    multiplies the rows of ``A`` first (``D A``); ``transpose`` returns the
    transposed system.
    """
    offsets, sizes = maps.components()
    comp = np.repeat(np.arange(len(sizes)), sizes)
    local = np.arange(maps.num_nodes) - offsets[comp]
    edge_comp = comp[maps.src]
    w = maps.weights.data
    if scale is not None:
        w = w * scale[maps.src]
    M = maps.num_heads
    for p in np.unique(sizes):
        members = np.flatnonzero(sizes == p)
        slot = np.full(len(sizes), -1)
        slot[members] = np.arange(len(members))
        sel = np.flatnonzero(slot[edge_comp] >= 0)
        A = np.zeros((len(members), p, p, M))
        np.add.at(A, (slot[edge_comp[sel]], local[maps.src[sel]], local[maps.dst[sel]]), w[sel])
        A = A.transpose(0, 3, 1, 2)
        if transpose:
            A = A.transpose(0, 1, 3, 2)
        mat = np.eye(p) - maps.gamma * A
        nodes = (offsets[members][:, None] + np.arange(p)[None, :])
        yield nodes, mat


def _dense_solve(maps, rhs, transpose=False, scale=None):
    out = np.empty_like(rhs)
    for nodes, mat in _dense_blocks(maps, transpose, scale):
        b = rhs[nodes].transpose(0, 2, 1)[..., None]  # (G, M, p, 1)
        try:
            x = np.linalg.solve(mat, b)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"singular fixed-point system: {exc}") from exc
        if not np.isfinite(x).all():
            raise SolverError("non-finite solution from dense solve")
        out[nodes] = x[..., 0].transpose(0, 2, 1)
    return out


def solve_direct(maps):
    """Exact fixed point ``(I - gamma A_m)^{-1} B_m`` by dense LU per graph."""
    if maps.phi != "identity":
        raise UnsupportedModeError("direct solve is only defined for the linear map (phi='identity')")
    H = _dense_solve(maps, maps.bias.data)
    resid = np.abs(H - maps.apply(H)).max(axis=0) if maps.num_nodes else np.zeros(maps.num_heads)
    return FixedPointResult(H, np.zeros(maps.num_heads, dtype=np.int64), resid)


def _iterate(step, x0, tol, max_iter, what):
    """Run ``x <- step(x)`` until every head's sup-norm change is below ``tol``.

    Returns the last iterate, per-head counts of map applications and the
    last per-head change.
    """
    x = x0
    M = x0.shape[1]
    counts = np.full(M, max_iter, dtype=np.int64)
    done = np.zeros(M, dtype=bool)
    diff = np.full(M, np.inf)
    for n in range(1, max_iter + 1):
        x_next = step(x)
        diff = np.abs(x_next - x).max(axis=0) if x.shape[0] else np.zeros(M)
        x = x_next
        newly = (diff < tol) & ~done
        counts[newly] = n
        done |= newly
        if done.all():
            break
    converged = bool(done.all())
    if not converged and (diff > 10 * tol).any():
        warnings.warn(
            f"{what} did not converge in {max_iter} iterations (residual {diff.max():.3e})",
            ConvergenceWarning,
            stacklevel=3,
        )
    return x, counts, diff, converged


def solve_iterative(maps, cfg=None, H0=None):
    """Fixed point by repeated application of the map, starting from zero."""
    cfg = cfg or SolverConfig(gamma=maps.gamma)
    x0 = np.zeros((maps.num_nodes, maps.num_heads)) if H0 is None else np.array(H0, dtype=np.float64)
    H, counts, diff, ok = _iterate(maps.apply, x0, cfg.tol, cfg.max_iter, "fixed-point iteration")
    return FixedPointResult(H, counts, diff, ok)


def solve(maps, cfg):
    if cfg.mode == "direct":
        return solve_direct(maps)
    return solve_iterative(maps, cfg)


def contraction_factor(gamma, phi="identity"):
    """Sup-norm contraction factor of ``phi(gamma * A H + B)``."""
    return gamma * PHI_LIPSCHITZ[phi]


def geometric_iteration_bound(gamma, tol, initial_step):
    """Upper bound on map applications for a ``gamma``-contraction."""
    if initial_step <= tol:
        return 1
    return math.ceil(math.log(tol / initial_step) / math.log(gamma)) + 2


# backward ------------------------------------------------------------------
def solve_adjoint(maps, pre, grad, cfg=None):
    """Solve ``y = gamma * (D A)^T y + grad`` for every head.

    ``pre`` is the pre-activation at the fixed point; ``D`` is the
    activation slope there (identity for linear maps).
    """
    cfg = cfg or SolverConfig(gamma=maps.gamma)
    d = T.activation_grad(maps.phi, pre)
    if cfg.mode == "direct":
        return _dense_solve(maps, grad, transpose=True, scale=d)

    def step(y):
        return maps.gamma * maps.rmatvec(d * y) + grad

    y, _, _, _ = _iterate(step, np.zeros_like(grad), cfg.tol, cfg.max_iter, "adjoint iteration")
    return y


def implicit_backward(maps, H_star, incoming_grad, cfg=None):
    """Gradients of the loss w.r.t. ``A_m`` and ``B_m`` from ``dL/dH*``.

    Returns ``(grad_A, grad_B)`` with ``grad_A`` dense ``(M, p, p)`` (zero
    off the edge support) and ``grad_B`` shaped like ``H_star``.
    """
    grad_pre = _pre_activation_grad(maps, H_star, incoming_grad, cfg)
    support = np.zeros((maps.num_nodes, maps.num_nodes), dtype=bool)
    support[maps.src, maps.dst] = True
    grad_A = maps.gamma * np.einsum("im,jm->mij", grad_pre, H_star) * support
    return grad_A, grad_pre


def implicit_edge_grads(maps, H_star, incoming_grad, cfg=None):
    """Edge-wise form of :func:`implicit_backward`: ``(grad_weights, grad_B)``."""
    grad_pre = _pre_activation_grad(maps, H_star, incoming_grad, cfg)
    return maps.gamma * grad_pre[maps.src] * H_star[maps.dst], grad_pre


def _pre_activation_grad(maps, H_star, incoming_grad, cfg=None):
    pre = maps.pre_activation(H_star)
    y = solve_adjoint(maps, pre, np.asarray(incoming_grad, dtype=np.float64), cfg)
    return T.activation_grad(maps.phi, pre) * y


def _apply_tensor(maps, H):
    """Recorded ``phi(gamma * A H + B)`` with ``H`` a tensor."""
    if maps.num_edges:
        msg = maps.weights * T.gather_rows(H, maps.dst)
        AH = T.segment_sum(msg, maps.src, maps.num_nodes)
        pre = AH * maps.gamma + maps.bias
    else:
        pre = maps.bias * 1.0
    return T.activation(maps.phi, pre)


def fixed_point(maps, cfg):
    """Differentiable fixed point ``H*`` (tensor ``p x M``) plus solve metadata."""
    if cfg.phi != maps.phi or cfg.gamma != maps.gamma:
        raise ConfigError("solver config and map set disagree on gamma/phi")
    tracking = T.is_grad_enabled() and (maps.weights.requires_grad or maps.bias.requires_grad)

    if cfg.backward_mode == "unrolled" and tracking:
        H = T.Tensor(np.zeros((maps.num_nodes, maps.num_heads)))
        counts = np.full(maps.num_heads, cfg.max_iter, dtype=np.int64)
        done = np.zeros(maps.num_heads, dtype=bool)
        diff = np.full(maps.num_heads, np.inf)
        for n in range(1, cfg.max_iter + 1):
            H_next = _apply_tensor(maps, H)
            diff = np.abs(H_next.data - H.data).max(axis=0) if maps.num_nodes else np.zeros(maps.num_heads)
            H = H_next
            newly = (diff < cfg.tol) & ~done
            counts[newly] = n
            done |= newly
            if done.all():
                break
        return H, FixedPointResult(H.data, counts, diff, bool(done.all()))

    with T.no_grad():
        result = solve(maps, cfg)
    if not tracking:
        return T.Tensor(result.H_star), result

    z = _apply_tensor(maps, T.Tensor(result.H_star))
    pre = maps.pre_activation(result.H_star)

    def rule(g):
        return solve_adjoint(maps, pre, g, cfg)

    return T.custom_backward_hook(z, rule), result
