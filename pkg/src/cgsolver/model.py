"""End-to-end convergent graph solver: encode, build maps, solve, decode."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import MLP, Encoder, EncoderConfig, Module
from .exceptions import DimensionError
from .graph import GraphBatch
from .solver import SolverConfig, build_maps, fixed_point

DEFAULT_DECODER_HIDDEN = (64, 32)


def decode(H_star, g, decoder, shift=0.0, scale=1.0):
    """Per-node decoder over ``[H*_i || node_feat_i]``, then ``shift + scale * out``."""
    if isinstance(g, GraphBatch):
        g = g.merged
    H_star = T.as_tensor(H_star)
    if H_star.shape[1] + g.node_dim != decoder.in_dim:
        raise DimensionError(
            f"decoder expects width {decoder.in_dim}, got {H_star.shape[1]} heads + {g.node_dim} features"
        )
    out = decoder(T.concat([H_star, T.Tensor(g.node_feat)], axis=1))
    if scale != 1.0:
        out = out * scale
    if shift != 0.0:
        out = out + shift
    return out


class CGSModel(Module):
    """Encoder ``f_theta`` + contracting fixed-point layer + decoder ``g_phi``."""

    def __init__(
        self,
        node_dim,
        edge_dim,
        encoder_cfg=None,
        solver_cfg=None,
        decoder_hidden=DEFAULT_DECODER_HIDDEN,
        out_dim=1,
        seed=0,
        rng=None,
        target_shift=0.0,
        target_scale=1.0,
    ):
        super().__init__()
        self.encoder_cfg = encoder_cfg or EncoderConfig()
        self.solver_cfg = solver_cfg or SolverConfig()
        self.node_dim, self.edge_dim = int(node_dim), int(edge_dim)
        self.decoder_hidden = tuple(int(h) for h in decoder_hidden)
        self.out_dim = int(out_dim)
        self.seed = seed
        self.target_shift = float(target_shift)
        self.target_scale = float(target_scale)
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.encoder = self.add_child("encoder", Encoder(self.encoder_cfg, self.node_dim, self.edge_dim, rng))
        widths = [self.encoder_cfg.num_heads + self.node_dim, *self.decoder_hidden, self.out_dim]
        self.decoder = self.add_child("decoder", MLP(widths, self.encoder_cfg.activation, rng))

    def calibrate(self, targets):
        """Fix the output affine to the mean and spread of ``targets``.

        The decoder then works on roughly standardised values; the loss is
        still measured on raw targets.
        """
        y = np.concatenate([np.asarray(t, dtype=np.float64).reshape(-1) for t in targets])
        std = float(y.std())
        self.target_shift = float(y.mean())
        self.target_scale = std if std > 0 else 1.0
        return self

    @property
    def is_calibrated(self):
        return self.target_shift != 0.0 or self.target_scale != 1.0

    def build_maps(self, g):
        node_out, edge_out = self.encoder(g)
        return build_maps(g, node_out, edge_out, self.solver_cfg.gamma, self.solver_cfg.phi)

    def forward(self, g, solver_cfg=None):
        """Return ``(Y*, FixedPointResult)`` for a graph or graph batch."""
        cfg = solver_cfg or self.solver_cfg
        maps = self.build_maps(g)
        H, result = fixed_point(maps, cfg)
        return decode(H, g, self.decoder, self.target_shift, self.target_scale), result

    __call__ = forward

    def predict(self, g):
        with T.no_grad():
            y, _ = self.forward(g)
        return y.data

    # persistence --------------------------------------------------------
    def config(self):
        cfg = {
            "model.node_dim": self.node_dim,
            "model.edge_dim": self.edge_dim,
            "model.out_dim": self.out_dim,
            "model.seed": self.seed,
            "decoder.hidden": list(self.decoder_hidden),
            "decoder.activation": self.encoder_cfg.activation,
            "decoder.target_shift": self.target_shift,
            "decoder.target_scale": self.target_scale,
        }
        cfg.update({f"encoder.{k}": v for k, v in self.encoder_cfg.to_dict().items()})
        cfg.update({f"solver.{k}": v for k, v in self.solver_cfg.to_dict().items()})
        return cfg

    def state_dict(self):
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise DimensionError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise DimensionError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def save(self, path):
        save_checkpoint(path, self.state_dict(), self.config())

    @classmethod
    def from_config(cls, cfg):
        enc = EncoderConfig(**{k[len("encoder."):]: v for k, v in cfg.items() if k.startswith("encoder.")})
        sol = SolverConfig(**{k[len("solver."):]: v for k, v in cfg.items() if k.startswith("solver.")})
        return cls(
            cfg["model.node_dim"],
            cfg["model.edge_dim"],
            enc,
            sol,
            decoder_hidden=cfg["decoder.hidden"],
            out_dim=cfg["model.out_dim"],
            seed=cfg.get("model.seed", 0),
            target_shift=cfg.get("decoder.target_shift", 0.0),
            target_scale=cfg.get("decoder.target_scale", 1.0),
        )

    @classmethod
    def load(cls, path):
        tensors, cfg = load_checkpoint(path)
        model = cls.from_config(cfg)
        model.load_state_dict(tensors)
        return model


def forward(model, g, cfg=None):
    return model.forward(g, cfg)

