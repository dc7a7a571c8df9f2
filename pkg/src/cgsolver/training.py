"""Training loop: Adam with cosine annealing, on-the-fly sampled graphs, evaluation."""

from __future__ import annotations

import csv
import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, DimensionError, NonFiniteError, TrainingAborted
from .graph import batch
from .problems import DiffusionSpec, GviSpec, generate_diffusion, generate_gvi, greedy_policy
from .seeding import eval_instance_seeds, stream, train_instance_seeds

PROBLEMS = {
    "gvi": (GviSpec, generate_gvi),
    "diffusion": (DiffusionSpec, generate_diffusion),
}
METRIC_COLUMNS = ("step", "lr", "train_mse", "eval_mape_mean", "eval_mape_std", "eval_policy_acc", "wall_s")
MAPE_THRESHOLD = 1e-8
EVAL_CHUNK = 50


def problem_generator(problem):
    try:
        return PROBLEMS[problem]
    except KeyError:
        raise ConfigError(f"unknown problem {problem!r}; expected one of {sorted(PROBLEMS)}") from None


def generate(problem, spec, seeds):
    _, gen = problem_generator(problem)
    return [gen(spec, s) for s in seeds]


# optimiser ----------------------------------------------------------------
@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, base_lr=1e-3, **kw):
        shapes = [np.shape(p.data if isinstance(p, T.Tensor) else p) for p in params]
        return cls([np.zeros(s) for s in shapes], [np.zeros(s) for s in shapes], 0, base_lr, **kw)


def adam_step(params, grads, state, lr=None):
    """One Adam update applied in place to ``params`` (tensors or arrays)."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise DimensionError(f"{len(params)} params, {len(grads)} grads, {len(state.m)} moment slots")
    lr = state.base_lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, (p, g) in enumerate(zip(params, grads)):
        data = p.data if isinstance(p, T.Tensor) else p
        g = np.zeros_like(data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != data.shape or state.m[k].shape != data.shape:
            raise DimensionError(f"param {k}: shape {data.shape}, grad {g.shape}, moment {state.m[k].shape}")
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def cosine_lr(step, total_steps, lr_init, lr_min=0.0):
    if total_steps <= 0 or step >= total_steps:
        return float(lr_min)
    step = max(step, 0)
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


# configuration --------------------------------------------------------------
@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 5000
    batch_size: int = 64
    lr_init: float = 1e-3
    lr_min: float = 0.0
    eval_every: int = 250
    seed: int = 0
    resample_every: int = 32
    eval_size: int = 100
    calibrate: bool = True

    def __post_init__(self):
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        for name in ("batch_size", "eval_every", "resample_every", "eval_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0 <= self.lr_min <= self.lr_init:
            raise ConfigError("need 0 <= lr_min <= lr_init")

    def to_dict(self):
        return asdict(self)


# evaluation -----------------------------------------------------------------
@dataclass
class EvalReport:
    mape: np.ndarray
    mse: np.ndarray
    policy_accuracy: np.ndarray | None = None
    excluded: int = 0
    wall_s: float = 0.0

    @property
    def mape_mean(self):
        return float(self.mape.mean()) if self.mape.size else float("nan")

    @property
    def mape_std(self):
        return float(self.mape.std()) if self.mape.size else float("nan")

    @property
    def mse_mean(self):
        return float(self.mse.mean())

    @property
    def policy_accuracy_mean(self):
        return None if self.policy_accuracy is None else float(self.policy_accuracy.mean())

    @property
    def policy_accuracy_std(self):
        return None if self.policy_accuracy is None else float(self.policy_accuracy.std())

    def summary(self):
        out = {
            "graphs": int(self.mse.size),
            "mape_mean": self.mape_mean,
            "mape_std": self.mape_std,
            "mse": self.mse_mean,
            "excluded": self.excluded,
        }
        if self.policy_accuracy is not None:
            out["policy_acc_mean"] = self.policy_accuracy_mean
            out["policy_acc_std"] = self.policy_accuracy_std
        return out


def mape(pred, target, threshold=MAPE_THRESHOLD):
    """Percent MAPE over nodes with ``|target| > threshold``; ``None`` if there are none."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    keep = np.abs(target) > threshold
    if not keep.any():
        return None
    return 100.0 * float(np.mean(np.abs(pred[keep] - target[keep]) / np.abs(target[keep])))


def policy_accuracy(g, pred, target, alpha):
    return float(np.mean(greedy_policy(g, pred, alpha) == greedy_policy(g, target, alpha)))


def predict_instances(model, instances, chunk=EVAL_CHUNK):
    """Per-instance ``(p, out_dim)`` predictions, evaluated in batched chunks."""
    out = []
    for start in range(0, len(instances), chunk):
        b = batch([inst.graph for inst in instances[start:start + chunk]])
        out.extend(b.split_rows(model.predict(b)))
    return out


def evaluate(model, instances):
    if not instances:
        raise ConfigError("evaluate needs at least one instance")
    t0 = time.perf_counter()
    preds = predict_instances(model, instances)
    mapes, mses, accs = [], [], []
    excluded = 0
    for inst, pred in zip(instances, preds):
        m = mape(pred, inst.node_target)
        if m is None:
            excluded += 1
        else:
            mapes.append(m)
        mses.append(float(np.mean((pred - inst.node_target) ** 2)))
        if inst.problem == "gvi":
            accs.append(policy_accuracy(inst.graph, pred, inst.node_target, inst.meta["alpha"]))
    if excluded:
        warnings.warn(f"MAPE undefined on {excluded} graph(s) with all targets near zero", RuntimeWarning)
    return EvalReport(
        np.asarray(mapes),
        np.asarray(mses),
        np.asarray(accs) if accs else None,
        excluded,
        time.perf_counter() - t0,
    )


# training -------------------------------------------------------------------
def graph_mean_mse(pred, instances, b):
    """Mean over graphs of each graph's node-mean squared error, on the tape."""
    target = np.concatenate([inst.node_target for inst in instances])
    weight = np.concatenate([np.full((n, 1), 1.0 / (n * len(instances))) for n in b.sizes])
    diff = T.sub(pred, T.Tensor(target))
    return T.reduce_sum(T.mul(T.mul(diff, diff), T.Tensor(weight)))


def gradient_step(model, instances, state, lr):
    """Forward, implicit backward and one Adam update; returns ``(loss, FixedPointResult)``."""
    b = batch([inst.graph for inst in instances])
    model.zero_grad()
    pred, result = model(b)
    loss = graph_mean_mse(pred, instances, b)
    loss.backward()
    params = model.parameters()
    adam_step(params, [p.grad for p in params], state, lr)
    return float(loss.data), result


@dataclass
class TrainResult:
    model: object
    history: list = field(default_factory=list)
    final_report: EvalReport | None = None


class MetricsLog:
    """Rows in ``METRIC_COLUMNS`` order; floats are written with ``repr`` so reruns compare byte-wise."""

    def __init__(self, path=None):
        self.path = path
        self.rows = []
        if path is not None:
            with open(path, "w", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow(METRIC_COLUMNS)

    @staticmethod
    def _fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return repr(v)
        return str(v)

    def append(self, row):
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow([self._fmt(row[c]) for c in METRIC_COLUMNS])


def _dump_diagnostics(path, diag):
    if path is None:
        return
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(diag, fh, indent=2, default=float)


def train(model, problem, spec, cfg, metrics_path=None, diagnostics_path=None, eval_instances=None, log=None):
    """Train ``model`` in place; returns a :class:`TrainResult`.

    A fresh batch of ``batch_size`` graphs is sampled every ``resample_every``
    updates from the data stream of ``cfg.seed``.  An uncalibrated model gets
    its output affine from the targets of the first batch.  The held-out set is drawn
    once from the eval stream unless ``eval_instances`` is given.
    """
    spec_cls, _ = problem_generator(problem)
    if not isinstance(spec, spec_cls):
        raise ConfigError(f"{problem} expects a {spec_cls.__name__}, got {type(spec).__name__}")
    data_rng = stream(cfg.seed, "data")
    if eval_instances is None:
        eval_instances = generate(problem, spec, eval_instance_seeds(stream(cfg.seed, "eval"), cfg.eval_size))

    state = AdamState.for_params(model.parameters(), cfg.lr_init)
    out = TrainResult(model)
    metrics = MetricsLog(metrics_path)
    t0 = time.perf_counter()
    instances, seeds = None, None
    losses = []

    for step in range(cfg.total_steps):
        if step % cfg.resample_every == 0:
            seeds = train_instance_seeds(data_rng, cfg.batch_size)
            instances = generate(problem, spec, seeds)
            if step == 0 and cfg.calibrate and not model.is_calibrated:
                model.calibrate([inst.node_target for inst in instances])
        lr = cosine_lr(step, cfg.total_steps, cfg.lr_init, cfg.lr_min)
        try:
            loss, result = gradient_step(model, instances, state, lr)
        except NonFiniteError as exc:
            loss, result = float("nan"), None
            cause = str(exc)
        else:
            cause = None
        if not math.isfinite(loss):
            diag = {
                "step": step,
                "lr": lr,
                "batch_seeds": seeds,
                "gamma": model.solver_cfg.gamma,
                "residuals": None if result is None else result.final_residuals.tolist(),
                "cause": cause or "non-finite loss",
                "diagnostics_path": None if diagnostics_path is None else str(diagnostics_path),
            }
            _dump_diagnostics(diagnostics_path, diag)
            raise TrainingAborted(f"non-finite loss at step {step}", diag)
        losses.append(loss)

        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.total_steps:
            report = evaluate(model, eval_instances)
            row = {
                "step": done,
                "lr": lr,
                "train_mse": float(np.mean(losses)),
                "eval_mape_mean": report.mape_mean,
                "eval_mape_std": report.mape_std,
                "eval_policy_acc": report.policy_accuracy_mean,
                "wall_s": round(time.perf_counter() - t0, 3),
            }
            losses = []
            metrics.append(row)
            out.final_report = report
            if log is not None:
                log(row)

    out.history = metrics.rows
    return out


FEATURE_DIMS = {"gvi": (1, 1), "diffusion": (2, 1)}


def build_model(problem, encoder_cfg=None, solver_cfg=None, seed=0):
    """Fresh model sized for ``problem``, initialised from the init stream of ``seed``."""
    from .model import CGSModel

    problem_generator(problem)
    node_dim, edge_dim = FEATURE_DIMS[problem]
    return CGSModel(node_dim, edge_dim, encoder_cfg, solver_cfg, seed=seed, rng=stream(seed, "init"))
