"""``cgsolver`` command line: gen, train, eval, gradcheck, bench.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
Every command first prints its fully resolved configuration as one JSON line
prefixed with ``# config``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .bench import rows_to_csv, run_bench, summary
from .encoder import EncoderConfig
from .exceptions import (
    ConfigError,
    DimensionError,
    ParseError,
    SolverError,
    TrainingAborted,
    ValidationError,
)
from .gradcheck import run_gradcheck
from .graph import read_jsonl, write_jsonl
from .model import CGSModel
from .problems import DiffusionSpec, GviSpec
from .seeding import eval_instance_seeds, stream, train_instance_seeds
from .solver import PHIS, MODES, SolverConfig
from .training import METRIC_COLUMNS, TrainConfig, build_model, evaluate, generate, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


def _add_problem(p):
    p.add_argument("--problem", choices=("gvi", "diffusion"), default="gvi", help="problem family")
    p.add_argument("--ns", type=int, default=20, help="GVI: number of states")
    p.add_argument("--na", type=int, default=5, help="GVI: successors per state")
    p.add_argument("--alpha", type=float, default=0.9, help="GVI: discount factor")
    p.add_argument("--pores", type=int, default=50, help="diffusion: pores per network")
    p.add_argument("--knn", type=int, default=4, help="diffusion: nearest neighbours per pore")


def _add_model(p):
    p.add_argument("--heads", type=int, default=16, help="number of contracting maps (heads)")
    p.add_argument("--layers", type=int, default=None, help="encoder layers (default: 3 gvi, 1 diffusion)")
    p.add_argument("--hidden", type=int, default=None, help="encoder width (default: 128 gvi, 64 diffusion)")
    p.add_argument("--gamma", type=float, default=0.5, help="contraction factor in (0, 1)")
    p.add_argument("--phi", choices=PHIS, default="identity", help="map activation")


def _add_solver(p):
    p.add_argument("--solver-mode", choices=MODES, default="iterative", help="forward/adjoint solve")
    p.add_argument("--tol", type=float, default=1e-6, help="iteration tolerance (sup-norm change)")
    p.add_argument("--max-iter", type=int, default=50, help="iteration cap")


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="master seed for all random streams")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="cgsolver", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="write random problem instances as JSONL", formatter_class=fmt)
    gen.add_argument("problem_pos", nargs="?", choices=("gvi", "diffusion"), metavar="PROBLEM",
                     help="shorthand for --problem")
    _add_problem(gen)
    gen.add_argument("--count", type=int, default=10, help="number of instances")
    gen.add_argument("--out", required=True, help="output JSONL path")
    _add_common(gen)

    tr = sub.add_parser("train", help="train a model, write checkpoint and metrics CSV", formatter_class=fmt)
    _add_problem(tr)
    _add_model(tr)
    _add_solver(tr)
    tr.add_argument("--steps", type=int, default=5000, help="gradient updates")
    tr.add_argument("--batch-size", type=int, default=64, help="graphs per update")
    tr.add_argument("--lr", type=float, default=1e-3, help="initial learning rate (cosine-annealed to 0)")
    tr.add_argument("--resample-every", type=int, default=32, help="updates between fresh training batches")
    tr.add_argument("--eval-every", type=int, default=250, help="updates between held-out evaluations")
    tr.add_argument("--eval-size", type=int, default=100, help="held-out graphs")
    tr.add_argument("--checkpoint", required=True, help="checkpoint output path")
    tr.add_argument("--out", required=True, help="metrics CSV path")
    _add_common(tr)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset", formatter_class=fmt)
    ev.add_argument("--checkpoint", required=True, help="checkpoint to load")
    ev.add_argument("--dataset", default=None, help="JSONL dataset (default: fresh held-out set)")
    _add_problem(ev)
    ev.add_argument("--count", type=int, default=100, help="held-out graphs when no dataset is given")
    _add_solver(ev)
    ev.add_argument("--out", default=None, help="append the report as a CSV row here")
    _add_common(ev)

    gc = sub.add_parser("gradcheck", help="implicit vs unrolled vs finite-difference gradients", formatter_class=fmt)
    gc.add_argument("--count", type=int, default=50, help="random instances")
    gc.add_argument("--ns", type=int, default=8, help="largest graph size")
    gc.add_argument("--heads", type=int, default=4, help="largest head count")
    _add_common(gc)

    be = sub.add_parser("bench", help="forward solve wall-time, direct vs iterative", formatter_class=fmt)
    be.add_argument("--sizes", default="100,200,400,800,1600", help="comma-separated node counts")
    be.add_argument("--na", type=int, default=5, help="successors per node")
    be.add_argument("--heads", type=int, default=2, help="heads per map set")
    be.add_argument("--repeats", type=int, default=3, help="timing samples per cell (median reported)")
    be.add_argument("--solver-mode", choices=(*MODES, "both"), default="both", help="modes to time")
    be.add_argument("--out", default=None, help="CSV path (default: stdout only)")
    _add_common(be)
    return parser


def _echo(config):
    print("# config " + json.dumps(config, sort_keys=True), flush=True)


def _spec(args):
    if args.problem == "gvi":
        return GviSpec(n_s=args.ns, n_a=args.na, alpha=args.alpha)
    return DiffusionSpec(num_pores=args.pores, knn=args.knn)


def _model_cfgs(args):
    gvi = args.problem == "gvi"
    layers = args.layers if args.layers is not None else (3 if gvi else 1)
    hidden = args.hidden if args.hidden is not None else (128 if gvi else 64)
    enc = EncoderConfig(num_layers=layers, hidden_dim=hidden, num_heads=args.heads)
    return enc, _solver_cfg(args, gamma=args.gamma, phi=args.phi)


def _solver_cfg(args, gamma=0.5, phi="identity"):
    return SolverConfig(gamma=gamma, tol=args.tol, max_iter=args.max_iter, mode=args.solver_mode, phi=phi)


def cmd_gen(args):
    if args.problem_pos:
        args.problem = args.problem_pos
    if args.count < 0:
        raise ConfigError("--count must be >= 0")
    spec = _spec(args)
    _echo({"command": "gen", "problem": args.problem, "spec": spec.to_dict(), "count": args.count,
           "seed": args.seed, "out": args.out, "threads": args.threads})
    seeds = train_instance_seeds(stream(args.seed, "data"), args.count)
    write_jsonl(args.out, generate(args.problem, spec, seeds))
    print(f"wrote {args.count} instances to {args.out}")
    return EXIT_OK


def cmd_train(args):
    spec = _spec(args)
    enc, sol = _model_cfgs(args)
    cfg = TrainConfig(
        total_steps=args.steps,
        batch_size=args.batch_size,
        lr_init=args.lr,
        eval_every=args.eval_every,
        seed=args.seed,
        resample_every=args.resample_every,
        eval_size=args.eval_size,
    )
    _echo({"command": "train", "problem": args.problem, "spec": spec.to_dict(), "encoder": enc.to_dict(),
           "solver": sol.to_dict(), "train": cfg.to_dict(), "checkpoint": args.checkpoint, "out": args.out,
           "threads": args.threads})
    model = build_model(args.problem, enc, sol, args.seed)
    diag = str(Path(args.checkpoint).with_suffix(".diagnostics.json"))

    def log(row):
        print(",".join("" if row[c] is None else str(row[c]) for c in METRIC_COLUMNS), flush=True)

    print(",".join(METRIC_COLUMNS))
    result = train(model, args.problem, spec, cfg, metrics_path=args.out, diagnostics_path=diag, log=log)
    model.save(args.checkpoint)
    if result.final_report is not None:
        print("final: " + json.dumps(result.final_report.summary(), sort_keys=True))
    print(f"checkpoint written to {args.checkpoint}")
    return EXIT_OK


def cmd_eval(args):
    try:
        model = CGSModel.load(args.checkpoint)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint: {exc}") from exc
    sol = SolverConfig(
        gamma=model.solver_cfg.gamma,
        tol=args.tol,
        max_iter=args.max_iter,
        mode=args.solver_mode,
        phi=model.solver_cfg.phi,
    )
    model.solver_cfg = sol
    if args.dataset:
        try:
            instances = read_jsonl(args.dataset)
        except OSError as exc:
            raise UsageError(f"cannot read dataset: {exc}") from exc
        source = args.dataset
    else:
        spec = _spec(args)
        instances = generate(args.problem, spec, eval_instance_seeds(stream(args.seed, "eval"), args.count))
        source = f"{args.problem} held-out set, seed {args.seed}, {args.count} graphs"
    _echo({"command": "eval", "checkpoint": args.checkpoint, "dataset": source, "solver": sol.to_dict(),
           "out": args.out, "threads": args.threads})
    if not instances:
        raise UsageError("dataset is empty")
    g = instances[0].graph
    if (g.node_dim, g.edge_dim) != (model.node_dim, model.edge_dim):
        raise DimensionError(
            f"dataset features ({g.node_dim}, {g.edge_dim}) do not match the checkpoint "
            f"({model.node_dim}, {model.edge_dim})"
        )
    report = evaluate(model, instances)
    s = report.summary()
    cols = ("graphs", "mape_mean", "mape_std", "mse", "policy_acc_mean", "policy_acc_std", "excluded")
    row = ",".join("" if s.get(c) is None else repr(s[c]) if isinstance(s[c], float) else str(s[c]) for c in cols)
    if args.out:
        new = not Path(args.out).exists()
        with open(args.out, "a", encoding="utf-8") as fh:
            if new:
                fh.write(",".join(cols) + "\n")
            fh.write(row + "\n")
    print(",".join(cols))
    print(row)
    line = f"{s['graphs']} graphs: MAPE {s['mape_mean']:.3f} +/- {s['mape_std']:.3f} %, MSE {s['mse']:.4e}"
    if "policy_acc_mean" in s:
        line += f", policy accuracy {s['policy_acc_mean']:.3f} +/- {s['policy_acc_std']:.3f}"
    print(line)
    return EXIT_OK


def cmd_gradcheck(args):
    _echo({"command": "gradcheck", "count": args.count, "max_nodes": args.ns, "max_heads": args.heads,
           "seed": args.seed, "tolerance": GRADCHECK_TOL, "threads": args.threads})
    cases = run_gradcheck(args.count, args.ns, args.heads, seed=args.seed)
    print(f"{'case':>4} {'p':>3} {'M':>2} {'phi':>10} {'gamma':>5} {'imp-unr':>9} {'imp-fd':>9} {'unr-fd':>9} ok")
    failed = 0
    for k, c in enumerate(cases):
        ok = c.max_error <= GRADCHECK_TOL
        failed += not ok
        print(
            f"{k:>4} {c.num_nodes:>3} {c.num_heads:>2} {c.phi:>10} {c.gamma:>5.2f} "
            f"{c.err_implicit_unrolled:>9.2e} {c.err_implicit_fd:>9.2e} {c.err_unrolled_fd:>9.2e} "
            f"{'pass' if ok else 'FAIL'}"
        )
    print(f"{len(cases) - failed}/{len(cases)} passed")
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


def cmd_bench(args):
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--sizes must be comma-separated integers: {exc}") from exc
    if not sizes or min(sizes) < 1:
        raise ConfigError("--sizes needs positive integers")
    if args.repeats < 1:
        raise ConfigError("--repeats must be >= 1")
    modes = MODES if args.solver_mode == "both" else (args.solver_mode,)
    _echo({"command": "bench", "sizes": sizes, "modes": list(modes), "na": args.na, "heads": args.heads,
           "repeats": args.repeats, "seed": args.seed, "out": args.out, "threads": args.threads})
    rows = run_bench(sizes, args.repeats, modes, args.na, args.heads, args.seed)
    text = rows_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    print(summary(rows))
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "bench": cmd_bench}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except (UsageError, ConfigError, DimensionError, ParseError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        where = exc.diagnostics.get("diagnostics_path")
        print(f"error: {exc}; diagnostics written to {where}", file=sys.stderr)
        return EXIT_RUNTIME
    except (SolverError, RuntimeError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
