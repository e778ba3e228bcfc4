"""Command-line entry point.

Exit status: 0 success, 1 usage error, 2 invalid input, 3 numerical
failure.  Every data file written with ``--out`` gets a
``<out>.manifest.json`` that records the full argument vector, so that
rerunning ``hybrid-pdp <argv>`` reproduces the file byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .applications import (
    GROUND,
    ClassicalHistory,
    FluorescenceParams,
    build_fluorescence,
    discriminate_initial_state,
    no_count_probability,
    photon_count_probs,
)
from .engine import TrajectoryConfig, simulate_trajectory
from .ensemble import TimeGrid, classical_marginals, compare_to_master, master_evolve, run_ensemble
from .errors import HybridPDPError, NumericalError
from .model import BlockDensityMatrix, PureHybridState
from .serialization import (
    _load_json,
    initial_state_from_config,
    model_from_config,
    read_event_logs,
    vector_from_json,
    write_csv,
    write_event_logs,
    write_manifest,
    write_stats_csv,
)

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- argument helpers -------------------------------------------------------------------

def _positive(text: str) -> float:
    x = float(text)
    if not (math.isfinite(x) and x > 0):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}")
    return x


def _nonneg(text: str) -> float:
    x = float(text)
    if not (math.isfinite(x) and x >= 0):
        raise argparse.ArgumentTypeError(f"expected a nonnegative number, got {text!r}")
    return x


def _count(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return n


def _seed(text: str) -> int:
    s = int(text)
    if not 0 <= s < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return s


def _add_model_args(p, fluorescence_only: bool = False):
    if not fluorescence_only:
        p.add_argument("--model", type=Path, help="model config (JSON)")
    p.add_argument("--gamma", type=_positive, help="fluorescence shortcut: decay rate")
    p.add_argument("--omega", type=_nonneg, help="fluorescence shortcut: Rabi frequency")


def _add_run_args(p, n=True, grid=True):
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--t-max", type=_positive, required=True)
    if n:
        p.add_argument("--n", type=_count, default=1000, help="number of trajectories")
    if grid:
        p.add_argument("--grid", type=_positive, default=0.05, help="output grid step dt")


def _load_model(args):
    """Model and initial state from ``--model`` or ``--gamma/--omega``."""
    model_path = getattr(args, "model", None)
    shortcut = args.gamma is not None or args.omega is not None
    if model_path is not None and shortcut:
        raise UsageError("give either --model or --gamma/--omega, not both")
    if model_path is not None:
        cfg = _load_json(model_path)
        try:
            model = model_from_config(cfg)
            x0 = initial_state_from_config(cfg, model)
        except HybridPDPError as exc:
            raise type(exc)(f"{model_path}: {exc}") from exc
        return model, x0
    if args.gamma is None or args.omega is None:
        raise UsageError("need --model, or both --gamma and --omega")
    params = FluorescenceParams(args.gamma, args.omega)
    return build_fluorescence(params), PureHybridState(0, GROUND)


def _fluorescence(args) -> FluorescenceParams:
    if args.gamma is None or args.omega is None:
        raise UsageError("need both --gamma and --omega")
    return FluorescenceParams(args.gamma, args.omega)


def _grid(args, t_end=None) -> TimeGrid:
    t_end = args.t_max if t_end is None else t_end
    grid = TimeGrid.span(t_end, args.grid)
    if grid.steps < 1 or abs(grid.t_end - t_end) > 1e-9 * max(1.0, t_end):
        raise UsageError(f"--grid {args.grid:g} does not divide --t-max {t_end:g}")
    return grid


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _finish(args, argv, out: Path, model_digest: str | None, extra: dict | None = None) -> None:
    params = {k: (str(v) if isinstance(v, Path) else v)
              for k, v in sorted(vars(args).items()) if k != "handler"}
    manifest = {
        "artifact_version": __version__,
        "command": args.command,
        "argv": list(argv),
        "parameters": params,
        "master_seed": getattr(args, "seed", None),
        "model_digest": model_digest,
        "output": out.name,
        "output_sha256": _sha256(out),
    }
    if extra:
        manifest.update(extra)
    write_manifest(out, manifest)


# -- subcommands ------------------------------------------------------------------------

def cmd_validate(args, argv):
    if args.model is None and not args.events:
        raise UsageError("validate needs --model and/or --events")
    model = None
    if args.model is not None:
        cfg = _load_json(args.model)
        try:
            model = model_from_config(cfg)
            initial_state_from_config(cfg, model)
        except HybridPDPError as exc:
            raise type(exc)(f"{args.model}: {exc}") from exc
        kind = "chain" if model.is_chain else f"{model.n_sectors} sectors"
        print(f"{args.model}: valid model ({kind}), digest {model.digest}")
    for path in args.events or ():
        logs = read_event_logs(path, model)
        print(f"{path}: {len(logs)} valid trajectories, {sum(l.n_jumps for l in logs)} jumps")
    return EXIT_OK


def cmd_trajectory(args, argv):
    model, x0 = _load_model(args)
    cfg = TrajectoryConfig(t_max=args.t_max, seed=args.seed, max_events=args.max_events)
    log = simulate_trajectory(model, x0, cfg, trajectory_index=args.index)
    write_event_logs([log], args.out)
    _finish(args, argv, args.out, model.digest)
    print(f"{log.n_jumps} jumps on [0, {log.t_end:g}] -> {args.out}")
    return EXIT_OK


def cmd_ensemble(args, argv):
    model, x0 = _load_model(args)
    grid = _grid(args)
    cfg = TrajectoryConfig(t_max=args.t_max, seed=args.seed)
    stats = run_ensemble(model, x0, cfg, args.n, grid, workers=args.workers)
    write_stats_csv(stats, args.out)
    _finish(args, argv, args.out, model.digest)
    print(f"{args.n} trajectories, {grid.n_points} grid points -> {args.out}")
    return EXIT_OK


def _master_series(model, x0, grid, n_max):
    rhos = master_evolve(model, BlockDensityMatrix.from_pure(x0), grid, n_max=n_max)
    sectors = sorted(set().union(*(r.blocks for r in rhos)))
    return rhos, sectors


def cmd_master(args, argv):
    model, x0 = _load_model(args)
    grid = _grid(args)
    rhos, sectors = _master_series(model, x0, grid, args.n_max)
    occ = classical_marginals(rhos, sectors)
    header = ["t"] + [f"occupation_{a}" for a in sectors] + ["trace"]
    rows = [[float(t), *map(float, occ[j]), float(occ[j].sum())] for j, t in enumerate(grid.times)]
    write_csv(args.out, header, rows)
    _finish(args, argv, args.out, model.digest)
    print(f"{len(sectors)} sectors, {grid.n_points} grid points -> {args.out}")
    return EXIT_OK


def cmd_compare(args, argv):
    model, x0 = _load_model(args)
    grid = _grid(args)
    cfg = TrajectoryConfig(t_max=args.t_max, seed=args.seed)
    stats = run_ensemble(model, x0, cfg, args.n, grid, workers=args.workers)
    rhos, _ = _master_series(model, x0, grid, args.n_max)
    dist = compare_to_master(stats, rhos)
    write_csv(args.out, ["t", "trace_distance"], [[float(t), float(d)] for t, d in zip(grid.times, dist)])
    bound = 5.0 / math.sqrt(args.n)
    summary = {"max_trace_distance": float(dist.max()), "threshold": bound}
    _finish(args, argv, args.out, model.digest, summary)
    print(f"max trace distance {dist.max():.6g} (threshold 5/sqrt(N) = {bound:.6g}) -> {args.out}")
    return EXIT_OK


def _ks_distance(samples: np.ndarray, n_total: int, cdf) -> float:
    """Kolmogorov-Smirnov distance of the empirical CDF (samples out of
    ``n_total``, the rest censored beyond the horizon) from ``cdf``."""
    x = np.sort(samples)
    if x.size == 0:
        return 0.0
    F = cdf(x)
    k = np.arange(1, x.size + 1)
    return float(max(np.max(k / n_total - F), np.max(F - (k - 1) / n_total)))


def cmd_waiting_time(args, argv):
    params = _fluorescence(args)
    model = build_fluorescence(params)
    x0 = PureHybridState(0, GROUND)
    grid = _grid(args)
    cfg = TrajectoryConfig(t_max=args.t_max, seed=args.seed, max_events=1)
    first = np.array([log.records[1].t for i in range(args.n)
                      if len((log := simulate_trajectory(model, x0, cfg, i)).records) > 1])
    edges = grid.times
    cdf = lambda t: 1.0 - no_count_probability(params, t)
    analytic = np.diff(cdf(edges))
    counts, _ = np.histogram(first, bins=edges)
    rows = [[float(edges[k]), float(edges[k + 1]), float(analytic[k]), float(counts[k] / args.n)]
            for k in range(len(analytic))]
    write_csv(args.out, ["t_left", "t_right", "analytic_probability", "empirical_frequency"], rows)
    ks = _ks_distance(first, args.n, cdf)
    _finish(args, argv, args.out, model.digest, {"ks_distance": ks, "censored": int(args.n - first.size)})
    print(f"KS distance {ks:.6g} over {args.n} first jumps ({args.n - first.size} beyond t-max) -> {args.out}")
    return EXIT_OK


def cmd_counts(args, argv):
    params = _fluorescence(args)
    model = build_fluorescence(params)
    x0 = PureHybridState(0, GROUND)
    analytic = photon_count_probs(params, args.t, args.n_max)
    cfg = TrajectoryConfig(t_max=args.t, seed=args.seed)
    stats = run_ensemble(model, x0, cfg, args.n, TimeGrid(0.0, args.t, 1), workers=args.workers)
    hist = stats.count_histogram[-1]
    empirical = np.zeros(args.n_max + 1)
    m = min(len(hist), args.n_max + 1)
    empirical[:m] = hist[:m]
    rows = [[n, float(analytic[n]), float(empirical[n])] for n in range(args.n_max + 1)]
    write_csv(args.out, ["n", "analytic", "empirical"], rows)
    _finish(args, argv, args.out, model.digest)
    print(f"counts for n = 0..{args.n_max} at t = {args.t:g} -> {args.out}")
    return EXIT_OK


def cmd_discriminate(args, argv):
    model, _ = _load_model(args)
    hist = _load_json(args.history)
    if "times" in hist and "sectors" in hist:
        history = ClassicalHistory(tuple(hist["times"]), tuple(hist["sectors"]))
    elif "events" in hist:
        history = ClassicalHistory.from_pairs(hist["events"])
    else:
        raise UsageError(f"{args.history}: expected 'times' and 'sectors', or 'events'")
    raw = _load_json(args.candidates).get("candidates")
    if not isinstance(raw, list) or not raw:
        raise UsageError(f"{args.candidates}: expected a nonempty 'candidates' list")
    names, cands = [], []
    for i, c in enumerate(raw):
        names.append(str(c.get("name", i)))
        psi = vector_from_json(c.get("psi"), f"candidates[{i}].psi")
        cands.append(PureHybridState.normalized(int(c.get("sector", 0)), psi))
    scores = discriminate_initial_state(model, cands, history)
    write_csv(args.out, ["candidate", "score"], [[n, float(s)] for n, s in zip(names, scores)])
    _finish(args, argv, args.out, model.digest)
    for n, s in zip(names, scores):
        print(f"{n}: {s:.6g}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hybrid-pdp", allow_abbrev=False,
                     description="Simulate hybrid quantum-classical jump processes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, handler, help):
        p = sub.add_parser(name, help=help, allow_abbrev=False)
        p.set_defaults(handler=handler)
        return p

    p = command("validate", cmd_validate, "check a model config and/or event-log files")
    p.add_argument("--model", type=Path)
    p.add_argument("--events", type=Path, nargs="+")

    p = command("trajectory", cmd_trajectory, "simulate one sample path")
    _add_model_args(p)
    _add_run_args(p, n=False, grid=False)
    p.add_argument("--index", type=int, default=0, help="trajectory index within the seed's stream")
    p.add_argument("--max-events", type=int, default=1_000_000)
    p.add_argument("--out", type=Path, required=True)

    p = command("ensemble", cmd_ensemble, "grid statistics of N sample paths")
    _add_model_args(p)
    _add_run_args(p)
    p.add_argument("--workers", type=_count)
    p.add_argument("--out", type=Path, required=True)

    p = command("master", cmd_master, "integrate the master equation")
    _add_model_args(p)
    _add_run_args(p, n=False)
    p.add_argument("--n-max", type=int, help="chain truncation level")
    p.add_argument("--out", type=Path, required=True)

    p = command("compare", cmd_compare, "trace distance between ensemble and master equation")
    _add_model_args(p)
    _add_run_args(p)
    p.add_argument("--n-max", type=int, help="chain truncation level")
    p.add_argument("--workers", type=_count)
    p.add_argument("--out", type=Path, required=True)

    p = command("waiting-time", cmd_waiting_time, "first-detection times: analytic vs empirical")
    _add_model_args(p, fluorescence_only=True)
    _add_run_args(p)
    p.add_argument("--out", type=Path, required=True)

    p = command("counts", cmd_counts, "photon count distribution: analytic vs empirical")
    _add_model_args(p, fluorescence_only=True)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--t", type=_positive, required=True, help="counting time")
    p.add_argument("--n-max", type=int, default=10)
    p.add_argument("--n", type=_count, default=1000)
    p.add_argument("--workers", type=_count)
    p.add_argument("--out", type=Path, required=True)

    p = command("discriminate", cmd_discriminate, "score candidate initial states against a history")
    _add_model_args(p)
    p.add_argument("--history", type=Path, required=True)
    p.add_argument("--candidates", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "n_max", None) is not None and args.n_max < 0:
            raise UsageError("--n-max must be nonnegative")
        return args.handler(args, argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (HybridPDPError, ValueError, OSError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
