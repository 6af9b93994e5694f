"""Command-line entry point.

Every run reads one model document, requires an explicit ``--seed`` and
writes ``report.json`` and ``table.csv`` into ``--out``.  Exit codes: 0 when
all checks pass, 1 when a check fails, 2 for configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .environment import beta
from .ergodicity import (
    ExperimentReport,
    coupling_bound_experiment,
    domination_experiment,
    first_moment_experiment,
    tv_decay_experiment,
    wasserstein_decay_experiment,
)
from .mechanisms import ModelSpec, ScalarMechanism, dominating_mechanism, validate
from .moments import closed_form_pi_prime, decay_bound, mean_total_mass, pi, pi_prime, spectral
from .simulate import simulate_annealed, simulate_coupled

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class ConfigError(Exception):
    pass


def _positive(kind):
    def parse(s):
        try:
            v = kind(s)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a number: {s!r}")
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive: {s!r}")
        return v
    return parse


def _nonneg(s):
    v = float(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be nonnegative: {s!r}")
    return v


def _pair(s):
    try:
        a, b = (float(p) for p in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'a,b', got {s!r}")
    if a < 0 or b < 0:
        raise argparse.ArgumentTypeError(f"entries must be nonnegative: {s!r}")
    return (a, b)


def _seed(s):
    v = int(s)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: configuration error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cbire", description="Two-type CBI processes in Levy random environments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", required=True, help="model JSON document")
    common.add_argument("--seed", required=True, type=_seed, help="master seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--dt", type=_positive(float), default=0.01, help="time step")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("validate", parents=[common], help="check model hypotheses")

    s = sub.add_parser("simulate", parents=[common], help="simulate trajectories")
    s.add_argument("--x", type=_nonneg, nargs=2, default=[1.0, 1.0], help="start point")
    s.add_argument("--y", type=_nonneg, nargs=2, help="second start; switches to the coupled simulation")
    s.add_argument("--t", type=_positive(float), default=1.0, help="horizon")
    s.add_argument("--n-paths", type=_positive(int), default=100, help="number of paths")

    s = sub.add_parser("moments", parents=[common], help="first-moment functionals and spectral constants")
    s.add_argument("--t-grid", type=_nonneg, nargs="+", default=[0.5, 1.0, 2.0, 5.0], help="time grid")
    s.add_argument("--x", type=_nonneg, nargs=2, default=[1.0, 0.0], help="start point")
    s.add_argument("--y", type=_nonneg, nargs=2, default=[0.0, 0.0], help="second point for the decay bound")

    s = sub.add_parser("wasserstein-decay", parents=[common], help="W1 decay towards the stationary law")
    s.add_argument("--x", type=_nonneg, nargs=2, default=[8.0, 8.0], help="start point")
    s.add_argument("--t-grid", type=_nonneg, nargs="+", default=list(np.round(np.arange(0, 2.51, 0.25), 10)), help="time grid")
    s.add_argument("--n", type=_positive(int), default=512, help="ensemble size")
    s.add_argument("--burn-in", type=_positive(float), help="stationary burn-in (default 10/rho)")
    s.add_argument("--thinning", type=_positive(float), default=1.0, help="time between stationary draws")
    s.add_argument("--n-chains", type=_positive(int), default=64, help="independent stationary chains")

    s = sub.add_parser("tv-decay", parents=[common], help="total-variation bound via the extinction functional")
    s.add_argument("--x", type=_nonneg, nargs=2, default=[1.0, 1.0], help="start point")
    s.add_argument("--t-grid", type=_positive(float), nargs="+", default=[0.5, 1.0, 2.0, 4.0, 8.0], help="time grid")
    s.add_argument("--n-paths", type=_positive(int), default=100, help="number of paths")
    s.add_argument("--n-stationary", type=_positive(int), default=256, help="stationary sample size")
    s.add_argument("--threshold", type=_positive(float), default=0.05, help="required final bound")

    s = sub.add_parser("coupling-bound", parents=[common], help="coupling upper bound and W1 lower bound")
    s.add_argument("--x", type=_nonneg, nargs=2, default=[1.0, 0.0], help="start point")
    s.add_argument("--y", type=_nonneg, nargs=2, default=[0.0, 1.0], help="second start point")
    s.add_argument("--t-grid", type=_nonneg, nargs="+", default=[0.5, 1.0, 2.0], help="time grid")
    s.add_argument("--n-paths", type=_positive(int), default=2000, help="number of coupled paths")
    s.add_argument("--n-w1", type=_positive(int), default=512, help="ensemble size for the W1 lower bound")

    s = sub.add_parser("first-moment", parents=[common], help="simulated mean mass against the exact formula")
    s.add_argument("--x", type=_nonneg, nargs=2, default=[1.0, 1.0], help="start point")
    s.add_argument("--t-grid", type=_nonneg, nargs="+", default=[0.5, 1.0, 2.0], help="time grid")
    s.add_argument("--n-paths", type=_positive(int), default=10000, help="number of paths")

    s = sub.add_parser("domination", parents=[common], help="comparison u <= U~ <= w and extinction")
    s.add_argument("--varphi", type=_nonneg, nargs=2, metavar=("B0", "C0"),
                   help="comparison mechanism b0 x + c0 x^2 (default: largest admissible)")
    s.add_argument("--t-grid", type=_positive(float), nargs="+", default=[0.5, 1.0, 2.0], help="time grid")
    s.add_argument("--lam-grid", type=_pair, nargs="+",
                   default=[(s, 0.5 * s) for s in np.round(np.logspace(-1, 1, 9), 12)],
                   help="terminal values as comma pairs, e.g. 1,0.5")
    s.add_argument("--n-paths", type=_positive(int), default=20, help="environment paths")
    s.add_argument("--extinction-grid", type=_positive(float), nargs="+", default=[1.0, 2.0, 4.0, 8.0, 16.0],
                   help="horizons for the extinction check")
    return p


def load_config(path) -> ModelSpec:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"model file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"model file is not valid JSON: {e}")
    if not isinstance(doc, dict):
        raise ConfigError("model document must be a JSON object")
    try:
        return ModelSpec.from_dict(doc)
    except KeyError as e:
        raise ConfigError(f"missing field {e.args[0]!r} in model document")
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid model field: {e}")


def _header(model: ModelSpec, seed) -> str:
    return f"config_hash={model.config_hash()} seed={seed}"


def _write_rows(path, header, columns, rows):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o))
        fh.write("\n")


def _cmd_validate(args, model, out):
    rep = validate(model)
    doc = {"command": "validate", "config_hash": model.config_hash(), "seed": args.seed, **rep.to_dict()}
    _write_json(out / "report.json", doc)
    _write_rows(out / "table.csv", _header(model, args.seed), ["check", "passed", "value", "detail"],
                [(c.name, str(c.passed).lower(), float(c.value), c.detail) for c in rep.checks])
    for c in rep.failures:
        print(f"FAIL {c.name}: {c.detail} (value {c.value:.6g})", file=sys.stderr)
    return EXIT_PASS if rep.ok else EXIT_FAIL


def _cmd_simulate(args, model, out):
    header = _header(model, args.seed)
    if args.y is not None:
        cs = simulate_coupled(model, args.x, args.y, args.t, args.n_paths, args.dt, args.seed)
        cs.to_csv(out / "table.csv", header)
        gap = np.abs(cs.sigma1 - cs.sigma2).sum(axis=1)
        summary = {"mode": "coupled", "mean_gap": float(gap.mean())}
    else:
        ts = simulate_annealed(model, args.x, args.t, args.n_paths, args.dt, args.seed)
        ts.to_csv(out / "table.csv", header)
        mass = ts.states[:, -1].sum(axis=1)
        b, bt = model.branching.b, beta(model.environment)
        summary = {"mode": "annealed", "mean_total_mass": float(mass.mean()),
                   "mean_total_mass_exact": mean_total_mass(b, bt, model.immigration, args.x, args.t)}
    _write_json(out / "report.json", {"command": "simulate", "config_hash": model.config_hash(), "seed": args.seed,
                                      "params": {"x": args.x, "y": args.y, "t": args.t, "n_paths": args.n_paths,
                                                 "dt": args.dt}, "summary": summary, "passed": True})
    return EXIT_PASS


def _cmd_moments(args, model, out):
    b, bt = model.branching.b, beta(model.environment)
    sd = spectral(b, bt)
    grid = np.asarray(args.t_grid, dtype=float)
    pp = pi_prime(b, grid)
    closed, tags = closed_form_pi_prime(sd, grid)
    lhs, rhs = decay_bound(sd, args.x, args.y, grid)
    rows, ok = [], True
    for k, t in enumerate(grid):
        good = lhs[k] <= rhs[k] * (1 + 1e-12) + 1e-300
        for i in range(2):
            if tags[i] == "exact":
                good &= abs(closed[k, i] - pp[k, i]) <= 1e-10 * max(abs(pp[k, i]), 1e-300)
            else:
                good &= closed[k, i] >= pp[k, i] * (1 - 1e-12)
        ok &= bool(good)
        p = pi(b, bt, t)
        rows.append((float(t), pp[k, 0], pp[k, 1], closed[k, 0], closed[k, 1], p[0], p[1],
                     mean_total_mass(b, bt, model.immigration, args.x, float(t)), lhs[k], rhs[k],
                     str(bool(good)).lower()))
    _write_rows(out / "table.csv", _header(model, args.seed),
                ["t", "pi_prime1", "pi_prime2", "closed1", "closed2", "pi1", "pi2", "mean_total_mass",
                 "decay_lhs", "decay_rhs", "passed"], rows)
    _write_json(out / "report.json", {"command": "moments", "config_hash": model.config_hash(), "seed": args.seed,
                                      "spectral": sd.to_dict(), "tags": list(tags), "passed": ok})
    return EXIT_PASS if ok else EXIT_FAIL


def _run_experiment(args, model) -> ExperimentReport:
    c = args.command
    if c == "wasserstein-decay":
        return wasserstein_decay_experiment(model, args.x, args.t_grid, args.n, args.seed, args.dt,
                                            burn_in=args.burn_in, thinning=args.thinning, n_chains=args.n_chains)
    if c == "tv-decay":
        return tv_decay_experiment(model, args.x, args.t_grid, args.n_paths, args.seed, args.dt,
                                   n_stationary=args.n_stationary, threshold=args.threshold)
    if c == "coupling-bound":
        return coupling_bound_experiment(model, args.x, args.y, args.t_grid, args.n_paths, args.seed, args.dt,
                                         n_w1=args.n_w1)
    if c == "first-moment":
        return first_moment_experiment(model, args.x, args.t_grid, args.n_paths, args.seed, args.dt)
    varphi = ScalarMechanism(*args.varphi) if args.varphi else dominating_mechanism(model.branching)
    return domination_experiment(model, varphi, args.t_grid, args.lam_grid, args.n_paths, args.seed, args.dt,
                                 extinction_grid=args.extinction_grid)


COMMANDS = {"validate": _cmd_validate, "simulate": _cmd_simulate, "moments": _cmd_moments}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_CONFIG
    try:
        model = load_config(args.model)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command in COMMANDS:
            return COMMANDS[args.command](args, model, out)
        rep = _run_experiment(args, model)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    rep.write_json(out / "report.json")
    rep.write_csv(out / "table.csv")
    status = "PASS" if rep.passed else "FAIL"
    print(f"{status} {rep.name} ({rep.model_hash}, seed {args.seed}) {rep.message}".rstrip())
    return EXIT_PASS if rep.passed else EXIT_FAIL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
