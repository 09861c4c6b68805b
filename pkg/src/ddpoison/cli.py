"""Command-line entry point.

Every verb accepts ``--config FILE``: a JSON object whose keys are the verb's
option names (dashes or underscores). Explicit flags take precedence.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attack_vrft import AttackBudget, maxmin_attack, random_attack, targeted_attack
from .benchmarks import FLEX_PLANT, FLEX_THETA0, flex_dataset, flex_problem, step_input
from .harness import ExperimentConfig, run_and_emit, stability_table
from .lti import as_ss, closed_loop, filter_signal, load_system, spectral_radius
from .optim import LINF, OptimizerOptions, PsoOptions, canonical_norm, make_rng
from .vrft import Dataset, controller_ss, read_dataset_csv, vrft_fit, write_dataset_csv
from .willems import eig_attack_input, h2_design, identify_BA, pe_check, read_state_csv

EIG_SWEEP_DELTAS = [0.0, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0]
LOSS_CURVE_EPS_Y = [0.0, 0.01, 0.023, 0.037, 0.05, 0.057]


class CliError(Exception):
    pass


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _dump(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    """Fill options left at their defaults from the ``--config`` JSON object."""
    if not getattr(args, "config", None) or args.verb == "experiment":
        return
    cfg = json.loads(Path(args.config).read_text())
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise CliError(f"unknown config key {key!r}")
        if getattr(args, dest) in (None, False):
            setattr(args, dest, value)
    for dest in getattr(args, "_required", ()):
        if getattr(args, dest) is None:
            parser.error(f"--{dest.replace('_', '-')} is required")


def _dataset(args) -> Dataset:
    d = read_dataset_csv(args.data)
    return flex_dataset(d.u) if args.regenerate else d


def _problem(args):
    d = _dataset(args)
    if args.prefilter:
        p = flex_problem()
        d = Dataset(filter_signal(p.filter, d.u), filter_signal(p.filter, d.y))
    return flex_problem(d)


# ---------------------------------------------------------------------------
# verbs


def cmd_simulate(args) -> int:
    if args.input_csv:
        u = np.loadtxt(args.input_csv, delimiter=",", ndmin=1)
    elif args.signal == "step":
        u = step_input(args.N)
    else:
        if args.seed is None:
            raise CliError("--seed is required for white-noise input")
        u = make_rng(args.seed).standard_normal(args.N)
    system = load_system(args.system) if args.system else FLEX_PLANT
    y = filter_signal(as_ss(system), u)
    if args.out:
        write_dataset_csv(Dataset(u, y), args.out)
    else:
        sys.stdout.write("u,y\n")
        for a, b in zip(u, y):
            sys.stdout.write(f"{a:.17g},{b:.17g}\n")
    return 0


def cmd_vrft_fit(args) -> int:
    p = _problem(args)
    theta = vrft_fit(p.dataset.u, p.dataset.y, p)
    rho = spectral_radius(closed_loop(FLEX_PLANT, controller_ss(theta, p.basis)).A)
    _dump({
        "theta": theta,
        "theta_reference": FLEX_THETA0,
        "spectral_radius": rho,
        "inversion_method": p.inversion_method(p.dataset.N),
    }, args.out)
    return 0


def _budget(args, p) -> AttackBudget:
    nu, ny = canonical_norm(args.norm_u), canonical_norm(args.norm_y)
    if args.delta_u is not None or args.delta_y is not None:
        return AttackBudget(args.delta_u or 0.0, args.delta_y or 0.0, norm_u=nu, norm_y=ny)
    return AttackBudget.relative(args.eps_u, args.eps_y, p.dataset.u, p.dataset.y, norm_u=nu, norm_y=ny)


def cmd_attack(args) -> int:
    p = _problem(args)
    b = _budget(args, p)
    opts = OptimizerOptions(**(args.optimizer or {}))
    if args.kind == "maxmin":
        res = maxmin_attack(p, b, opts, args.seed)
    elif args.kind == "random":
        res = random_attack(p, b, args.seed)
    else:
        target = np.asarray(args.target, float) if args.target else 3.0 * FLEX_THETA0
        res = targeted_attack(p, target, b, opts, args.seed)
    out = res.to_dict()
    out["spectral_radius"] = spectral_radius(
        closed_loop(FLEX_PLANT, controller_ss(res.theta_poisoned, p.basis)).A)
    _dump(out, args.out)
    return 0


def cmd_willems(args) -> int:
    d = read_state_csv(args.data, args.n)
    Q_x = None if args.qx is None else np.asarray(args.qx, float)
    if args.kind == "design":
        report = pe_check(d)
        sol = h2_design(d, Q_x)
        B, A = identify_BA(d)
        out = sol.to_dict()
        out["pe"] = {"rank": report.rank, "sigma_min": report.sigma_min, "passed": report.passed}
        out["spectral_radius"] = spectral_radius(A + B @ sol.K)
        _dump(out, args.out)
        return 0
    b = AttackBudget(args.delta, 0.0, norm_u=LINF, norm_y=LINF)
    res = eig_attack_input(d, Q_x, b, PsoOptions(**(args.pso or {})), args.seed)
    _dump(res.to_dict(), args.out)
    return 0


def _preset(kind: str) -> dict:
    if kind == "table1":
        return {}
    if kind == "losscurve":
        return {"budgets": [[0.2, e] for e in LOSS_CURVE_EPS_Y], "trials": 32}
    return {"benchmark": "batch_reactor", "attack": "willems_eig", "N": 15, "trials": 32,
            "budgets": EIG_SWEEP_DELTAS}


def cmd_experiment(args) -> int:
    fields = _preset(args.kind)
    if args.config:
        fields.update(json.loads(Path(args.config).read_text()))
    for key in ("trials", "N", "output_dir", "workers"):
        if getattr(args, key) is not None:
            fields[key] = getattr(args, key)
    fields["seed"] = args.seed
    out_dir = Path(fields.get("output_dir", "results"))
    if args.kind == "losscurve":
        records = []
        for attack in ("maxmin", "random"):
            cfg = ExperimentConfig.from_dict({**fields, "attack": attack})
            records += run_and_emit(cfg, out_dir / attack)
    else:
        records = run_and_emit(ExperimentConfig.from_dict(fields), out_dir)
    for row in stability_table(records):
        print(f"{row['attack']:>12} budget=({row['budget_u']:g}, {row['budget_y']:g}) "
              f"unstable {row['unstable']}/{row['trials']} "
              f"mean_rho={row['mean_spectral_radius']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _vrft_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="CSV with header u,y")
    p.add_argument("--prefilter", action="store_true", help="apply L=(1-Mr)Mr to both channels")
    p.add_argument("--regenerate", action="store_true",
                   help="ignore y in the file and resimulate the benchmark plant with prefiltering")
    p.set_defaults(_required=("data",))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ddpoison", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="verb", required=True)

    def verb(name, **kw):
        p = sub.add_parser(name, **kw)
        p.add_argument("--config", help="JSON file with option values")
        p.add_argument("--out", help="output file (stdout if omitted)")
        return p

    s = verb("simulate", help="simulate a system on a step, white-noise or file input")
    s.add_argument("--system", help="JSON system (num/den or A/B/C/D); benchmark plant by default")
    s.add_argument("--signal", choices=("step", "white_noise"), default="step")
    s.add_argument("--input-csv", help="one input sample per line")
    s.add_argument("--N", type=int, default=512)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    v = verb("vrft-fit", help="fit the benchmark controller on a u,y record")
    _vrft_data_args(v)
    v.set_defaults(func=cmd_vrft_fit)

    a = verb("attack", help="poisoning attack on a VRFT record")
    a.add_argument("kind", choices=("maxmin", "targeted", "random"))
    _vrft_data_args(a)
    a.add_argument("--seed", type=int, required=True)
    a.add_argument("--eps-u", type=float, default=0.0, help="radius relative to ||u||_2")
    a.add_argument("--eps-y", type=float, default=0.0, help="radius relative to ||y||_2")
    a.add_argument("--delta-u", type=float, help="absolute radius; overrides --eps-u")
    a.add_argument("--delta-y", type=float, help="absolute radius; overrides --eps-y")
    a.add_argument("--norm-u", choices=("l2", "linf", "inf"), default="l2")
    a.add_argument("--norm-y", choices=("l2", "linf", "inf"), default="l2")
    a.add_argument("--target", type=float, nargs="+", help="targeted parameter (default 3*theta0)")
    a.add_argument("--optimizer", type=json.loads, help="JSON OptimizerOptions fields")
    a.set_defaults(func=cmd_attack)

    w = verb("willems", help="state-feedback H2 design or eigenvalue attack from state data")
    w.add_argument("kind", choices=("design", "attack-eig"))
    w.add_argument("--data", help="CSV rows: n states then m inputs")
    w.add_argument("--n", type=int, default=4, help="state dimension")
    w.add_argument("--qx", type=json.loads, help="JSON n x n state weight (identity by default)")
    w.add_argument("--delta", type=float, default=0.1, help="elementwise input budget")
    w.add_argument("--seed", type=int)
    w.add_argument("--pso", type=json.loads, help="JSON PsoOptions fields")
    w.set_defaults(func=cmd_willems, _required=("data",))

    e = sub.add_parser("experiment", help="Monte-Carlo experiment writing CSV/JSON outputs")
    e.add_argument("kind", choices=("table1", "losscurve", "eigsweep"))
    e.add_argument("--config", help="JSON ExperimentConfig fields")
    e.add_argument("--seed", type=int, required=True)
    e.add_argument("--trials", type=int)
    e.add_argument("--N", type=int)
    e.add_argument("--output-dir")
    e.add_argument("--workers", type=int)
    e.set_defaults(func=cmd_experiment)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_config(args, parser)
        if args.verb == "willems" and args.kind == "attack-eig" and args.seed is None:
            parser.error("--seed is required for attack-eig")
        return args.func(args)
    except (CliError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
