"""Monte-Carlo experiments over attack budgets, with tabulation and output files.

An experiment runs ``trials`` independent trials at every budget point. Trial
data depend only on (seed, trial); attack randomness on (seed, trial, budget
index), so each grid point is reproducible on its own and the output does not
depend on execution order.
"""
from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from scipy.stats import binomtest

from . import __version__
from .attack_vrft import AttackBudget, maxmin_attack, random_attack, targeted_attack
from .benchmarks import (
    BATCH_A,
    BATCH_B,
    FLEX_PLANT,
    FLEX_THETA0,
    batch_reactor_data,
    flex_dataset,
    flex_problem,
    step_input,
)
from .lti import UNSTABLE_RADIUS, TransferFunction, closed_loop, filter_signal, load_system, spectral_radius, system_from_dict
from .optim import LINF, OptimizerOptions, PsoOptions, make_rng
from .vrft import ControllerBasis, Dataset, VrftError, VrftProblem, controller_ss, learner_loss
from .willems import DesignError, eig_attack_input, h2_closed_loop, h2_design

SCHEMA_VERSION = 1

BENCHMARKS = ("flexible_transmission", "batch_reactor", "custom")
SCENARIOS = ("step_input", "white_noise_input")
ATTACKS = ("maxmin", "targeted", "random", "willems_eig")

TABLE1_EPS_U = (0.0, 0.1, 0.2)
TABLE1_EPS_Y = (0.01, 0.023, 0.037, 0.05, 0.057)


def table1_grid() -> list[list[float]]:
    return [[eu, ey] for eu in TABLE1_EPS_U for ey in TABLE1_EPS_Y]


@dataclass
class ExperimentConfig:
    """Experiment description; JSON config files hold these fields.

    ``budgets`` is a list of (eps_u, eps_y) pairs for the VRFT attacks, radii
    relative to the clean signal norms, or a list of absolute elementwise
    input radii for ``willems_eig``.
    """

    benchmark: str = "flexible_transmission"
    scenario: str = "white_noise_input"
    N: int = 512
    trials: int = 64
    budgets: list = field(default_factory=table1_grid)
    attack: str = "maxmin"
    seed: int = 0
    output_dir: str = "results"
    optimizer: dict = field(default_factory=dict)
    pso: dict = field(default_factory=dict)
    target_scale: float = 3.0
    system_file: str | None = None
    workers: int = 1

    def __post_init__(self):
        if self.benchmark not in BENCHMARKS:
            raise ValueError(f"benchmark must be one of {BENCHMARKS}")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        if self.attack not in ATTACKS:
            raise ValueError(f"attack must be one of {ATTACKS}")
        if self.trials < 1 or self.N < 1:
            raise ValueError("trials and N must be positive")
        if not self.budgets:
            raise ValueError("budget grid must be nonempty")
        if self.benchmark == "custom" and not self.system_file:
            raise ValueError("custom benchmark needs system_file")
        self.budgets = [self._budget_pair(b) for b in self.budgets]

    def _budget_pair(self, b) -> list[float]:
        if np.isscalar(b):
            return [float(b), 0.0]
        b = [float(v) for v in b]
        if len(b) != 2 or min(b) < 0:
            raise ValueError(f"budget point {b} must be a nonnegative pair")
        return b

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> ExperimentConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def optimizer_options(self) -> OptimizerOptions:
        return OptimizerOptions(**self.optimizer)

    def pso_options(self) -> PsoOptions:
        return PsoOptions(**self.pso)


@dataclass
class TrialRecord:
    attack: str
    budget_index: int
    trial: int
    seed: int
    budget_u: float
    budget_y: float
    delta_u: float
    delta_y: float
    theta_clean: list
    theta_poisoned: list
    learner_loss_clean: float
    learner_loss_poisoned: float
    attack_objective: float
    spectral_radius: float
    unstable: bool
    iterations: int
    converged: bool
    error: str = ""
    wall_time: float = 0.0


#: Fields written to CSV/JSON; wall time is kept out so outputs are reproducible.
RECORD_FIELDS = [f.name for f in fields(TrialRecord) if f.name != "wall_time"]
_VECTOR_FIELDS = {"theta_clean", "theta_poisoned"}
_INT_FIELDS = {"budget_index", "trial", "seed", "iterations"}
_BOOL_FIELDS = {"unstable", "converged"}
_STR_FIELDS = {"attack", "error"}


def trial_seed(master: int, trial: int, budget_index: int | None = None) -> int:
    """32-bit seed hashed from (master, trial[, budget index])."""
    key = [master, trial] if budget_index is None else [master, trial, budget_index]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


# ---------------------------------------------------------------------------
# trial execution


def _custom_problem(path: str) -> tuple[VrftProblem, Any]:
    desc = json.loads(Path(path).read_text())
    plant = system_from_dict(desc["plant"])
    mr = system_from_dict(desc["reference_model"])
    filt = system_from_dict(desc["filter"]) if "filter" in desc else (1.0 - mr) * mr
    basis = ControllerBasis(tuple(TransferFunction(b["num"], b["den"]) for b in desc["basis"]))
    return VrftProblem(None, mr, filt, basis), plant


class _VrftBench:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        if cfg.benchmark == "custom":
            self.base, self.plant = _custom_problem(cfg.system_file)
        else:
            self.base, self.plant = flex_problem(), FLEX_PLANT

    def dataset(self, trial: int) -> Dataset:
        cfg = self.cfg
        if cfg.scenario == "step_input":
            u = step_input(cfg.N)
        else:
            u = make_rng(cfg.seed, trial).standard_normal(cfg.N)
        y = filter_signal(self.plant, u)
        return Dataset(filter_signal(self.base.filter, u), filter_signal(self.base.filter, y))

    def run_trial(self, trial: int) -> list[TrialRecord]:
        cfg = self.cfg
        p = self.base.with_dataset(self.dataset(trial))
        u, y = p.dataset.u, p.dataset.y
        out = []
        for bi, (eu, ey) in enumerate(cfg.budgets):
            seed = trial_seed(cfg.seed, trial, bi)
            b = AttackBudget.relative(eu, ey, u, y)
            t0 = time.perf_counter()
            try:
                res = self._attack(p, b, seed)
                theta_p = res.theta_poisoned
                rho = spectral_radius(closed_loop(self.plant, controller_ss(theta_p, p.basis)).A)
                rec = TrialRecord(
                    cfg.attack, bi, trial, seed, eu, ey, b.delta_u, b.delta_y,
                    res.theta_clean.tolist(), theta_p.tolist(),
                    learner_loss(u, y, res.theta_clean, p),
                    _nan(res.metadata.get("learner_loss_poisoned")),
                    float(res.objective), rho, bool(rho >= UNSTABLE_RADIUS),
                    int(res.iterations), bool(res.converged),
                )
            except (VrftError, np.linalg.LinAlgError, ValueError) as exc:
                rec = _failed(cfg.attack, bi, trial, seed, eu, ey, b.delta_u, b.delta_y, exc)
            rec.wall_time = time.perf_counter() - t0
            out.append(rec)
        return out

    def _attack(self, p, b, seed):
        cfg = self.cfg
        if cfg.attack == "maxmin":
            return maxmin_attack(p, b, cfg.optimizer_options(), seed)
        if cfg.attack == "random":
            return random_attack(p, b, seed)
        if cfg.attack == "targeted":
            if cfg.benchmark == "custom":
                from .vrft import vrft_fit

                target = cfg.target_scale * vrft_fit(p.dataset.u, p.dataset.y, p)
            else:
                target = cfg.target_scale * FLEX_THETA0
            return targeted_attack(p, target, b, cfg.optimizer_options(), seed)
        raise ValueError(f"attack {cfg.attack!r} does not apply to VRFT benchmarks")


class _WillemsBench:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg

    def run_trial(self, trial: int) -> list[TrialRecord]:
        cfg = self.cfg
        d = batch_reactor_data(cfg.N, make_rng(cfg.seed, trial))
        out = []
        try:
            design = h2_design(d)
        except (DesignError, np.linalg.LinAlgError) as exc:
            return [_failed(cfg.attack, bi, trial, trial_seed(cfg.seed, trial, bi), du, dy, du, dy, exc)
                    for bi, (du, dy) in enumerate(cfg.budgets)]
        for bi, (du, dy) in enumerate(cfg.budgets):
            seed = trial_seed(cfg.seed, trial, bi)
            t0 = time.perf_counter()
            b = AttackBudget(du, 0.0, norm_u=LINF, norm_y=LINF)
            res = eig_attack_input(d, None, b, cfg.pso_options(), seed, design=design)
            K = res.theta_poisoned
            rho = spectral_radius(BATCH_A + BATCH_B @ K)
            try:
                h2 = h2_closed_loop(BATCH_A, BATCH_B, K)
            except ValueError:
                h2 = math.inf
            rec = TrialRecord(
                cfg.attack, bi, trial, seed, du, dy, du, 0.0,
                design.K.ravel().tolist(), K.ravel().tolist(),
                design.objective, h2, float(res.objective), rho, bool(rho >= UNSTABLE_RADIUS),
                int(res.iterations), bool(res.converged),
            )
            rec.wall_time = time.perf_counter() - t0
            out.append(rec)
        return out


def _nan(v) -> float:
    return math.nan if v is None else float(v)


def _failed(attack, bi, trial, seed, eu, ey, du, dy, exc) -> TrialRecord:
    return TrialRecord(attack, bi, trial, seed, eu, ey, du, dy, [], [], math.nan, math.nan,
                       math.nan, math.nan, False, 0, False, f"{type(exc).__name__}: {exc}")


def _bench(cfg: ExperimentConfig):
    if cfg.attack == "willems_eig" or cfg.benchmark == "batch_reactor":
        if cfg.attack != "willems_eig" or cfg.benchmark != "batch_reactor":
            raise ValueError("willems_eig runs on the batch_reactor benchmark only")
        return _WillemsBench(cfg)
    return _VrftBench(cfg)


def _run_trial(args) -> list[TrialRecord]:
    cfg_dict, trial = args
    return _bench(ExperimentConfig.from_dict(cfg_dict)).run_trial(trial)


def run_experiment(cfg: ExperimentConfig) -> list[TrialRecord]:
    """Run every (budget point, trial) pair; records sorted by (budget, trial)."""
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            chunks = list(pool.map(_run_trial, [(cfg.to_dict(), t) for t in range(cfg.trials)]))
    else:
        bench = _bench(cfg)
        chunks = [bench.run_trial(t) for t in range(cfg.trials)]
    records = [r for chunk in chunks for r in chunk]
    records.sort(key=lambda r: (r.budget_index, r.trial))
    return records


# ---------------------------------------------------------------------------
# statistics


def wilson_interval(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    if n == 0:
        return (math.nan, math.nan)
    ci = binomtest(k, n).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def stability_table(records: Iterable[TrialRecord]) -> list[dict]:
    """Instability fraction per budget point, failed trials excluded."""
    groups: dict[tuple, list] = {}
    for r in records:
        groups.setdefault((r.attack, r.budget_index, r.budget_u, r.budget_y), []).append(r)
    rows = []
    for (attack, bi, bu, by), recs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        ok = [r for r in recs if not r.error]
        k = sum(r.unstable for r in ok)
        n = len(ok)
        lo, hi = wilson_interval(k, n)
        rows.append({
            "attack": attack,
            "budget_index": bi,
            "budget_u": bu,
            "budget_y": by,
            "trials": n,
            "failed": len(recs) - n,
            "unstable": k,
            "fraction": k / n if n else math.nan,
            "ci_low": lo,
            "ci_high": hi,
            "mean_spectral_radius": float(np.mean([r.spectral_radius for r in ok])) if ok else math.nan,
        })
    return rows


CURVE_METRICS = ("learner_loss_poisoned", "attack_objective", "spectral_radius")


def curve_rows(records: Iterable[TrialRecord]) -> list[dict]:
    """Long-format mean/std/count per (attack, budget point, metric)."""
    groups: dict[tuple, list] = {}
    for r in records:
        if not r.error:
            groups.setdefault((r.attack, r.budget_index, r.budget_u, r.budget_y), []).append(r)
    rows = []
    for (attack, bi, bu, by), recs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        for metric in CURVE_METRICS:
            vals = np.array([getattr(r, metric) for r in recs], dtype=float)
            vals = vals[np.isfinite(vals)]
            rows.append({
                "attack": attack, "budget_u": bu, "budget_y": by, "metric": metric,
                "mean": float(vals.mean()) if vals.size else math.nan,
                "std": float(vals.std(ddof=1)) if vals.size > 1 else math.nan,
                "count": int(vals.size),
            })
    return rows


# ---------------------------------------------------------------------------
# serialization


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (list, tuple)):
        return ";".join(_fmt(x) for x in v)
    return str(v)


def _json_value(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    if isinstance(v, list):
        return [_json_value(x) for x in v]
    return v


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["schema_version", *header])
        for row in rows:
            w.writerow([SCHEMA_VERSION, *(_fmt(row[h]) for h in header)])


def emit(
    records: Sequence[TrialRecord],
    out_dir: str | Path,
    formats: Sequence[str] = ("csv", "json"),
    cfg: ExperimentConfig | None = None,
    wall_clock: float | None = None,
) -> list[Path]:
    """Write records, the stability table, curve data and a manifest.

    Wall-clock information goes to ``timing.txt`` so every CSV/JSON file is a
    pure function of (config, seed).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    rows = [{k: getattr(r, k) for k in RECORD_FIELDS} for r in records]
    if "csv" in formats:
        _write_csv(out / "records.csv", RECORD_FIELDS, rows)
        table = stability_table(records)
        _write_csv(out / "table1.csv", list(table[0]) if table else _TABLE_HEADER, table)
        _write_csv(out / "curves.csv", _CURVE_HEADER, curve_rows(records))
        written += [out / "records.csv", out / "table1.csv", out / "curves.csv"]
    if "json" in formats:
        doc = {"schema_version": SCHEMA_VERSION,
               "records": [{k: _json_value(v) for k, v in row.items()} for row in rows]}
        (out / "records.json").write_text(json.dumps(doc, indent=1) + "\n")
        written.append(out / "records.json")
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "package": "ddpoison",
        "version": __version__,
        "config": None if cfg is None else _result_config(cfg),
        "records": len(records),
        "timing_file": "timing.txt",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    written.append(out / "manifest.json")
    if wall_clock is not None:
        lines = [f"wall_clock_s {wall_clock:.3f}"]
        lines += [f"trial_time_s {r.budget_index} {r.trial} {r.wall_time:.4f}" for r in records]
        (out / "timing.txt").write_text("\n".join(lines) + "\n")
        written.append(out / "timing.txt")
    return written


def _result_config(cfg: ExperimentConfig) -> dict:
    """Config fields that determine the results (not where or how fast they are computed)."""
    d = cfg.to_dict()
    for key in ("output_dir", "workers"):
        d.pop(key)
    return d


_TABLE_HEADER = ["attack", "budget_index", "budget_u", "budget_y", "trials", "failed", "unstable",
                 "fraction", "ci_low", "ci_high", "mean_spectral_radius"]
_CURVE_HEADER = ["attack", "budget_u", "budget_y", "metric", "mean", "std", "count"]


def _parse(name: str, s: str):
    if name in _STR_FIELDS:
        return s
    if name in _BOOL_FIELDS:
        return s == "true"
    if name in _INT_FIELDS:
        return int(s)
    if name in _VECTOR_FIELDS:
        return [float(x) for x in s.split(";")] if s else []
    return float(s)


def read_records_csv(path: str | Path) -> list[TrialRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        out = []
        for row in reader:
            if int(row.pop("schema_version")) != SCHEMA_VERSION:
                raise ValueError("unsupported schema version")
            out.append(TrialRecord(**{k: _parse(k, v) for k, v in row.items()}))
    return out


def run_and_emit(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> list[TrialRecord]:
    t0 = time.perf_counter()
    records = run_experiment(cfg)
    emit(records, out_dir or cfg.output_dir, cfg=cfg, wall_clock=time.perf_counter() - t0)
    return records
