"""Experiment harness: JSON configs in, learning-curve CSVs out."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .cmdp import CmdpError, TabularCmdp
from .driver import ApdoConfig, PdDdpgRunConfig, RunRecord, run_apdo, run_pdo, run_primal_dual_ddpg
from .envs import EnvError, default_gamma, make_env
from .offpolicy import OffPolicyConfig
from .oracle import InfeasibleError, solve_dual_bisection

log = logging.getLogger("apdo")

ALGORITHMS = ("pdo", "apdo", "pd-ddpg")
PRIMAL_KEYS = ("alpha", "beta", "epochs", "batch_size", "gamma", "gae_lambda", "normalize_advantages",
               "policy", "policy_hidden", "lambda_init", "k_adj")
DDPG_KEYS = ("steps_per_epoch", "warmup")
TOP_KEYS = ("algorithm", "algorithms", "env", "seeds", "output", "parallelism", "record_wall_clock", "offpolicy",
            *PRIMAL_KEYS, *DDPG_KEYS)
TUPLE_FIELDS = ("policy_hidden", "critic_hidden", "actor_hidden")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    env: dict = field(default_factory=dict)
    algorithms: tuple = ("apdo",)
    seeds: tuple = (0,)
    output: str = "runs"
    parallelism: int = 1
    record_wall_clock: bool = False
    apdo: ApdoConfig = field(default_factory=ApdoConfig)
    ddpg: PdDdpgRunConfig = field(default_factory=PdDdpgRunConfig)


def _typed(key: str, value, kind):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if kind is tuple:
        if not isinstance(value, list) or not all(isinstance(v, int) and v > 0 for v in value):
            raise ConfigError(f"{key}: expected a list of positive integers, got {value!r}")
        return tuple(value)
    if not isinstance(value, kind):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}")
    return value


def _kind(f) -> type:
    if f.name in TUPLE_FIELDS:
        return tuple
    return {"int": int, "float": float, "bool": bool, "str": str}.get(str(f.type), str)


def _build(cls, doc: dict, path: str, **extra):
    known = {f.name: f for f in fields(cls)}
    kw = dict(extra)
    for key, value in doc.items():
        if key not in known:
            raise ConfigError(f"{path}{key}: unknown key")
        kw[key] = _typed(path + key, value, _kind(known[key]))
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path.rstrip('.') or 'config'}: {exc}") from None


def parse_config(doc) -> ExperimentConfig:
    """Validate a JSON document (string or parsed object) and apply defaults."""
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(TOP_KEYS))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key")
    if "algorithm" in doc and "algorithms" in doc:
        raise ConfigError("algorithm: give either 'algorithm' or 'algorithms', not both")
    algos = doc.get("algorithms", [doc["algorithm"]] if "algorithm" in doc else ["apdo"])
    if not isinstance(algos, list) or not algos:
        raise ConfigError("algorithms: expected a non-empty list")
    for a in algos:
        if a not in ALGORITHMS:
            raise ConfigError(f"algorithm: {a!r} not one of {ALGORITHMS}")
    seeds = doc.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds: expected a non-empty list of integers")
    seeds = tuple(_typed("seeds", s, int) for s in seeds)
    env_doc = doc.get("env", {})
    if not isinstance(env_doc, dict):
        raise ConfigError("env: expected an object")
    try:
        env = make_env(env_doc)
    except (EnvError, CmdpError, OSError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"env: {exc}") from None
    off_doc = doc.get("offpolicy", {})
    if not isinstance(off_doc, dict):
        raise ConfigError("offpolicy: expected an object")
    off = _build(OffPolicyConfig, off_doc, "offpolicy.")
    primal = {k: doc[k] for k in PRIMAL_KEYS if k in doc}
    primal.setdefault("gamma", default_gamma(env))
    apdo = _build(ApdoConfig, primal, "", offpolicy=off)
    ddpg_doc = {k: doc[k] for k in DDPG_KEYS if k in doc}
    ddpg = _build(PdDdpgRunConfig, ddpg_doc, "", epochs=apdo.epochs, gamma=apdo.gamma, offpolicy=off)
    return ExperimentConfig(
        env=env_doc,
        algorithms=tuple(algos),
        seeds=seeds,
        output=_typed("output", doc.get("output", "runs"), str),
        parallelism=max(1, _typed("parallelism", doc.get("parallelism", 1), int)),
        record_wall_clock=_typed("record_wall_clock", doc.get("record_wall_clock", False), bool),
        apdo=apdo,
        ddpg=ddpg,
    )


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def csv_header(m: int) -> list[str]:
    return (["epoch", "avg_return"] + [f"avg_cost_{i + 1}" for i in range(m)]
            + [f"lambda_{i + 1}" for i in range(m)] + ["samples", "wall_s", "adjusted"])


def _fmt(x: float) -> str:
    return repr(float(x))


def record_row(rec: RunRecord, wall_clock: bool) -> list[str]:
    return ([str(rec.epoch), _fmt(rec.avg_return)] + [_fmt(c) for c in rec.avg_cost]
            + [_fmt(v) for v in rec.lam] + [str(rec.samples), _fmt(rec.wall_s if wall_clock else 0.0),
                                             "1" if rec.adjusted else "0"])


def write_run_csv(path: Path, records: list[RunRecord], m: int, wall_clock: bool) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(m))
        for rec in records:
            w.writerow(record_row(rec, wall_clock))


def write_summary_csv(path: Path, runs: list[list[RunRecord]], m: int) -> None:
    """Per-epoch cross-seed median and quartiles of every metric."""
    metrics = ["avg_return"] + [f"avg_cost_{i + 1}" for i in range(m)] + [f"lambda_{i + 1}" for i in range(m)]
    header = ["epoch", "n_seeds"] + [f"{k}_{s}" for k in metrics for s in ("q25", "median", "q75")]
    n_epochs = min((len(r) for r in runs), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for e in range(n_epochs):
            table = np.array([[r[e].avg_return, *r[e].avg_cost, *r[e].lam] for r in runs])
            q = np.percentile(table, [25, 50, 75], axis=0)
            w.writerow([str(e), str(len(runs))] + [_fmt(q[j, i]) for i in range(table.shape[1]) for j in range(3)])


def run_single(algorithm: str, env_doc: dict, apdo: ApdoConfig, ddpg: PdDdpgRunConfig, seed: int) -> list[RunRecord]:
    env = make_env(env_doc)
    if algorithm == "pdo":
        return run_pdo(env, apdo, seed)
    if algorithm == "apdo":
        return run_apdo(env, apdo, seed)
    if algorithm == "pd-ddpg":
        return run_primal_dual_ddpg(env, ddpg, seed)
    raise ConfigError(f"algorithm: {algorithm!r} not one of {ALGORITHMS}")


def _execute(jobs: list[tuple], parallelism: int) -> list[list[RunRecord]]:
    if parallelism <= 1 or len(jobs) <= 1:
        out = []
        for job in jobs:
            log.info("running %s seed %d", job[0], job[-1])
            out.append(run_single(*job))
        return out
    with ProcessPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(run_single, *zip(*jobs)))


def run_experiment(cfg: ExperimentConfig, output: str | Path | None = None) -> list[Path]:
    """Run every (algorithm, seed) pair; write one CSV per run and one summary per algorithm."""
    out = Path(output if output is not None else cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    m = make_env(cfg.env).num_costs
    jobs = [(a, cfg.env, cfg.apdo, cfg.ddpg, s) for a in cfg.algorithms for s in cfg.seeds]
    results = _execute(jobs, cfg.parallelism)
    written = []
    for (algo, *_, seed), records in zip(jobs, results):
        path = out / f"{algo}_seed{seed}.csv"
        write_run_csv(path, records, m, cfg.record_wall_clock)
        written.append(path)
    for algo in cfg.algorithms:
        runs = [r for (a, *_), r in zip(jobs, results) if a == algo]
        path = out / f"{algo}_summary.csv"
        write_summary_csv(path, runs, m)
        written.append(path)
    return written


def sweep_kadj(cfg: ExperimentConfig, values: list[int], output: str | Path | None = None) -> list[Path]:
    """APDO run set per adjustment epoch, shared seeds, plus a combined comparison CSV."""
    if not values:
        raise ConfigError("sweep-kadj: at least one k_adj value is required")
    for k in values:
        if k < 0 or k >= cfg.apdo.epochs:
            raise ConfigError(f"k_adj: {k} outside [0, epochs={cfg.apdo.epochs})")
    out = Path(output if output is not None else cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    m = make_env(cfg.env).num_costs
    jobs = [("apdo", cfg.env, _with_kadj(cfg.apdo, k), cfg.ddpg, s) for k in values for s in cfg.seeds]
    results = _execute(jobs, cfg.parallelism)
    written = []
    rows = []
    for (_, _, apdo, _, seed), records in zip(jobs, results):
        sub = out / f"kadj_{apdo.k_adj}"
        sub.mkdir(exist_ok=True)
        path = sub / f"apdo_seed{seed}.csv"
        write_run_csv(path, records, m, cfg.record_wall_clock)
        written.append(path)
        adj = records[apdo.k_adj]
        last = records[-1]
        rows.append([str(apdo.k_adj), str(seed)] + [_fmt(v) for v in adj.lambda_off]
                    + [_fmt(last.avg_return)] + [_fmt(c) for c in last.avg_cost] + [_fmt(v) for v in last.lam])
    for k in values:
        runs = [r for (_, _, a, _, _), r in zip(jobs, results) if a.k_adj == k]
        path = out / f"kadj_{k}" / "apdo_summary.csv"
        write_summary_csv(path, runs, m)
        written.append(path)
    path = out / "kadj_sweep.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k_adj", "seed"] + [f"lambda_off_{i + 1}" for i in range(m)] + ["final_avg_return"]
                   + [f"final_avg_cost_{i + 1}" for i in range(m)] + [f"final_lambda_{i + 1}" for i in range(m)])
        w.writerows(rows)
    written.append(path)
    return written


def _with_kadj(cfg: ApdoConfig, k: int) -> ApdoConfig:
    return replace(cfg, k_adj=k)


def oracle_report(cmdp: TabularCmdp) -> dict:
    sol = solve_dual_bisection(cmdp)
    return {
        "lambda_star": sol.lambda_star,
        "R_star": sol.R_star,
        "C_star": sol.C_star,
        "mixture_weight": sol.weight,
        "policy": np.asarray(sol.policy).tolist(),
    }


def _parse_values(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("at least one value is required")
    return values


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="apdo", description="Primal-dual constrained RL experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run every algorithm and seed in a config")
    run.add_argument("config")
    run.add_argument("-o", "--output", help="override the output directory")
    sweep = sub.add_parser("sweep-kadj", help="APDO runs for several adjustment epochs")
    sweep.add_argument("config")
    sweep.add_argument("--values", type=_parse_values, default=[1, 5, 10])
    sweep.add_argument("-o", "--output", help="override the output directory")
    orc = sub.add_parser("oracle", help="exact optimum of a single-constraint tabular CMDP")
    orc.add_argument("cmdp")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "oracle":
            try:
                cmdp = TabularCmdp.load(args.cmdp)
            except KeyError as exc:
                raise CmdpError(f"missing key {exc}") from None
            print(json.dumps(oracle_report(cmdp), indent=2))
            return 0
        cfg = load_config(args.config)
        if args.command == "run":
            paths = run_experiment(cfg, args.output)
        else:
            paths = sweep_kadj(cfg, args.values, args.output)
        for path in paths:
            print(path)
        return 0
    except (ConfigError, EnvError, CmdpError, InfeasibleError, FloatingPointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
