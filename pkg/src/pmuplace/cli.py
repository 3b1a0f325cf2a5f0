"""Command-line entry point: ``pmuplace optimize | evaluate | validate``.

Exit codes: 0 success, 1 usage/schema error, 2 infeasible problem,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .estimation import CovarianceNotPSDError, UncertaintyParams
from .grid import FIXTURES, GridError, GridModel, load_fixture, load_grid
from .moea import GAConfig, Individual, NoFeasibleError, PlacementProblem, evolve
from .placement import Case, channel_config
from .sensitivity import SearchMode, ToleranceSpec
from .validation import run_checks

log = logging.getLogger("pmuplace")

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_NUMERIC = 0, 1, 2, 3

GA_KEYS = ("population_size", "generations", "crossover_prob", "mutation_prob", "greedy_fraction", "reference_point")
UNCERTAINTY_KEYS = ("sigma_v", "sigma_i", "zi_sigma_factor", "sigma_r", "current_scale")
TOLERANCE_KEYS = ("delta", "sensitivity_search", "absolute_change")
TOP_KEYS = ("network", "case", "contingency", "literal_observability", "seed", "output_dir",
            "ga", "uncertainty", "tolerance")

PARETO_HEADER = ["C", "U_percent", "S", "buses", "channels"]
HV_HEADER = ["generation", "hv"]


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    network: str | None = None
    case: str = "A"
    contingency: bool = False
    literal_observability: bool = False
    seed: int = 0
    output_dir: str = "out"
    ga: dict[str, Any] = field(default_factory=dict)
    uncertainty: dict[str, Any] = field(default_factory=dict)
    tolerance: dict[str, Any] = field(default_factory=dict)

    def echo(self) -> dict[str, Any]:
        """Everything that determines the results (the output directory does not)."""
        out = asdict(self)
        out.pop("output_dir")
        return out


def _check_keys(section: dict, allowed: tuple[str, ...], where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key {unknown[0]!r}")


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    _check_keys(doc, TOP_KEYS, str(path))
    for key, allowed in (("ga", GA_KEYS), ("uncertainty", UNCERTAINTY_KEYS), ("tolerance", TOLERANCE_KEYS)):
        _check_keys(doc.get(key, {}), allowed, f"{path}: {key}")
    cfg = RunConfig(**doc)
    return cfg


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if args.network is not None:
        cfg.network = args.network
    if args.case is not None:
        cfg.case = args.case
    if args.contingency:
        cfg.contingency = True
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    if getattr(args, "generations", None) is not None:
        cfg.ga["generations"] = args.generations
    if getattr(args, "population", None) is not None:
        cfg.ga["population_size"] = args.population
    if cfg.network is None:
        raise ConfigError("no network given (use --network or the config key 'network')")
    if cfg.case not in ("A", "B"):
        raise ConfigError(f"case must be 'A' or 'B', got {cfg.case!r}")
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    return cfg


def resolve_network(spec: str) -> GridModel:
    """Load ``builtin:NAME`` fixtures or a network file path."""
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        if name not in FIXTURES:
            raise GridError(f"unknown builtin network {name!r}; choose from {', '.join(FIXTURES)}")
        return load_fixture(name)
    return load_grid(spec)


def build_problem(cfg: RunConfig, grid: GridModel) -> PlacementProblem:
    try:
        params = UncertaintyParams(**cfg.uncertainty)
        tol_kw = dict(cfg.tolerance)
        if "sensitivity_search" in tol_kw:
            tol_kw["search"] = SearchMode(tol_kw.pop("sensitivity_search"))
        tol = ToleranceSpec(**tol_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config: {exc}") from None
    ccfg = channel_config(grid, Case(cfg.case), cfg.contingency, cfg.literal_observability)
    return PlacementProblem(grid, ccfg, params, tol)


def build_ga_config(cfg: RunConfig, grid: GridModel) -> GAConfig:
    kw = dict(cfg.ga)
    if kw.get("reference_point") is not None:
        kw["reference_point"] = tuple(float(v) for v in kw["reference_point"])
    try:
        return GAConfig.defaults_for(grid, rng_seed=cfg.seed, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config: ga: {exc}") from None


# ----------------------------------------------------------------------- exports


def _num(v: float) -> float | None:
    return float(v) if np.isfinite(v) else None


def member_record(grid: GridModel, ind: Individual) -> dict[str, Any]:
    buses = ind.buses
    return {
        "buses": buses,
        "bus_names": [grid.buses[b].name for b in buses],
        "channels": [ind.channels[b] for b in buses],
        "C": int(ind.objectives[0]),
        "U_percent": _num(ind.objectives[1]),
        "S": _num(ind.objectives[2]),
        "violations": int(ind.violations),
    }


def write_pareto_csv(path: Path, grid: GridModel, members: list[Individual]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PARETO_HEADER)
        for m in members:
            rec = member_record(grid, m)
            w.writerow([
                rec["C"],
                repr(rec["U_percent"]),
                repr(rec["S"]),
                " ".join(str(b) for b in rec["buses"]),
                " ".join(str(c) for c in rec["channels"]),
            ])


def write_hv_csv(path: Path, trace: list[float]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HV_HEADER)
        for gen, hv in enumerate(trace):
            w.writerow([gen, repr(float(hv))])


def placement_table(grid: GridModel, member: Individual) -> str:
    """Group buses by channels used, one row per group."""
    groups: dict[int, list[str]] = {}
    for b in range(grid.n_buses):
        groups.setdefault(int(member.channels[b]) if member.x[b] else 0, []).append(grid.buses[b].name)
    rows = [("Type of bus", "No. of μ-PMU", "Bus Numbers")]
    for k in sorted(groups):
        label = "Without μ-PMUs" if k == 0 else f"With {k} μ-PMUs channels"
        rows.append((label, str(len(groups[k])), ", ".join(groups[k])))
    w0 = max(len(r[0]) for r in rows)
    w1 = max(len(r[1]) for r in rows)
    lines = [f"{a:<{w0}} | {b:<{w1}} | {c}" for a, b, c in rows]
    lines.insert(1, f"{'-' * w0}-+-{'-' * w1}-+-{'-' * 11}")
    head = (f"# min-C archive member: C={int(member.objectives[0])}, "
            f"U={member.objectives[1]:.6g}%, S={member.objectives[2]:.6g}")
    return "\n".join([head, *lines]) + "\n"


def _dump(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------- commands


def cmd_optimize(cfg: RunConfig) -> int:
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    grid = resolve_network(cfg.network)
    problem = build_problem(cfg, grid)
    ga = build_ga_config(cfg, grid)
    timings["load"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    archive = evolve(problem, ga)
    timings["optimize"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "tool": {"name": "pmuplace", "version": __version__},
        "config": cfg.echo(),
        "ga": {k: v for k, v in asdict(ga).items()},
        "grid": grid.fingerprint(),
        "units": {"U": "percent of nominal slack voltage", "S": "sigma_r-normalised covariance",
                  "delta": problem.tol.delta},
        "reference_point": list(archive.reference_point),
        "evaluations": archive.evaluations,
        "archive": [member_record(grid, m) for m in archive.members],
        "hv_trace": [float(v) for v in archive.hv_trace],
    }
    _dump(out / "run.json", record)
    write_pareto_csv(out / "pareto.csv", grid, archive.members)
    write_hv_csv(out / "hypervolume.csv", archive.hv_trace)
    (out / "placement_table.txt").write_text(placement_table(grid, archive.members[0]), encoding="utf-8")
    timings["export"] = time.perf_counter() - t0
    _dump(out / "timing.json", {"seconds": timings})
    print(f"archive: {len(archive.members)} members, C range "
          f"{int(archive.members[0].objectives[0])}..{int(max(m.objectives[0] for m in archive.members))}, "
          f"final hv {archive.hv_trace[-1]:.6g}")
    print(f"wrote {out}")
    return EXIT_OK


def read_placement(path: str | Path, grid: GridModel) -> np.ndarray:
    """Bus ids from a JSON list, a JSON object with key ``buses``, or whitespace/comma separated text."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        doc = None
    if not isinstance(doc, (list, dict)):
        # a lone number is valid JSON but reads better as one-id text
        doc = text.replace(",", " ").split()
    if isinstance(doc, dict):
        if set(doc) != {"buses"}:
            raise ConfigError(f"{path}: expected an object with the single key 'buses'")
        doc = doc["buses"]
    if not isinstance(doc, list):
        raise ConfigError(f"{path}: expected a list of bus ids")
    x = np.zeros(grid.n_buses, dtype=np.int8)
    for tok in doc:
        try:
            b = int(tok)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: unknown bus id {tok!r}") from None
        if not 0 <= b < grid.n_buses or str(tok).strip() != str(b):
            raise ConfigError(f"{path}: unknown bus id {tok!r}")
        x[b] = 1
    return x


def cmd_evaluate(cfg: RunConfig, placement_path: str) -> int:
    grid = resolve_network(cfg.network)
    problem = build_problem(cfg, grid)
    x = read_placement(placement_path, grid)
    ind = problem.evaluate(x)
    rec = member_record(grid, ind)
    rec["feasible"] = ind.feasible
    rec["config"] = cfg.echo()
    rec["grid"] = grid.fingerprint()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "eval.json", rec)
    u = "inf" if rec["U_percent"] is None else f"{rec['U_percent']:.6g}"
    s = "inf" if rec["S"] is None else f"{rec['S']:.6g}"
    print(f"C={rec['C']} U={u}% S={s} feasible={ind.feasible} violations={ind.violations}")
    return EXIT_OK


def cmd_validate(cfg: RunConfig, trials: int) -> int:
    grid = resolve_network(cfg.network)
    problem = build_problem(cfg, grid)
    checks = run_checks(problem, trials=trials, rng_seed=cfg.seed)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    failed = [c["name"] for c in checks if c["status"] == "fail"]
    _dump(out / "validation.json", {
        "tool": {"name": "pmuplace", "version": __version__},
        "config": cfg.echo(),
        "grid": grid.fingerprint(),
        "checks": checks,
        "passed": not failed,
    })
    for c in checks:
        extra = c.get("reason") or f"measured={c.get('measured')} tolerance={c.get('tolerance')}"
        print(f"{c['status']:>7}  {c['name']}  {extra}")
    return EXIT_NUMERIC if failed else EXIT_OK


# -------------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pmuplace", description="Tri-objective micro-PMU placement.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--network", help="network JSON file or builtin:NAME")
        p.add_argument("--config", help="run configuration JSON file")
        p.add_argument("--case", choices=["A", "B"])
        p.add_argument("--contingency", action="store_true", help="require single-contingency observability")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("optimize", help="run NSGA-II and export the Pareto archive")
    common(p)
    p.add_argument("--generations", type=int)
    p.add_argument("--population", type=int)
    p = sub.add_parser("evaluate", help="score one placement")
    common(p)
    p.add_argument("--placement", required=True, help="file listing bus ids to instrument")
    p = sub.add_parser("validate", help="run the independent oracles")
    common(p)
    p.add_argument("--trials", type=int, default=100_000, help="Monte Carlo trials")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
        if args.command == "optimize":
            return cmd_optimize(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.placement)
        return cmd_validate(cfg, args.trials)
    except (ConfigError, GridError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NoFeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (np.linalg.LinAlgError, CovarianceNotPSDError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
