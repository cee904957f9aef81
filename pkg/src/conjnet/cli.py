"""Command line entry point: validate, build, query, rank, synth and run."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import yaml

from .errors import ClampWarning, ConfigError, ConjnetError, DataError
from .inference import (DEFAULT_BUDGET_COST, DEFAULT_BUDGET_SECONDS, QueryBudget, QueryResult, Status,
                        enumerate_queries)
from .models import DEFAULT_GRID_PATH, ModelConfig, load_model_grid
from .network import EdgeKind, assert_acyclic, build_network
from .pipeline import BACKENDS, EvalOptions, prepare_for_grid, run_grid
from .ranking import ProbTable, apply_exclusions, build_report, render_report
from .synth import SynthConfig, write_trial
from .tracks import TrialSpec, load_trial, read_trial_manifest

log = logging.getLogger("conjnet")

ENV_PREFIX = "CONJNET_"
RESULT_COLUMNS = ("trial_id", "model", "query_cell", "threshold_min", "status", "log_prob", "elapsed_ms")


@dataclass
class RunManifest:
    trials: List[TrialSpec]
    models: List[ModelConfig]
    backend: str = "auto"
    output_dir: Path = Path("conjnet_out")
    parallelism: int = 1
    budget: QueryBudget = field(default_factory=QueryBudget)

    def __post_init__(self):
        if not self.trials:
            raise ConfigError("manifest lists no trials")
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be at least 1")
        ids = [t.trial_id for t in self.trials]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate trial ids in manifest")


def _trial_entries(doc, base: Path) -> List[TrialSpec]:
    raw = doc.get("trials", [])
    if isinstance(raw, str):
        p = Path(raw)
        return read_trial_manifest(p if p.is_absolute() else base / p)
    if not isinstance(raw, list):
        raise ConfigError("'trials' must be a list or a path to a trial manifest")
    out = []
    for i, t in enumerate(raw):
        try:
            p = Path(t["track_path"])
            out.append(TrialSpec(str(t["trial_id"]), float(t.get("frame_interval_min", 5.0)),
                                 p if p.is_absolute() else base / p))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"trial entry {i}: {exc!r}") from None
    return out


def load_manifest(path) -> RunManifest:
    """Read a YAML run manifest; relative paths resolve against its directory."""
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text()) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: manifest must be a mapping")
    base = path.parent
    grid = doc.get("models")
    if grid is None:
        models = load_model_grid(DEFAULT_GRID_PATH)
    else:
        gp = Path(grid)
        models = load_model_grid(gp if gp.is_absolute() else base / gp)
    budgets = doc.get("budgets") or {}
    out = Path(doc.get("output_dir", "conjnet_out"))
    return RunManifest(
        trials=_trial_entries(doc, base),
        models=models,
        backend=str(doc.get("backend", "auto")),
        output_dir=out if out.is_absolute() else base / out,
        parallelism=int(doc.get("parallelism", 1)),
        budget=QueryBudget(float(budgets.get("seconds", DEFAULT_BUDGET_SECONDS)),
                           float(budgets.get("cost", DEFAULT_BUDGET_COST))),
    )


def _setting(args, name, env, cast):
    """Flag value if given, else the environment override, else None."""
    v = getattr(args, name, None)
    if v is not None:
        return v
    e = os.environ.get(ENV_PREFIX + env)
    if e is None or e == "":
        return None
    try:
        return cast(e)
    except ValueError:
        raise ConfigError(f"{ENV_PREFIX}{env}={e!r} is not a valid value") from None


def resolve_manifest(args) -> RunManifest:
    mpath = _setting(args, "manifest", "MANIFEST", str)
    if mpath is None:
        raise ConfigError("no manifest given (use --manifest or CONJNET_MANIFEST)")
    m = load_manifest(mpath)
    backend = _setting(args, "backend", "BACKEND", str)
    jobs = _setting(args, "jobs", "JOBS", int)
    out = _setting(args, "out", "OUT", str)
    secs = _setting(args, "budget_seconds", "BUDGET_SECONDS", float)
    cost = _setting(args, "budget_cost", "BUDGET_COST", float)
    return replace(
        m,
        backend=backend if backend is not None else m.backend,
        parallelism=jobs if jobs is not None else m.parallelism,
        output_dir=Path(out) if out is not None else m.output_dir,
        budget=QueryBudget(secs if secs is not None else m.budget.seconds,
                           cost if cost is not None else m.budget.cost),
    )


# ---------------------------------------------------------------------------
# result files


def _num(x: float) -> str:
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "-inf" if x < 0 else "inf"
    return repr(float(x))


def format_results(results: Sequence[QueryResult], timings: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in results:
        w.writerow([r.query.trial_id, r.model, r.query.query_id, _num(r.query.threshold_time),
                    r.status.value, _num(r.log_prob), f"{r.elapsed_ms:.3f}" if timings else ""])
    return buf.getvalue()


def read_results(paths) -> ProbTable:
    """Rebuild a probability table from query-result files."""
    trials: Dict[str, Dict[str, Dict[str, tuple]]] = {}
    models: List[str] = []
    for p in paths:
        with open(p, newline="") as fh:
            rd = csv.DictReader(fh)
            if tuple(rd.fieldnames or ()) != RESULT_COLUMNS:
                raise DataError(f"{p}: unexpected columns {rd.fieldnames}")
            for row in rd:
                try:
                    st = Status(row["status"])
                    lp = float(row["log_prob"])
                except ValueError as exc:
                    raise DataError(f"{p}: {exc}") from None
                trials.setdefault(row["trial_id"], {}).setdefault(row["query_cell"], {})[row["model"]] = (lp, st)
                if row["model"] not in models:
                    models.append(row["model"])
    return ProbTable(tuple(models), trials)


def summarize(manifest: RunManifest, results: Sequence[QueryResult], table: ProbTable, report) -> dict:
    """Machine-readable summary; holds nothing that depends on timing or worker count."""
    counts: Dict[str, Dict[str, int]] = {}
    for r in results:
        c = counts.setdefault(r.query.trial_id, {s.value: 0 for s in Status})
        c[r.status.value] += 1
    return {
        "models": list(table.models),
        "trials": sorted(counts),
        "backend": manifest.backend,
        "status_counts": {t: counts[t] for t in sorted(counts)},
        "queries_kept": {t: len(table.trials.get(t, {})) for t in sorted(counts)},
        "exclusions": len(report.exclusions),
        "average_trial_ranking": {m: report.avg_trial.average[m] for m in report.avg_trial.order()},
        "total_probability_ranking": {m: report.total_prob.average[m] for m in report.total_prob.order()},
        "partial_failure": any(r.status is Status.INCALCULABLE for r in results),
    }


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def write_rank_outputs(out: Path, table: ProbTable) -> object:
    table = apply_exclusions(table)
    report = build_report(table)
    for name, text in render_report(report).items():
        _write(out / name, text)
    return table, report


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(args) -> int:
    m = resolve_manifest(args)
    bad = 0
    for spec in m.trials:
        try:
            ds = prepare_for_grid(load_trial(spec), m.models)
        except (DataError, OSError) as exc:
            print(f"{spec.trial_id}: INVALID {exc}")
            bad += 1
            continue
        n_q = len(enumerate_queries(ds, m.models[0]))
        print(f"{spec.trial_id}: ok frames={ds.n_frames} cells={ds.n_cells} queries={n_q}")
    return 1 if bad else 0


def cmd_build(args) -> int:
    m = resolve_manifest(args)
    for spec in m.trials:
        ds = prepare_for_grid(load_trial(spec), m.models)
        for cfg in m.models:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", ClampWarning)
                net = build_network(ds, cfg)
            assert_acyclic(net)
            kinds = " ".join(f"{k.value}={net.count(k)}" for k in EdgeKind)
            clamp = " clamped" if any(issubclass(w.category, ClampWarning) for w in caught) else ""
            print(f"{spec.trial_id} {cfg.name}: vars={len(net.vars)} {kinds}{clamp}")
    return 0


def _run_queries(m: RunManifest) -> List[QueryResult]:
    opts = EvalOptions(backend=m.backend, budget=m.budget)
    return run_grid(m.trials, m.models, opts, jobs=m.parallelism)


def _write_query_files(out: Path, results: Sequence[QueryResult]) -> List[Path]:
    by_trial: Dict[str, List[QueryResult]] = {}
    for r in results:
        by_trial.setdefault(r.query.trial_id, []).append(r)
    paths = []
    for t in sorted(by_trial):
        p = out / "queries" / f"{t}.csv"
        _write(p, format_results(by_trial[t]))
        paths.append(p)
    return paths


def cmd_query(args) -> int:
    m = resolve_manifest(args)
    results = _run_queries(m)
    for p in _write_query_files(m.output_dir, results):
        print(p)
    return 0


def cmd_rank(args) -> int:
    out = Path(_setting(args, "out", "OUT", str) or ".")
    paths = [Path(p) for p in args.results] or sorted((out / "queries").glob("*.csv"))
    if not paths:
        raise ConfigError("no query-result files to rank")
    _, report = write_rank_outputs(out, read_results(paths))
    print(render_report(report)["report.txt"], end="")
    return 0


def cmd_synth(args) -> int:
    out = Path(_setting(args, "out", "OUT", str) or "synth")
    seed = _setting(args, "seed", "SEED", int)
    seed = 0 if seed is None else seed
    rows = []
    for i in range(args.trials):
        cfg = SynthConfig(seed=seed + i, frames=args.frames)
        tid = f"synth{seed + i}"
        tp, _ = write_trial(cfg, out, tid)
        rows.append({"trial_id": tid, "frame_interval_min": cfg.frame_interval, "track_path": tp.name})
    _write(out / "manifest.yaml", yaml.safe_dump({"trials": rows, "output_dir": "results"}, sort_keys=False))
    print(out / "manifest.yaml")
    return 0


def cmd_run(args) -> int:
    m = resolve_manifest(args)
    results = _run_queries(m)
    _write_query_files(m.output_dir, results)
    table, report = write_rank_outputs(m.output_dir, ProbTable.from_results(results, [c.name for c in m.models]))
    summary = summarize(m, results, table, report)
    _write(m.output_dir / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(render_report(report)["report.txt"], end="")
    if summary["partial_failure"]:
        log.warning("some queries were incalculable; see exclusions.csv")
    return 0


def _common(p: argparse.ArgumentParser):
    p.add_argument("--manifest")
    p.add_argument("--backend", choices=BACKENDS)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out")
    p.add_argument("--budget-seconds", type=float)
    p.add_argument("--budget-cost", type=float)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="conjnet", description="Rank plasmid-conjugation models on lineage tracks.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn, helptext in (("validate", cmd_validate, "check trial data"),
                               ("build", cmd_build, "build every network and report its size"),
                               ("query", cmd_query, "evaluate all queries, write result files"),
                               ("run", cmd_run, "query, rank and summarize")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.set_defaults(func=fn)
    p = sub.add_parser("rank", help="rank models from query-result files")
    p.add_argument("results", nargs="*")
    p.add_argument("--out")
    p.set_defaults(func=cmd_rank)
    p = sub.add_parser("synth", help="write synthetic trials and a manifest")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--frames", type=int, default=SynthConfig.frames)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except ConjnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
