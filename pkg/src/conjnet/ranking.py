"""Model rankings over per-query results."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp
from scipy.stats import rankdata

from .errors import EmptyTrial
from .inference import QueryResult, Status

Cell = Tuple[float, Status]


@dataclass(frozen=True)
class Exclusion:
    trial: str
    query_cell: str
    reason: str
    models_affected: Tuple[str, ...]

    def row(self) -> str:
        return f"{self.trial},{self.query_cell},{self.reason},{';'.join(self.models_affected)}"


@dataclass
class ProbTable:
    """trial -> query -> model -> (log_prob, status)."""
    models: Tuple[str, ...]
    trials: Dict[str, Dict[str, Dict[str, Cell]]]
    exclusions: List[Exclusion] = field(default_factory=list)

    @classmethod
    def from_results(cls, results: Iterable[QueryResult], models: Optional[Sequence[str]] = None) -> "ProbTable":
        trials: Dict[str, Dict[str, Dict[str, Cell]]] = {}
        seen = []
        for r in results:
            trials.setdefault(r.query.trial_id, {}).setdefault(r.query.query_id, {})[r.model] = (r.log_prob, r.status)
            if r.model not in seen:
                seen.append(r.model)
        return cls(tuple(models) if models is not None else tuple(seen), trials)

    @classmethod
    def from_logprobs(cls, data: Mapping[str, Mapping[str, Mapping[str, float]]], models=None) -> "ProbTable":
        """Build from plain numbers: -inf means Impossible, nan means Incalculable."""
        trials = {}
        names = list(models) if models is not None else []
        for t, qs in data.items():
            for q, row in qs.items():
                out = {}
                for m, lp in row.items():
                    if m not in names:
                        names.append(m)
                    if isinstance(lp, float) and math.isnan(lp):
                        out[m] = (lp, Status.INCALCULABLE)
                    elif lp == -math.inf:
                        out[m] = (lp, Status.IMPOSSIBLE)
                    else:
                        out[m] = (float(lp), Status.OK)
                trials.setdefault(t, {})[q] = out
        return cls(tuple(names), trials)

    def queries(self, trial: str) -> List[str]:
        return sorted(self.trials[trial])


def apply_exclusions(table: ProbTable) -> ProbTable:
    """Drop queries that are incalculable for any model or impossible for all of them."""
    kept: Dict[str, Dict[str, Dict[str, Cell]]] = {}
    log = list(table.exclusions)
    for t in sorted(table.trials):
        for q in sorted(table.trials[t]):
            row = table.trials[t][q]
            missing = [m for m in table.models if m not in row]
            if missing:
                raise KeyError(f"trial {t} query {q}: no result for {missing}")
            inc = tuple(m for m in table.models if row[m][1] is Status.INCALCULABLE)
            if inc:
                log.append(Exclusion(t, q, "incalculable", inc))
                continue
            if all(row[m][1] is Status.IMPOSSIBLE for m in table.models):
                log.append(Exclusion(t, q, "impossible_for_all", tuple(table.models)))
                continue
            kept.setdefault(t, {})[q] = row
        kept.setdefault(t, kept.get(t, {}))
    return ProbTable(table.models, kept, log)


def rank_row(logps: Sequence[float]) -> np.ndarray:
    """Rank 1 for the largest probability; ties share the mean rank; -inf ties last."""
    return rankdata(-np.asarray(logps, dtype=float), method="average")


def _check(table: ProbTable):
    for t in table.trials:
        if not table.trials[t]:
            raise EmptyTrial(f"trial {t} has no queries left")
    if not table.trials:
        raise EmptyTrial("no trials")


def per_trial_query_ranks(table: ProbTable) -> Dict[str, np.ndarray]:
    """trial -> mean rank per model (in ``table.models`` order)."""
    _check(table)
    out = {}
    for t in sorted(table.trials):
        ranks = [rank_row([table.trials[t][q][m][0] for m in table.models]) for q in table.queries(t)]
        out[t] = np.mean(ranks, axis=0)
    return out


def avg_trial_ranking(table: ProbTable) -> Dict[str, float]:
    per = per_trial_query_ranks(table)
    avg = np.mean([per[t] for t in sorted(per)], axis=0)
    return dict(zip(table.models, map(float, avg)))


def trial_totals(table: ProbTable, mode: str = "linear") -> Dict[str, np.ndarray]:
    """trial -> per-model log of the summed probability (``linear``) or sum of logs (``log``)."""
    _check(table)
    out = {}
    for t in sorted(table.trials):
        mat = np.array([[table.trials[t][q][m][0] for m in table.models] for q in table.queries(t)])
        if mode == "linear":
            out[t] = logsumexp(mat, axis=0)
        elif mode == "log":
            out[t] = mat.sum(axis=0)
        else:
            raise ValueError(f"unknown total mode {mode!r}")
    return out


def per_trial_total_ranks(table: ProbTable, mode: str = "linear") -> Dict[str, np.ndarray]:
    return {t: rank_row(v) for t, v in trial_totals(table, mode).items()}


def total_prob_ranking(table: ProbTable, mode: str = "linear") -> Dict[str, float]:
    per = per_trial_total_ranks(table, mode)
    avg = np.mean([per[t] for t in sorted(per)], axis=0)
    return dict(zip(table.models, map(float, avg)))


def ranks_from_fixture(per_trial: Mapping[str, Mapping[str, float]]) -> Dict[str, float]:
    """Average of given per-trial ranks (model -> {trial: rank})."""
    return {m: float(np.mean([v[t] for t in sorted(v)])) for m, v in per_trial.items()}


# ---------------------------------------------------------------------------
# reports


def fmt_score(x: float) -> str:
    """Two decimals, half-up, trailing zeros dropped: 1.3333 -> '1.33', 8.0 -> '8'."""
    if math.isnan(x):
        return "nan"
    d = Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    s = format(d, "f")
    if "." in s:
        s = s.rstrip("0").rstrip(".")
    return s


@dataclass
class MetricTable:
    name: str
    trials: Tuple[str, ...]
    per_trial: Dict[str, Dict[str, float]]   # model -> trial -> score
    average: Dict[str, float]

    def order(self) -> List[str]:
        return sorted(self.average, key=lambda m: (self.average[m], m))


@dataclass
class RankReport:
    avg_trial: MetricTable
    total_prob: MetricTable
    exclusions: List[Exclusion]


def build_report(table: ProbTable, total_mode: str = "linear") -> RankReport:
    table = apply_exclusions(table) if not table.exclusions else table
    per_q = per_trial_query_ranks(table)
    per_p = per_trial_total_ranks(table, total_mode)
    trials = tuple(sorted(table.trials))

    def mk(name, per):
        pt = {m: {t: float(per[t][i]) for t in trials} for i, m in enumerate(table.models)}
        avg = {m: float(np.mean([pt[m][t] for t in trials])) for m in table.models}
        return MetricTable(name, trials, pt, avg)

    return RankReport(mk("average_trial", per_q), mk("total_probability", per_p), list(table.exclusions))


def _table_rows(mt: MetricTable) -> List[List[str]]:
    rows = [["model", *mt.trials, "average"]]
    for m in mt.order():
        rows.append([m, *(fmt_score(mt.per_trial[m][t]) for t in mt.trials), fmt_score(mt.average[m])])
    return rows


def _comparison_rows(report: RankReport) -> List[List[str]]:
    a = report.avg_trial.order()
    p = report.total_prob.order()
    rows = [["model", "average_trial", "total_probability"]]
    for m in a:
        rows.append([m, str(a.index(m) + 1), str(p.index(m) + 1)])
    return rows


def _delimited(rows, sep=",") -> str:
    return "\n".join(sep.join(r) for r in rows) + "\n"


def _aligned(rows) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    out = io.StringIO()
    for j, r in enumerate(rows):
        out.write("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip())
        out.write("\n")
        if j == 0:
            out.write("-" * (sum(widths) + 2 * (len(widths) - 1)) + "\n")
    return out.getvalue()


def render_report(report: RankReport) -> Dict[str, str]:
    """File name -> contents for the two metric tables, their comparison and the exclusion log."""
    tables = {
        "avg_trial_ranking": _table_rows(report.avg_trial),
        "total_prob_ranking": _table_rows(report.total_prob),
        "ranking_comparison": _comparison_rows(report),
    }
    out = {}
    text = []
    for name, rows in tables.items():
        out[f"{name}.csv"] = _delimited(rows)
        text.append(f"{name}\n{_aligned(rows)}")
    out["report.txt"] = "\n".join(text)
    out["exclusions.csv"] = "trial,query_cell,reason,models_affected\n" + "".join(
        e.row() + "\n" for e in report.exclusions)
    return out
