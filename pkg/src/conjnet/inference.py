"""Queries, evidence and the exact enumeration backend."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, List, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from .factors import ExpansionTooLarge, build_factor_model, expand, prune_model
from .models import ModelConfig
from .network import BayesNet, VarId, gene, maturation
from .tracks import CellKey, TrialDataset

DEFAULT_LATENT_LIMIT = 22
DEFAULT_BUDGET_SECONDS = 60.0
DEFAULT_BUDGET_COST = 8e9


class Status(str, Enum):
    OK = "Ok"
    IMPOSSIBLE = "Impossible"
    INCALCULABLE = "Incalculable"


@dataclass(frozen=True)
class Query:
    trial_id: str
    cell: CellKey                 # first cell of its lineage path at threshold
    threshold_time: float
    path: Tuple[CellKey, ...]     # root -> cell
    window: Tuple[int, ...]       # candidate acquisition frames
    focal: FrozenSet[CellKey]     # the whole lineage tree the cell belongs to

    @property
    def query_id(self) -> str:
        return f"{self.cell[1]}@{self.cell[0]}"

    @property
    def threshold_frame(self) -> int:
        return self.cell[0]

    # names used in reports
    focal_lineage = property(lambda self: self.path)
    conjugation_window = property(lambda self: self.window)


@dataclass(frozen=True)
class Evidence:
    assignments: Dict[VarId, int]
    rfp: Dict[CellKey, int] = field(default_factory=dict)
    released: FrozenSet[CellKey] = frozenset()


@dataclass(frozen=True)
class QueryResult:
    query: Query
    model: str
    log_prob: float
    status: Status
    elapsed_ms: float = 0.0
    peak_cost: float = 0.0
    note: str = ""

    def __post_init__(self):
        if (self.status is Status.IMPOSSIBLE) != (self.log_prob == -math.inf):
            if self.status is not Status.INCALCULABLE:
                raise ValueError("Impossible status must pair with log_prob = -inf")


@dataclass(frozen=True)
class QueryBudget:
    seconds: float = DEFAULT_BUDGET_SECONDS
    cost: float = DEFAULT_BUDGET_COST


def query_window(dataset: TrialDataset, config: ModelConfig, path) -> Tuple[int, ...]:
    dt = dataset.frame_interval_min
    k_lo, k_hi = config.expression_delay.expression_offsets(dt)
    F = path[-1][0]
    birth = path[0][0]
    return tuple(t for t in range(max(F - k_hi, birth, 0), F - k_lo + 1))


def enumerate_queries(dataset: TrialDataset, config: ModelConfig) -> List[Query]:
    """One query per recipient-lineage cell that crosses the RFP threshold."""
    out = []
    for y in dataset.threshold_cells():
        path = tuple(dataset.path_to_root(y))
        focal = frozenset(dataset.subtree(path[0]))
        out.append(Query(trial_id=dataset.trial_id, cell=y, threshold_time=dataset.time(y[0]),
                         path=path, window=query_window(dataset, config, path), focal=focal))
    out.sort(key=lambda q: q.cell)
    return out


def assemble_evidence(dataset: TrialDataset, query: Optional[Query],
                      released: FrozenSet[CellKey] = frozenset()) -> Evidence:
    """Hard assignments for donors and untouched frame-0 recipients, RFP states
    for every other non-focal recipient-lineage cell.

    ``released`` lists lineage roots whose RFP observations are withheld (trees
    the model cannot explain at all).
    """
    focal = query.focal if query is not None else frozenset()
    hard: Dict[VarId, int] = {}
    rfp: Dict[CellKey, int] = {}
    for c in dataset.keys():
        if c in focal:
            continue
        if dataset.is_donor_lineage(c):
            hard[gene(c)] = 1
            hard[maturation(c)] = 1
            continue
        if c[0] == 0 and dataset.parent(c) is None:
            hard[gene(c)] = 0
        if dataset.root_of(c) not in released:
            rfp[c] = int(dataset.expressing(c))
    return Evidence(assignments=hard, rfp=rfp, released=frozenset(released))


def _first_acquisition(rows: np.ndarray, cols: List[int], frames: List[int]) -> np.ndarray:
    """Frame at which the path gene first turns on, -1 if never."""
    g = rows[:, cols].astype(bool)
    any_on = g.any(axis=1)
    first = np.argmax(g, axis=1)
    return np.where(any_on, np.asarray(frames)[first], -1)


def exact_query(net: BayesNet, evidence: Evidence, query: Query,
                limit: int = DEFAULT_LATENT_LIMIT, budget: QueryBudget = QueryBudget()) -> QueryResult:
    """Query value by enumerating every latent assignment of the pruned model."""
    t0 = time.perf_counter()
    name = net.config.name

    def done(logp, status, peak=0.0, note=""):
        return QueryResult(query, name, logp, status, (time.perf_counter() - t0) * 1e3, peak, note)

    if not query.window:
        return done(-math.inf, Status.IMPOSSIBLE, note="empty window")
    model = prune_model(build_factor_model(net, evidence, query), query)
    n_latent = len(model.latent_vars())
    if n_latent > limit:
        return done(math.nan, Status.INCALCULABLE, note=f"{n_latent} latent variables")
    ncols = max(len(model.nodes), 1)
    try:
        rows, logw, peak = expand(model, max_rows=int(budget.cost // ncols),
                                  deadline=t0 + budget.seconds)
    except ExpansionTooLarge as exc:
        return done(math.nan, Status.INCALCULABLE, note=str(exc))
    peak_cost = float(peak * ncols)
    log_z = logsumexp(logw) if len(logw) else -math.inf
    if log_z == -math.inf:
        return done(math.nan, Status.INCALCULABLE, peak_cost, "evidence has probability zero")
    return done(*_finish(model, rows, logw, log_z, net, query), peak=peak_cost)


def _finish(model, rows, logw, log_z, net, query):
    pmf = net.config.expression_delay.expression_pmf(net.dataset.frame_interval_min)
    idx = {n: i for i, n in enumerate(model.nodes)}
    path = [c for c in query.path if gene(c) in idx]
    tau = _first_acquisition(rows, [idx[gene(c)] for c in path], [c[0] for c in path])
    offs = query.threshold_frame - tau
    ok = (tau >= 0) & (offs >= 0) & (offs < len(pmf))
    with np.errstate(divide="ignore"):
        lp = np.where(ok, np.log(pmf[np.clip(offs, 0, len(pmf) - 1)]), -np.inf)
    num = logsumexp(logw + lp) if len(logw) else -math.inf
    if num == -math.inf:
        return -math.inf, Status.IMPOSSIBLE
    return float(min(num - log_z, 0.0)), Status.OK


def count_latent(net: BayesNet, evidence: Evidence, query: Query) -> int:
    return len(prune_model(build_factor_model(net, evidence, query), query).latent_vars())
