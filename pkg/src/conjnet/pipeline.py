"""Evaluate every query of a trial under one model, and the batch driver around it."""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

from .errors import ClampWarning, ConfigError
from .factored import factored_query, unexplainable_roots
from .inference import (DEFAULT_LATENT_LIMIT, QueryBudget, QueryResult, Status, assemble_evidence,
                        count_latent, enumerate_queries, exact_query)
from .models import ModelConfig, maturity_bias_normalizer
from .network import build_network
from .tracks import TrialDataset, TrialSpec, load_trial, prepare_dataset

log = logging.getLogger(__name__)

BACKENDS = ("exact", "factored", "auto")


@dataclass(frozen=True)
class EvalOptions:
    backend: str = "auto"
    budget: QueryBudget = QueryBudget()
    latent_limit: int = DEFAULT_LATENT_LIMIT

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}")


def prepare_for_grid(dataset: TrialDataset, models: Sequence[ModelConfig]) -> TrialDataset:
    radius = max(m.contact_range for m in models)
    lo = min(m.expression_delay.lower for m in models)
    hi = max(m.expression_delay.upper for m in models)
    return prepare_dataset(dataset, radius, lo, hi)


def evaluate(dataset: TrialDataset, config: ModelConfig, opts: EvalOptions = EvalOptions()) -> List[QueryResult]:
    """Results for every query of ``dataset`` under ``config``, sorted by query."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ClampWarning)
        net = build_network(dataset, config)
    released = unexplainable_roots(net)
    if released:
        log.info("%s/%s: %d lineage trees cannot be explained; their RFP record is withheld",
                 dataset.trial_id, config.name, len(released))
    queries = enumerate_queries(dataset, config)
    norms = maturity_bias_normalizer(dataset, config, queries, net) if config.maturity_bias_correction else {}
    out = []
    for q in queries:
        ev = assemble_evidence(dataset, q, released)
        use_exact = opts.backend == "exact" or (
            opts.backend == "auto" and count_latent(net, ev, q) <= opts.latent_limit)
        if use_exact:
            r = exact_query(net, ev, q, opts.latent_limit, opts.budget)
        else:
            r = factored_query(net, ev, q, opts.budget)
        if norms and r.status is Status.OK:
            r = replace(r, log_prob=r.log_prob - math.log(norms[q.query_id]))
        out.append(r)
    return out


def _task(args):
    spec_or_ds, models, opts, idx = args
    ds = spec_or_ds if isinstance(spec_or_ds, TrialDataset) else prepare_for_grid(load_trial(spec_or_ds), models)
    return evaluate(ds, models[idx], opts)


def run_grid(trials: Sequence, models: Sequence[ModelConfig], opts: EvalOptions = EvalOptions(),
             jobs: int = 1) -> List[QueryResult]:
    """All (trial, model) evaluations; output order does not depend on ``jobs``."""
    tasks = [(t, tuple(models), opts, i) for t in trials for i in range(len(models))]
    if jobs <= 1:
        chunks = [_task(a) for a in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            chunks = list(ex.map(_task, tasks))
    results = [r for c in chunks for r in c]
    order = {m.name: i for i, m in enumerate(models)}
    results.sort(key=lambda r: (r.query.trial_id, order[r.model], r.query.cell))
    return results
