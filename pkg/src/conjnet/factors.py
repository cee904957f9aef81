"""Factor-level view of a network, used by pruning and by the enumeration backends.

Every node is a binary Noisy-OR variable.  Besides the gene and maturation
variables of the network this view materializes the implicit RFP variable of
each recipient-lineage cell, with lineage and expression-delay parents.

Delay parents are *gated*: the edge from the gene variable of cell ``a`` is
active only when ``a`` is where the plasmid first appeared on its path (gene
on at ``a``, off at ``a``'s lineage parent).  Gene variables stay on along a
lineage, so without the gate every later cell would fire the delay edges
again and the survival of a delay would no longer match its CDF.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Optional, Tuple

import numpy as np

from .network import BayesNet, EdgeKind, VarId, VarKind, gene, var_order

RFP = "r"

Term = Tuple[Hashable, float, Optional[Hashable]]


def rfp(cell) -> Tuple[str, tuple]:
    return (RFP, cell)


def node_order(n):
    if isinstance(n, VarId):
        return var_order(n)
    return (n[1][0], 2, n[1][1])


def node_label(n) -> str:
    if isinstance(n, VarId):
        return str(n)
    return f"r({n[1][1]}@{n[1][0]})"


@dataclass
class FactorModel:
    nodes: List[Hashable]
    terms: Dict[Hashable, Tuple[Term, ...]]
    observed: Dict[Hashable, int]
    clamped: set = field(default_factory=set)

    def is_clamped(self, n) -> bool:
        return n in self.clamped

    def latent(self) -> List[Hashable]:
        return [n for n in self.nodes if n not in self.observed]

    def latent_vars(self) -> List[VarId]:
        return [n for n in self.latent() if isinstance(n, VarId)]

    def scope(self, n):
        s = set()
        for p, _, g in self.terms.get(n, ()):
            s.add(p)
            if g is not None:
                s.add(g)
        return s

    def children(self):
        ch = {n: set() for n in self.nodes}
        for n in self.nodes:
            for p in self.scope(n):
                ch[p].add(n)
        return ch


def _rfp_terms(net: BayesNet, cell, present) -> List[Term]:
    ds = net.dataset
    dt = ds.frame_interval_min
    alphas = net.config.expression_delay.expression_alphas(dt)
    terms: List[Term] = []
    lp = ds.parent(cell)
    if lp is not None and rfp(lp) in present:
        terms.append((rfp(lp), 1.0, None))
    a = cell
    while a is not None:
        k = cell[0] - a[0]
        if k >= len(alphas):
            break
        if alphas[k] > 0 and gene(a) in present:
            gp = ds.parent(a)
            terms.append((gene(a), float(alphas[k]), gene(gp) if gp is not None else None))
        a = ds.parent(a)
    return terms


def build_factor_model(net: BayesNet, evidence, query=None) -> FactorModel:
    """Factor view of ``net`` with hard evidence and observed RFP states attached."""
    ds = net.dataset
    present = set(net.vars)
    if net.rfp_cells is None:
        rcells = [c for c in net.cells if not ds.is_donor_lineage(c)]
    else:
        rcells = sorted(net.rfp_cells | net.rfp_clamped)
    for c in rcells:
        present.add(rfp(c))
    terms: Dict[Hashable, Tuple[Term, ...]] = {}
    for v in net.vars:
        ts = []
        for p, w, kind in net.parents_of(v):
            gate = None
            if kind is EdgeKind.DELAY:
                gp = ds.parent(p.cell)
                gate = gene(gp) if gp is not None else None
            ts.append((p, w, gate))
        terms[v] = tuple(ts)
    rclamped = net.rfp_clamped
    for c in rcells:
        terms[rfp(c)] = () if c in rclamped else tuple(_rfp_terms(net, c, present))
    observed = {}
    for v, val in evidence.assignments.items():
        if v in present:
            observed[v] = int(val)
    for c, val in evidence.rfp.items():
        if rfp(c) in present:
            observed[rfp(c)] = int(val)
    clamped = set(net.clamped) | {rfp(c) for c in rclamped}
    # nodes without a CPD and everything observed at the first frame are taken as given
    clamped |= {n for n in observed if not terms[n] or node_order(n)[0] == 0}
    nodes = sorted(present, key=node_order)
    model = FactorModel(nodes=nodes, terms=terms, observed=observed, clamped=clamped)
    protect = set()
    if query is not None:
        protect = {gene(c) for c in query.path}
    return drop_barren(model, protect)


def drop_barren(model: FactorModel, protect=()) -> FactorModel:
    """Remove unobserved nodes without relevant descendants; they sum out to 1."""
    protect = set(protect)
    children = model.children()
    alive = set(model.nodes)
    changed = True
    while changed:
        changed = False
        for n in list(alive):
            if n in model.observed or n in protect:
                continue
            if not any(c in alive for c in children[n]):
                alive.discard(n)
                changed = True
    return _restrict(model, alive, set())


def _restrict(model: FactorModel, keep, extra_clamped) -> FactorModel:
    nodes = [n for n in model.nodes if n in keep]
    clamped = (model.clamped | set(extra_clamped)) & set(nodes)
    terms = {n: (() if n in clamped else model.terms[n]) for n in nodes}
    observed = {n: v for n, v in model.observed.items() if n in keep}
    return FactorModel(nodes=nodes, terms=terms, observed=observed, clamped=clamped)


def prune_model(model: FactorModel, query) -> FactorModel:
    """Keep the query nodes, the latent nodes connected to them in the moral
    graph of the ancestral set once observed nodes are removed, and the
    observed nodes whose factors touch that component."""
    query_nodes = [gene(c) for c in query.path if gene(c) in model.terms]
    observed = set(model.observed)
    # ancestral closure
    anc = set()
    stack = list(query_nodes) + list(observed)
    while stack:
        n = stack.pop()
        if n in anc:
            continue
        anc.add(n)
        stack.extend(model.scope(n))
    # moral graph restricted to the closure
    adj = {n: set() for n in anc}
    for n in anc:
        fam = [n] + [p for p in model.scope(n)]
        for i, a in enumerate(fam):
            for b in fam[i + 1:]:
                if a != b:
                    adj[a].add(b)
                    adj[b].add(a)
    comp = set()
    stack = [q for q in query_nodes if q not in observed]
    while stack:
        n = stack.pop()
        if n in comp:
            continue
        comp.add(n)
        stack.extend(m for m in adj[n] if m not in observed and m not in comp)
    keep = set(comp)
    factor_nodes = set(comp)
    for o in observed & anc:
        fam = {o} | model.scope(o)
        if fam & comp:
            factor_nodes.add(o)
    for n in factor_nodes:
        keep.add(n)
        keep |= model.scope(n)
    keep |= set(query_nodes)
    extra = {n for n in keep if n in observed and n not in factor_nodes}
    return _restrict(model, keep, extra)


# ---------------------------------------------------------------------------
# enumeration by topological expansion


def _log_p1(rows: np.ndarray, idx: Dict[Hashable, int], terms, known: Dict[Hashable, int]):
    """log P(node=0) and log P(node=1) per row."""
    lq = np.zeros(rows.shape[0])
    for p, w, g in terms:
        if p in idx:
            act = rows[:, idx[p]].astype(bool)
        else:
            act = np.full(rows.shape[0], bool(known.get(p, 0)))
        if g is not None:
            if g in idx:
                act &= rows[:, idx[g]] == 0
            elif known.get(g, 0):
                act[:] = False
        if w >= 1.0:
            lq = np.where(act, -np.inf, lq)
        else:
            lq = lq + act * math.log1p(-w)
    with np.errstate(divide="ignore"):
        lp1 = np.log(-np.expm1(lq))
    return lq, lp1


class ExpansionTooLarge(Exception):
    pass


def expand(model: FactorModel, max_rows: Optional[int] = None, deadline: Optional[float] = None):
    """All positive-probability assignments, built node by node in topological order.

    Returns ``(rows, logw, peak_rows)`` where ``rows[:, i]`` holds the value of
    ``model.nodes[i]`` and ``logw`` the log joint weight of the row.  Rows of
    probability zero are dropped as soon as they appear; nothing else is
    approximated.
    """
    nodes = model.nodes
    idx = {n: i for i, n in enumerate(nodes)}
    rows = np.zeros((1, len(nodes)), dtype=np.uint8)
    logw = np.zeros(1)
    peak = 1
    for i, n in enumerate(nodes):
        if n in model.clamped:
            rows[:, i] = model.observed[n]
            continue
        lp0, lp1 = _log_p1(rows, idx, model.terms[n], model.observed)
        if n in model.observed:
            lp = lp1 if model.observed[n] else lp0
            logw = logw + lp
            rows[:, i] = model.observed[n]
            keep = np.isfinite(logw)
            rows, logw = rows[keep], logw[keep]
        else:
            r0, r1 = rows.copy(), rows
            r1[:, i] = 1
            rows = np.concatenate([r0, r1])
            logw = np.concatenate([logw + lp0, logw + lp1])
            keep = np.isfinite(logw)
            rows, logw = rows[keep], logw[keep]
        peak = max(peak, rows.shape[0])
        if max_rows is not None and rows.shape[0] > max_rows:
            raise ExpansionTooLarge(f"{rows.shape[0]} rows")
        if deadline is not None and time.perf_counter() > deadline:
            raise ExpansionTooLarge("time budget exceeded")
    return rows, logw, peak
