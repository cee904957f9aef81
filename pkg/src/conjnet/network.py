"""Bayesian network construction for one (trial, model) pair.

Each cell observation gets a gene variable and a maturation variable.  RFP
variables are implicit; the inference backends derive them from the lineage
and the expression delay.
"""
from __future__ import annotations

import graphlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterator, List, NamedTuple, Optional, Tuple

from .errors import CyclicGraph, EmptyTrial
from .models import ModelConfig, contact_raw_weight, normalize_conjugation
from .tracks import CellKey, TrialDataset, detect_contact_candidates


class VarKind(str, Enum):
    GENE = "g"
    MATURATION = "m"


class EdgeKind(str, Enum):
    LINEAGE = "lineage"
    CONJUGATION = "conjugation"
    DELAY = "delay"


class VarId(NamedTuple):
    cell: CellKey
    kind: VarKind

    def __str__(self):
        return f"{self.kind.value}({self.cell[1]}@{self.cell[0]})"


def gene(cell: CellKey) -> VarId:
    return VarId(cell, VarKind.GENE)


def maturation(cell: CellKey) -> VarId:
    return VarId(cell, VarKind.MATURATION)


@dataclass(frozen=True)
class Edge:
    src: VarId
    dst: VarId
    kind: EdgeKind
    weight: float


Parent = Tuple[VarId, float, EdgeKind]


@dataclass(frozen=True)
class BayesNet:
    """Parent-major Noisy-OR network.

    ``rfp_cells`` lists the cells whose implicit RFP variable still belongs to
    the network (``None`` means every recipient-lineage cell) and ``clamped``
    the variables that were cut loose from their parents by pruning.
    """
    dataset: TrialDataset
    config: ModelConfig
    vars: Tuple[VarId, ...]
    parents: Dict[VarId, Tuple[Parent, ...]]
    evidence_slots: FrozenSet[VarId]
    rfp_cells: Optional[FrozenSet[CellKey]] = None
    clamped: FrozenSet[VarId] = frozenset()
    rfp_clamped: FrozenSet[CellKey] = frozenset()

    def parents_of(self, v: VarId) -> Tuple[Parent, ...]:
        return self.parents.get(v, ())

    def edges(self) -> Iterator[Edge]:
        for v in self.vars:
            for p, w, k in self.parents.get(v, ()):
                yield Edge(p, v, k, w)

    def count(self, kind: EdgeKind) -> int:
        return sum(1 for e in self.edges() if e.kind is kind)

    @property
    def cells(self) -> List[CellKey]:
        return sorted({v.cell for v in self.vars})

    def __contains__(self, v) -> bool:
        return v in self.parents

    def dump(self) -> str:
        """One edge per line: ``src_cell,src_kind,dst_cell,dst_kind,kind,weight``."""
        lines = []
        for e in sorted(self.edges(), key=lambda e: (e.dst.cell, e.dst.kind.value, e.src.cell,
                                                     e.src.kind.value, e.kind.value)):
            lines.append(f"{e.src.cell[1]}@{e.src.cell[0]},{e.src.kind.value},"
                         f"{e.dst.cell[1]}@{e.dst.cell[0]},{e.dst.kind.value},{e.kind.value},{e.weight!r}")
        return "\n".join(lines) + ("\n" if lines else "")


def is_target(dataset: TrialDataset, cell: CellKey) -> bool:
    """Cells that may still receive a plasmid by conjugation."""
    return not dataset.expressing(cell)


def conjugation_raw_edges(dataset: TrialDataset, contact_fn: str, contact_range: float):
    """Non-trivial raw conjugation edges ``((src_cell, dst_cell), raw)`` in frame order.

    Cached on the dataset because every model sharing a contact function and
    range sees the same raw weights.
    """
    cache = dataset.__dict__.setdefault("_raw_edge_cache", {})
    ck = (contact_fn, float(contact_range), dataset.loss_events)
    if ck in cache:
        return cache[ck]
    if not dataset.contact_candidates or dataset.contact_radius < contact_range:
        dataset = detect_contact_candidates(dataset, contact_range)
    out = []
    for f in range(dataset.n_frames):
        for a, b, d in dataset.contacts_at(f):
            if d > contact_range:
                continue
            for src, dst in ((a, b), (b, a)):
                if not is_target(dataset, dst):
                    continue
                raw = contact_raw_weight(dataset.obs(src).bbox, dataset.obs(dst).bbox,
                                         contact_fn, contact_range)
                if raw > 0:
                    out.append(((src, dst), raw))
    out.sort(key=lambda e: (e[0][1], e[0][0]))
    cache[ck] = out
    return out


def default_budget(dataset: TrialDataset) -> float:
    return float(max(len(dataset.threshold_cells()), 1))


def build_network(dataset: TrialDataset, config: ModelConfig, budget: Optional[float] = None,
                  raw_edges=None) -> BayesNet:
    """Gene/maturation network with lineage, conjugation and maturation-delay edges."""
    if dataset.n_cells == 0:
        raise EmptyTrial(f"trial {dataset.trial_id} has no cells")
    dt = dataset.frame_interval_min
    config.check_frame_interval(dt)
    parents: Dict[VarId, List[Parent]] = {}
    keys = list(dataset.keys())
    for c in keys:
        parents[maturation(c)] = []
        parents[gene(c)] = []
    slots = set()
    for c in keys:
        p = dataset.parent(c)
        if p is not None:
            parents[gene(c)].append((gene(p), 1.0, EdgeKind.LINEAGE))
            parents[maturation(c)].append((maturation(p), 1.0, EdgeKind.LINEAGE))
        if dataset.is_donor_lineage(c) or (c[0] == 0 and p is None):
            slots.update((gene(c), maturation(c)))

    if raw_edges is None:
        raw_edges = conjugation_raw_edges(dataset, config.contact_fn, config.contact_range)
    if raw_edges:
        if budget is None:
            budget = config.normalization_budget or default_budget(dataset)
        for (src, dst), w in normalize_conjugation(raw_edges, budget):
            parents[gene(dst)].append((maturation(src), w, EdgeKind.CONJUGATION))

    alphas = config.maturation_delay.maturation_alphas(dt)
    kmax = len(alphas) - 1
    for c in keys:
        if dataset.is_donor_lineage(c):
            continue
        frontier = list(dataset.children(c))
        while frontier:
            z = frontier.pop()
            k = z[0] - c[0]
            if k > kmax:
                continue
            if alphas[k] > 0:
                parents[maturation(z)].append((gene(c), float(alphas[k]), EdgeKind.DELAY))
            frontier.extend(dataset.children(z))

    order = sorted(parents, key=var_order)
    net = BayesNet(dataset=dataset, config=config, vars=tuple(order),
                   parents={v: tuple(sorted(parents[v], key=lambda t: (var_order(t[0]), t[2].value)))
                            for v in order},
                   evidence_slots=frozenset(slots))
    assert_acyclic(net)
    return net


def var_order(v: VarId):
    """Frame-major order with maturation before gene inside a frame."""
    return (v.cell[0], 0 if v.kind is VarKind.MATURATION else 1, v.cell[1])


def assert_acyclic(net: BayesNet) -> List[VarId]:
    """Topological order of the network; raises ``CyclicGraph`` with a witness cycle."""
    ts = graphlib.TopologicalSorter()
    for v in net.vars:
        ts.add(v, *(p for p, _, _ in net.parents_of(v)))
    try:
        order = list(ts.static_order())
    except graphlib.CycleError as exc:
        cycle = exc.args[1]
        raise CyclicGraph(cycle[:-1] if len(cycle) > 1 and cycle[0] == cycle[-1] else cycle) from None
    for e in net.edges():
        if e.kind is EdgeKind.CONJUGATION:
            ok = (e.src.kind is VarKind.MATURATION and e.dst.kind is VarKind.GENE
                  and e.src.cell[0] == e.dst.cell[0])
        else:
            ok = e.src.cell[0] < e.dst.cell[0]
        if not ok:
            raise CyclicGraph([e.src, e.dst])
    return order


def prune_for_query(net: BayesNet, query, evidence) -> BayesNet:
    """Smallest subnetwork that gives the same query value as ``net``."""
    from .factors import build_factor_model, prune_model

    model = build_factor_model(net, evidence, query)
    pruned = prune_model(model, query)
    keep = {n for n in pruned.nodes if isinstance(n, VarId)}
    clamped = {n for n in keep if pruned.is_clamped(n)}
    parents = {}
    for v in sorted(keep, key=var_order):
        parents[v] = () if v in clamped else net.parents_of(v)
    rfp = frozenset(n[1] for n in pruned.nodes if not isinstance(n, VarId) and not pruned.is_clamped(n))
    rfp_fixed = frozenset(n[1] for n in pruned.nodes if not isinstance(n, VarId) and pruned.is_clamped(n))
    return BayesNet(dataset=net.dataset, config=net.config, vars=tuple(sorted(keep, key=var_order)),
                    parents=parents, evidence_slots=net.evidence_slots & frozenset(keep),
                    rfp_cells=rfp, clamped=frozenset(clamped), rfp_clamped=rfp_fixed)
