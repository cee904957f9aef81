"""Synthetic trials with a known conjugation mechanism, and a brute-force joint oracle."""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import ArenaOverflow, TooLarge
from .geometry import OrientedBox, box_distance
from .models import DelayModel, contact_raw_weight
from .network import BayesNet, EdgeKind, VarId, gene
from .tracks import (CellObservation, CellType, TrackFormat, TrialDataset, _build_forest,
                     serialize_tracks)

log = logging.getLogger(__name__)

EVENT_COLUMNS = ("frame", "donor_id", "recipient_id", "expr_delay_min", "mat_delay_min")


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    arena: Tuple[float, float] = (60.0, 60.0)
    n_donors: int = 4
    n_recipients: int = 10
    seed_spread: float = 6.0          # initial cells are scattered in a square of this half-width
    division_interval: float = 90.0   # mean minutes between divisions
    true_contact_fn: str = "Edge"
    true_expr_delay: DelayModel = field(default_factory=lambda: DelayModel.uniform(30, 150))
    true_mat_delay: DelayModel = field(default_factory=lambda: DelayModel.uniform(30, 90))
    conj_rate: float = 0.05
    frames: int = 60
    frame_interval: float = 5.0
    contact_range: float = 0.5
    birth_half_len: float = 1.0
    half_wid: float = 0.45
    jitter: float = 0.08              # per-frame positional noise, micrometers
    angle_jitter: float = 0.15        # radians, applied at division
    drift: float = 0.0                # colony speed, micrometers per frame
    drift_turn: float = 0.3           # per-frame heading noise of a colony, radians
    conj_cutoff_frame: Optional[int] = None  # no new conjugation from this frame on


@dataclass(frozen=True)
class GroundTruthEvent:
    frame: int
    donor_id: str
    recipient_id: str
    expr_delay_min: float
    mat_delay_min: float


@dataclass(frozen=True)
class GroundTruth:
    events: Tuple[GroundTruthEvent, ...]
    truncated_at: Optional[int] = None

    def to_csv(self) -> str:
        lines = [",".join(EVENT_COLUMNS)]
        for e in self.events:
            lines.append(f"{e.frame},{e.donor_id},{e.recipient_id},{e.expr_delay_min!r},{e.mat_delay_min!r}")
        return "\n".join(lines) + "\n"


@dataclass
class _Cell:
    cid: str
    x: float
    y: float
    angle: float
    half_len: float
    age: float
    div_age: float
    donor: bool
    acq: Optional[int] = None        # frame the plasmid arrived (donor lineages: None)
    expr_at: Optional[int] = None    # frame from which RFP is above threshold
    mat_at: Optional[int] = None     # frame from which the cell can donate

    def box(self, half_wid):
        return OrientedBox(self.x, self.y, self.half_len, half_wid, self.angle)

    def has_plasmid(self):
        return self.donor or self.acq is not None

    def mature(self, f):
        return self.donor or (self.mat_at is not None and f >= self.mat_at)

    def expressing(self, f):
        return self.donor or (self.expr_at is not None and f >= self.expr_at)


def _sample_delay(rng, delay: DelayModel) -> float:
    # inverse transform on a fine grid; exact for the uniform and step CDFs
    u = rng.random()
    lo, hi = delay.lower, delay.upper
    if hi == lo:
        return lo
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if delay.cdf(mid) >= u:
            hi = mid
        else:
            lo = mid
    return hi


def _relax(cells: List[_Cell], hw: float, iters: int = 8):
    """Push overlapping cells apart along their centroid difference."""
    if len(cells) < 2:
        return
    for _ in range(iters):
        pts = np.array([[c.x, c.y] for c in cells])
        reach = 2 * (max(c.half_len for c in cells) + hw)
        moved = False
        for i, j in sorted(cKDTree(pts).query_pairs(reach)):
            a, b = cells[i], cells[j]
            if box_distance(a.box(hw), b.box(hw)) > 0:
                continue
            dx, dy = b.x - a.x, b.y - a.y
            d = math.hypot(dx, dy) or 1e-6
            step = 0.15
            a.x -= step * dx / d
            a.y -= step * dy / d
            b.x += step * dx / d
            b.y += step * dy / d
            moved = True
        if not moved:
            break


def generate_trial(config: SynthConfig, trial_id: str = "synth") -> Tuple[TrialDataset, GroundTruth]:
    """Simulate one trial.  Identical configs give identical output."""
    rng = np.random.default_rng(config.seed)
    hw = config.half_wid
    L0 = config.birth_half_len
    next_id = itertools.count()

    def new_id():
        return f"c{next(next_id)}"

    def div_age():
        return config.division_interval * rng.uniform(0.8, 1.2)

    cells: List[_Cell] = []
    heading: Dict[str, float] = {}
    n0 = config.n_donors + config.n_recipients
    donor_flags = [True] * config.n_donors + [False] * config.n_recipients
    rng.shuffle(donor_flags)
    s = config.seed_spread
    for k in range(n0):
        cells.append(_Cell(new_id(), rng.uniform(-s, s), rng.uniform(-s, s), rng.uniform(0, math.pi),
                           L0 * 2 ** rng.uniform(0, 1), 0.0, div_age(), bool(donor_flags[k])))
        cells[-1].age = cells[-1].div_age * math.log2(cells[-1].half_len / L0)
        heading[cells[-1].cid] = rng.uniform(0, 2 * math.pi)
    root_of = {c.cid: c.cid for c in cells}
    _relax(cells, hw, iters=30)

    dt = config.frame_interval
    frames: List[Dict[str, CellObservation]] = []
    events: List[GroundTruthEvent] = []
    truncated = None
    parents: Dict[str, Optional[str]] = {c.cid: None for c in cells}
    ax, ay = config.arena
    for f in range(config.frames):
        if f > 0:
            # growth, division, motion
            born: List[_Cell] = []
            for c in cells:
                parents[c.cid] = c.cid
                c.age += dt
                if c.age >= c.div_age:
                    ux, uy = math.cos(c.angle), math.sin(c.angle)
                    for sgn in (-1, 1):
                        d = _Cell(new_id(), c.x + sgn * L0 * ux, c.y + sgn * L0 * uy,
                                  c.angle + rng.normal(0, config.angle_jitter), L0, 0.0, div_age(),
                                  c.donor, c.acq, c.expr_at, c.mat_at)
                        parents[d.cid] = c.cid
                        root_of[d.cid] = root_of[c.cid]
                        born.append(d)
                else:
                    c.half_len = L0 * 2 ** (c.age / c.div_age)
                    born.append(c)
            cells = born
            # every colony drifts as a unit along a slowly turning heading
            for r in sorted(heading, key=lambda k: int(k[1:])):
                heading[r] += rng.normal(0, config.drift_turn)
            for c in cells:
                h = heading[root_of[c.cid]]
                c.x += config.drift * math.cos(h) + rng.normal(0, config.jitter)
                c.y += config.drift * math.sin(h) + rng.normal(0, config.jitter)
            _relax(cells, hw)
            if any(abs(c.x) + c.half_len > ax / 2 or abs(c.y) + c.half_len > ay / 2 for c in cells):
                truncated = f
                log.warning("%s", ArenaOverflow(f"cells left the arena at frame {f}; trial truncated"))
                break

        # conjugation within this frame, from cells mature now into plasmid-free cells;
        # the first frame is the observed starting state
        if cells and f > 0 and (config.conj_cutoff_frame is None or f < config.conj_cutoff_frame):
            pts = np.array([[c.x, c.y] for c in cells])
            reach = 2 * (max(c.half_len for c in cells) + hw) + config.contact_range
            new_acq = {}
            for i, j in sorted(cKDTree(pts).query_pairs(reach)):
                for a, b in ((i, j), (j, i)):
                    src, dst = cells[a], cells[b]
                    if not src.mature(f) or dst.has_plasmid() or dst.cid in new_acq:
                        continue
                    val = contact_raw_weight(src.box(hw), dst.box(hw), config.true_contact_fn,
                                             config.contact_range)
                    if val > 0 and rng.random() < min(config.conj_rate * val, 1.0):
                        new_acq[dst.cid] = src.cid
            by_id = {c.cid: c for c in cells}
            for rid in sorted(new_acq, key=lambda k: int(k[1:])):
                c = by_id[rid]
                de = _sample_delay(rng, config.true_expr_delay)
                dm = _sample_delay(rng, config.true_mat_delay)
                c.acq = f
                c.expr_at = f + int(math.ceil(de / dt - 0.5 - 1e-9))
                c.mat_at = f + int(math.ceil(dm / dt - 1e-9))
                events.append(GroundTruthEvent(f, new_acq[rid], rid, de, dm))

        obs = {}
        for c in cells:
            if c.donor:
                lab = CellType.DONOR
            else:
                lab = CellType.TRANSCONJUGANT if c.expressing(f) else CellType.RECIPIENT
            obs[c.cid] = CellObservation(cell_id=c.cid, frame=f, time_min=f * dt,
                                         parent_id=parents[c.cid] if f > 0 else None,
                                         bbox=c.box(hw), type_label=lab,
                                         rfp_above_threshold=lab is not CellType.RECIPIENT)
        frames.append(obs)

    frames_t = tuple(frames)
    ds = TrialDataset(trial_id=trial_id, frame_interval_min=float(dt), frames=frames_t,
                      forest=_build_forest(frames_t))
    return ds, GroundTruth(tuple(events), truncated)


def write_trial(config: SynthConfig, out_dir, trial_id: str = "synth") -> Tuple[Path, Path]:
    ds, gt = generate_trial(config, trial_id)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tp = out / f"{trial_id}.csv"
    tp.write_text(serialize_tracks(ds, TrackFormat.CSV))
    gp = out / f"{trial_id}.ground_truth.events"
    gp.write_text(gt.to_csv())
    return tp, gp


# ---------------------------------------------------------------------------
# brute-force oracle

MAX_ENUM_LATENT = 22


def _oracle_families(net: BayesNet):
    """Node -> list of (parent, weight, gate) written out from the network and
    the lineage, independently of the inference code."""
    ds = net.dataset
    dt = ds.frame_interval_min
    ae = net.config.expression_delay.expression_alphas(dt)
    fam = {}
    for v in net.vars:
        rows = []
        for p, w, kind in net.parents_of(v):
            gate = None
            if kind is EdgeKind.DELAY and ds.parent(p.cell) is not None:
                gate = gene(ds.parent(p.cell))
            rows.append((p, w, gate))
        fam[v] = rows
    cells = {v.cell for v in net.vars}
    if net.rfp_cells is not None:
        cells &= net.rfp_cells | net.rfp_clamped
    for c in sorted(cells):
        if ds.is_donor_lineage(c):
            continue
        if c in net.rfp_clamped:
            fam[("r", c)] = []
            continue
        rows = []
        if ds.parent(c) is not None:
            rows.append((("r", ds.parent(c)), 1.0, None))
        a = c
        while a is not None:
            k = c[0] - a[0]
            if k < len(ae) and ae[k] > 0:
                g = gene(ds.parent(a)) if ds.parent(a) is not None else None
                rows.append((gene(a), float(ae[k]), g))
            a = ds.parent(a)
        fam[("r", c)] = rows
    return fam


def _oracle_key(n):
    if isinstance(n, VarId):
        return (n.cell[0], n.kind.value, n.cell[1])
    return (n[1][0], "r", n[1][1])


def enumerate_joint(net: BayesNet, evidence, target: Dict, limit: int = MAX_ENUM_LATENT) -> float:
    """P(target | evidence) by summing the joint over every latent assignment.

    Unobserved nodes with no observed or target node below them sum out to
    one and are skipped; everything else is enumerated.
    """
    fam = _oracle_families(net)
    obs = {}
    for v, x in evidence.assignments.items():
        if v in fam:
            obs[v] = int(x)
    for c, x in evidence.rfp.items():
        if ("r", c) in fam:
            obs[("r", c)] = int(x)
    for t in target:
        if t not in fam:
            raise KeyError(f"{t} is not a node of the network")
    # observed nodes at the first frame or without parents are given, not generated
    given = {n for n in obs if not fam[n] or _oracle_key(n)[0] == 0}
    needed = set(obs) | set(target)
    stack = list(needed)
    while stack:
        n = stack.pop()
        if n in given:
            continue
        for p, _, g in fam[n]:
            for q in (p, g):
                if q is not None and q not in needed:
                    needed.add(q)
                    stack.append(q)
    nodes = sorted(needed, key=_oracle_key)
    latent = [n for n in nodes if n not in obs]
    if len(latent) > limit:
        raise TooLarge(f"{len(latent)} latent nodes > {limit}")
    L = len(latent)
    val = {}
    for n, x in obs.items():
        if n in needed:
            val[n] = np.full(2 ** L, x, dtype=bool)
    codes = np.arange(2 ** L)
    for j, n in enumerate(latent):
        val[n] = ((codes >> j) & 1).astype(bool)
    logw = np.zeros(2 ** L)
    for n in nodes:
        if n in given:
            continue
        off = np.ones(2 ** L)
        for p, w, g in fam[n]:
            act = val[p].copy()
            if g is not None:
                act &= ~val[g]
            off = off * np.where(act, 1.0 - w, 1.0)
        with np.errstate(divide="ignore"):
            logw += np.log(np.where(val[n], 1.0 - off, off))
    m = logw.max()
    if not np.isfinite(m):
        return math.nan
    w = np.exp(logw - m)
    sel = np.ones(2 ** L, dtype=bool)
    for t, x in target.items():
        sel &= val[t] == bool(x)
    return float(w[sel].sum() / w.sum())


def oracle_query(net: BayesNet, evidence, query, limit: int = MAX_ENUM_LATENT) -> float:
    """Query value through the brute-force joint: sum over window frames of
    P(path first acquires at t | evidence) times the expression mass."""
    pmf = net.config.expression_delay.expression_pmf(net.dataset.frame_interval_min)
    F = query.threshold_frame
    by_frame = {c[0]: c for c in query.path}
    total = 0.0
    for t in query.window:
        k = F - t
        if not 0 <= k < len(pmf) or pmf[k] == 0:
            continue
        target = {gene(by_frame[t]): 1}
        if t - 1 in by_frame:
            target[gene(by_frame[t - 1])] = 0
        total += pmf[k] * enumerate_joint(net, evidence, target, limit)
    return total
