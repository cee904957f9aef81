"""Tracked-cell ingestion: parsing, validation, label propagation, plasmid-loss
repair and contact candidate detection.

A cell observation is keyed by ``(frame, cell_id)``.  Pipelines either keep a
cell's id across frames (parent id equal to its own id) or issue a new id per
frame; both encodings are accepted because keys include the frame.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple
import warnings

import numpy as np
from scipy.spatial import cKDTree

from .errors import (DataError, DuplicateCellId, LabelWarning, MalformedRow,
                     MissingParent, NonPositiveExtent)
from .geometry import OrientedBox, box_distance

log = logging.getLogger(__name__)

CellKey = Tuple[int, str]

TRACK_COLUMNS = ("frame", "cell_id", "parent_id", "type", "rfp_flag",
                 "x", "y", "half_len", "half_wid", "angle")
DEFAULT_FRAME_INTERVAL = 5.0


class CellType(str, Enum):
    DONOR = "D"
    RECIPIENT = "R"
    TRANSCONJUGANT = "T"


class TrackFormat(str, Enum):
    CSV = "csv"
    TSV = "tsv"

    @property
    def delimiter(self):
        return "," if self is TrackFormat.CSV else "\t"


@dataclass(frozen=True)
class CellObservation:
    cell_id: str
    frame: int
    time_min: float
    parent_id: Optional[str]
    bbox: OrientedBox
    type_label: CellType
    rfp_above_threshold: bool

    @property
    def key(self) -> CellKey:
        return (self.frame, self.cell_id)

    @property
    def centroid(self):
        return (self.bbox.cx, self.bbox.cy)


@dataclass(frozen=True)
class LineageForest:
    parent: Dict[CellKey, Optional[CellKey]]
    children: Dict[CellKey, Tuple[CellKey, ...]]
    roots: Tuple[CellKey, ...]
    lineage_id: Dict[CellKey, int]


@dataclass(frozen=True)
class TrialDataset:
    trial_id: str
    frame_interval_min: float
    frames: Tuple[Dict[str, CellObservation], ...]
    forest: LineageForest
    contact_candidates: Tuple[Tuple[Tuple[CellKey, CellKey, float], ...], ...] = ()
    loss_events: Tuple[CellKey, ...] = ()
    contact_radius: float = 0.0

    # ---- lookups -----------------------------------------------------
    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def n_cells(self) -> int:
        return sum(len(f) for f in self.frames)

    def obs(self, key: CellKey) -> CellObservation:
        return self.frames[key[0]][key[1]]

    def keys(self):
        for f, cells in enumerate(self.frames):
            for cid in sorted(cells):
                yield (f, cid)

    def label(self, key: CellKey) -> CellType:
        return self.obs(key).type_label

    def expressing(self, key: CellKey) -> bool:
        return self.obs(key).type_label is not CellType.RECIPIENT

    def _memo(self, name, build):
        # fields never change after construction, so derived tables can live on the instance
        d = self.__dict__
        if name not in d:
            d[name] = build()
        return d[name]

    def _lineage(self):
        def build():
            loss = frozenset(self.loss_events)
            parent = {k: (None if k in loss else p) for k, p in self.forest.parent.items()}
            children = {k: tuple(c for c in ch if c not in loss) for k, ch in self.forest.children.items()}
            root = {}
            for k in self.keys():  # frame-major, so parents come first
                p = parent[k]
                root[k] = k if p is None else root[p]
            return parent, children, root
        return self._memo("_lineage_tables", build)

    def parent(self, key: CellKey) -> Optional[CellKey]:
        """Lineage parent, ignoring links severed by plasmid loss."""
        return self._lineage()[0][key]

    def children(self, key: CellKey) -> Tuple[CellKey, ...]:
        return self._lineage()[1].get(key, ())

    def effective_roots(self) -> List[CellKey]:
        return [k for k in self.keys() if self.parent(k) is None]

    def subtree(self, key: CellKey) -> List[CellKey]:
        out, stack = [], [key]
        while stack:
            k = stack.pop()
            out.append(k)
            stack.extend(self.children(k))
        return out

    def path_to_root(self, key: CellKey) -> List[CellKey]:
        """Cells from the effective root down to ``key`` inclusive."""
        path = [key]
        while (p := self.parent(path[-1])) is not None:
            path.append(p)
        return path[::-1]

    def root_of(self, key: CellKey) -> CellKey:
        return self._lineage()[2][key]

    def is_donor_lineage(self, key: CellKey) -> bool:
        root = self.root_of(key)
        return root[0] == 0 and self.label(root) is CellType.DONOR

    def threshold_cells(self) -> List[CellKey]:
        """Transconjugant cells whose lineage parent is not yet expressing."""
        def build():
            out = []
            for k in self.keys():
                if self.label(k) is not CellType.TRANSCONJUGANT:
                    continue
                p = self.parent(k)
                if p is None or not self.expressing(p):
                    if self.is_donor_lineage(k):
                        continue
                    out.append(k)
            return tuple(out)
        return list(self._memo("_thresholds", build))

    def contacts_at(self, frame: int):
        if not self.contact_candidates:
            return ()
        return self.contact_candidates[frame]

    def time(self, frame: int) -> float:
        return frame * self.frame_interval_min


# ---------------------------------------------------------------------------
# parsing and serialization


def _build_forest(frames: Sequence[Dict[str, CellObservation]]) -> LineageForest:
    parent: Dict[CellKey, Optional[CellKey]] = {}
    children: Dict[CellKey, List[CellKey]] = {}
    roots = []
    for f, cells in enumerate(frames):
        for cid in sorted(cells):
            o = cells[cid]
            key = (f, cid)
            children.setdefault(key, [])
            if o.parent_id is None:
                parent[key] = None
                roots.append(key)
                continue
            pkey = (f - 1, o.parent_id)
            if f == 0 or o.parent_id not in frames[f - 1]:
                raise MissingParent(f"cell {cid!r} at frame {f}: parent {o.parent_id!r} not in frame {f - 1}")
            parent[key] = pkey
            children[pkey].append(key)
    for k, ch in children.items():
        if len(ch) > 2:
            raise DataError(f"cell {k} has {len(ch)} children; at most 2 allowed")
    lineage_id = {}
    for i, r in enumerate(roots):
        stack = [r]
        while stack:
            k = stack.pop()
            lineage_id[k] = i
            stack.extend(children[k])
    last = len(frames) - 1
    for k, ch in children.items():
        if not ch and k[0] < last:
            log.warning("lineage of %s ends at frame %d before the last frame %d", k[1], k[0], last)
    return LineageForest(parent=parent,
                         children={k: tuple(v) for k, v in children.items()},
                         roots=tuple(roots), lineage_id=lineage_id)


def _parse_row(row: List[str], lineno: int, frame_interval: float) -> CellObservation:
    if len(row) != len(TRACK_COLUMNS):
        raise MalformedRow(f"line {lineno}: expected {len(TRACK_COLUMNS)} fields, got {len(row)}")
    frame_s, cid, pid, typ, rfp, x, y, hl, hw, ang = (s.strip() for s in row)
    try:
        frame = int(frame_s)
        xs = [float(v) for v in (x, y, hl, hw, ang)]
    except ValueError as exc:
        raise MalformedRow(f"line {lineno}: {exc}") from None
    if frame < 0 or not cid:
        raise MalformedRow(f"line {lineno}: bad frame or empty cell_id")
    if typ not in ("D", "R", "T"):
        raise MalformedRow(f"line {lineno}: type {typ!r} not in D/R/T")
    if rfp not in ("0", "1"):
        raise MalformedRow(f"line {lineno}: rfp_flag {rfp!r} not 0/1")
    if not all(math.isfinite(v) for v in xs):
        raise MalformedRow(f"line {lineno}: non-finite coordinate")
    if xs[2] <= 0 or xs[3] <= 0:
        raise NonPositiveExtent(f"line {lineno}: half extents must be positive")
    return CellObservation(cell_id=cid, frame=frame, time_min=frame * frame_interval,
                           parent_id=pid or None,
                           bbox=OrientedBox(xs[0], xs[1], xs[2], xs[3], xs[4]),
                           type_label=CellType(typ), rfp_above_threshold=rfp == "1")


def parse_tracks(source, format: TrackFormat = TrackFormat.CSV, trial_id: str = "trial",
                 frame_interval_min: float = DEFAULT_FRAME_INTERVAL) -> TrialDataset:
    """Parse a track table into a validated (unrepaired) ``TrialDataset``.

    ``source`` may be bytes, str, or a binary/text file object.
    """
    if isinstance(source, (bytes, bytearray)):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        data = source.read()
        text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    if frame_interval_min <= 0:
        raise DataError("frame interval must be positive")
    reader = csv.reader(io.StringIO(text), delimiter=TrackFormat(format).delimiter)
    header = next(reader, None)
    if header is None:
        raise MalformedRow("missing header row")
    if tuple(h.strip() for h in header) != TRACK_COLUMNS:
        raise MalformedRow(f"unexpected header {header}")
    by_frame: Dict[int, Dict[str, CellObservation]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        o = _parse_row(row, lineno, frame_interval_min)
        cells = by_frame.setdefault(o.frame, {})
        if o.cell_id in cells:
            raise DuplicateCellId(f"line {lineno}: {o.cell_id!r} repeated in frame {o.frame}")
        cells[o.cell_id] = o
    n = max(by_frame) + 1 if by_frame else 0
    frames = tuple(by_frame.get(f, {}) for f in range(n))
    return TrialDataset(trial_id=trial_id, frame_interval_min=float(frame_interval_min),
                        frames=frames, forest=_build_forest(frames))


def read_tracks(path, trial_id=None, frame_interval_min=DEFAULT_FRAME_INTERVAL) -> TrialDataset:
    path = Path(path)
    fmt = TrackFormat.TSV if path.suffix in (".tsv", ".tab") else TrackFormat.CSV
    return parse_tracks(path.read_bytes(), fmt, trial_id or path.stem, frame_interval_min)


def serialize_tracks(dataset: TrialDataset, format: TrackFormat = TrackFormat.CSV) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=TrackFormat(format).delimiter, lineterminator="\n")
    w.writerow(TRACK_COLUMNS)
    for key in dataset.keys():
        o = dataset.obs(key)
        b = o.bbox
        w.writerow([o.frame, o.cell_id, o.parent_id or "", o.type_label.value,
                    int(o.rfp_above_threshold),
                    repr(b.cx), repr(b.cy), repr(b.half_len), repr(b.half_wid), repr(b.angle)])
    return buf.getvalue()


@dataclass(frozen=True)
class TrialSpec:
    trial_id: str
    frame_interval_min: float
    track_path: Path


def read_trial_manifest(path) -> List[TrialSpec]:
    """Trial manifest: delimited rows ``trial_id,frame_interval_min,track_path``.

    Relative track paths are resolved against the manifest's directory.
    """
    path = Path(path)
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                tp = Path(row["track_path"])
                out.append(TrialSpec(row["trial_id"], float(row["frame_interval_min"]),
                                     tp if tp.is_absolute() else path.parent / tp))
            except (KeyError, ValueError) as exc:
                raise DataError(f"{path}: bad manifest row {row}: {exc}") from None
    return out


def load_trial(spec: TrialSpec) -> TrialDataset:
    return read_tracks(spec.track_path, spec.trial_id, spec.frame_interval_min)


# ---------------------------------------------------------------------------
# repairs


def _relabel(dataset: TrialDataset, changes: Dict[CellKey, CellType]) -> TrialDataset:
    if not changes:
        return dataset
    frames = [dict(f) for f in dataset.frames]
    for (f, cid), lab in changes.items():
        o = frames[f][cid]
        frames[f][cid] = replace(o, type_label=lab, rfp_above_threshold=lab is not CellType.RECIPIENT)
    return replace(dataset, frames=tuple(frames))


def propagate_labels(dataset: TrialDataset) -> TrialDataset:
    """Make Donor and Transconjugant labels hereditary along every lineage.

    Frame-0 expressing cells are donors by the initial-condition assumption.
    A recipient with its RFP flag set is treated as a transconjugant.
    Lineage links severed by plasmid loss do not propagate.
    """
    current: Dict[CellKey, CellType] = {}
    changes: Dict[CellKey, CellType] = {}
    for key in dataset.keys():
        o = dataset.obs(key)
        lab = o.type_label
        if lab is CellType.RECIPIENT and o.rfp_above_threshold:
            warnings.warn(f"{key}: recipient with RFP above threshold relabelled transconjugant", LabelWarning)
            lab = CellType.TRANSCONJUGANT
        p = dataset.parent(key)
        if key[0] == 0 and lab is CellType.TRANSCONJUGANT:
            warnings.warn(f"{key}: expressing at frame 0, relabelled donor", LabelWarning)
            lab = CellType.DONOR
        if p is not None:
            plab = current[p]
            if plab is CellType.DONOR and lab is not CellType.DONOR:
                warnings.warn(f"{key}: descendant of donor labelled {lab.name}, relabelled donor", LabelWarning)
                lab = CellType.DONOR
            elif plab is CellType.TRANSCONJUGANT and lab is CellType.RECIPIENT:
                lab = CellType.TRANSCONJUGANT
        current[key] = lab
        if lab is not o.type_label or o.rfp_above_threshold != (lab is not CellType.RECIPIENT):
            changes[key] = lab
    return _relabel(dataset, changes)


def expression_offset_range(lower: float, upper: float, frame_interval: float) -> Tuple[int, int]:
    """Frame offsets that carry expression mass when delays are rounded to the nearest frame."""
    k_lo = max(math.ceil(lower / frame_interval - 0.5 + 1e-12), 1)
    k_hi = math.floor(upper / frame_interval + 0.5 - 1e-12)
    return k_lo, k_hi


def repair_plasmid_loss(dataset: TrialDataset, expr_lower: float = 30.0,
                        expr_upper: float = 150.0) -> TrialDataset:
    """Mark daughter lineages that must have lost the plasmid.

    Uses the widest expression window ``[expr_lower, expr_upper]`` (minutes)
    over all configured models so the repair is model-independent.
    """
    k_lo, k_hi = expression_offset_range(expr_lower, expr_upper, dataset.frame_interval_min)
    losses = set(dataset.loss_events)
    earliest: Dict[CellKey, float] = {}
    last_seen: Dict[CellKey, int] = {}
    thresholds = set(dataset.threshold_cells())
    # bottom-up summaries over the unsevered forest
    for key in sorted(dataset.forest.parent, reverse=True):
        e = key[0] if key in thresholds else math.inf
        ls = key[0]
        for c in dataset.forest.children.get(key, ()):
            if c in losses:
                continue
            e = min(e, earliest[c])
            ls = max(ls, last_seen[c])
        earliest[key], last_seen[key] = e, ls
    for pkey, kids in dataset.forest.children.items():
        if len(kids) < 2:
            continue
        live = [c for c in kids if c not in losses]
        div_frame = pkey[0] + 1
        for a in live:
            if not math.isfinite(earliest[a]):
                continue
            latest_conj = earliest[a] - k_lo
            if latest_conj >= div_frame:
                continue
            deadline = latest_conj + k_hi
            for b in live:
                if b == a or earliest[b] <= deadline:
                    continue
                if last_seen[b] < deadline:
                    continue  # lineage not observed long enough to contradict
                if b not in losses:
                    log.info("plasmid loss assumed for %s at frame %d", b[1], b[0])
                    losses.add(b)
    return replace(dataset, loss_events=tuple(sorted(losses)))


def detect_contact_candidates(dataset: TrialDataset, max_radius: float) -> TrialDataset:
    """Record, per frame, every unordered cell pair within ``max_radius`` (box separation)."""
    per_frame = []
    for f, cells in enumerate(dataset.frames):
        ids = sorted(cells)
        pairs = []
        if len(ids) > 1:
            boxes = [cells[c].bbox for c in ids]
            centers = np.array([(b.cx, b.cy) for b in boxes])
            reach = max(math.hypot(b.half_len, b.half_wid) for b in boxes)
            tree = cKDTree(centers)
            for i, j in sorted(tree.query_pairs(max_radius + 2.0 * reach)):
                d = box_distance(boxes[i], boxes[j])
                if d <= max_radius:
                    pairs.append(((f, ids[i]), (f, ids[j]), d))
        per_frame.append(tuple(pairs))
    return replace(dataset, contact_candidates=tuple(per_frame), contact_radius=float(max_radius))


def prepare_dataset(dataset: TrialDataset, max_radius: float, expr_lower: float = 30.0,
                    expr_upper: float = 150.0) -> TrialDataset:
    """Propagate labels, repair plasmid loss, propagate again and detect contacts."""
    ds = propagate_labels(dataset)
    ds = repair_plasmid_loss(ds, expr_lower, expr_upper)
    ds = propagate_labels(ds)
    return detect_contact_candidates(ds, max_radius)
