"""Model variants: contact functions, delay distributions, Noisy-OR weights and
conjugation-weight normalization.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from .errors import ClampWarning, ConfigError, DegenerateCDF, NoCandidateEdges
from .geometry import OrientedBox, box_distance, perimeter_fraction_within

CONTACT_FNS = ("Base", "Edge")
DEFAULT_CONTACT_RANGE = 0.5
MIN_NORMALIZER = 1e-9


# ---------------------------------------------------------------------------
# delay distributions
#
# CDFs are small callable classes rather than closures so that configs pickle
# cleanly into worker processes.


@dataclass(frozen=True)
class UniformCDF:
    lower: float
    upper: float

    def __call__(self, t: float) -> float:
        if self.upper == self.lower:
            return 1.0 if t >= self.lower else 0.0
        return min(max((t - self.lower) / (self.upper - self.lower), 0.0), 1.0)


@dataclass(frozen=True)
class StepCDF:
    """Discrete distribution putting equal mass on each listed delay."""
    points: Tuple[float, ...]

    def __call__(self, t: float) -> float:
        return sum(1 for p in self.points if p <= t + 1e-9) / len(self.points)


@dataclass(frozen=True)
class PowerCDF:
    """((t - lower) / (upper - lower)) ** power on the support."""
    lower: float
    upper: float
    power: float

    def __call__(self, t: float) -> float:
        u = min(max((t - self.lower) / (self.upper - self.lower), 0.0), 1.0)
        return u ** self.power


@dataclass(frozen=True)
class DelayModel:
    """A delay distribution with bounded support, in minutes."""
    lower: float
    upper: float
    cdf: Callable[[float], float]
    label: str = ""

    @classmethod
    def uniform(cls, lower: float, upper: float) -> "DelayModel":
        if not 0 < lower <= upper:
            raise ConfigError(f"bad uniform delay range ({lower}, {upper})")
        return cls(float(lower), float(upper), UniformCDF(float(lower), float(upper)),
                   f"({_fmt(lower)},{_fmt(upper)})")

    @classmethod
    def discrete_uniform(cls, points: Iterable[float]) -> "DelayModel":
        pts = tuple(sorted(float(p) for p in points))
        if not pts or pts[0] <= 0:
            raise ConfigError("discrete delay needs positive points")
        return cls(pts[0], pts[-1], StepCDF(pts), "{" + ",".join(_fmt(p) for p in pts) + "}")

    @classmethod
    def point(cls, delay: float) -> "DelayModel":
        return cls.discrete_uniform([delay])

    def frame_times(self, frame_interval: float) -> List[float]:
        k0 = math.ceil(self.lower / frame_interval - 1e-9)
        k1 = math.floor(self.upper / frame_interval + 1e-9)
        return [k * frame_interval for k in range(max(k0, 1), k1 + 1)]

    # Tables indexed by frame offset k = 0..max_offset.  Maturation uses the
    # CDF sampled at frame times; expression uses delays rounded to the nearest
    # frame, i.e. the CDF sampled half a frame later.

    def max_offset(self, frame_interval: float) -> int:
        return int(math.floor(self.upper / frame_interval + 0.5 + 1e-9)) + 1

    def maturation_cdf(self, frame_interval: float) -> np.ndarray:
        return _tables(self, float(frame_interval))[0]

    def maturation_alphas(self, frame_interval: float) -> np.ndarray:
        return _tables(self, float(frame_interval))[1]

    def expression_cdf(self, frame_interval: float) -> np.ndarray:
        return _tables(self, float(frame_interval))[2]

    def expression_alphas(self, frame_interval: float) -> np.ndarray:
        return _tables(self, float(frame_interval))[3]

    def expression_pmf(self, frame_interval: float) -> np.ndarray:
        return _tables(self, float(frame_interval))[4]

    def expression_offsets(self, frame_interval: float) -> Tuple[int, int]:
        """Smallest and largest frame offset with positive expression mass."""
        nz = np.flatnonzero(self.expression_pmf(frame_interval) > 0)
        return int(nz[0]), int(nz[-1])


def _fmt(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def _recurrence(fvals: Sequence[float]) -> np.ndarray:
    """alpha_k = 1 - (1 - f_k) / prod_{i<k} (1 - alpha_i)."""
    alphas = np.zeros(len(fvals))
    surv = 1.0
    prev = 0.0
    for k, f in enumerate(fvals):
        if f < prev - 1e-15 or f > 1.0 + 1e-15 or f < -1e-15:
            raise DegenerateCDF(f"CDF not monotone in [0,1] at position {k}: {prev} -> {f}")
        prev = f
        if surv == 0.0:
            if f < 1.0:
                raise DegenerateCDF(f"survival reached 0 before the CDF reached 1 (position {k})")
            continue
        a = 1.0 - (1.0 - f) / surv
        a = min(max(a, 0.0), 1.0)
        alphas[k] = a
        surv *= 1.0 - a
    return alphas


def delay_edge_weights(delay: DelayModel, frame_interval: float = 5.0) -> np.ndarray:
    """Noisy-OR weights for the delay edges at ``delay.frame_times(frame_interval)``."""
    return _recurrence([delay.cdf(t) for t in delay.frame_times(frame_interval)])


@lru_cache(maxsize=256)
def _tables(delay: DelayModel, dt: float):
    n = delay.max_offset(dt) + 1
    ks = np.arange(n)
    mat_cdf = np.array([delay.cdf(k * dt) if k > 0 else 0.0 for k in ks])
    mat_alpha = _recurrence(mat_cdf)
    expr_cdf = np.array([delay.cdf(k * dt + 0.5 * dt) if k > 0 else 0.0 for k in ks])
    expr_alpha = _recurrence(expr_cdf)
    expr_pmf = np.diff(expr_cdf, prepend=0.0)
    expr_pmf[expr_pmf < 0] = 0.0
    for arr in (mat_cdf, mat_alpha, expr_cdf, expr_alpha, expr_pmf):
        arr.setflags(write=False)
    return mat_cdf, mat_alpha, expr_cdf, expr_alpha, expr_pmf


# ---------------------------------------------------------------------------
# Noisy-OR and contact functions


def noisy_or(active_weights: Iterable[float]) -> float:
    """P(x=1) for a leak-free Noisy-OR given the weights of its active parents."""
    q = 1.0
    for w in active_weights:
        if not 0.0 <= w <= 1.0:
            raise ValueError(f"weight {w} outside [0, 1]")
        q *= 1.0 - w
    return 1.0 - q


def log_noisy_or_off(active_weights: Iterable[float]) -> float:
    """log P(x=0) = sum log(1 - w), finite unless some weight is 1."""
    total = 0.0
    for w in active_weights:
        if w >= 1.0:
            return -math.inf
        total += math.log1p(-w)
    return total


def contact_raw_weight(donor: OrientedBox, recipient: OrientedBox, fn: str, range_um: float) -> float:
    if fn == "Base":
        return 1.0 if box_distance(donor, recipient) <= range_um else 0.0
    if fn == "Edge":
        if box_distance(donor, recipient) > range_um:
            return 0.0
        return perimeter_fraction_within(recipient, donor, range_um)
    raise ConfigError(f"unknown contact function {fn!r}")


def normalize_conjugation(raw_edges, budget: float):
    """Rescale raw conjugation weights so they sum to ``budget``, clamped to (0, 1].

    ``raw_edges`` is a sequence of ``(edge, raw_weight)``.  Edges with zero raw
    weight are dropped.
    """
    raw_edges = list(raw_edges)
    total = math.fsum(r for _, r in raw_edges)
    if not total > 0:
        raise NoCandidateEdges("no conjugation edge has positive raw weight")
    if not budget > 0:
        raise ConfigError("normalization budget must be positive")
    out = []
    clamped = 0
    for e, r in raw_edges:
        if r <= 0:
            continue
        w = budget * (r / total)
        if w > 1.0:
            w = 1.0
            clamped += 1
        out.append((e, w))
    if clamped:
        warnings.warn(f"{clamped} conjugation weights clamped to 1", ClampWarning)
    return out


# ---------------------------------------------------------------------------
# model configuration


@dataclass(frozen=True)
class ModelConfig:
    contact_fn: str
    expression_delay: DelayModel
    maturation_delay: DelayModel
    contact_range: float = DEFAULT_CONTACT_RANGE
    normalization_budget: Optional[float] = None  # None: number of observed events
    maturity_bias_correction: bool = True
    name: str = ""

    def __post_init__(self):
        if self.contact_fn not in CONTACT_FNS:
            raise ConfigError(f"contact_fn must be one of {CONTACT_FNS}")
        if self.contact_range <= 0:
            raise ConfigError("contact_range must be positive")
        if not self.name:
            object.__setattr__(self, "name", f"{self.contact_fn}_R{self.expression_delay.label}"
                                             f"_M{self.maturation_delay.label}")

    def check_frame_interval(self, frame_interval: float):
        for d in (self.expression_delay, self.maturation_delay):
            if d.lower < frame_interval - 1e-9:
                raise ConfigError(f"{self.name}: delay lower bound {d.lower} below frame interval {frame_interval}")


def make_model(contact_fn: str, expr: Tuple[float, float], mat: Tuple[float, float], **kw) -> ModelConfig:
    return ModelConfig(contact_fn, DelayModel.uniform(*expr), DelayModel.uniform(*mat), **kw)


DEFAULT_GRID_AXES = [(c, e, m) for c in ("Base", "Edge")
              for e in ((30, 150), (30, 120))
              for m in ((15, 75), (30, 90))]


def default_grid(**kw) -> List[ModelConfig]:
    """The eight contact x expression x maturation variants."""
    return [make_model(c, e, m, **kw) for c, e, m in DEFAULT_GRID_AXES]


def load_model_grid(path) -> List[ModelConfig]:
    """Read a YAML list of model entries.

    Each entry has ``contact_fn``, ``expr_range: [l, u]``, ``mat_range: [l, u]``
    and optionally ``contact_range_um``, ``budget`` and ``bias_correction``.
    """
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    entries = doc.get("models", doc) if isinstance(doc, dict) else doc
    if not isinstance(entries, list) or not entries:
        raise ConfigError(f"{path}: expected a non-empty list of models")
    out = []
    for i, e in enumerate(entries):
        try:
            out.append(make_model(
                e["contact_fn"], tuple(e["expr_range"]), tuple(e["mat_range"]),
                contact_range=float(e.get("contact_range_um", DEFAULT_CONTACT_RANGE)),
                normalization_budget=e.get("budget"),
                maturity_bias_correction=bool(e.get("bias_correction", True))))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: model entry {i}: {exc!r}") from None
    names = [m.name for m in out]
    if len(set(names)) != len(names):
        raise ConfigError(f"{path}: duplicate model names")
    return out


def dump_model_grid(models: Sequence[ModelConfig]) -> str:
    rows = []
    for m in models:
        rows.append({"contact_fn": m.contact_fn,
                     "expr_range": [m.expression_delay.lower, m.expression_delay.upper],
                     "mat_range": [m.maturation_delay.lower, m.maturation_delay.upper],
                     "contact_range_um": m.contact_range,
                     "budget": m.normalization_budget,
                     "bias_correction": m.maturity_bias_correction})
    return yaml.safe_dump({"models": rows}, sort_keys=False)


DEFAULT_GRID_PATH = Path(__file__).with_name("data") / "default_grid.yaml"


# ---------------------------------------------------------------------------
# maturity-bias normalizer


def naive_maturity(dataset, config: ModelConfig, source, frame: int,
                   _cache: Optional[dict] = None) -> float:
    """Crude probability that ``source`` is mature at ``frame``.

    Donor lineages are always mature.  A recipient-lineage cell is given the
    implied conjugation window of the earliest threshold event on or below it,
    with the conjugation frame taken uniform over that window.
    """
    if dataset.is_donor_lineage(source):
        return 1.0
    dt = dataset.frame_interval_min
    key = (source,)
    if _cache is not None and key in _cache:
        window = _cache[key]
    else:
        y = _threshold_for(dataset, source)
        window = []
        if y is not None:
            k_lo, k_hi = config.expression_delay.expression_offsets(dt)
            birth = dataset.path_to_root(y)[0][0]
            window = [y[0] - k for k in range(k_lo, k_hi + 1) if y[0] - k >= birth]
        if _cache is not None:
            _cache[key] = window
    if not window:
        return 0.0
    cdf = config.maturation_delay.maturation_cdf(dt)
    total = 0.0
    for tau in window:
        k = frame - tau
        if k > 0:
            total += cdf[min(k, len(cdf) - 1)]
    return total / len(window)


def _threshold_for(dataset, key):
    """The threshold event that fixes ``key``'s implied conjugation window:
    the one on its own path if it already expresses, else the earliest below it."""
    def build():
        thresholds = set(dataset.threshold_cells())
        best = {}
        for k in reversed(list(dataset.keys())):
            cand = [best[c] for c in dataset.children(k) if best.get(c) is not None]
            if k in thresholds:
                cand.append(k)
            best[k] = min(cand) if cand else None
        return best
    if dataset.expressing(key):
        for k in dataset.path_to_root(key):
            if dataset.expressing(k):
                return k
        return None
    return dataset._memo("_earliest_threshold", build)[key]


def maturity_bias_normalizer(dataset, config: ModelConfig, queries=None, net=None) -> Dict[str, float]:
    """Per-query sum, over the implied window, of naive maturities of the focal cell's contacts."""
    from .inference import enumerate_queries
    from .network import build_network, EdgeKind, VarKind

    if net is None:
        net = build_network(dataset, config)
    if queries is None:
        queries = enumerate_queries(dataset, config)
    cache: dict = {}
    out = {}
    for q in queries:
        total = 0.0
        by_frame = {k[0]: k for k in q.path}
        for f in q.window:
            cell = by_frame.get(f)
            if cell is None:
                continue
            for p, w, kind in net.parents_of((cell, VarKind.GENE)):
                if kind is EdgeKind.CONJUGATION:
                    total += naive_maturity(dataset, config, p[0], f, cache)
        out[q.query_id] = max(total, MIN_NORMALIZER)
    return out
