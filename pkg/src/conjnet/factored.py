"""Scalable first-acquisition backend.

Each recipient lineage tree is summarized by a hidden state per cell: no
plasmid yet, or plasmid acquired at frame tau with RFP not yet / already
expressed.  Given per-cell acquisition hazards the state evolves down the
tree as a Markov chain, so evidence on a whole tree can be absorbed with one
upward and one downward sweep.

The hazard of a cell couples trees through conjugation sources.  Sources are
replaced by their maturity marginals (donor lineages are mature; recipient
cells use the posterior from their own tree), iterated to a fixed point.  For
the query lineage the maturity of its own cells is known once the
acquisition frame is fixed, so trees that the query lineage could have
infected are re-scored for every candidate acquisition frame.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
from scipy.special import logsumexp

from .inference import Evidence, Query, QueryBudget, QueryResult, Status, assemble_evidence
from .models import naive_maturity
from .network import BayesNet, EdgeKind, VarKind, gene

NEG = -np.inf
MAX_SWEEPS = 30
SWEEP_TOL = 1e-9


def _log1mexp(l0):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(-np.expm1(l0))


def _lse(x, axis=-1, keepdims=False):
    """log-sum-exp along ``axis``; rows that are all -inf give -inf."""
    m = np.max(x, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(np.sum(np.exp(x - safe), axis=axis, keepdims=True)) + safe
    return out if keepdims else np.squeeze(out, axis=axis)


def _lae(a, b):
    with np.errstate(invalid="ignore"):
        return np.logaddexp(a, b)


@dataclass
class _Tree:
    root: tuple
    cells: List[tuple]          # preorder
    parent: np.ndarray          # index into cells, -1 for the root
    children: List[List[int]]


class FactoredContext:
    """Per (trial, model) tables and the background maturity field."""

    def __init__(self, net: BayesNet, released=frozenset()):
        ds = self.ds = net.dataset
        self.net = net
        dt = ds.frame_interval_min
        self.nF = nF = max(ds.n_frames, 1)
        cfg = net.config
        ae = cfg.expression_delay.expression_alphas(dt)
        fm = cfg.maturation_delay.maturation_cdf(dt)
        taus = np.arange(nF)
        lA = np.full((nF, nF), NEG)
        l1mA = np.zeros((nF, nF))
        Fm = np.zeros((nF, nF))
        with np.errstate(divide="ignore"):
            for f in range(nF):
                k = f - taus
                ok = (k >= 0) & (k < len(ae))
                a = np.where(ok, ae[np.clip(k, 0, len(ae) - 1)], 0.0)
                lA[f] = np.log(a)
                l1mA[f] = np.log1p(-a)
                Fm[f] = np.where(k >= 0, fm[np.clip(k, 0, len(fm) - 1)], 0.0)
        self.lA, self.l1mA, self.Fm = lA, l1mA, Fm
        self.S = 1 + 2 * nF

        self.conj_in: Dict[tuple, list] = {}
        self.conj_out: Dict[tuple, list] = {}
        for v in net.vars:
            if v.kind is not VarKind.GENE:
                continue
            for p, w, kind in net.parents_of(v):
                if kind is EdgeKind.CONJUGATION:
                    self.conj_in.setdefault(v.cell, []).append((p.cell, w))
                    self.conj_out.setdefault(p.cell, []).append(v.cell)

        cells_in_net = {v.cell for v in net.vars}
        self.trees: Dict[tuple, _Tree] = {}
        self.tree_of: Dict[tuple, tuple] = {}
        for r in ds.effective_roots():
            if r not in cells_in_net or ds.is_donor_lineage(r):
                continue
            t = self._make_tree([r])
            self.trees[r] = t
            for c in t.cells:
                self.tree_of[c] = r
        self.released = frozenset(released)
        self.evidence = assemble_evidence(ds, None, self.released)
        self.mu = self._background()

    # -- structure helpers

    def _make_tree(self, roots) -> _Tree:
        ds = self.ds
        cells, parent = [], []
        index = {}
        stack = [(r, -1) for r in reversed(roots)]
        while stack:
            c, p = stack.pop()
            index[c] = len(cells)
            cells.append(c)
            parent.append(p)
            for ch in reversed(ds.children(c)):
                stack.append((ch, index[c]))
        children = [[] for _ in cells]
        for i, p in enumerate(parent):
            if p >= 0:
                children[p].append(i)
        return _Tree(roots[0], cells, np.array(parent, dtype=int), children)

    def _log_no_hazard(self, cell, mu_of, hard) -> np.ndarray:
        """log(1 - h) for one cell, vectorized over whatever ``mu_of`` returns."""
        if hard.get(gene(cell)) == 0:
            return np.zeros(1)
        acc = np.zeros(1)
        for src, w in self.conj_in.get(cell, ()):
            m = mu_of(src)
            with np.errstate(divide="ignore"):
                acc = acc + np.log1p(-np.minimum(w * np.asarray(m, dtype=float), 1.0))
        return acc

    # -- tree sweeps in log space; arrays are (nopt, S)

    def _fwd(self, lv, l0, f):
        """Parent state -> child state; ``l0`` is log(1 - hazard) of the child, shape (nopt,)."""
        nF = self.nF
        out = np.empty_like(lv)
        l1 = _log1mexp(l0)
        out[:, 0] = lv[:, 0] + l0
        a0 = lv[:, 1:1 + nF] + self.l1mA[f]
        a0[:, f] = _lae(a0[:, f], lv[:, 0] + l1)
        out[:, 1:1 + nF] = a0
        out[:, 1 + nF:] = _lae(lv[:, 1 + nF:], lv[:, 1:1 + nF] + self.lA[f])
        return out

    def _msg(self, lL, l0, f):
        nF = self.nF
        out = np.empty_like(lL)
        l1 = _log1mexp(l0)
        out[:, 0] = _lae(l0 + lL[:, 0], l1 + lL[:, 1 + f])
        out[:, 1:1 + nF] = _lae(self.l1mA[f] + lL[:, 1:1 + nF], self.lA[f] + lL[:, 1 + nF:])
        out[:, 1 + nF:] = lL[:, 1 + nF:]
        return out

    def _obs_mask(self, val):
        m = np.zeros(self.S)
        if val == 0:
            m[1 + self.nF:] = NEG
        elif val == 1:
            m[:1 + self.nF] = NEG
        return m

    def _unit(self, nopt):
        v = np.full((nopt, self.S), NEG)
        v[:, 0] = 0.0
        return v

    def tree_pass(self, tree: _Tree, l0s, obs, want_post=False, root_state=None):
        """Log evidence of a tree per option, and optionally posterior maturity per cell.

        ``l0s[i]`` is log(1 - hazard) of cell i with shape (nopt,);
        ``obs[i]`` is the observed RFP state or None.
        """
        n = len(tree.cells)
        nopt = l0s[0].shape[0]
        frames = [c[0] for c in tree.cells]
        masks = [self._obs_mask(o) for o in obs]
        lL = [None] * n
        msgs = [None] * n
        for i in range(n - 1, -1, -1):
            acc = np.broadcast_to(masks[i], (nopt, self.S)).copy()
            for c in tree.children[i]:
                acc += msgs[c]
            lL[i] = acc
            if tree.parent[i] >= 0:
                msgs[i] = self._msg(acc, l0s[i], frames[i])
        start = self._unit(nopt) if root_state is None else root_state
        prior = self._fwd(start, l0s[0], frames[0])
        with np.errstate(invalid="ignore"):
            loglik = _lse(prior + lL[0], axis=1)
        if not want_post:
            return loglik, None
        mu = np.zeros((nopt, n))
        pi = [None] * n
        pi[0] = prior
        for i in range(n):
            with np.errstate(invalid="ignore"):
                post = pi[i] + lL[i]
                post = post - _lse(post, axis=1, keepdims=True)
            p = np.exp(post)
            mu[:, i] = (p[:, 1:1 + self.nF] + p[:, 1 + self.nF:]) @ self.Fm[frames[i]]
            for c in tree.children[i]:
                up = pi[i] + masks[i]
                for o in tree.children[i]:
                    if o != c:
                        up = up + msgs[o]
                pi[c] = self._fwd(up, l0s[c], frames[c])
        return loglik, mu

    # -- background field

    def _background(self):
        ds, ev = self.ds, self.evidence
        cache: dict = {}
        mu: Dict[tuple, float] = {}
        for r, t in self.trees.items():
            for c in t.cells:
                mu[c] = naive_maturity(ds, self.net.config, c, c[0], cache)

        def mu_of(src):
            if ds.is_donor_lineage(src):
                return 1.0
            return mu.get(src, 0.0)

        for _ in range(MAX_SWEEPS):
            delta = 0.0
            for r in sorted(self.trees):
                t = self.trees[r]
                l0s = [self._log_no_hazard(c, mu_of, ev.assignments) for c in t.cells]
                obs = [ev.rfp.get(c) for c in t.cells]
                ll, m = self.tree_pass(t, l0s, obs, want_post=True)
                if not np.isfinite(ll[0]):
                    continue
                for i, c in enumerate(t.cells):
                    delta = max(delta, abs(m[0, i] - mu[c]))
                    mu[c] = float(m[0, i])
            if delta < SWEEP_TOL:
                break
        return mu

    def mu_bg(self, src):
        if self.ds.is_donor_lineage(src):
            return 1.0
        return self.mu.get(src, 0.0)

    # -- query

    def query(self, evidence: Evidence, query: Query, budget: QueryBudget = QueryBudget()) -> QueryResult:
        t0 = time.perf_counter()
        deadline = t0 + budget.seconds
        name = self.net.config.name

        def done(logp, status, note=""):
            return QueryResult(query, name, logp, status, (time.perf_counter() - t0) * 1e3, 0.0, note)

        if not query.window:
            return done(-math.inf, Status.IMPOSSIBLE, "empty window")
        ds, nF = self.ds, self.nF
        hard = evidence.assignments
        path = list(query.path)
        focal = query.focal
        on_path = {c: i for i, c in enumerate(path)}

        # sister subtrees hanging off the path
        sisters = []  # (branch index, subtree)
        for i, p in enumerate(path[:-1]):
            for ch in ds.children(p):
                if ch != path[i + 1]:
                    sisters.append((i, self._make_tree([ch])))

        mu_loc = self._focal_prior(path[0], hard)

        def mu_q(src):
            if src in mu_loc:
                return mu_loc[src]
            return self.mu_bg(src)

        # before the path acquires, the path cells carry nothing and the sister
        # branches only hold what they picked up themselves
        def mu_sis(src):
            return 0.0 if src in on_path else mu_q(src)

        sis_msg = {}
        sis_mu_none = {}
        for i, t in sisters:
            l0s = [self._log_no_hazard(c, mu_sis, hard) for c in t.cells]
            obs = [evidence.rfp.get(c) for c in t.cells]
            ll, mu_none = self.tree_pass(t, l0s, obs, want_post=True)
            # upward message of the subtree root into its parent state
            lL = self._subtree_loglik_vector(t, l0s, obs)
            sis_msg.setdefault(i, []).append(self._msg(lL, l0s[0], t.cells[0][0]))
            for j, c in enumerate(t.cells):
                sis_mu_none[c] = (path[i][0], mu_none[0, j])
        if time.perf_counter() > deadline:
            return done(math.nan, Status.INCALCULABLE, "time budget exceeded")

        def mu_path(src):
            if src in sis_mu_none:
                return sis_mu_none[src][1]
            return mu_q(src)

        def l0_path(c):
            return self._log_no_hazard(c, mu_path, hard)

        lv = self._fwd(self._unit(1), l0_path(path[0]), path[0][0])
        for i in range(len(path)):
            for m in sis_msg.get(i, ()):
                lv = lv + m
            if i + 1 < len(path):
                lv = self._fwd(lv, l0_path(path[i + 1]), path[i + 1][0])
        lv = lv[0]
        logW = _lae(lv[1:1 + nF], lv[1 + nF:])
        logW_none = lv[0]

        taus = [int(t) for t in np.flatnonzero(np.isfinite(logW))]
        opts = taus + [None]
        logw_opt = np.array([logW[t] for t in taus] + [logW_none])
        logLam = self._downstream(opts, path, focal, sisters, sis_mu_none, hard, evidence, deadline)
        if logLam is None:
            return done(math.nan, Status.INCALCULABLE, "time budget exceeded")

        pmf = self.net.config.expression_delay.expression_pmf(ds.frame_interval_min)
        F = query.threshold_frame
        win = set(query.window)
        tot = logw_opt + logLam
        with np.errstate(divide="ignore"):
            lp = np.array([math.log(pmf[F - t]) if (t is not None and t in win and 0 <= F - t < len(pmf)
                                                    and pmf[F - t] > 0) else NEG for t in opts])
        den = logsumexp(tot) if len(tot) else NEG
        if not np.isfinite(den):
            return done(math.nan, Status.INCALCULABLE, "evidence has probability zero")
        num = logsumexp(tot + lp)
        if not np.isfinite(num):
            return done(-math.inf, Status.IMPOSSIBLE)
        return done(float(min(num - den, 0.0)), Status.OK)

    def _focal_prior(self, root, hard) -> Dict[tuple, float]:
        """Maturity of the query tree's cells with its own RFP record left out.

        The background field was fitted with that record, so it cannot feed the
        query tree's own conjugation edges.
        """
        cache = self.__dict__.setdefault("_focal_cache", {})
        r = self.tree_of.get(root)
        if r is None:
            return {}
        if r in cache:
            return cache[r]
        t = self.trees[r]
        mu = {c: 0.0 for c in t.cells}

        def mu_of(src):
            return mu[src] if src in mu else self.mu_bg(src)

        blind = [None] * len(t.cells)
        for _ in range(MAX_SWEEPS):
            l0s = [self._log_no_hazard(c, mu_of, hard) for c in t.cells]
            _, m = self.tree_pass(t, l0s, blind, want_post=True)
            delta = 0.0
            for i, c in enumerate(t.cells):
                delta = max(delta, abs(m[0, i] - mu[c]))
                mu[c] = float(m[0, i])
            if delta < SWEEP_TOL:
                break
        cache[r] = mu
        return mu

    def _subtree_loglik_vector(self, t, l0s, obs):
        """Log-likelihood of a subtree's evidence given each state of its root cell."""
        n = len(t.cells)
        masks = [self._obs_mask(o) for o in obs]
        lL = [None] * n
        for i in range(n - 1, -1, -1):
            acc = masks[i][None, :].copy()
            for c in t.children[i]:
                acc += self._msg(lL[c], l0s[c], t.cells[c][0])
            lL[i] = acc
        return lL[0]

    def _downstream(self, opts, path, focal, sisters, sis_mu_none, hard, evidence, deadline):
        """Log-likelihood of other trees' evidence for each acquisition option, up to a constant."""
        nopt = len(opts)
        focal_tree = self.tree_of.get(path[0])
        tau_arr = np.array([t if t is not None else -1 for t in opts])
        has_tau = tau_arr >= 0
        tcl = np.clip(tau_arr, 0, self.nF - 1)

        def mu_focal(src):
            f = src[0]
            det = np.where(has_tau, self.Fm[f][tcl], 0.0)
            if src in sis_mu_none:
                b, mn = sis_mu_none[src]
                return np.where(has_tau & (tau_arr <= b), det, mn)
            return det

        sources = [c for c in list(focal) + list(sis_mu_none) if c in self.conj_out]
        targets = set()
        for s in sources:
            for tcell in self.conj_out[s]:
                r = self.tree_of.get(tcell)
                if r is not None and r != focal_tree:
                    targets.add(r)
        total = np.zeros(nopt)
        fset = set(focal) | set(sis_mu_none)

        def mu_of(src):
            if src in fset:
                return mu_focal(src)
            return self.mu_bg(src)

        for r in sorted(targets):
            if time.perf_counter() > deadline:
                return None
            t = self.trees[r]
            obs = [evidence.rfp.get(c) for c in t.cells]
            if all(o is None for o in obs):
                continue
            l0s = [np.broadcast_to(self._log_no_hazard(c, mu_of, hard), (nopt,)).astype(float)
                   for c in t.cells]
            ll, _ = self.tree_pass(t, l0s, obs)
            finite = np.isfinite(ll)
            if not finite.any():
                continue  # unexplainable whatever happens on the query lineage
            total = total + np.where(finite, ll - ll[finite].max(), NEG)
        return total


def context_for(net: BayesNet, released=frozenset()) -> FactoredContext:
    cache = net.__dict__.setdefault("_factored_ctx", {})
    key = frozenset(released)
    if key not in cache:
        cache[key] = FactoredContext(net, key)
    return cache[key]


def factored_query(net: BayesNet, evidence: Evidence, query: Query,
                   budget: QueryBudget = QueryBudget()) -> QueryResult:
    return context_for(net, evidence.released).query(evidence, query, budget)


def unexplainable_roots(net: BayesNet) -> frozenset:
    """Recipient lineage trees whose RFP record has probability zero even if
    every potential donor were mature throughout."""
    ctx = _TablesOnly(net)
    ev = ctx.evidence
    out = []
    for r in sorted(ctx.trees):
        t = ctx.trees[r]
        l0s = [ctx._log_no_hazard(c, lambda s: 1.0, ev.assignments) for c in t.cells]
        obs = [ev.rfp.get(c) for c in t.cells]
        ll, _ = ctx.tree_pass(t, l0s, obs)
        if not np.isfinite(ll[0]):
            out.append(r)
    return frozenset(out)


class _TablesOnly(FactoredContext):
    def _background(self):
        return {}
