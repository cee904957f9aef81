import math

import pytest
from hypothesis import given, settings, strategies as st

from conjnet.factored import factored_query, unexplainable_roots
from conjnet.inference import (QueryResult, Status, assemble_evidence, count_latent,
                               enumerate_queries, exact_query)
from conjnet.models import make_model
from conjnet.network import build_network, gene, maturation, prune_for_query
from conjnet.pipeline import prepare_for_grid
from conjnet.synth import SynthConfig, enumerate_joint, generate_trial, oracle_query

from conftest import make_trial, persist, small_instance

# expression (5,15) at 5 min frames puts mass 1/4, 1/2, 1/4 on offsets 1, 2, 3
MODEL = make_model("Base", (5, 15), (5, 15))
F = 6


def _chain(contacts, model=MODEL, thr=F):
    """Frame-0 donor and a recipient turning red at ``thr``; ``contacts`` maps frame -> raw weight."""
    rows = persist("d", range(thr + 1), "D", x=-2.0) + persist("r", range(thr + 1), types=["R"] * thr + ["T"])
    ds = prepare_for_grid(make_trial(rows), [model])
    raw = [(((t, "d"), (t, "r")), w) for t, w in sorted(contacts.items())]
    net = build_network(ds, model, budget=sum(contacts.values()) or None, raw_edges=raw)
    q = enumerate_queries(ds, model)[0]
    return net, assemble_evidence(ds, q), q


def _both(contacts, **kw):
    net, ev, q = _chain(contacts, **kw)
    return exact_query(net, ev, q), factored_query(net, ev, q)


@pytest.mark.parametrize("w", [0.2, 0.7, 1.0])
def test_single_contact(w):
    for r in _both({4: w}):
        assert r.status is Status.OK
        assert math.exp(r.log_prob) == pytest.approx(w * 0.5, rel=1e-12)


def test_two_window_frames():
    w1, w2 = 0.3, 0.6
    expect = w1 * 0.5 + (1 - w1) * w2 * 0.25
    for r in _both({4: w1, 5: w2}):
        assert math.exp(r.log_prob) == pytest.approx(expect, rel=1e-12)


def test_acquisition_before_window_is_excluded():
    # a certain contact at frame 1 puts the gene in before the window opens
    w = 0.4
    for r in _both({1: w, 4: 0.5}):
        assert math.exp(r.log_prob) == pytest.approx((1 - w) * 0.5 * 0.5, rel=1e-12)


def test_no_contacts_is_impossible():
    for r in _both({}):
        assert r.status is Status.IMPOSSIBLE and r.log_prob == -math.inf


def test_empty_window_is_impossible():
    m = make_model("Base", (20, 30), (5, 15))
    net, ev, q = _chain({1: 0.5}, model=m, thr=2)
    assert q.window == ()
    assert exact_query(net, ev, q).status is Status.IMPOSSIBLE
    assert factored_query(net, ev, q).status is Status.IMPOSSIBLE


def test_result_status_invariant():
    q = _chain({4: 0.5})[2]
    with pytest.raises(ValueError):
        QueryResult(q, "m", -math.inf, Status.OK)
    with pytest.raises(ValueError):
        QueryResult(q, "m", -1.0, Status.IMPOSSIBLE)


def test_latent_limit_gives_incalculable():
    net, ev, q = _chain({3: 0.2, 4: 0.5, 5: 0.3})
    assert count_latent(net, ev, q) > 1
    r = exact_query(net, ev, q, limit=1)
    assert r.status is Status.INCALCULABLE and math.isnan(r.log_prob)


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.integers(0, 5), st.floats(0.05, 1.0), min_size=1, max_size=6), st.floats(0.0, 0.5))
def test_monotone_in_latest_window_edge(raws, bump):
    # budget = sum of raws keeps every normalized weight equal to its raw value
    last = F - 1
    higher = dict(raws)
    higher[last] = min(higher.get(last, 0.0) + bump, 1.0)
    for fn in (exact_query, factored_query):
        a = math.exp(fn(*_chain(raws)).log_prob)
        b = math.exp(fn(*_chain(higher)).log_prob)
        assert b >= a - 1e-12


def test_earlier_edge_can_lower_the_value():
    # a stronger contact at the window's first frame shifts acquisition onto
    # an offset with less expression mass
    for fn in (exact_query, factored_query):
        a = fn(*_chain({3: 0.1, 4: 0.9})).log_prob
        b = fn(*_chain({3: 0.9, 4: 0.9})).log_prob
        assert b < a


def test_queries_one_per_threshold_cell():
    rows = persist("d", range(12), "D", x=-2.0)
    rows += persist("p", range(3)) + persist("a", range(3, 12), first_parent="p", types=["R"] * 5 + ["T"] * 4)
    rows += persist("b", range(3, 12), first_parent="p", x=4.0, types=["R"] * 6 + ["T"] * 3)
    rows += persist("z", range(12), x=20.0, types=["R"] * 9 + ["T"] * 3)
    m = make_model("Base", (5, 30), (5, 15))
    ds = prepare_for_grid(make_trial(rows), [m])
    qs = enumerate_queries(ds, m)
    assert [q.query_id for q in qs] == ["a@8", "b@9", "z@9"]
    assert qs[0].path == ((0, "p"), (1, "p"), (2, "p")) + tuple((f, "a") for f in range(3, 9))
    assert qs[0].window == tuple(range(2, 8))
    none = prepare_for_grid(make_trial(persist("d", range(3), "D") + persist("r", range(3), x=5.0)), [m])
    assert enumerate_queries(none, m) == []


def test_evidence_for_donors_and_frame0_recipients():
    rows = persist("d", range(5), "D", x=-2.0) + persist("f", range(5), types=["R"] * 4 + ["T"])
    rows += persist("o", range(5), x=9.0)
    ds = prepare_for_grid(make_trial(rows), [MODEL])
    q = enumerate_queries(ds, MODEL)[0]
    ev = assemble_evidence(ds, q)
    assert ev.assignments[gene((0, "d"))] == 1 and ev.assignments[maturation((3, "d"))] == 1
    assert ev.assignments[gene((0, "o"))] == 0
    assert all(v.cell[1] != "f" for v in ev.assignments)
    assert ev.rfp[(4, "o")] == 0 and (4, "f") not in ev.rfp


def test_nonfocal_transconjugant_stays_latent():
    rows = persist("d", range(8), "D", x=-2.0) + persist("f", range(8), types=["R"] * 7 + ["T"])
    rows += persist("t", range(8), x=-4.0, y=3.0, types=["R"] * 4 + ["T"] * 4)
    ds = prepare_for_grid(make_trial(rows), [MODEL])
    q = [q for q in enumerate_queries(ds, MODEL) if q.cell[1] == "f"][0]
    ev = assemble_evidence(ds, q)
    assert all(v.cell[1] != "t" for v in ev.assignments if v.cell[0] > 0)
    assert ev.rfp[(5, "t")] == 1


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 100_000))
def test_evidence_never_touches_focal(seed):
    m = make_model("Base", (30, 60), (15, 30))
    ds, _ = generate_trial(SynthConfig(seed=seed, frames=20, n_donors=2, n_recipients=3, conj_rate=0.5), "e")
    ds = prepare_for_grid(ds, [m])
    for q in enumerate_queries(ds, m):
        ev = assemble_evidence(ds, q)
        assert not any(v.cell in q.focal for v in ev.assignments)
        assert not any(c in q.focal for c in ev.rfp)


@pytest.mark.parametrize("seed", range(20))
def test_exact_matches_enumeration_oracle(seed):
    ds, m = small_instance(seed)
    net = build_network(ds, m)
    rel = unexplainable_roots(net)
    for q in enumerate_queries(ds, m):
        ev = assemble_evidence(ds, q, rel)
        r = exact_query(net, ev, q)
        if r.status is Status.INCALCULABLE:
            continue
        p = oracle_query(prune_for_query(net, q, ev), ev, q)
        if r.status is Status.IMPOSSIBLE:
            assert p == 0
        else:
            assert r.log_prob == pytest.approx(math.log(p), abs=1e-9)


def test_enumerate_joint_examples():
    net, ev, q = _chain({4: 0.3})
    assert enumerate_joint(net, ev, {gene((4, "r")): 1}) == pytest.approx(0.3)
    assert enumerate_joint(net, ev, {gene((6, "r")): 1}) == pytest.approx(0.3)
    assert enumerate_joint(net, ev, {gene((3, "r")): 1}) == pytest.approx(0.0)


def test_factored_exact_when_donors_are_evidence():
    # two frame-0 donors, one of them touching the focal lineage through a division
    rows = persist("d", range(10), "D", x=-2.0) + persist("e", range(10), "D", x=2.0)
    rows += persist("p", range(4)) + persist("a", range(4, 10), first_parent="p", types=["R"] * 5 + ["T"])
    rows += persist("b", range(4, 10), first_parent="p", x=30.0)
    m = make_model("Edge", (5, 20), (5, 15))
    ds = prepare_for_grid(make_trial(rows), [m])
    net = build_network(ds, m)
    assert all(e.src.cell[1] in "de" for e in net.edges() if e.kind.value == "conjugation")
    for q in enumerate_queries(ds, m):
        ev = assemble_evidence(ds, q)
        a, b = exact_query(net, ev, q), factored_query(net, ev, q)
        assert a.status is Status.OK
        assert b.log_prob == pytest.approx(a.log_prob, abs=1e-10)


def test_translation_and_relabel_invariance():
    def trial(dx, names):
        d, r = names
        rows = persist(d, range(8), "D", x=-2.0 + dx, y=dx) + persist(r, range(8), x=dx, y=dx,
                                                                   types=["R"] * 7 + ["T"])
        return prepare_for_grid(make_trial(rows), [MODEL])
    vals = []
    for dx, names in ((0.0, ("d", "r")), (37.5, ("zz", "aa"))):
        ds = trial(dx, names)
        net = build_network(ds, MODEL)
        q = enumerate_queries(ds, MODEL)[0]
        vals.append(factored_query(net, assemble_evidence(ds, q), q).log_prob)
    assert vals[0] == pytest.approx(vals[1], abs=1e-12)
