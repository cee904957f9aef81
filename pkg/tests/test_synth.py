import itertools

import pytest
from hypothesis import given, settings, strategies as st

from conjnet.errors import TooLarge
from conjnet.inference import Evidence
from conjnet.models import default_grid, make_model, noisy_or
from conjnet.network import BayesNet, EdgeKind, assert_acyclic, build_network, gene, maturation
from conjnet.pipeline import prepare_for_grid
from conjnet.synth import SynthConfig, enumerate_joint, generate_trial, write_trial
from conjnet.tracks import CellType, parse_tracks, serialize_tracks

from conftest import make_trial, persist


def test_zero_donors_no_transconjugants():
    ds, gt = generate_trial(SynthConfig(seed=3, n_donors=0, frames=30, conj_rate=1.0))
    assert gt.events == ()
    assert not any(o.type_label is CellType.TRANSCONJUGANT or o.rfp_above_threshold and o.type_label is not CellType.DONOR for f in ds.frames for o in f.values())


def test_zero_rate_no_events():
    _, gt = generate_trial(SynthConfig(seed=3, frames=30, conj_rate=0.0))
    assert gt.events == ()


def test_fixed_seed_is_byte_identical(tmp_path):
    a = write_trial(SynthConfig(seed=11, frames=25), tmp_path / "a", "x")
    b = write_trial(SynthConfig(seed=11, frames=25), tmp_path / "b", "x")
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
    assert a[1].read_text().splitlines()[0] == "frame,donor_id,recipient_id,expr_delay_min,mat_delay_min"


def test_conjugation_cutoff():
    _, gt = generate_trial(SynthConfig(seed=5, frames=40, conj_rate=0.5, conj_cutoff_frame=10))
    assert gt.events and all(e.frame < 10 for e in gt.events)


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**32))
def test_output_valid_and_acyclic_under_grid(seed):
    ds, _ = generate_trial(SynthConfig(seed=seed, frames=40, conj_rate=0.2), "v")
    again = parse_tracks(serialize_tracks(ds), trial_id="v")
    grid = default_grid()
    again = prepare_for_grid(again, grid)
    for m in grid:
        assert_acyclic(build_network(again, m))


def _net(parents):
    """Hand-built network from ``{var: [(parent, weight, kind)]}``."""
    ds = make_trial(persist("a", range(2)) + persist("b", range(2), x=9.0))
    m = make_model("Base", (30, 60), (15, 60))
    base = build_network(ds, m)
    ps = {v: () for v in base.vars}
    ps.update({v: tuple(p) for v, p in parents.items()})
    return BayesNet(ds, m, base.vars, ps, frozenset(), rfp_cells=frozenset())


def test_root_without_parents_never_on():
    net = _net({})
    assert enumerate_joint(net, Evidence({}), {gene((1, "a")): 1}) == 0.0


def test_deterministic_edge():
    g, m = gene((0, "a")), maturation((1, "a"))
    net = _net({m: [(g, 1.0, EdgeKind.DELAY)]})
    assert enumerate_joint(net, Evidence({g: 1}), {m: 1}) == pytest.approx(1.0)


weights = [i / 10 for i in range(1, 10)]


@pytest.mark.parametrize("w1,w2", list(itertools.product(weights, weights)))
def test_two_parents_match_noisy_or(w1, w2):
    x = gene((1, "b"))
    p1, p2 = maturation((1, "a")), maturation((1, "b"))
    net = _net({x: [(p1, w1, EdgeKind.CONJUGATION), (p2, w2, EdgeKind.CONJUGATION)]})
    ev = Evidence({p1: 1, p2: 1})
    on = enumerate_joint(net, ev, {x: 1})
    assert on == pytest.approx(noisy_or([w1, w2]), abs=1e-12)
    assert on + enumerate_joint(net, ev, {x: 0}) == pytest.approx(1.0, abs=1e-12)


def test_too_large():
    ds = make_trial([line for i in range(12) for line in persist(f"c{i}", range(2), x=3.0 * i)])
    m = make_model("Base", (30, 60), (15, 60))
    net = build_network(ds, m)
    chain = {gene((1, f"c{i}")): [(gene((0, f"c{i}")), 0.5, EdgeKind.LINEAGE)] for i in range(12)}
    big = BayesNet(ds, m, net.vars, {**net.parents, **chain}, frozenset(), rfp_cells=frozenset())
    target = {gene((1, f"c{i}")): 1 for i in range(12)}
    with pytest.raises(TooLarge):
        enumerate_joint(big, Evidence({}), target, limit=5)
