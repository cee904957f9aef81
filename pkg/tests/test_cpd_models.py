import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conjnet.errors import ClampWarning, ConfigError, DegenerateCDF, NoCandidateEdges
from conjnet.inference import enumerate_queries
from conjnet.models import (DEFAULT_GRID_PATH, MIN_NORMALIZER, DelayModel, PowerCDF, _recurrence,
                            default_grid, delay_edge_weights, dump_model_grid, load_model_grid, make_model,
                            maturity_bias_normalizer, noisy_or, normalize_conjugation)
from conjnet.pipeline import prepare_for_grid

from conftest import make_trial, persist


def test_recurrence_examples():
    dm = DelayModel.discrete_uniform([5, 10, 15])
    assert np.allclose(delay_edge_weights(dm, 5.0), [1 / 3, 1 / 2, 1], atol=1e-15)
    assert np.allclose(delay_edge_weights(DelayModel.point(5), 5.0), [1.0])
    assert list(_recurrence([0, 0, 0, 1])) == [0, 0, 0, 1]


def test_recurrence_rejects_decreasing_cdf():
    with pytest.raises(DegenerateCDF):
        _recurrence([0.5, 0.2, 1.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=40))
def test_survival_product_equals_one_minus_cdf(incs):
    f = np.cumsum(incs)
    f = f / f[-1] if f[-1] > 0 else np.ones_like(f)
    a = _recurrence(list(f))
    assert np.all((a >= 0) & (a <= 1))
    assert np.allclose(np.cumprod(1 - a), 1 - f, atol=1e-9)


def test_uniform_tables_have_expected_support():
    dm = DelayModel.uniform(30, 150)
    lo, hi = dm.expression_offsets(5.0)
    assert (lo, hi) == (6, 30)
    pmf = dm.expression_pmf(5.0)
    assert pmf.sum() == pytest.approx(1.0)
    assert pmf[lo] == pytest.approx(2.5 / 120)


def test_noisy_or_examples():
    assert noisy_or([]) == 0
    assert noisy_or([0.3]) == pytest.approx(0.3)
    assert noisy_or([0.5, 0.5]) == pytest.approx(0.75)
    assert noisy_or([0.2, 1.0]) == 1.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), max_size=8), st.randoms())
def test_noisy_or_commutative_and_monotone(ws, rnd):
    shuffled = list(ws)
    rnd.shuffle(shuffled)
    assert noisy_or(ws) == pytest.approx(noisy_or(shuffled), abs=1e-12)
    assert noisy_or(ws + [0.1]) >= noisy_or(ws) - 1e-12


def test_normalize_examples():
    out = normalize_conjugation([("a", 2), ("b", 2), ("c", 4)], 1.0)
    assert [w for _, w in out] == pytest.approx([0.25, 0.25, 0.5])
    out = normalize_conjugation([("a", 1), ("b", 1), ("c", 2)], 1.0)
    assert [w for _, w in out] == pytest.approx([0.25, 0.25, 0.5])
    with pytest.warns(ClampWarning):
        out = normalize_conjugation([("a", 1)], 5.0)
    assert out == [("a", 1.0)]
    with pytest.raises(NoCandidateEdges):
        normalize_conjugation([("a", 0.0)], 1.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1e-3, 10), min_size=1, max_size=30), st.sampled_from([1e-6, 3.0, 1e6]))
def test_normalize_scale_invariant_and_order_preserving(raw, c):
    edges = list(enumerate(raw))
    budget = 0.5
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ClampWarning)
        a = [w for _, w in normalize_conjugation(edges, budget)]
        b = [w for _, w in normalize_conjugation([(e, r * c) for e, r in edges], budget)]
    assert np.allclose(a, b, rtol=1e-12, atol=0)
    assert all((0 < w <= 1) for w in a)
    order = np.argsort(raw, kind="stable")
    assert all(a[order[i]] <= a[order[i + 1]] + 1e-15 for i in range(len(a) - 1))


def test_model_names_and_grid_file():
    names = [m.name for m in default_grid()]
    assert names[0] == "Base_R(30,150)_M(15,75)"
    assert len(set(names)) == 8
    assert [m.name for m in load_model_grid(DEFAULT_GRID_PATH)] == names


def test_grid_roundtrip(tmp_path):
    p = tmp_path / "g.yaml"
    p.write_text(dump_model_grid(default_grid()))
    assert [m.name for m in load_model_grid(p)] == [m.name for m in default_grid()]


def test_delay_below_frame_interval_rejected():
    m = make_model("Base", (2, 20), (30, 90))
    with pytest.raises(ConfigError):
        m.check_frame_interval(5.0)


def _two_donor_trial():
    # recipient between two donors, touching both in every frame; expresses from frame 6
    rows = persist("d1", range(7), "D", x=-2.0) + persist("d2", range(7), "D", x=2.0)
    rows += persist("r", range(7), types=["R"] * 6 + ["T"])
    return make_trial(rows)


def test_bias_normalizer_counts_mature_contacts():
    m = make_model("Base", (10, 20), (5, 10))
    ds = prepare_for_grid(_two_donor_trial(), [m])
    qs = enumerate_queries(ds, m)
    assert [q.window for q in qs] == [(2, 3, 4)]
    assert maturity_bias_normalizer(ds, m, qs)[qs[0].query_id] == pytest.approx(6.0)


def test_bias_normalizer_floor():
    # a recipient that turns red without any contact
    rows = persist("d", range(7), "D", x=50.0) + persist("r", range(7), types=["R"] * 6 + ["T"])
    rows += persist("s", range(7), "R", x=-50.0) + persist("s2", range(7), "R", x=-48.0)
    m = make_model("Base", (10, 20), (5, 10))
    ds = prepare_for_grid(make_trial(rows), [m])
    qs = enumerate_queries(ds, m)
    assert maturity_bias_normalizer(ds, m, qs)[qs[0].query_id] == MIN_NORMALIZER


def test_bias_normalizer_same_for_fully_matured_source():
    # x picks up the plasmid from d early; y only ever touches x, much later
    n = 17
    rows = persist("d", range(n), "D", x=-2.0)
    rows += persist("x", range(n), types=["R"] * 4 + ["T"] * (n - 4))
    rows += persist("y", range(12, n), x=2.0, types=["R"] * 4 + ["T"])
    ds = make_trial(rows)
    vals = []
    for mat in ((5, 10), (5, 15)):
        m = make_model("Base", (10, 20), mat)
        d = prepare_for_grid(ds, [m])
        qs = [q for q in enumerate_queries(d, m) if q.cell[1] == "y"]
        vals.append(maturity_bias_normalizer(d, m, qs)[qs[0].query_id])
    assert vals[0] == pytest.approx(vals[1])
    assert vals[0] == pytest.approx(3.0)


def test_power_cdf_recurrence_identity():
    dm = DelayModel(30, 150, PowerCDF(30, 150, 2.5), "p")
    a = delay_edge_weights(dm, 5.0)
    f = [dm.cdf(t) for t in dm.frame_times(5.0)]
    assert np.allclose(np.cumprod(1 - a), 1 - np.array(f), atol=1e-12, rtol=0)
