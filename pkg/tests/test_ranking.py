import math

import pytest
from hypothesis import given, settings, strategies as st

from conjnet.errors import EmptyTrial
from conjnet.ranking import (ProbTable, apply_exclusions, avg_trial_ranking, build_report, fmt_score,
                             per_trial_query_ranks, rank_row, render_report, total_prob_ranking)

NAN, NEG = math.nan, -math.inf
MODELS = [f"m{i}" for i in range(8)]


def table(rows, models=MODELS, trial="t"):
    return ProbTable.from_logprobs({trial: {q: dict(zip(models, r)) for q, r in rows.items()}}, models)


def test_exclusion_rules():
    ok = [-1.0 - i for i in range(8)]
    t = table({"a": [NEG] * 8, "b": [NAN] + ok[1:], "c": [-1.0, -2.0, -3.0, -4.0, -5.0, NEG, NEG, NEG]})
    out = apply_exclusions(t)
    assert out.queries("t") == ["c"]
    reasons = {(e.query_cell, e.reason) for e in out.exclusions}
    assert reasons == {("a", "impossible_for_all"), ("b", "incalculable")}
    assert [e.models_affected for e in out.exclusions if e.query_cell == "b"] == [("m0",)]
    ranks = per_trial_query_ranks(out)["t"]
    assert list(ranks) == [1, 2, 3, 4, 5, 7, 7, 7]


def test_avg_trial_examples():
    t = table({"q1": [-1.0, -2.0], "q2": [-0.5, -3.0]}, models=["A", "B"])
    assert avg_trial_ranking(t) == {"A": 1.0, "B": 2.0}
    same = table({"q1": [-1.0] * 4}, models=list("abcd"))
    assert set(avg_trial_ranking(same).values()) == {2.5}
    # rank rows (1,2,3), (2,1,3), (1,3,2)
    t = table({"q1": [-1, -2, -3], "q2": [-2, -1, -3], "q3": [-1, -3, -2]}, models=list("xyz"))
    got = avg_trial_ranking(t)
    assert [got[m] for m in "xyz"] == pytest.approx([4 / 3, 2, 8 / 3], abs=1e-15)


def test_total_prob_examples():
    t = table({"q": [math.log(0.9), math.log(0.1)]}, models=["A", "B"])
    assert total_prob_ranking(t) == {"A": 1.0, "B": 2.0}
    # linear sums: A = 0.5 + 1e-9, B = 0.2 + 0.2; a sum of logs would favour B
    t = table({"q1": [math.log(0.5), math.log(0.2)], "q2": [math.log(1e-9), math.log(0.2)]}, models=["A", "B"])
    assert total_prob_ranking(t) == {"A": 1.0, "B": 2.0}
    assert total_prob_ranking(t, mode="log") == {"A": 2.0, "B": 1.0}


def test_empty_trial_raises():
    t = apply_exclusions(table({"a": [NEG] * 8}))
    with pytest.raises(EmptyTrial):
        avg_trial_ranking(t)


def test_fmt_score():
    assert fmt_score(3.1366) == "3.14"
    assert fmt_score(4 / 3) == "1.33"
    assert fmt_score(8.0) == "8"
    assert fmt_score(4.5) == "4.5"
    assert fmt_score(2.675) == "2.68"


def test_single_model_report():
    data = {t: {"q": {"only": -1.0}} for t in ("t1", "t2")}
    rep = build_report(ProbTable.from_logprobs(data))
    files = render_report(rep)
    assert files["avg_trial_ranking.csv"] == "model,t1,t2,average\nonly,1,1,1\n"
    assert files["exclusions.csv"] == "trial,query_cell,reason,models_affected\n"


def test_report_sorted_by_average():
    t = table({"q1": [-3, -1, -2], "q2": [-3, -2, -1]}, models=list("abc"))
    rows = render_report(build_report(t))["avg_trial_ranking.csv"].splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["b", "c", "a"]


logps = st.lists(st.floats(-50, 0), min_size=2, max_size=6)


@settings(max_examples=150, deadline=None)
@given(logps)
def test_rank_sum_constant(row):
    k = len(row)
    assert rank_row(row).sum() == pytest.approx(k * (k + 1) / 2)


@settings(max_examples=100, deadline=None)
@given(st.lists(logps.filter(lambda r: len(r) == 4), min_size=1, max_size=5), st.randoms())
def test_rankings_properties(rows, rnd):
    models = list("abcd")
    t = table({f"q{i}": r for i, r in enumerate(rows)}, models=models)
    a, p = avg_trial_ranking(t), total_prob_ranking(t)
    assert all(1 <= v <= 4 for v in [*a.values(), *p.values()])
    # a strictly monotone transform (exact in floating point) leaves ranks alone
    moved = table({f"q{i}": [4.0 * x for x in r] for i, r in enumerate(rows)}, models=models)
    assert avg_trial_ranking(moved) == a
    # permuting the model order permutes the scores
    perm = models[:]
    rnd.shuffle(perm)
    idx = [models.index(m) for m in perm]
    shuffled = table({f"q{i}": [r[j] for j in idx] for i, r in enumerate(rows)}, models=perm)
    assert avg_trial_ranking(shuffled) == pytest.approx(a)
    assert total_prob_ranking(shuffled) == pytest.approx(p)
    # a query on which every model ties does not move the average trial ranking
    tied = dict({f"q{i}": r for i, r in enumerate(rows)}, tie=[-2.0] * 4)
    with_tie = avg_trial_ranking(table(tied, models=models))
    n = len(rows)
    expect = {m: (a[m] * n + 2.5) / (n + 1) for m in models}
    assert with_tie == pytest.approx(expect)
    assert sorted(with_tie, key=with_tie.get) == sorted(a, key=a.get)
