import json
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import pass_at_k_enumerated
from shadowgraft.evalkit import (
    PassKError,
    PassKRecord,
    diff_csv,
    diff_reports,
    load_records,
    pass_at_k,
    pass_at_k_exact,
    summarize,
    summary_csv,
    write_summary,
)
from shadowgraft.graft import DeltaStat, GraftReceipt
from shadowgraft.similarity import SimilarityEntry, SimilarityReport


def test_examples():
    assert all(pass_at_k(7, 0, k) == 0.0 for k in range(1, 8))
    assert all(pass_at_k(7, c, 7) == 1.0 for c in range(1, 8))
    assert pass_at_k(2, 1, 1) == 0.5
    assert pass_at_k(10, 3, 4) == 5 / 6
    assert pass_at_k_enumerated(10, 3, 4) == Fraction(5, 6)


@pytest.mark.parametrize("n,c,k", [(3, 1, 4), (3, 4, 1), (-1, 0, 1), (3, -1, 1), (3, 1, 0)])
def test_invalid_inputs(n, c, k):
    with pytest.raises(ValueError):
        pass_at_k(n, c, k)


def test_exhaustive_small_n_against_enumeration():
    for n in range(1, 13):
        for c in range(n + 1):
            for k in range(1, n + 1):
                exact = pass_at_k_enumerated(n, c, k)
                assert pass_at_k_exact(n, c, k) == exact
                assert pass_at_k(n, c, k) == float(exact)


def test_k_one_is_c_over_n():
    for n in range(1, 40):
        for c in range(n + 1):
            assert pass_at_k_exact(n, c, 1) == Fraction(c, n)
            assert pass_at_k(n, c, 1) == c / n


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 300_000).flatmap(lambda n: st.tuples(st.just(n), st.integers(0, n), st.integers(1, min(n, 500)))))
def test_monotone_and_bounded(args):
    n, c, k = args
    p = pass_at_k(n, c, k)
    assert 0.0 <= p <= 1.0
    if k < n:
        assert pass_at_k(n, c, k + 1) >= p
    if c < n:
        assert pass_at_k(n, c + 1, k) >= p
    assert (pass_at_k(n, c, n) == 1.0) == (c >= 1)


@pytest.mark.parametrize("n,c,k", [(10_000, 5_000, 5_000), (10_000, 1, 9_999), (10_000, 37, 64), (10_000, 9_000, 2)])
def test_large_n_stable(n, c, k):
    exact = pass_at_k_exact(n, c, k)
    assert pass_at_k(n, c, k) == pytest.approx(float(exact), rel=1e-12)


@pytest.mark.parametrize("n,c,k", [(200_000, 3, 10), (200_000, 100, 1000), (150_001, 7, 1)])
def test_float_path_above_exact_limit(n, c, k):
    exact = pass_at_k_exact(n, c, k)
    assert pass_at_k(n, c, k) == pytest.approx(float(exact), rel=1e-12)


def test_summarize_examples():
    allc = summarize([PassKRecord("a", 4, 4), PassKRecord("b", 3, 3)], [1, 2, 3])
    assert allc.estimates == {1: 1.0, 2: 1.0, 3: 1.0}
    s = summarize([PassKRecord("p1", 2, 1), PassKRecord("p2", 2, 2)], [1])
    assert s.estimates[1] == 0.75 and s.num_problems == 2
    with pytest.raises(PassKError) as exc:
        summarize([PassKRecord("short", 2, 1), PassKRecord("long", 8, 1)], [3])
    assert exc.value.problems == ["short (n=2)"]
    with pytest.raises(PassKError):
        summarize([], [1])


def test_summary_monotone_in_k():
    recs = [PassKRecord(str(i), 16, c) for i, c in enumerate([0, 1, 3, 8, 16])]
    s = summarize(recs, range(1, 17))
    est = [s.estimates[k] for k in s.k_values]
    assert est == sorted(est)


def test_record_validation():
    with pytest.raises(PassKError):
        PassKRecord("x", 0, 0)
    with pytest.raises(PassKError):
        PassKRecord("x", 3, 4)
    with pytest.raises(PassKError):
        PassKRecord("x", 3.0, 1)


def test_ndjson_io(tmp_path):
    path = tmp_path / "r.ndjson"
    path.write_text('{"problem_id": "a", "n": 2, "c": 1}\n\n{"problem_id": "b", "n": 2, "c": 2}\n')
    records = load_records(path)
    s = summarize(records, [1, 2])
    write_summary(s, tmp_path / "s.json")
    assert json.loads((tmp_path / "s.json").read_text()) == {"num_problems": 2, "pass_at_k": {"1": 0.75, "2": 1.0}}
    assert summary_csv(s).splitlines() == ["k,pass_at_k", "1,0.75", "2,1.0"]
    path.write_text('{"problem_id": "a", "n": 2, "c": 3}\nnot json\n{"problem_id": "c", "n": 2, "c": 1}\n')
    with pytest.raises(PassKError) as exc:
        load_records(path)
    assert [p.split(":")[0] for p in exc.value.problems] == ["line 1", "line 2"]


def _sim(values):
    return SimilarityReport("b", "i", tuple(SimilarityEntry(n, s, s, 1.0, 0.0, 1) for n, s in values.items()))


def test_diff_similarity_reports():
    a = _sim({"x": 0.1, "y": 0.2, "z": 0.3})
    assert all(r.delta == 0 for r in diff_reports(a, a))
    rows = diff_reports(a, _sim({"x": 0.1, "y": 0.5, "z": 0.3}))
    assert rows[0].name == "y" and rows[0].delta == pytest.approx(0.3)
    assert [r.delta for r in rows[1:]] == [0.0, 0.0]
    assert diff_csv(a, a).splitlines()[0] == "name,sigma_a,sigma_b,delta"
    with pytest.raises(ValueError, match="no tensor names"):
        diff_reports(a, _sim({"q": 0.1}))


def test_diff_receipts_and_kind_mismatch():
    r1 = GraftReceipt(1.0, ["w"], [], [DeltaStat("w", 2.0, 1.0)])
    r2 = GraftReceipt(1.0, ["w"], [], [DeltaStat("w", 3.0, 1.0)])
    assert diff_reports(r1, r2)[0].delta == 1.0
    assert diff_csv(r1, r2).splitlines()[0] == "name,l1_a,l1_b,delta"
    with pytest.raises(TypeError):
        diff_reports(r1, _sim({"w": 0.1}))
