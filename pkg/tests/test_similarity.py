import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import write_ckpt
from oracles import naive_sigma
from shadowgraft.runtime import MismatchError, Runtime
from shadowgraft.similarity import (
    SimilarityEntry,
    SimilarityReport,
    compare_checkpoints,
    read_report,
    sigma_pair,
    write_report,
    write_report_csv,
)


def test_identical_is_zero():
    a = np.array([0.3, -1.0, 2.5])
    assert sigma_pair(a, a) == 0.0


def test_one_side_zero_is_one():
    assert sigma_pair([0.5, -3.0], [0.0, 0.0]) == 1.0


def test_hand_example():
    # (|1-1| + |1-3|) / ((1+1) + (1+3)) = 2/6
    assert sigma_pair([1, 1], [1, 3]) == pytest.approx(1 / 3, rel=1e-15)
    assert naive_sigma([1, 1], [1, 3]) == pytest.approx(1 / 3, rel=1e-15)


@pytest.mark.parametrize("c", [0.5, 2.0, 10.0])
def test_scaled_closed_form(c, rng):
    x = rng.uniform(0.1, 2.0, 1000)
    expected = abs(c - 1) / (c + 1)
    assert naive_sigma(c * x, x) == pytest.approx(expected, rel=1e-12)
    assert sigma_pair(c * x, x) == pytest.approx(expected, rel=1e-12)


def test_zero_zero_convention_and_length_error():
    assert sigma_pair(np.zeros(5), np.zeros(5)) == 0.0
    with pytest.raises(ValueError, match="length mismatch"):
        sigma_pair([1.0], [1.0, 2.0])


def test_nan_propagates():
    assert np.isnan(sigma_pair([np.nan, 1.0], [1.0, 1.0]))


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 50), elements=finite), st.data())
def test_symmetry_range_and_scale_invariance(a, data):
    b = data.draw(arrays(np.float64, a.shape, elements=finite))
    s = sigma_pair(a, b)
    assert s == sigma_pair(b, a)
    assert 0.0 <= s <= 1.0
    c = data.draw(st.sampled_from([-3.0, 0.125, 7.0, 1e3]))
    assert sigma_pair(c * a, c * b) == pytest.approx(s, rel=1e-12, abs=1e-300)


def _pair(tmp_path, base, instruct, dtype="F32"):
    b = write_ckpt(tmp_path / "base.safetensors", {k: (dtype, v) for k, v in base.items()})
    i = write_ckpt(tmp_path / "instruct.safetensors", {k: (dtype, v) for k, v in instruct.items()})
    return b, i


def test_compare_identical(tmp_path, rng):
    w = {"a": rng.standard_normal((4, 4)), "b": rng.standard_normal(9)}
    b, i = _pair(tmp_path, w, w)
    report = compare_checkpoints(b, i)
    assert report.global_sigma == 0.0
    assert all(e.sigma == 0.0 for e in report.entries)


def test_compare_one_tensor(tmp_path):
    b, i = _pair(tmp_path, {"w": np.array([1.0, 1.0])}, {"w": np.array([1.0, 3.0])})
    report = compare_checkpoints(b, i)
    assert report.entry("w").sigma == pytest.approx(1 / 3, rel=1e-15)
    assert report.global_sigma == pytest.approx(1 / 3, rel=1e-15)
    assert report.entry("w").num_elements == 2


def test_intersect_mode_lists_skipped(tmp_path):
    b, i = _pair(tmp_path, {"w": np.ones(3)}, {"w": np.ones(3), "extra": np.ones(2)})
    report = compare_checkpoints(b, i, policy="intersect")
    assert report.skipped == (("extra", "missing in base"),)
    with pytest.raises(MismatchError) as exc:
        compare_checkpoints(b, i, policy="strict")
    assert any("extra" in line for line in exc.value.diff)


def test_strict_reports_full_diff(tmp_path):
    b, i = _pair(tmp_path, {"w": np.ones(3), "only_b": np.ones(1)}, {"w": np.ones(4), "only_i": np.ones(1)})
    with pytest.raises(MismatchError) as exc:
        compare_checkpoints(b, i)
    assert len(exc.value.diff) == 3


def test_opaque_always_skipped_and_empty_intersection(tmp_path):
    b = write_ckpt(tmp_path / "b.safetensors", {"ids": ("I64", np.arange(3)), "w": ("F32", np.ones(2))})
    i = write_ckpt(tmp_path / "i.safetensors", {"ids": ("I64", np.arange(3)), "w": ("F32", np.ones(2))})
    report = compare_checkpoints(b, i)
    assert report.skipped == (("ids", "opaque dtype"),)
    only_ids_b = write_ckpt(tmp_path / "b2.safetensors", {"ids": ("I64", np.arange(3))})
    only_ids_i = write_ckpt(tmp_path / "i2.safetensors", {"ids": ("I64", np.arange(3))})
    with pytest.raises(MismatchError, match="no comparable"):
        compare_checkpoints(only_ids_b, only_ids_i)


def test_exclusion_patterns(tmp_path, rng):
    w = {"embed.weight": rng.standard_normal(4), "layer.0": rng.standard_normal(4)}
    b, i = _pair(tmp_path, w, {k: v + 1 for k, v in w.items()})
    report = compare_checkpoints(b, i, exclude=["embed*"])
    assert [e.name for e in report.entries] == ["layer.0"]
    assert report.skipped == (("embed.weight", "excluded by pattern"),)


def test_aggregates_match_concatenation(tmp_path, rng):
    base = {f"t{k}": rng.standard_normal(n) for k, n in enumerate([10, 1000, 37])}
    inst = {k: v + 0.02 * rng.standard_normal(v.shape) for k, v in base.items()}
    b, i = _pair(tmp_path, base, inst, dtype="F64")
    report = compare_checkpoints(b, i)
    cat_b = np.concatenate([base[k] for k in sorted(base)])
    cat_i = np.concatenate([inst[k] for k in sorted(inst)])
    assert report.global_sigma == pytest.approx(naive_sigma(cat_b, cat_i), rel=1e-12)
    assert report.per_tensor_mean == pytest.approx(np.mean([naive_sigma(base[k], inst[k]) for k in base]), rel=1e-12)


def test_chunked_parallel_matches_single_pass(tmp_path, rng):
    base = {"big": rng.standard_normal(100_000), "small": rng.standard_normal(17)}
    inst = {k: v * 1.01 + 0.001 for k, v in base.items()}
    b, i = _pair(tmp_path, base, inst, dtype="F64")
    tiny = Runtime(workers=3, tensor_budget=3 * 64 * 1000)  # 1000-element chunks per worker
    chunked = compare_checkpoints(b, i, runtime=tiny)
    whole = compare_checkpoints(b, i)
    for name in base:
        assert chunked.entry(name).sigma == pytest.approx(naive_sigma(base[name], inst[name]), rel=1e-10)
        assert chunked.entry(name).sigma == pytest.approx(whole.entry(name).sigma, rel=1e-12)


def test_report_roundtrip(tmp_path, rng):
    b, i = _pair(tmp_path, {"w": rng.standard_normal(5)}, {"w": rng.standard_normal(5), "x": np.ones(1)})
    report = compare_checkpoints(b, i, policy="intersect")
    write_report(report, tmp_path / "r.json")
    assert read_report(tmp_path / "r.json") == report
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["skipped"] == [{"name": "x", "reason": "missing in base"}]
    assert set(data) == {"pair", "global_sigma", "per_tensor_mean", "entries", "skipped"}
    write_report_csv(report, tmp_path / "r.csv")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert rows[0]["name"] == "w" and float(rows[0]["sigma"]) == report.entry("w").sigma


def test_empty_report_json(tmp_path):
    report = SimilarityReport("a", "b")
    write_report(report, tmp_path / "e.json")
    data = json.loads((tmp_path / "e.json").read_text())
    assert data["global_sigma"] is None and data["entries"] == []
    assert read_report(tmp_path / "e.json") == report


def test_entry_invariant():
    e = SimilarityEntry("w", 0.25, 1.0, 2.0, 2.0, 4)
    assert e.sigma == e.abs_diff_sum / (e.abs_sum_base + e.abs_sum_instruct)
