"""Relative gap ratio between paired checkpoints.

For two weight tensors ``a`` and ``b`` the gap is

    sigma = sum|a - b| / (sum|a| + sum|b|)

which lies in ``[0, 1]``: 0 for identical tensors, 1 when one side is zero.
"""

from __future__ import annotations

import csv
import fnmatch
import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .runtime import MismatchError, Runtime
from .tensorstore import CheckpointView

log = logging.getLogger(__name__)

# raw words of both sides + promoted copies + temporaries
_BYTES_PER_ELEMENT = 64

SIMILARITY_POLICIES = ("strict", "intersect")


@dataclass(frozen=True)
class SimilarityEntry:
    name: str
    sigma: float
    abs_diff_sum: float
    abs_sum_base: float
    abs_sum_instruct: float
    num_elements: int


@dataclass(frozen=True)
class SimilarityReport:
    base: str
    instruct: str
    entries: tuple[SimilarityEntry, ...] = ()
    skipped: tuple[tuple[str, str], ...] = ()

    @property
    def global_sigma(self) -> float | None:
        """Gap over the concatenation of every compared tensor (element weighted)."""
        if not self.entries:
            return None
        return _ratio(
            math.fsum(e.abs_diff_sum for e in self.entries),
            math.fsum(e.abs_sum_base for e in self.entries),
            math.fsum(e.abs_sum_instruct for e in self.entries),
        )

    @property
    def per_tensor_mean(self) -> float | None:
        """Unweighted mean of the per-tensor gaps."""
        if not self.entries:
            return None
        return math.fsum(e.sigma for e in self.entries) / len(self.entries)

    def entry(self, name: str) -> SimilarityEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "pair": {"base": self.base, "instruct": self.instruct},
            "global_sigma": self.global_sigma,
            "per_tensor_mean": self.per_tensor_mean,
            "entries": [asdict(e) for e in self.entries],
            "skipped": [{"name": n, "reason": r} for n, r in self.skipped],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityReport":
        return cls(
            base=d["pair"]["base"],
            instruct=d["pair"]["instruct"],
            entries=tuple(SimilarityEntry(**e) for e in d["entries"]),
            skipped=tuple((s["name"], s["reason"]) for s in d["skipped"]),
        )


def _ratio(diff: float, sum_a: float, sum_b: float) -> float:
    denom = sum_a + sum_b
    if denom == 0:
        # both all-zero: identical, so most similar
        return 0.0 if diff == 0 else math.nan
    r = diff / denom
    # |a-b| <= |a|+|b| bounds the exact ratio by 1; rounding can overshoot by an ulp
    return 1.0 if r > 1.0 else r


def sigma_pair(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    return _ratio(float(np.sum(np.abs(a - b))), float(np.sum(np.abs(a))), float(np.sum(np.abs(b))))


def _tensor_entry(base: CheckpointView, instruct: CheckpointView, name: str, chunk: int) -> SimilarityEntry:
    n = base[name].numel
    diffs, sums_a, sums_b = [], [], []
    nonfinite = 0
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        a = base.read_f64(name, start, stop)
        b = instruct.read_f64(name, start, stop)
        # numpy reduces contiguous float64 pairwise; chunk partials are summed exactly
        diffs.append(float(np.sum(np.abs(a - b))))
        sums_a.append(float(np.sum(np.abs(a))))
        sums_b.append(float(np.sum(np.abs(b))))
        nonfinite += int(np.count_nonzero(~np.isfinite(a)) + np.count_nonzero(~np.isfinite(b)))
    if nonfinite:
        log.warning("%d non-finite element(s) propagated into sigma", nonfinite, extra={"tensor": name})
    d, sa, sb = math.fsum(diffs), math.fsum(sums_a), math.fsum(sums_b)
    return SimilarityEntry(name, _ratio(d, sa, sb), d, sa, sb, n)


def compare_checkpoints(
    base: CheckpointView,
    instruct: CheckpointView,
    policy: str = "strict",
    exclude: Sequence[str] = (),
    runtime: Runtime | None = None,
) -> SimilarityReport:
    """Per-tensor gaps between ``base`` and ``instruct``.

    ``policy="strict"`` demands identical name sets and shapes and raises
    :class:`MismatchError` with the full diff otherwise; ``"intersect"``
    compares what lines up and lists the rest under ``skipped``. Tensors with
    non-float dtypes are always skipped.
    """
    if policy not in SIMILARITY_POLICIES:
        raise ValueError(f"policy must be one of {SIMILARITY_POLICIES}, got {policy!r}")
    runtime = runtime or Runtime()
    names = sorted(set(base.tensors) | set(instruct.tensors))
    compared, skipped, diff = [], [], []
    for name in names:
        if any(fnmatch.fnmatchcase(name, p) for p in exclude):
            skipped.append((name, "excluded by pattern"))
            continue
        if name not in base:
            skipped.append((name, "missing in base"))
            diff.append(f"{name}: only in instruct")
            continue
        if name not in instruct:
            skipped.append((name, "missing in instruct"))
            diff.append(f"{name}: only in base")
            continue
        eb, ei = base[name], instruct[name]
        if eb.shape != ei.shape:
            skipped.append((name, "shape mismatch"))
            diff.append(f"{name}: shape {list(eb.shape)} vs {list(ei.shape)}")
            continue
        if not (eb.dtype.arithmetic and ei.dtype.arithmetic):
            skipped.append((name, "opaque dtype"))
            continue
        compared.append(name)
    if policy == "strict" and diff:
        raise MismatchError("checkpoints differ structurally", diff)
    if not compared:
        raise MismatchError("no comparable tensors between the two checkpoints", diff)

    chunk = runtime.chunk_elements(_BYTES_PER_ELEMENT)
    entries = tuple(runtime.map(lambda n: _tensor_entry(base, instruct, n, chunk), compared))
    return SimilarityReport(str(base.path), str(instruct.path), entries, tuple(skipped))


def write_report(report: SimilarityReport, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")


def read_report(path: str | os.PathLike) -> SimilarityReport:
    return SimilarityReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


CSV_COLUMNS = ("name", "sigma", "abs_diff_sum", "abs_sum_base", "abs_sum_instruct", "num_elements")


def write_report_csv(report: SimilarityReport, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for e in report.entries:
            w.writerow([e.name, repr(e.sigma), repr(e.abs_diff_sum), repr(e.abs_sum_base),
                        repr(e.abs_sum_instruct), e.num_elements])
