"""Unbiased pass@k and report comparison tables."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .graft import GraftReceipt
from .similarity import SimilarityReport

# beyond this the exact falling-factorial ratio gets slow; switch to floats
_EXACT_LIMIT = 100_000


class PassKError(ValueError):
    def __init__(self, msg: str, problems: Sequence[str] = ()):
        self.problems = list(problems)
        super().__init__(msg if not self.problems else f"{msg}: {', '.join(self.problems)}")


@dataclass(frozen=True)
class PassKRecord:
    problem_id: str
    n: int
    c: int

    def __post_init__(self):
        for attr in ("n", "c"):
            v = getattr(self, attr)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise PassKError(f"{self.problem_id}: {attr} must be an integer, got {v!r}")
        if self.n < 1 or not 0 <= self.c <= self.n:
            raise PassKError(f"{self.problem_id}: need n >= 1 and 0 <= c <= n, got n={self.n}, c={self.c}")


@dataclass(frozen=True)
class PassKSummary:
    k_values: tuple[int, ...]
    estimates: dict[int, float] = field(default_factory=dict)
    num_problems: int = 0

    def to_dict(self) -> dict:
        return {"num_problems": self.num_problems,
                "pass_at_k": {str(k): self.estimates[k] for k in self.k_values}}


def pass_at_k_exact(n: int, c: int, k: int) -> Fraction:
    """``1 - prod_{i<k} (n-c-i)/(n-i)`` as an exact rational."""
    _check(n, c, k)
    if n - c < k:
        return Fraction(1)
    return 1 - Fraction(math.perm(n - c, k), math.perm(n, k))


def pass_at_k(n: int, c: int, k: int) -> float:
    """Probability that a random k-subset of n rollouts (c correct) has a correct one.

    Equal to ``1 - C(n-c, k) / C(n, k)``, evaluated as the telescoping product
    ``1 - prod_{i<k} (n-c-i)/(n-i)``. Up to n = 100 000 the product is formed
    in exact integer arithmetic and rounded once, so the result is the
    correctly rounded value; above that it is a float64 product.

    >>> pass_at_k(10, 3, 4)
    0.8333333333333334
    """
    _check(n, c, k)
    if n - c < k:
        return 1.0
    if n <= _EXACT_LIMIT:
        return float(pass_at_k_exact(n, c, k))
    return 1.0 - float(np.prod(1.0 - k / np.arange(n - c + 1, n + 1, dtype=np.float64)))


def _check(n: int, c: int, k: int) -> None:
    if n < 0 or c < 0 or k < 0:
        raise ValueError(f"negative input: n={n}, c={c}, k={k}")
    if k < 1 or k > n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    if c > n:
        raise ValueError(f"c={c} exceeds n={n}")


def summarize(records: Sequence[PassKRecord], k_values: Iterable[int]) -> PassKSummary:
    """Mean pass@k over problems, for each k."""
    records = list(records)
    k_values = tuple(sorted(set(int(k) for k in k_values)))
    if not records:
        raise PassKError("no records to summarize")
    if not k_values or k_values[0] < 1:
        raise PassKError(f"k values must be positive, got {k_values}")
    too_small = [f"{r.problem_id} (n={r.n})" for r in records if r.n < k_values[-1]]
    if too_small:
        raise PassKError(f"k={k_values[-1]} exceeds the rollout count of", too_small)
    estimates = {k: math.fsum(pass_at_k(r.n, r.c, k) for r in records) / len(records) for k in k_values}
    return PassKSummary(k_values, estimates, len(records))


def load_records(path: str | os.PathLike) -> list[PassKRecord]:
    """Read newline-delimited ``{"problem_id", "n", "c"}`` records.

    All bad lines are collected and reported together with their line numbers.
    """
    records, problems = [], []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                records.append(PassKRecord(str(d["problem_id"]), d["n"], d["c"]))
            except (json.JSONDecodeError, KeyError, TypeError, PassKError) as e:
                problems.append(f"line {lineno}: {e}")
    if problems:
        raise PassKError("invalid records", problems)
    return records


def write_summary(summary: PassKSummary, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(summary.to_dict(), indent=2) + "\n", encoding="utf-8")


def summary_csv(summary: PassKSummary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "pass_at_k"])
    for k in summary.k_values:
        w.writerow([k, repr(summary.estimates[k])])
    return buf.getvalue()


# ---------------------------------------------------------------- report diffs

@dataclass(frozen=True)
class DiffRow:
    name: str
    a: float
    b: float

    @property
    def delta(self) -> float:
        return self.b - self.a


def _per_tensor(report) -> tuple[str, dict[str, float]]:
    if isinstance(report, SimilarityReport):
        return "sigma", {e.name: e.sigma for e in report.entries}
    if isinstance(report, GraftReceipt):
        return "l1", {s.name: s.l1 for s in report.delta_stats}
    raise TypeError(f"cannot diff {type(report).__name__}")


def diff_reports(a, b) -> list[DiffRow]:
    """Align two reports of the same kind by tensor name; largest change first."""
    if type(a) is not type(b):
        raise TypeError(f"kind mismatch: {type(a).__name__} vs {type(b).__name__}")
    _, va = _per_tensor(a)
    _, vb = _per_tensor(b)
    common = sorted(set(va) & set(vb))
    if not common:
        raise ValueError("reports share no tensor names")
    rows = [DiffRow(n, va[n], vb[n]) for n in common]
    rows.sort(key=lambda r: (-abs(r.delta), r.name))
    return rows


def diff_csv(a, b) -> str:
    metric, _ = _per_tensor(a)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", f"{metric}_a", f"{metric}_b", "delta"])
    for r in diff_reports(a, b):
        w.writerow([r.name, repr(r.a), repr(r.b), repr(r.delta)])
    return buf.getvalue()
