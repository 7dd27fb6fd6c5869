"""Weight-delta extraction and grafting.

A graft takes the update a tuning run made to one checkpoint and adds it,
scaled by ``alpha``, to another structurally identical checkpoint::

    out = instruct + alpha * (tuned_base - base)

``alpha=0`` leaves the target untouched and ``alpha=1`` transfers the full
update. Grafting a model's own tuning run (``base := instruct``) reproduces
ordinary fine-tuning, so one primitive covers both.

All arithmetic is float64 on exactly promoted inputs, with a single rounding
to the output dtype. Tensors are processed in chunks bounded by the runtime's
tensor budget and streamed straight into the output file.
"""

from __future__ import annotations

import fnmatch
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .runtime import MismatchError, Runtime
from .tensorstore import (
    CheckpointView,
    ElementType,
    demote,
    save_checkpoint,
)

log = logging.getLogger(__name__)

_BYTES_PER_ELEMENT = 96

MISSING_IN_BASE = "missing in base"
MISSING_IN_TUNED = "missing in tuned_base"
MISSING_IN_DELTA = "missing in delta"
SHAPE_MISMATCH = "shape mismatch"
OPAQUE = "opaque dtype"
EXCLUDED = "excluded by pattern"
NOT_TARGETED = "not targeted"

# reasons that never make a strict plan fail
_BENIGN = frozenset({OPAQUE, EXCLUDED, NOT_TARGETED})

DELTA_KIND_KEY = "shadow_graft.kind"


@dataclass(frozen=True)
class MismatchPolicy:
    mode: str = "strict"
    exclude_patterns: tuple[str, ...] = ()
    on_shape_mismatch: str = "error"

    def __post_init__(self):
        if self.mode not in ("strict", "skip_missing"):
            raise ValueError(f"mode must be 'strict' or 'skip_missing', got {self.mode!r}")
        if self.on_shape_mismatch not in ("error", "skip"):
            raise ValueError(f"on_shape_mismatch must be 'error' or 'skip', got {self.on_shape_mismatch!r}")
        object.__setattr__(self, "exclude_patterns", tuple(self.exclude_patterns))
        for p in self.exclude_patterns:
            if not isinstance(p, str) or not p:
                raise ValueError(f"invalid exclude pattern {p!r}")

    @property
    def strict(self) -> bool:
        return self.mode == "strict"

    def excluded(self, name: str) -> bool:
        return any(fnmatch.fnmatchcase(name, p) for p in self.exclude_patterns)


@dataclass(frozen=True)
class Action:
    name: str
    kind: str  # "graft" or "copy"
    reason: str | None = None


@dataclass(frozen=True)
class DeltaStat:
    name: str
    l1: float
    max_abs: float


@dataclass
class GraftReceipt:
    alpha: float
    grafted: list[str] = field(default_factory=list)
    copied: list[tuple[str, str]] = field(default_factory=list)
    delta_stats: list[DeltaStat] = field(default_factory=list)

    def stat(self, name: str) -> DeltaStat:
        for s in self.delta_stats:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "grafted": list(self.grafted),
            "copied": [{"name": n, "reason": r} for n, r in self.copied],
            "delta_stats": [{"name": s.name, "l1": s.l1, "max_abs": s.max_abs} for s in self.delta_stats],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GraftReceipt":
        return cls(
            alpha=d["alpha"],
            grafted=list(d["grafted"]),
            copied=[(c["name"], c["reason"]) for c in d["copied"]],
            delta_stats=[DeltaStat(s["name"], s["l1"], s["max_abs"]) for s in d["delta_stats"]],
        )

    def write(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | os.PathLike) -> "GraftReceipt":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class GraftPlan:
    base: CheckpointView
    tuned_base: CheckpointView
    instruct: CheckpointView
    alpha: float
    policy: MismatchPolicy
    output_dtype: str
    actions: tuple[Action, ...]

    @property
    def grafted(self) -> list[str]:
        return [a.name for a in self.actions if a.kind == "graft"]

    def describe(self) -> list[str]:
        lines = [f"alpha {self.alpha!r}  output_dtype {self.output_dtype}"]
        for a in self.actions:
            lines.append(f"{a.kind:5s} {a.name}" + (f"  ({a.reason})" if a.reason else ""))
        return lines


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not math.isfinite(alpha):
        raise ValueError(f"alpha must be finite, got {alpha!r}")
    return alpha


def _output_dtype(output_dtype: str, source: ElementType) -> ElementType:
    if output_dtype == "preserve":
        return source
    dt = ElementType.parse(output_dtype)
    if not dt.arithmetic:
        raise ValueError(f"output dtype must be floating point, got {output_dtype!r}")
    return dt


def plan_graft(
    base: CheckpointView,
    tuned_base: CheckpointView,
    instruct: CheckpointView,
    alpha: float = 1.0,
    policy: MismatchPolicy | None = None,
    output_dtype: str = "preserve",
) -> GraftPlan:
    """Decide, for every instruct tensor, whether it is grafted or copied verbatim."""
    alpha = _check_alpha(alpha)
    policy = policy or MismatchPolicy()
    if output_dtype != "preserve":
        _output_dtype(output_dtype, ElementType.F32)
    errors: list[str] = []

    if policy.strict:
        for name in sorted(set(base.tensors) ^ set(tuned_base.tensors)):
            if not policy.excluded(name):
                side = "base" if name in base else "tuned_base"
                errors.append(f"{name}: only in {side} (a tuned checkpoint must match its origin)")
        for name in sorted(set(base.tensors) & set(tuned_base.tensors)):
            if not policy.excluded(name) and base[name].shape != tuned_base[name].shape:
                errors.append(f"{name}: shape {list(base[name].shape)} in base vs {list(tuned_base[name].shape)} in tuned_base")
        for name in sorted(set(base.tensors) - set(instruct.tensors)):
            if not policy.excluded(name):
                errors.append(f"{name}: in base but not in instruct")

    actions = []
    for name, ei in instruct.tensors.items():
        reason = None
        if policy.excluded(name):
            reason = EXCLUDED
        elif not ei.dtype.arithmetic:
            reason = OPAQUE
        elif name not in base:
            reason = MISSING_IN_BASE
        elif name not in tuned_base:
            reason = MISSING_IN_TUNED
        elif not (base[name].shape == tuned_base[name].shape == ei.shape):
            reason = SHAPE_MISMATCH
        elif not (base[name].dtype.arithmetic and tuned_base[name].dtype.arithmetic):
            reason = OPAQUE
        if reason is None:
            actions.append(Action(name, "graft"))
            continue
        actions.append(Action(name, "copy", reason))
        if reason in _BENIGN:
            continue
        if policy.strict or (reason == SHAPE_MISMATCH and policy.on_shape_mismatch == "error"):
            if not any(e.startswith(f"{name}:") for e in errors):
                errors.append(f"{name}: {reason}")
    if errors:
        raise MismatchError(f"cannot plan graft: {len(errors)} structural mismatch(es)", errors)
    return GraftPlan(base, tuned_base, instruct, alpha, policy, output_dtype, tuple(actions))


# ---------------------------------------------------------------- streaming engine

DeltaFn = Callable[[str, int, int], np.ndarray]


def combine(target: np.ndarray, delta: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """``target + alpha * delta`` in float64; returns ``(result, alpha * delta)``.

    Elements whose scaled delta is exactly zero keep the target value bit for
    bit (including the sign of zero).
    """
    if alpha == 0:
        scaled = np.zeros_like(delta)
    else:
        scaled = alpha * delta
    out = np.array(target, dtype=np.float64, copy=True)
    np.add(out, scaled, out=out, where=scaled != 0)
    return out, scaled


def _count_nonfinite(words: np.ndarray, dtype: ElementType) -> int:
    """Non-finite stored values, including overflow introduced by the cast."""
    if dtype is ElementType.BF16:
        return int(np.count_nonzero((words & np.uint16(0x7F80)) == np.uint16(0x7F80)))
    return int(np.count_nonzero(~np.isfinite(words)))


def _graft_chunks(target: CheckpointView, name: str, out_dtype: ElementType, delta_fn: DeltaFn,
                  alpha: float, runtime: Runtime, reject_nonfinite: bool, stats: dict):
    n = target[name].numel
    step = runtime.chunk_elements(_BYTES_PER_ELEMENT)

    def work(start: int):
        stop = min(n, start + step)
        values, scaled = combine(target.read_f64(name, start, stop), delta_fn(name, start, stop), alpha)
        words = demote(values, out_dtype, reject_nonfinite)
        absd = np.abs(scaled)
        return words.tobytes(), float(np.sum(absd)), float(absd.max(initial=0.0)), _count_nonfinite(words, out_dtype)

    l1_parts, max_abs, nonfinite = [], 0.0, 0
    for data, l1, mx, bad in runtime.map(work, range(0, n, step)):
        l1_parts.append(l1)
        max_abs = max(max_abs, mx) if not math.isnan(mx) else mx
        nonfinite += bad
        yield data
    if nonfinite:
        log.warning("%d non-finite element(s) in graft result", nonfinite, extra={"tensor": name})
    stats[name] = DeltaStat(name, math.fsum(l1_parts), max_abs)


def execute_with_deltas(
    target: CheckpointView,
    actions: Sequence[Action],
    delta_fn: DeltaFn,
    alpha: float,
    out_path: str | os.PathLike,
    output_dtype: str = "preserve",
    runtime: Runtime | None = None,
    reject_nonfinite: bool = False,
) -> GraftReceipt:
    """Write ``target`` with ``alpha * delta_fn(...)`` added to every "graft" tensor.

    ``delta_fn(name, start, stop)`` returns the float64 delta for a flat element
    range. Copied tensors are streamed through byte for byte; the output shard
    layout mirrors ``target``.
    """
    runtime = runtime or Runtime()
    stats: dict[str, DeltaStat] = {}
    copy_chunk = runtime.tensor_budget // max(1, runtime.workers)
    entries = {}
    for a in actions:
        e = target[a.name]
        if a.kind == "graft":
            out_dtype = _output_dtype(output_dtype, e.dtype)
            data = _graft_chunks(target, a.name, out_dtype, delta_fn, alpha, runtime, reject_nonfinite, stats)
            entries[a.name] = (out_dtype, e.shape, data)
        else:
            entries[a.name] = (e.dtype, e.shape, target.iter_raw_chunks(a.name, copy_chunk))
    meta = {k: v for k, v in target.metadata.items() if k != "total_size"} or None
    save_checkpoint(entries, out_path, "mirror", reference=target, metadata=meta,
                    shard_metadata=target.shards[0].metadata or None)
    return GraftReceipt(
        alpha=alpha,
        grafted=[a.name for a in actions if a.kind == "graft"],
        copied=[(a.name, a.reason) for a in actions if a.kind != "graft"],
        delta_stats=[stats[a.name] for a in actions if a.kind == "graft"],
    )


def _difference(tuned: CheckpointView, base: CheckpointView) -> DeltaFn:
    def delta(name: str, start: int, stop: int) -> np.ndarray:
        return tuned.read_f64(name, start, stop) - base.read_f64(name, start, stop)
    return delta


def execute_graft(
    plan: GraftPlan,
    out_path: str | os.PathLike,
    runtime: Runtime | None = None,
    reject_nonfinite: bool = False,
) -> GraftReceipt:
    return execute_with_deltas(plan.instruct, plan.actions, _difference(plan.tuned_base, plan.base),
                               plan.alpha, out_path, plan.output_dtype, runtime, reject_nonfinite)


def graft_values_f64(plan: GraftPlan, name: str) -> np.ndarray:
    """Pre-cast float64 values that :func:`execute_graft` writes for one grafted tensor."""
    if name not in plan.grafted:
        raise KeyError(f"{name!r} is not grafted by this plan")
    n = plan.instruct[name].numel
    values, _ = combine(plan.instruct.read_f64(name), _difference(plan.tuned_base, plan.base)(name, 0, n), plan.alpha)
    return values


def extract_delta(
    base: CheckpointView,
    tuned_base: CheckpointView,
    policy: MismatchPolicy | None = None,
    out_path: str | os.PathLike = "delta.safetensors",
    delta_dtype: str = "F64",
    runtime: Runtime | None = None,
) -> GraftReceipt:
    """Write ``tuned_base - base`` as a checkpoint laid out like ``base``.

    The default F64 storage holds the float64 difference exactly, so applying
    the delta later reproduces a one-step graft bit for bit. Tensors that
    cannot be differenced are left out and listed in the receipt.
    """
    policy = policy or MismatchPolicy()
    runtime = runtime or Runtime()
    dtype = ElementType.parse(delta_dtype)
    if not dtype.arithmetic:
        raise ValueError(f"delta dtype must be floating point, got {delta_dtype!r}")
    errors, included, left_out = [], [], []
    if policy.strict:
        for name in sorted(set(tuned_base.tensors) - set(base.tensors)):
            if not policy.excluded(name):
                errors.append(f"{name}: only in tuned_base (a tuned checkpoint must match its origin)")
    for name, eb in base.tensors.items():
        reason = None
        if policy.excluded(name):
            reason = EXCLUDED
        elif not eb.dtype.arithmetic:
            reason = OPAQUE
        elif name not in tuned_base:
            reason = MISSING_IN_TUNED
        elif tuned_base[name].shape != eb.shape:
            reason = SHAPE_MISMATCH
        elif not tuned_base[name].dtype.arithmetic:
            reason = OPAQUE
        if reason is None:
            included.append(name)
            continue
        left_out.append((name, reason))
        if reason not in _BENIGN and (policy.strict or (reason == SHAPE_MISMATCH and policy.on_shape_mismatch == "error")):
            errors.append(f"{name}: {reason}")
    if errors:
        raise MismatchError(f"cannot extract delta: {len(errors)} structural mismatch(es)", errors)

    stats: dict[str, DeltaStat] = {}
    diff = _difference(tuned_base, base)
    step = runtime.chunk_elements(_BYTES_PER_ELEMENT)

    def chunks(name: str):
        n = base[name].numel
        l1_parts, max_abs = [], 0.0

        def work(start: int):
            d = diff(name, start, min(n, start + step))
            ad = np.abs(d)
            return demote(d, dtype).tobytes(), float(np.sum(ad)), float(ad.max(initial=0.0))

        for data, l1, mx in runtime.map(work, range(0, n, step)):
            l1_parts.append(l1)
            max_abs = max(max_abs, mx)
            yield data
        stats[name] = DeltaStat(name, math.fsum(l1_parts), max_abs)

    entries = {name: (dtype, base[name].shape, chunks(name)) for name in included}
    meta = {DELTA_KIND_KEY: "delta", "shadow_graft.base": str(base.path), "shadow_graft.tuned": str(tuned_base.path)}
    save_checkpoint(entries, out_path, "mirror", reference=base, metadata=meta, shard_metadata=meta)
    return GraftReceipt(alpha=1.0, grafted=included, copied=left_out, delta_stats=[stats[n] for n in included])


def apply_delta(
    target: CheckpointView,
    delta: CheckpointView,
    alpha: float = 1.0,
    policy: MismatchPolicy | None = None,
    out_path: str | os.PathLike = "out.safetensors",
    output_dtype: str = "preserve",
    runtime: Runtime | None = None,
    reject_nonfinite: bool = False,
) -> GraftReceipt:
    """Write ``target + alpha * delta`` for every tensor the delta covers."""
    alpha = _check_alpha(alpha)
    policy = policy or MismatchPolicy()
    errors, actions = [], []
    if policy.strict:
        for name in sorted(set(delta.tensors) - set(target.tensors)):
            if not policy.excluded(name):
                errors.append(f"{name}: in delta but not in target")
    for name, et in target.tensors.items():
        reason = None
        if policy.excluded(name):
            reason = EXCLUDED
        elif not et.dtype.arithmetic:
            reason = OPAQUE
        elif name not in delta:
            reason = MISSING_IN_DELTA
        elif delta[name].shape != et.shape:
            reason = SHAPE_MISMATCH
        elif not delta[name].dtype.arithmetic:
            reason = OPAQUE
        if reason is None:
            actions.append(Action(name, "graft"))
            continue
        actions.append(Action(name, "copy", reason))
        if reason not in _BENIGN and (policy.strict or (reason == SHAPE_MISMATCH and policy.on_shape_mismatch == "error")):
            errors.append(f"{name}: {reason}")
    if errors:
        raise MismatchError(f"cannot apply delta: {len(errors)} structural mismatch(es)", errors)
    return execute_with_deltas(target, actions, lambda name, s, e: delta.read_f64(name, s, e),
                               alpha, out_path, output_dtype, runtime, reject_nonfinite)
