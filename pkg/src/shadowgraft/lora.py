"""Low-rank adapters: loading, expansion to full-rank deltas, grafting.

A pair of thin factors ``A`` (d1 x r) and ``B`` (r x d2) encodes the update
``scale * A @ B`` to a d1 x d2 weight. Adapter files commonly store the
factors the other way round (``lora_A`` is r x d2, ``lora_B`` is d1 x r); the
naming convention's ``orientation`` says which layout a file uses.
"""

from __future__ import annotations

import json
import logging
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graft import (
    EXCLUDED,
    NOT_TARGETED,
    OPAQUE,
    SHAPE_MISMATCH,
    Action,
    GraftReceipt,
    MismatchPolicy,
    execute_with_deltas,
)
from .runtime import MismatchError, Runtime
from .tensorstore import CheckpointView, open_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

SIDECAR_NAME = "adapter_config.json"


class AdapterError(ValueError):
    """An adapter file is inconsistent: orphan factors, ambiguous targets, rank mismatch."""


@dataclass(frozen=True)
class AdapterNaming:
    suffix_a: str = ".lora_A"
    suffix_b: str = ".lora_B"
    strip_prefix: str | None = "base_model.model."
    orientation: str = "transposed"

    def __post_init__(self):
        if self.orientation not in ("paper", "transposed"):
            raise ValueError(f"orientation must be 'paper' or 'transposed', got {self.orientation!r}")

    def split(self, name: str) -> tuple[str, str] | None:
        """``(target, "A"|"B")`` for a factor tensor name, ``None`` for anything else."""
        hits = [(side, suffix) for side, suffix in (("A", self.suffix_a), ("B", self.suffix_b)) if suffix in name]
        if not hits:
            return None
        if len(hits) > 1 or name.count(hits[0][1]) > 1:
            raise AdapterError(f"ambiguous target mapping for {name!r}")
        side, suffix = hits[0]
        head, tail = name.split(suffix)
        target = head + tail
        if self.strip_prefix and target.startswith(self.strip_prefix):
            target = target[len(self.strip_prefix):]
        return target, side


@dataclass(frozen=True)
class LoraPair:
    """Factors in ``A @ B`` orientation: ``A`` is d1 x r, ``B`` is r x d2."""

    target: str
    A: np.ndarray
    B: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64)
        B = np.asarray(self.B, dtype=np.float64)
        if A.ndim != 2 or B.ndim != 2:
            raise AdapterError(f"{self.target}: factors must be matrices, got {A.shape} and {B.shape}")
        if A.shape[1] != B.shape[0] or A.shape[1] < 1:
            raise AdapterError(f"{self.target}: rank mismatch between A {A.shape} and B {B.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        d1, d2 = A.shape[0], B.shape[1]
        if self.rank > min(d1, d2):
            warnings.warn(f"{self.target}: rank {self.rank} exceeds min({d1}, {d2})", stacklevel=3)

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.A.shape[0], self.B.shape[1]


@dataclass
class LoraAdapter:
    pairs: dict[str, LoraPair] = field(default_factory=dict)
    rank: int | None = None
    scale_numerator: float | None = None


def read_sidecar(path: str | os.PathLike) -> tuple[int | None, float | None]:
    cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    rank = cfg.get("r")
    num = cfg.get("lora_alpha")
    return (None if rank is None else int(rank)), (None if num is None else float(num))


def load_adapter(
    path: str | os.PathLike,
    naming: AdapterNaming | None = None,
    config: str | os.PathLike | None = None,
) -> LoraAdapter:
    """Read an adapter file and pair up its factors.

    ``config`` is a sidecar JSON with ``r`` and ``lora_alpha``; when not given,
    ``adapter_config.json`` next to the adapter file is used if present. The
    per-pair scale is ``lora_alpha / r`` from the sidecar, else 1.0.
    """
    naming = naming or AdapterNaming()
    view = open_checkpoint(path)
    if config is None and (view.path.parent / SIDECAR_NAME).exists():
        config = view.path.parent / SIDECAR_NAME
    rank_cfg, numerator = read_sidecar(config) if config is not None else (None, None)

    factors: dict[str, dict[str, str]] = {}
    for name in view.names():
        split = naming.split(name)
        if split is None:
            log.info("ignoring non-factor tensor %s", name)
            continue
        target, side = split
        slot = factors.setdefault(target, {})
        if side in slot:
            raise AdapterError(f"ambiguous target mapping: {slot[side]!r} and {name!r} both map to {target!r}")
        slot[side] = name

    orphans = sorted(n for slot in factors.values() for n in slot.values() if len(slot) == 1)
    if orphans:
        raise AdapterError(f"orphan factor(s) without a partner: {orphans}")

    pairs = {}
    for target in sorted(factors):
        a = view.read_f64(factors[target]["A"]).reshape(view[factors[target]["A"]].shape)
        b = view.read_f64(factors[target]["B"]).reshape(view[factors[target]["B"]].shape)
        if naming.orientation == "transposed":
            a, b = b, a
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise AdapterError(f"{target}: rank mismatch between A {a.shape} and B {b.shape}")
        rank = a.shape[1]
        if rank_cfg is not None and rank != rank_cfg:
            raise AdapterError(f"{target}: factor rank {rank} != configured rank {rank_cfg}")
        scale = numerator / rank if numerator is not None else 1.0
        pairs[target] = LoraPair(target, a, b, scale)
    return LoraAdapter(pairs=pairs, rank=rank_cfg, scale_numerator=numerator)


def expand_delta(pair: LoraPair, rows: slice | None = None) -> np.ndarray:
    """``scale * (A @ B)`` in float64, optionally for a row range only.

    The rank-1 terms are accumulated in a fixed order, so any row range gives
    exactly the same values as the corresponding rows of the full expansion.
    """
    A = pair.A if rows is None else pair.A[rows]
    out = np.zeros((A.shape[0], pair.B.shape[1]), dtype=np.float64)
    for j in range(pair.rank):
        out += np.multiply.outer(A[:, j], pair.B[j])
    out *= pair.scale
    return out


def _lora_delta(adapter: LoraAdapter):
    def delta(name: str, start: int, stop: int) -> np.ndarray:
        pair = adapter.pairs[name]
        d2 = pair.shape[1]
        r0, r1 = start // d2, -(-stop // d2)
        block = expand_delta(pair, slice(r0, r1)).ravel()
        return block[start - r0 * d2: stop - r0 * d2]
    return delta


def graft_lora(
    instruct: CheckpointView,
    adapter: LoraAdapter,
    alpha: float = 1.0,
    policy: MismatchPolicy | None = None,
    out_path: str | os.PathLike = "out.safetensors",
    output_dtype: str = "preserve",
    runtime: Runtime | None = None,
    reject_nonfinite: bool = False,
) -> GraftReceipt:
    """Add ``alpha * scale * A @ B`` to each targeted tensor; everything else is copied verbatim."""
    policy = policy or MismatchPolicy()
    alpha = float(alpha)
    if not np.isfinite(alpha):
        raise ValueError(f"alpha must be finite, got {alpha!r}")
    errors = []
    unresolved = sorted(t for t in adapter.pairs if t not in instruct)
    if unresolved:
        if policy.strict:
            errors.extend(f"{t}: adapter target not in checkpoint" for t in unresolved)
        else:
            log.warning("adapter targets absent from checkpoint: %s", unresolved)
    actions = []
    for name, e in instruct.tensors.items():
        pair = adapter.pairs.get(name)
        reason = None
        if pair is None:
            reason = NOT_TARGETED
        elif policy.excluded(name):
            reason = EXCLUDED
        elif not e.dtype.arithmetic:
            reason = OPAQUE
        elif tuple(e.shape) != pair.shape:
            reason = SHAPE_MISMATCH
            if policy.strict or policy.on_shape_mismatch == "error":
                errors.append(f"{name}: checkpoint shape {list(e.shape)} vs adapter product {list(pair.shape)}")
        actions.append(Action(name, "graft") if reason is None else Action(name, "copy", reason))
    if errors:
        raise MismatchError(f"cannot graft adapter: {len(errors)} problem(s)", errors)
    return execute_with_deltas(instruct, actions, _lora_delta(adapter), alpha, out_path,
                               output_dtype, runtime, reject_nonfinite)


def write_expanded_delta(adapter: LoraAdapter, path: str | os.PathLike) -> None:
    """Materialise every expanded pair as an F64 delta checkpoint (small adapters only)."""
    entries = {t: ("F64", p.shape, expand_delta(p).astype("<f8")) for t, p in adapter.pairs.items()}
    save_checkpoint(entries, path, metadata={"shadow_graft.kind": "delta"})
