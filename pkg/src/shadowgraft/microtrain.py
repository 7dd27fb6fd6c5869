"""Deterministic toy checkpoints for exercising the graft pipeline end to end.

A linear map ``W`` (d1 x d2) is fitted to a seeded least-squares task with
full-batch gradient descent. Four checkpoints come out of one manifest:

* ``base``: seeded random initialisation
* ``instruct``: ``base`` plus a small seeded Gaussian perturbation
* ``tuned_base``, ``tuned_instruct``: ``steps`` descent steps from each

Random numbers come from numpy's Philox4x64 counter-based generator keyed by
``(seed, stream)``; each quantity draws from its own stream, so changing one
setting never shifts another quantity's numbers. Training runs in float64
with fixed reduction order (no BLAS), and checkpoints are stored as F32.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensorstore import CheckpointView, ElementType, cast_from_f64, promote, save_checkpoint

WEIGHT = "w"

_STREAM_DATA, _STREAM_NOISE, _STREAM_TRUE, _STREAM_INIT, _STREAM_PERTURB = range(5)


class TrainingDiverged(ArithmeticError):
    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"loss became non-finite ({loss}) at step {step}; lower the learning rate")


@dataclass(frozen=True)
class MicroTask:
    seed: int = 42
    dims: tuple[int, int] = (8, 4)
    num_samples: int = 256
    noise_std: float = 0.1
    steps: int = 50
    learning_rate: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if len(self.dims) != 2 or min(self.dims) < 1 or self.num_samples < 1:
            raise ValueError(f"dims and num_samples must be positive, got {self.dims}, {self.num_samples}")
        if self.noise_std < 0 or self.steps < 0 or self.learning_rate <= 0:
            raise ValueError("noise_std and steps must be non-negative, learning_rate positive")


@dataclass(frozen=True)
class TripleManifest:
    task: MicroTask = field(default_factory=MicroTask)
    perturbation_std: float = 0.002
    paths: dict = field(default_factory=lambda: {
        "base": "base.safetensors",
        "tuned_base": "tuned_base.safetensors",
        "instruct": "instruct.safetensors",
        "tuned_instruct": "tuned_instruct.safetensors",
    })

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task"]["dims"] = list(self.task.dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TripleManifest":
        kwargs = {"task": MicroTask(**d.get("task", {})), "perturbation_std": d.get("perturbation_std", 0.002)}
        if "paths" in d:
            kwargs["paths"] = dict(d["paths"])
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TripleManifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def _rng(seed: int, stream: int) -> np.random.Generator:
    key = np.array([seed, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # explicit products + numpy's fixed pairwise reduction instead of BLAS
    return (x[:, :, None] * w[None, :, :]).sum(axis=1)


def true_weights(task: MicroTask) -> np.ndarray:
    return _rng(task.seed, _STREAM_TRUE).standard_normal(task.dims)


def dataset(task: MicroTask) -> tuple[np.ndarray, np.ndarray]:
    d1, d2 = task.dims
    x = _rng(task.seed, _STREAM_DATA).standard_normal((task.num_samples, d1))
    noise = _rng(task.seed, _STREAM_NOISE).standard_normal((task.num_samples, d2)) * task.noise_std
    return x, _matmul(x, true_weights(task)) + noise


def mse(w: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    r = _matmul(x, w) - y
    return float(np.mean(r * r))


def train(w0: np.ndarray, task: MicroTask) -> np.ndarray:
    """``task.steps`` full-batch gradient steps on the mean squared error."""
    x, y = dataset(task)
    w = np.array(w0, dtype=np.float64, copy=True)
    scale = 2.0 / y.size
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(task.steps):
            r = _matmul(x, w) - y
            loss = float(np.mean(r * r))
            if not math.isfinite(loss):
                raise TrainingDiverged(step, loss)
            grad = (x[:, :, None] * r[:, None, :]).sum(axis=0) * scale
            w -= task.learning_rate * grad
        final = mse(w, x, y)
    if not (math.isfinite(final) and np.isfinite(w).all()):
        raise TrainingDiverged(task.steps, final)
    return w


def _stored(w: np.ndarray) -> np.ndarray:
    """Round to F32 and back, i.e. the value a checkpoint actually holds."""
    return promote(np.frombuffer(cast_from_f64(w, ElementType.F32), dtype=np.uint8), ElementType.F32).reshape(w.shape)


def _write(w: np.ndarray, path: Path) -> None:
    # no per-role metadata: equal weights must give byte-identical files
    save_checkpoint({WEIGHT: (ElementType.F32, w.shape, cast_from_f64(w, ElementType.F32))}, path,
                    metadata={"shadow_graft.kind": "microtrain"})


def generate_triple(manifest: TripleManifest, out_dir: str | os.PathLike) -> dict[str, Path]:
    """Write the four checkpoints (and the manifest) into ``out_dir``."""
    task = manifest.task
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = _stored(_rng(task.seed, _STREAM_INIT).standard_normal(task.dims) * (1.0 / math.sqrt(task.dims[0])))
    perturb = _rng(task.seed, _STREAM_PERTURB).standard_normal(task.dims) * manifest.perturbation_std
    instruct = _stored(base + perturb) if manifest.perturbation_std > 0 else base.copy()
    weights = {
        "base": base,
        "instruct": instruct,
        # training starts from the stored values so tuned - base is exactly what a grafter sees
        "tuned_base": train(base, task),
        "tuned_instruct": train(instruct, task),
    }
    paths = {}
    for role, w in weights.items():
        paths[role] = out_dir / manifest.paths[role]
        _write(w, paths[role])
    manifest.save(out_dir / "manifest.json")
    return paths


def eval_loss(checkpoint: CheckpointView, task: MicroTask) -> float:
    """Mean squared error of the checkpoint's ``w`` on the task's seeded data."""
    if WEIGHT not in checkpoint:
        raise KeyError(f"checkpoint has no tensor {WEIGHT!r}")
    entry = checkpoint[WEIGHT]
    if entry.shape != task.dims:
        raise ValueError(f"tensor {WEIGHT!r} has shape {list(entry.shape)}, task expects {list(task.dims)}")
    w = checkpoint.read_f64(WEIGHT).reshape(entry.shape)
    x, y = dataset(task)
    return mse(w, x, y)
