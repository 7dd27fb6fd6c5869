"""
How far apart are two paired checkpoints?
=========================================

Builds a small "pretrained" checkpoint and a lightly perturbed "post-trained"
twin, then measures the relative gap between them tensor by tensor.
"""

import tempfile
from pathlib import Path

import numpy as np

from shadowgraft import compare_checkpoints, open_checkpoint, save_checkpoint

workdir = Path(tempfile.mkdtemp())
rng = np.random.default_rng(0)

# two checkpoints with the same tensor names; the second one drifts by ~1%
shapes = {"embed.weight": (64, 16), "layers.0.attn.q.weight": (16, 16), "layers.0.mlp.weight": (32, 16)}
base = {name: rng.standard_normal(shape).astype("<f4") for name, shape in shapes.items()}
instruct = {name: (w + 0.01 * rng.standard_normal(w.shape)).astype("<f4") for name, w in base.items()}

save_checkpoint({n: ("F32", w.shape, w) for n, w in base.items()}, workdir / "base.safetensors")
save_checkpoint({n: ("F32", w.shape, w) for n, w in instruct.items()}, workdir / "instruct.safetensors")

# the gap is sum|a - b| / (sum|a| + sum|b|): 0 for identical weights, 1 when one side is zero
report = compare_checkpoints(open_checkpoint(workdir / "base.safetensors"),
                             open_checkpoint(workdir / "instruct.safetensors"))
for entry in report.entries:
    print(f"{entry.name:28s} sigma={entry.sigma:.5f}  ({entry.num_elements} elements)")

# the model-level number weights every element equally
print("global sigma:", round(report.global_sigma, 5))
print("mean over tensors:", round(report.per_tensor_mean, 5))

# embeddings often differ in shape or meaning between releases; leave them out
trimmed = compare_checkpoints(open_checkpoint(workdir / "base.safetensors"),
                              open_checkpoint(workdir / "instruct.safetensors"), exclude=["embed*"])
print("without embeddings:", round(trimmed.global_sigma, 5), "skipped:", trimmed.skipped)
