"""
Grafting a fine-tuning delta onto another checkpoint
====================================================

Fine-tune a base model, take the weight change, and add it to a sibling
checkpoint. The scaling factor controls how much of the change is applied.
"""

import tempfile
from pathlib import Path

import numpy as np

from shadowgraft import (MismatchPolicy, apply_delta, execute_graft, extract_delta, open_checkpoint,
                         plan_graft, save_checkpoint)

workdir = Path(tempfile.mkdtemp())
rng = np.random.default_rng(1)


def write(name, tensors):
    save_checkpoint({n: ("F32", w.shape, w.astype("<f4")) for n, w in tensors.items()}, workdir / name)
    return open_checkpoint(workdir / name)


w = {"layer.weight": rng.standard_normal((4, 4)), "norm.weight": np.ones(4)}
base = write("base.safetensors", w)
tuned = write("tuned_base.safetensors", {n: v + 0.1 for n, v in w.items()})
instruct = write("instruct.safetensors", {n: v + 0.01 * rng.standard_normal(v.shape) for n, v in w.items()})

# planning checks names, shapes and dtypes before anything is written
plan = plan_graft(base, tuned, instruct, alpha=1.0)
print("\n".join(plan.describe()))

receipt = execute_graft(plan, workdir / "grafted.safetensors")
for stat in receipt.delta_stats:
    print(f"{stat.name}: |delta|_1 = {stat.l1:.3f}, max |delta| = {stat.max_abs:.3f}")

# alpha = 0 writes the target back unchanged, byte for byte
execute_graft(plan_graft(base, tuned, instruct, alpha=0.0), workdir / "alpha0.safetensors")
print("alpha=0 identical:",
      (workdir / "alpha0.safetensors").read_bytes() == (workdir / "instruct.safetensors").read_bytes())

# the same result in two steps: store the delta once, apply it wherever needed
extract_delta(base, tuned, out_path=workdir / "delta.safetensors")
apply_delta(instruct, open_checkpoint(workdir / "delta.safetensors"), 1.0, out_path=workdir / "two_step.safetensors")
print("two-step identical:",
      (workdir / "two_step.safetensors").read_bytes() == (workdir / "grafted.safetensors").read_bytes())

# a target with an extra tensor: strict planning refuses, skip_missing copies it through
inst_values = {n: instruct.read_f64(n).reshape(instruct[n].shape) for n in instruct.names()}
extra = write("instruct_plus.safetensors", {**inst_values, "lm_head.weight": np.zeros((2, 4))})
lenient = plan_graft(base, tuned, extra, policy=MismatchPolicy("skip_missing"))
print([(a.name, a.kind, a.reason) for a in lenient.actions])
