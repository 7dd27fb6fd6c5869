"""
A complete graft on a toy model
===============================

Train a tiny linear model from two nearby starting points, then check that
moving the tuning delta from one to the other lowers the other's loss.
"""

import tempfile
from pathlib import Path

import numpy as np

from shadowgraft import (MicroTask, TripleManifest, compare_checkpoints, eval_loss, execute_graft,
                         generate_triple, graft_values_f64, open_checkpoint, plan_graft)

workdir = Path(tempfile.mkdtemp())
task = MicroTask(seed=42, dims=(8, 4), steps=50, learning_rate=0.5)
paths = generate_triple(TripleManifest(task, perturbation_std=0.002), workdir)
views = {role: open_checkpoint(p) for role, p in paths.items()}

print("gap base/instruct:", round(compare_checkpoints(views["base"], views["instruct"]).global_sigma, 5))
for role, view in views.items():
    print(f"{role:15s} loss {eval_loss(view, task):.5f}")

plan = plan_graft(views["base"], views["tuned_base"], views["instruct"], alpha=1.0)
execute_graft(plan, workdir / "grafted.safetensors")
grafted = open_checkpoint(workdir / "grafted.safetensors")
print(f"{'grafted':15s} loss {eval_loss(grafted, task):.5f}")

# the grafted change equals the tuning change exactly, before the final cast
moved = graft_values_f64(plan, "w") - views["instruct"].read_f64("w")
learned = views["tuned_base"].read_f64("w") - views["base"].read_f64("w")
print("transfer is exact:", np.array_equal(moved, learned))
