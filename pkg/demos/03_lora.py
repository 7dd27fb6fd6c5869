"""
Merging a low-rank adapter
==========================

A low-rank adapter stores two thin factors per weight matrix. Expanding them
gives a full-size delta that is grafted like any other.
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from shadowgraft import AdapterNaming, expand_delta, graft_lora, load_adapter, open_checkpoint, save_checkpoint

workdir = Path(tempfile.mkdtemp())
rng = np.random.default_rng(2)

# the checkpoint to merge into
q = rng.standard_normal((8, 6)).astype("<f4")
save_checkpoint({"attn.q.weight": ("F32", q.shape, q)}, workdir / "instruct.safetensors")

# adapter files usually keep lora_A as (rank x in) and lora_B as (out x rank)
rank = 2
lora_a = rng.standard_normal((rank, 6)).astype("<f4")
lora_b = rng.standard_normal((8, rank)).astype("<f4")
save_checkpoint({
    "base_model.model.attn.q.lora_A.weight": ("F32", lora_a.shape, lora_a),
    "base_model.model.attn.q.lora_B.weight": ("F32", lora_b.shape, lora_b),
}, workdir / "adapter.safetensors")
(workdir / "adapter_config.json").write_text(json.dumps({"r": rank, "lora_alpha": 4}))

# the sidecar config sets the scale to lora_alpha / r
adapter = load_adapter(workdir / "adapter.safetensors", AdapterNaming())
pair = adapter.pairs["attn.q.weight"]
print("target:", pair.target, "rank:", pair.rank, "scale:", pair.scale, "shape:", pair.shape)

delta = expand_delta(pair)
print("delta matches scale * B @ A:", np.allclose(delta, 2.0 * lora_b.astype(float) @ lora_a.astype(float)))

receipt = graft_lora(open_checkpoint(workdir / "instruct.safetensors"), adapter, alpha=1.0,
                     out_path=workdir / "merged.safetensors")
merged = open_checkpoint(workdir / "merged.safetensors").read_f64("attn.q.weight").reshape(8, 6)
print("largest change:", receipt.delta_stats[0].max_abs, "=", np.abs(merged - q).max())
