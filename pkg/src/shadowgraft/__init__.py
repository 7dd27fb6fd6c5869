"""Checkpoint delta surgery: weight similarity, delta grafting, LoRA expansion, pass@k."""

from .evalkit import PassKRecord, PassKSummary, diff_reports, load_records, pass_at_k, summarize
from .graft import (
    GraftPlan,
    GraftReceipt,
    MismatchPolicy,
    apply_delta,
    execute_graft,
    extract_delta,
    graft_values_f64,
    plan_graft,
)
from .lora import AdapterNaming, LoraAdapter, LoraPair, expand_delta, graft_lora, load_adapter
from .microtrain import MicroTask, TripleManifest, eval_loss, generate_triple
from .runtime import MismatchError, Runtime
from .similarity import SimilarityEntry, SimilarityReport, compare_checkpoints, sigma_pair, write_report
from .tensorstore import (
    CheckpointFormatError,
    CheckpointView,
    ElementType,
    NonFiniteError,
    TensorEntry,
    cast_from_f64,
    open_checkpoint,
    read_tensor_f64,
    save_checkpoint,
)

__version__ = "0.1.0"
