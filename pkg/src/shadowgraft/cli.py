"""``shadow-graft`` command line.

Exit codes: 0 success, 1 I/O failure, 2 validation or plan failure,
3 numeric policy violation (non-finite values, training divergence).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import evalkit, graft, lora, microtrain, similarity
from .runtime import MIN_TENSOR_BUDGET, MismatchError, Runtime
from .tensorstore import (
    DEFAULT_MAX_HEADER_BYTES,
    DEFAULT_TENSOR_BUDGET,
    CheckpointFormatError,
    NonFiniteError,
    open_checkpoint,
)

log = logging.getLogger("shadowgraft")

EXIT_OK, EXIT_IO, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3


@dataclasses.dataclass(frozen=True)
class CliConfig:
    threads: int = 0
    tensor_budget_bytes: int = DEFAULT_TENSOR_BUDGET
    log_format: str = "text"
    strict_finite: bool = False
    memory_ceiling: int | None = None

    def __post_init__(self):
        if self.tensor_budget_bytes < MIN_TENSOR_BUDGET:
            raise ValueError(f"--tensor-budget must be at least {MIN_TENSOR_BUDGET} bytes")
        if self.log_format not in ("text", "json"):
            raise ValueError(f"log format must be 'text' or 'json', got {self.log_format!r}")
        if self.threads < 0:
            raise ValueError("--threads must be >= 0")

    def runtime(self) -> Runtime:
        if self.threads:
            return Runtime(workers=self.threads, tensor_budget=self.tensor_budget_bytes)
        return Runtime.auto(self.tensor_budget_bytes, self.memory_ceiling)


class JsonFormatter(logging.Formatter):
    def __init__(self, op: str):
        super().__init__()
        self.op = op

    def format(self, record: logging.LogRecord) -> str:
        return json.dumps({
            "ts": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(record.created)) + f".{int(record.msecs):03d}Z",
            "level": record.levelname.lower(),
            "op": self.op,
            "tensor": getattr(record, "tensor", None),
            "msg": record.getMessage(),
        })


def _setup_logging(fmt: str, op: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    if fmt == "json":
        handler.setFormatter(JsonFormatter(op))
    else:
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("shadowgraft")
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO)
    root.propagate = False


def _size(text: str) -> int:
    units = {"k": 1 << 10, "m": 1 << 20, "g": 1 << 30}
    text = text.strip().lower().removesuffix("ib").removesuffix("b")
    if text and text[-1] in units:
        return int(float(text[:-1]) * units[text[-1]])
    return int(text)


def _policy(args) -> graft.MismatchPolicy:
    return graft.MismatchPolicy(mode=args.policy, exclude_patterns=tuple(args.exclude),
                                on_shape_mismatch=args.on_shape_mismatch)


def _receipt_path(args) -> Path:
    if args.receipt:
        return Path(args.receipt)
    out = Path(args.out)
    return out / "receipt.json" if out.is_dir() else out.with_name(out.name + ".receipt.json")


def _emit(args, text: str) -> None:
    if not args.quiet:
        print(text)


def _finish_receipt(args, receipt: graft.GraftReceipt) -> int:
    path = _receipt_path(args)
    receipt.write(path)
    _emit(args, f"grafted {len(receipt.grafted)} copied {len(receipt.copied)} alpha {receipt.alpha!r}")
    _emit(args, f"receipt {path}")
    return EXIT_OK


def cmd_sigma(args, cfg: CliConfig) -> int:
    base = open_checkpoint(args.base, args.max_header_bytes)
    instruct = open_checkpoint(args.instruct, args.max_header_bytes)
    report = similarity.compare_checkpoints(base, instruct, args.policy, args.exclude, cfg.runtime())
    out = Path(args.out) if args.out else Path("sigma_report.json")
    similarity.write_report(report, out)
    if args.csv:
        similarity.write_report_csv(report, args.csv)
    for label, value in (("global_sigma", report.global_sigma), ("per_tensor_mean", report.per_tensor_mean)):
        _emit(args, f"{label} {value:.6f}")
    if report.skipped:
        _emit(args, f"skipped {len(report.skipped)}")
    return EXIT_OK


def cmd_graft(args, cfg: CliConfig) -> int:
    views = [open_checkpoint(p, args.max_header_bytes) for p in (args.base, args.tuned_base, args.instruct)]
    policy = _policy(args)
    if args.dry_run:
        try:
            plan = graft.plan_graft(*views, args.alpha, policy, args.output_dtype)
        except MismatchError as e:
            for line in e.diff:
                print(f"mismatch {line}", file=sys.stderr)
            lenient = dataclasses.replace(policy, mode="skip_missing", on_shape_mismatch="skip")
            plan = graft.plan_graft(*views, args.alpha, lenient, args.output_dtype)
        print("\n".join(plan.describe()))
        return EXIT_OK
    if not args.out:
        raise ValueError("--out is required unless --dry-run is given")
    plan = graft.plan_graft(*views, args.alpha, policy, args.output_dtype)
    receipt = graft.execute_graft(plan, args.out, cfg.runtime(), cfg.strict_finite)
    return _finish_receipt(args, receipt)


def cmd_lora_graft(args, cfg: CliConfig) -> int:
    naming = lora.AdapterNaming(suffix_a=args.suffix_a, suffix_b=args.suffix_b,
                                strip_prefix=args.strip_prefix or None, orientation=args.naming)
    adapter = lora.load_adapter(args.adapter, naming, args.config)
    instruct = open_checkpoint(args.instruct, args.max_header_bytes)
    receipt = lora.graft_lora(instruct, adapter, args.alpha, _policy(args), args.out, args.output_dtype,
                              cfg.runtime(), cfg.strict_finite)
    return _finish_receipt(args, receipt)


def cmd_delta(args, cfg: CliConfig) -> int:
    base = open_checkpoint(args.base, args.max_header_bytes)
    tuned = open_checkpoint(args.tuned_base, args.max_header_bytes)
    receipt = graft.extract_delta(base, tuned, _policy(args), args.out, args.delta_dtype, cfg.runtime())
    return _finish_receipt(args, receipt)


def cmd_apply(args, cfg: CliConfig) -> int:
    target = open_checkpoint(args.target, args.max_header_bytes)
    delta = open_checkpoint(args.delta, args.max_header_bytes)
    receipt = graft.apply_delta(target, delta, args.alpha, _policy(args), args.out, args.output_dtype,
                                cfg.runtime(), cfg.strict_finite)
    return _finish_receipt(args, receipt)


def cmd_passk(args, cfg: CliConfig) -> int:
    records = evalkit.load_records(args.records)
    ks = [int(k) for part in args.k for k in part.split(",") if k.strip()]
    summary = evalkit.summarize(records, ks)
    out = Path(args.out) if args.out else Path(args.records).with_suffix(".passk.json")
    evalkit.write_summary(summary, out)
    if args.csv:
        Path(args.csv).write_text(evalkit.summary_csv(summary), encoding="utf-8")
    _emit(args, f"problems {summary.num_problems}")
    for k in summary.k_values:
        _emit(args, f"pass@{k} {summary.estimates[k]:.6f}")
    return EXIT_OK


def cmd_microtrain(args, cfg: CliConfig) -> int:
    manifest = microtrain.TripleManifest.load(args.manifest)
    out_dir = Path(args.out_dir) if args.out_dir else Path(args.manifest).parent
    paths = microtrain.generate_triple(manifest, out_dir)
    for role, path in paths.items():
        loss = microtrain.eval_loss(open_checkpoint(path), manifest.task)
        _emit(args, f"{role} loss {loss:.6e} {path}")
    return EXIT_OK


def cmd_diff(args, cfg: CliConfig) -> int:
    def load(path):
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        if "entries" in d:
            return similarity.SimilarityReport.from_dict(d)
        return graft.GraftReceipt.from_dict(d)

    text = evalkit.diff_csv(load(args.a), load(args.b))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    _emit(args, text.rstrip("\n"))
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("runtime")
    g.add_argument("--threads", type=int, default=None,
                   help="worker threads, 0 = one per core (env SHADOW_GRAFT_THREADS)")
    g.add_argument("--tensor-budget", type=_size, default=DEFAULT_TENSOR_BUDGET,
                   help="bytes of tensor data held at once, e.g. 64M (minimum 16M)")
    g.add_argument("--memory-ceiling", type=_size, default=None,
                   help="caps auto thread count so threads x budget stays below this")
    g.add_argument("--max-header-bytes", type=_size, default=DEFAULT_MAX_HEADER_BYTES,
                   help="reject files whose header is larger than this")
    g.add_argument("--log-format", choices=("text", "json"), default=None,
                   help="stderr log format (env SHADOW_GRAFT_LOG)")
    g.add_argument("--strict-finite", action="store_true", help="fail (exit 3) on non-finite output values")
    g.add_argument("--quiet", action="store_true", help="suppress stdout; files are still written")


def _add_policy(p: argparse.ArgumentParser, default: str = "strict") -> None:
    p.add_argument("--policy", choices=("strict", "skip_missing"), default=default,
                   help="strict: any structural mismatch is an error; skip_missing: copy such tensors")
    p.add_argument("--exclude", action="append", default=[], metavar="GLOB",
                   help="leave tensors matching this glob untouched (repeatable)")
    p.add_argument("--on-shape-mismatch", choices=("error", "skip"), default="error",
                   help="under skip_missing, whether a shape mismatch is an error or a copy")


def _add_output(p: argparse.ArgumentParser) -> None:
    p.add_argument("--output-dtype", default="preserve", help="'preserve' (default) or F32")
    p.add_argument("--receipt", help="receipt path (default: next to --out)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shadow-graft", description="Checkpoint delta surgery tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sigma", help="relative gap between two checkpoints")
    p.add_argument("base", help="a .safetensors file, an index JSON, or a directory holding one")
    p.add_argument("instruct", help="checkpoint paired with base")
    p.add_argument("--out", help="report JSON (default sigma_report.json)")
    p.add_argument("--csv", help="also write one CSV row per tensor")
    p.add_argument("--policy", choices=similarity.SIMILARITY_POLICIES, default="strict",
                   help="strict: name sets and shapes must match; intersect: compare the common tensors")
    p.add_argument("--exclude", action="append", default=[], metavar="GLOB",
                   help="skip tensors matching this glob (repeatable)")
    _add_common(p)
    p.set_defaults(func=cmd_sigma)

    p = sub.add_parser("graft", help="instruct + alpha * (tuned_base - base)")
    p.add_argument("base", help="checkpoint the delta is measured from (a .safetensors file, an index JSON, or a directory holding one)")
    p.add_argument("tuned_base", help="fine-tuned base")
    p.add_argument("instruct", help="checkpoint receiving the delta")
    p.add_argument("--alpha", type=float, default=1.0, help="delta scale (default 1.0; 0 returns instruct)")
    p.add_argument("--out", help="output file, or directory when instruct is sharded")
    p.add_argument("--dry-run", action="store_true", help="print the plan, write nothing")
    _add_policy(p)
    _add_output(p)
    _add_common(p)
    p.set_defaults(func=cmd_graft)

    p = sub.add_parser("lora-graft", help="instruct + alpha * scale * A @ B")
    p.add_argument("instruct", help="checkpoint receiving the adapter")
    p.add_argument("adapter", help="adapter .safetensors file")
    p.add_argument("--alpha", type=float, default=1.0, help="extra scale on top of lora_alpha / r")
    p.add_argument("--out", required=True, help="output file, or directory when instruct is sharded")
    p.add_argument("--naming", choices=("transposed", "paper"), default="transposed",
                   help="factor layout: 'transposed' (lora_B @ lora_A) or 'paper' (lora_A @ lora_B)")
    p.add_argument("--suffix-a", default=".lora_A", help="name marker of the A factor")
    p.add_argument("--suffix-b", default=".lora_B", help="name marker of the B factor")
    p.add_argument("--strip-prefix", default="base_model.model.",
                   help="prefix removed from adapter target names ('' to keep names)")
    p.add_argument("--config", help="sidecar JSON with r and lora_alpha")
    _add_policy(p)
    _add_output(p)
    _add_common(p)
    p.set_defaults(func=cmd_lora_graft)

    p = sub.add_parser("delta", help="write tuned_base - base as a checkpoint")
    p.add_argument("base", help="checkpoint the delta is measured from")
    p.add_argument("tuned_base", help="fine-tuned base")
    p.add_argument("--out", required=True, help="delta checkpoint to write")
    p.add_argument("--delta-dtype", default="F64",
                   help="F64 (default, lossless) or F32 (smaller, no longer bit-exact when applied)")
    p.add_argument("--receipt", help="receipt path (default: next to --out)")
    _add_policy(p)
    _add_common(p)
    p.set_defaults(func=cmd_delta)

    p = sub.add_parser("apply", help="target + alpha * delta")
    p.add_argument("target", help="checkpoint receiving the delta")
    p.add_argument("delta", help="delta checkpoint written by 'delta'")
    p.add_argument("--alpha", type=float, default=1.0, help="delta scale (default 1.0)")
    p.add_argument("--out", required=True, help="output file, or directory when target is sharded")
    _add_policy(p)
    _add_output(p)
    _add_common(p)
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("passk", help="unbiased pass@k over NDJSON rollout records")
    p.add_argument("records", help='NDJSON lines {"problem_id", "n", "c"}')
    p.add_argument("--k", action="append", default=[], required=True, help="k values, e.g. 1,8,16")
    p.add_argument("--out", help="summary JSON (default <records>.passk.json)")
    p.add_argument("--csv", help="also write k,pass_at_k rows")
    _add_common(p)
    p.set_defaults(func=cmd_passk)

    p = sub.add_parser("microtrain", help="generate a synthetic base/tuned/instruct checkpoint set")
    p.add_argument("manifest", help="manifest JSON (task settings, perturbation_std, file names)")
    p.add_argument("--out-dir", help="default: the manifest's directory")
    _add_common(p)
    p.set_defaults(func=cmd_microtrain)

    p = sub.add_parser("diff", help="compare two sigma reports or two receipts per tensor")
    p.add_argument("a", help="sigma report or graft receipt JSON")
    p.add_argument("b", help="report of the same kind")
    p.add_argument("--out", help="write the CSV here")
    _add_common(p)
    p.set_defaults(func=cmd_diff)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    log_format = args.log_format or os.environ.get("SHADOW_GRAFT_LOG", "text")
    _setup_logging(log_format if log_format in ("text", "json") else "text", args.command)
    try:
        threads = args.threads if args.threads is not None else int(os.environ.get("SHADOW_GRAFT_THREADS", "0"))
        cfg = CliConfig(threads=threads, tensor_budget_bytes=args.tensor_budget, log_format=log_format,
                        strict_finite=args.strict_finite, memory_ceiling=args.memory_ceiling)
        return args.func(args, cfg)
    except (NonFiniteError, microtrain.TrainingDiverged) as e:
        log.error("%s", e)
        return EXIT_NUMERIC
    except MismatchError as e:
        print(str(e), file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        log.error("%s", e)
        return EXIT_IO
    except (CheckpointFormatError, lora.AdapterError, evalkit.PassKError, ValueError, KeyError, TypeError) as e:
        log.error("%s", e)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
