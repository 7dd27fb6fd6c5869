import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import file_hash, tree_hash, write_ckpt
from shadowgraft.cli import CliConfig, main
from shadowgraft.microtrain import MicroTask, TripleManifest
from shadowgraft.tensorstore import open_checkpoint


@pytest.fixture
def triple(tmp_path, rng):
    shapes = {"a": (4, 3), "b": (5,)}
    base = {k: rng.standard_normal(s) for k, s in shapes.items()}
    paths = {}
    for role, shift in (("base", 0.0), ("tuned", 0.1), ("instruct", 0.01)):
        write_ckpt(tmp_path / f"{role}.safetensors", {k: ("F32", v + shift) for k, v in base.items()})
        paths[role] = str(tmp_path / f"{role}.safetensors")
    return paths


def test_sigma_identical(tmp_path, triple, capsys):
    assert main(["sigma", triple["base"], triple["base"], "--out", str(tmp_path / "r.json")]) == 0
    out = capsys.readouterr().out
    assert "global_sigma 0.000000" in out.splitlines()
    assert json.loads((tmp_path / "r.json").read_text())["global_sigma"] == 0.0


def test_sigma_strict_mismatch_and_missing_file(tmp_path, triple, capsys):
    write_ckpt(tmp_path / "other.safetensors", {"a": ("F32", np.ones((4, 3)))})
    assert main(["sigma", triple["base"], str(tmp_path / "other.safetensors"), "--out", str(tmp_path / "r.json")]) == 2
    assert "b" in capsys.readouterr().err
    assert main(["sigma", triple["base"], str(tmp_path / "nope.safetensors"), "--out", str(tmp_path / "r.json")]) == 1


def test_graft_alpha_zero_and_receipt(tmp_path, triple, capsys):
    out = tmp_path / "o.safetensors"
    assert main(["graft", triple["base"], triple["tuned"], triple["instruct"], "--alpha", "0", "--out", str(out)]) == 0
    assert file_hash(out) == file_hash(triple["instruct"])
    receipt = json.loads((tmp_path / "o.safetensors.receipt.json").read_text())
    assert receipt["alpha"] == 0.0 and sorted(receipt["grafted"]) == ["a", "b"]


def test_graft_alpha_one_and_a_half(tmp_path, triple):
    out = tmp_path / "o.safetensors"
    assert main(["graft", triple["base"], triple["tuned"], triple["instruct"], "--alpha", "1.5", "--out", str(out)]) == 0
    v = open_checkpoint(out)
    expected = (open_checkpoint(triple["instruct"]).read_f64("b")
                + 1.5 * (open_checkpoint(triple["tuned"]).read_f64("b") - open_checkpoint(triple["base"]).read_f64("b")))
    assert v.read_f64("b").tolist() == expected.astype(np.float32).astype(np.float64).tolist()


def test_graft_dry_run_on_mismatch(tmp_path, triple, capsys):
    write_ckpt(tmp_path / "bad.safetensors", {"a": ("F32", np.ones((4, 3))), "extra": ("F32", np.ones(2))})
    before = set(p.name for p in tmp_path.iterdir())
    code = main(["graft", triple["base"], triple["tuned"], str(tmp_path / "bad.safetensors"),
                 "--dry-run", "--out", str(tmp_path / "never.safetensors")])
    captured = capsys.readouterr()
    assert code == 0
    assert "extra" in captured.out and "missing in base" in captured.out
    assert set(p.name for p in tmp_path.iterdir()) == before


def test_graft_plan_failure_exit_2(tmp_path, triple):
    write_ckpt(tmp_path / "bad.safetensors", {"a": ("F32", np.ones((4, 3)))})
    assert main(["graft", triple["base"], triple["tuned"], str(tmp_path / "bad.safetensors"),
                 "--out", str(tmp_path / "o.safetensors")]) == 2
    assert not (tmp_path / "o.safetensors").exists()


def test_strict_finite_exit_3(tmp_path):
    for role, v in (("b", 0.0), ("t", 60000.0), ("i", 60000.0)):
        write_ckpt(tmp_path / f"{role}.safetensors", {"w": ("F16", [v])})
    args = ["graft", *(str(tmp_path / f"{r}.safetensors") for r in "bti"), "--out", str(tmp_path / "o.safetensors")]
    assert main(args + ["--strict-finite"]) == 3
    assert main(args) == 0


def test_delta_apply_roundtrip(tmp_path, triple):
    d = tmp_path / "d.safetensors"
    assert main(["delta", triple["base"], triple["tuned"], "--out", str(d)]) == 0
    assert main(["apply", triple["instruct"], str(d), "--alpha", "0.5", "--out", str(tmp_path / "two.safetensors")]) == 0
    assert main(["graft", triple["base"], triple["tuned"], triple["instruct"], "--alpha", "0.5",
                 "--out", str(tmp_path / "one.safetensors")]) == 0
    assert file_hash(tmp_path / "one.safetensors") == file_hash(tmp_path / "two.safetensors")


def test_lora_graft(tmp_path, triple, rng, capsys):
    write_ckpt(tmp_path / "ad.safetensors", {"a.lora_A": ("F32", np.zeros((4, 2))), "a.lora_B": ("F32", np.ones((2, 3)))})
    out = tmp_path / "o.safetensors"
    assert main(["lora-graft", triple["instruct"], str(tmp_path / "ad.safetensors"), "--naming", "paper",
                 "--out", str(out)]) == 0
    assert file_hash(out) == file_hash(triple["instruct"])
    write_ckpt(tmp_path / "orphan.safetensors", {"a.lora_A": ("F32", np.zeros((4, 2)))})
    assert main(["lora-graft", triple["instruct"], str(tmp_path / "orphan.safetensors"), "--out", str(out)]) == 2
    assert "orphan" in capsys.readouterr().err


def test_passk(tmp_path, capsys):
    rec = tmp_path / "r.ndjson"
    rec.write_text('{"problem_id": "p1", "n": 2, "c": 1}\n{"problem_id": "p2", "n": 2, "c": 2}\n')
    assert main(["passk", str(rec), "--k", "1,2", "--out", str(tmp_path / "s.json")]) == 0
    assert "pass@1 0.750000" in capsys.readouterr().out
    assert json.loads((tmp_path / "s.json").read_text())["pass_at_k"] == {"1": 0.75, "2": 1.0}
    assert main(["passk", str(rec), "--k", "3", "--out", str(tmp_path / "s.json")]) == 2
    rec.write_text('{"problem_id": "p1", "n": 2, "c": 5}\n')
    assert main(["passk", str(rec), "--k", "1", "--out", str(tmp_path / "s.json")]) == 2
    assert "line 1" in capsys.readouterr().err


def test_microtrain(tmp_path, capsys):
    TripleManifest(MicroTask(steps=5)).save(tmp_path / "m.json")
    assert main(["microtrain", str(tmp_path / "m.json")]) == 0
    assert "tuned_base loss" in capsys.readouterr().out
    first = file_hash(tmp_path / "tuned_instruct.safetensors")
    assert main(["microtrain", str(tmp_path / "m.json")]) == 0
    assert file_hash(tmp_path / "tuned_instruct.safetensors") == first
    TripleManifest(MicroTask(steps=500, learning_rate=50.0)).save(tmp_path / "bad.json")
    assert main(["microtrain", str(tmp_path / "bad.json"), "--out-dir", str(tmp_path / "bad")]) == 3


def test_diff(tmp_path, triple, capsys):
    main(["sigma", triple["base"], triple["instruct"], "--out", str(tmp_path / "r1.json")])
    main(["sigma", triple["base"], triple["tuned"], "--out", str(tmp_path / "r2.json")])
    capsys.readouterr()
    assert main(["diff", str(tmp_path / "r1.json"), str(tmp_path / "r2.json")]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "name,sigma_a,sigma_b,delta"


def test_idempotent_and_inputs_unchanged(tmp_path, triple):
    before = {k: tree_hash(v) for k, v in triple.items()}
    outputs = []
    for run in range(2):
        out = tmp_path / f"o{run}"
        out.mkdir()
        main(["graft", triple["base"], triple["tuned"], triple["instruct"], "--out", str(out / "g.safetensors"),
              "--threads", "2"])
        main(["sigma", triple["base"], triple["instruct"], "--out", str(out / "r.json")])
        outputs.append(tree_hash(out))
    assert outputs[0] == outputs[1]
    assert {k: tree_hash(v) for k, v in triple.items()} == before


def test_budget_floor_and_json_logs(tmp_path, triple):
    with pytest.raises(ValueError):
        CliConfig(threads=1, tensor_budget_bytes=1 << 20)
    assert main(["sigma", triple["base"], triple["base"], "--tensor-budget", "1MiB",
                 "--out", str(tmp_path / "r.json")]) == 2
    for role, v in (("b", 0.0), ("t", 60000.0), ("i", 60000.0)):
        write_ckpt(tmp_path / f"{role}.safetensors", {"w": ("F16", [v])})
    proc = subprocess.run([sys.executable, "-m", "shadowgraft", "graft",
                           *(str(tmp_path / f"{r}.safetensors") for r in "bti"),
                           "--out", str(tmp_path / "x.safetensors"), "--log-format", "json", "--quiet"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout == ""
    lines = [json.loads(line) for line in proc.stderr.splitlines()]
    assert lines and all(set(d) == {"ts", "level", "op", "tensor", "msg"} for d in lines)
    assert {"level": "warning", "op": "graft", "tensor": "w"}.items() <= lines[-1].items()


def test_help_lists_commands():
    proc = subprocess.run([sys.executable, "-m", "shadowgraft", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("sigma", "graft", "lora-graft", "delta", "apply", "passk", "microtrain", "diff"):
        assert cmd in proc.stdout
