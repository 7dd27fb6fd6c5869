from __future__ import annotations

import hashlib
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import stored_values  # noqa: E402
from shadowgraft.tensorstore import open_checkpoint, save_checkpoint  # noqa: E402


def write_ckpt(path, tensors: dict, **kwargs):
    """``tensors`` maps name -> (dtype, array); float arrays are rounded through numpy/ml_dtypes."""
    entries = {}
    for name, (dtype, arr) in tensors.items():
        arr = np.asarray(arr)
        if dtype in ("F64", "F32", "F16", "BF16"):
            raw, _ = stored_values(arr, dtype)
        else:
            raw = arr.astype({"I64": "<i8", "I32": "<i4", "I16": "<i2", "I8": "i1",
                              "U8": "u1", "BOOL": "?"}[dtype]).tobytes()
        entries[name] = (dtype, arr.shape, raw)
    out = save_checkpoint(entries, path, **kwargs)
    return open_checkpoint(out)


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 22), b""):
            h.update(block)
    return h.hexdigest()


def tree_hash(path) -> dict:
    """Hash of a checkpoint file, or of every file in a sharded checkpoint's directory."""
    path = Path(path)
    if path.is_dir():
        return {p.name: file_hash(p) for p in sorted(path.iterdir())}
    if path.name.endswith(".json"):
        return tree_hash(path.parent)
    return {path.name: file_hash(path)}


def raw_bytes(view, name) -> bytes:
    return view.read_raw(name).tobytes()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# ---------------------------------------------------------------- acceptance summary

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    marker = getattr(report, "acceptance", None)
    if marker is None:
        return
    number, title = marker
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        outcome = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _ACCEPTANCE[number] = (title, outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is not None:
        rep.acceptance = tuple(m.args)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, outcome = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {outcome}  {title}")
