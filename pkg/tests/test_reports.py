import math

import pandas as pd
import pytest

from dlhim.reports import RunLedger, format_banner, read_yaml, write_frame, write_yaml


def test_ledger_is_independent_of_record_order(tmp_path):
    runs = [(1, 0, "b", 3.0), (0, 1, "a", 2.0), (0, 0, "a", 1.0), (1, 1, "b", 5.0)]
    forward, backward = RunLedger("x"), RunLedger("x")
    for seed, inst, label, value in runs:
        forward.record(seed, inst, label, value=value)
    for seed, inst, label, value in reversed(runs):
        backward.record(seed, inst, label, value=value)
    forward.save(str(tmp_path / "f"))
    backward.save(str(tmp_path / "b"))
    for name in ("runs.csv", "medians.csv"):
        assert (tmp_path / "f" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_medians_per_label():
    ledger = RunLedger("x")
    for i, value in enumerate([1.0, 2.0, 10.0]):
        ledger.record(0, i, "a", value=value)
    ledger.record(0, 0, "b", value=7.0)
    medians = ledger.medians(["value"]).set_index("label")
    assert medians.loc["a", "value"] == 2.0
    assert medians.loc["a", "runs"] == 3
    assert ledger.median("b", "value") == 7.0
    assert math.isnan(ledger.median("c", "value"))


def test_failures_file(tmp_path):
    ledger = RunLedger("x")
    ledger.record(0, 0, "a", value=1.0)
    ledger.record_failure(1, 0, "a", "boom")
    ledger.save(str(tmp_path))
    failures = pd.read_csv(tmp_path / "failures.csv")
    assert list(failures["error"]) == ["boom"]


def test_empty_ledger_medians():
    assert list(RunLedger("x").medians(["value"]).columns) == ["label", "runs", "value"]


def test_frames_keep_full_precision(tmp_path):
    path = tmp_path / "sub" / "x.csv"
    write_frame(pd.DataFrame({"v": [0.1 + 0.2]}), str(path))
    assert float(path.read_text().splitlines()[1]) == 0.1 + 0.2


def test_yaml_round_trip(tmp_path):
    path = str(tmp_path / "a.yaml")
    write_yaml({"b": 1, "a": [1.5, "x"]}, path)
    assert read_yaml(path) == {"a": [1.5, "x"], "b": 1}


def test_banner():
    text = format_banner("TITLE", ["one", "two"])
    lines = text.splitlines()
    assert lines[1] == "TITLE"
    assert lines[3] == "  one"
    assert lines[0] == lines[-1] == "=" * 70


@pytest.mark.parametrize("value", [0.0, 1e-300, 123456789.123456789])
def test_write_frame_round_trips_exactly(tmp_path, value):
    path = tmp_path / "x.csv"
    write_frame(pd.DataFrame({"v": [value]}), str(path))
    assert pd.read_csv(path, float_precision="round_trip")["v"][0] == value
