"""
Тесты записи артефактов: JSON, CSV и книга Excel
"""

import json

import numpy as np
import pandas as pd
import pytest
from openpyxl import load_workbook

from report_export import ExportError, export_tables_to_excel, read_json, write_csv, write_json
from run_config import RunConfig


@pytest.fixture
def provenance():
    return RunConfig(command="simulate", scenario="dense", seed=9).provenance()


def test_json_round_trip(tmp_path, provenance):
    path = write_json(tmp_path / "m.json", {"beta": np.array([0.1, 1 / 3]), "n": np.int64(5)}, provenance)
    document = read_json(path)
    assert document["schema_version"] == 1
    assert document["beta"] == [0.1, 1 / 3]
    assert document["n"] == 5
    assert document["provenance"]["config_hash"] == provenance["config_hash"]


def test_json_non_finite_becomes_null(tmp_path, provenance):
    path = write_json(tmp_path / "m.json", {"x": float("nan"), "y": [1.0, float("inf")]}, provenance)
    raw = json.loads(path.read_text(encoding="utf-8"))
    assert raw["x"] is None
    assert raw["y"] == [1.0, None]


def test_read_json_rejects_other_schema(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"schema_version": 99}))
    with pytest.raises(ExportError) as info:
        read_json(path)
    assert info.value.exit_code == 2


def test_csv_keeps_full_precision(tmp_path, provenance):
    frame = pd.DataFrame({"a": [1 / 3, np.pi], "b": ["x", "y"]})
    path = write_csv(tmp_path / "t.csv", frame, provenance)
    back = pd.read_csv(path, float_precision="round_trip")
    assert back["a"].tolist() == [1 / 3, np.pi]
    assert (back["config_hash"] == provenance["config_hash"]).all()
    assert (back["seed"] == 9).all()


def test_excel_workbook_layout(tmp_path, provenance):
    tables = {"coefficients": pd.DataFrame({"column": ["a", "b"], "value": [0.5, -1.0]}),
              "trace": pd.DataFrame({"lambda0": [1.0, 2.0], "n_selected": [3, 1]})}
    path = export_tables_to_excel(tmp_path / "r.xlsx", tables, provenance)
    wb = load_workbook(path)
    assert wb.sheetnames == ["coefficients", "trace", "provenance"]
    ws = wb["coefficients"]
    assert ws["A1"].value == "column"
    assert ws["A1"].font.bold
    assert ws["B3"].value == -1.0
    info = {row[0].value: row[1].value for row in wb["provenance"].iter_rows(min_row=2)}
    assert info["config_hash"] == provenance["config_hash"]
