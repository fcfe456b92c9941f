# -*- coding: utf-8 -*-
# file: test_report.py

import json
import math

import numpy as np
import pandas as pd
import pytest

from extarm.errors import ExtArmError
from extarm.estimators import AttEstimate
from extarm.report import MANIFEST_FILE, ReportWriter, bias_table, dumps, to_jsonable


class TestJson:

    def test_non_finite_values(self):
        assert to_jsonable({"a": float("nan"), "b": math.inf, "c": -math.inf}) == {"a": None, "b": "inf",
                                                                                   "c": "-inf"}

    def test_numpy_values_unwrapped(self):
        converted = to_jsonable({"x": np.float64(1.5), "n": np.int64(3), "v": np.array([1.0, np.nan])})
        assert converted == {"x": 1.5, "n": 3, "v": [1.0, None]}
        assert type(converted["n"]) is int

    def test_dumps_is_canonical(self):
        assert dumps({"b": 1, "a": (2, 3)}) == dumps({"a": [2, 3], "b": 1})
        assert dumps({"a": 1}).endswith("\n")


class TestReportWriter:

    def test_json_is_stamped(self, tmp_path):
        writer = ReportWriter(tmp_path, "estimate", 7, "abc")
        path = writer.write_json("report.json", {"value": 1.0})
        body = json.loads(path.read_text(encoding="utf-8"))
        assert body == {"command": "estimate", "seed": 7, "config_hash": "abc", "value": 1.0}

    def test_csv_marks_missing(self, tmp_path):
        writer = ReportWriter(tmp_path, "design", 0, "abc")
        writer.write_csv("table.csv", pd.DataFrame({"a": [1.0, None], "b": ["x", "y"]}))
        lines = (tmp_path / "table.csv").read_text(encoding="utf-8").splitlines()
        assert lines == ["a,b", "1,x", "NA,y"]

    def test_manifest_lists_files(self, tmp_path):
        writer = ReportWriter(tmp_path, "design", 0, "abc")
        writer.write_json("z.json", {})
        writer.write_csv("a.csv", pd.DataFrame({"x": [1]}))
        manifest = json.loads(writer.finish().read_text(encoding="utf-8"))
        assert manifest["files"] == ["a.csv", "z.json"]
        assert (tmp_path / MANIFEST_FILE).is_file()

    def test_missing_declared_file(self, tmp_path):
        writer = ReportWriter(tmp_path, "design", 0, "abc")
        writer.register_existing("resolved_config.json")
        with pytest.raises(ExtArmError, match="resolved_config.json"):
            writer.finish()

    def test_duplicate_name(self, tmp_path):
        writer = ReportWriter(tmp_path, "design", 0, "abc")
        writer.write_json("a.json", {})
        with pytest.raises(ExtArmError):
            writer.write_json("a.json", {})


class TestBiasTable:

    def _estimates(self):
        return {"PSM": AttEstimate("PSM", 1.5, 40, 30).with_variance(0.04, "formula"),
                "OM": AttEstimate("OM", 1.0, 50, 200).with_variance(0.01, "formula")}

    def test_shift_against_psm(self):
        table = bias_table(self._estimates(), expected_tau=1.0)
        assert table["shift_vs_reference"].tolist() == pytest.approx([0.0, -0.5])
        assert table["bias_vs_expected"].tolist() == pytest.approx([0.5, 0.0])
        assert table.loc[1, "ci_low"] == pytest.approx(1.0 - 1.96 * 0.1)

    def test_reference_falls_back_to_first(self):
        estimates = self._estimates()
        del estimates["PSM"]
        table = bias_table(estimates)
        assert table["reference"].tolist() == ["OM"]
        assert "bias_vs_expected" not in table.columns
# file: test_report.py
