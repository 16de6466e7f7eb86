import json

import numpy as np
import pytest

from subexperts.errors import ContractError, ParseError
from subexperts.metrics import (EVALS_FILE, MATRIX_FILE, SUMMARY_FILE, AccuracyMatrix, average_performance,
                                backward_transfer, build_report, emit_report, format_cell, parameter_growth,
                                parse_transfer_matrix, read_evaluations, transfer_matrix_export)

HAND = [[0.9], [0.8, 0.95], [0.7, 0.9, 0.85]]


def test_avg_and_bwt_by_hand():
    m = AccuracyMatrix.from_rows(HAND)
    assert average_performance(m) == pytest.approx((0.7 + 0.9 + 0.85) / 3)
    # ((0.7 - 0.9) + (0.9 - 0.95)) / 2 = -0.125
    assert backward_transfer(m) == pytest.approx(-12.5)


def test_no_forgetting_gives_zero_bwt():
    m = AccuracyMatrix.from_rows([[0.5], [0.5, 0.6], [0.5, 0.6, 0.7]])
    assert backward_transfer(m) == 0.0


def test_matrix_contracts():
    m = AccuracyMatrix(3)
    with pytest.raises(ContractError):
        m.set(1, 2, 0.5)
    with pytest.raises(ValueError):
        m.set(1, 1, 1.5)
    with pytest.raises(ContractError):
        average_performance(m)
    with pytest.raises(ContractError):
        backward_transfer(AccuracyMatrix.from_rows([[0.5]]))
    joint = AccuracyMatrix(3, 1)
    joint.set(1, 3, 0.4)
    assert joint.get(1, 3) == 0.4 and joint.get(1, 1) is None


def test_growth_union_and_overlap():
    a = {"w": np.array([1, 1, 0, 0], dtype=bool)}
    b = {"w": np.array([0, 1, 1, 0], dtype=bool)}
    c = {"w": np.array([0, 1, 1, 0], dtype=bool)}
    g = parameter_growth([a, b, c], linear_per_task=10)
    assert g.per_task == [2, 2, 2]
    assert g.union == [2, 3, 3]
    assert g.overlap == [0.0, 0.5, 1.0]
    assert g.total == [12, 23, 33]
    with pytest.raises(ContractError):
        parameter_growth([a, {"v": a["w"]}])
    with pytest.raises(ContractError):
        parameter_growth([a, {"w": np.zeros(3, dtype=bool)}])


@pytest.mark.parametrize("v,text", [(0.125, "0.13"), (0.135, "0.14"), (0.5, "0.50"), (1.0, "1.00"),
                                    (0.004999, "0.00"), (0.675, "0.68")])
def test_format_cell_rounds_half_up(v, text):
    assert format_cell(v) == text


def test_transfer_matrix_file(tmp_path):
    m = AccuracyMatrix.from_rows(HAND)
    path = transfer_matrix_export(m, tmp_path / "grid.tsv")
    assert path.read_text().split("\n")[:3] == ["source\\target\t1\t2\t3", "1\t0.90\t\t", "2\t0.80\t0.95\t"]
    assert parse_transfer_matrix(path) == m
    path.write_text("source\\target\t1\t2\n1\t0.5\n")
    with pytest.raises(ParseError, match="line 2"):
        parse_transfer_matrix(path)


def test_emit_report_writes_three_files(tmp_path):
    m = AccuracyMatrix.from_rows(HAND)
    growth = parameter_growth([{"w": np.ones(2, dtype=bool)}] * 3)
    report = build_report(m, {"adapter": 10}, growth, {"run_id": "r1", "mode": "til"})
    paths = emit_report(report, tmp_path / "out")
    assert [p.name for p in paths] == [MATRIX_FILE, SUMMARY_FILE, EVALS_FILE]
    summary = json.loads(paths[1].read_text())
    assert summary["run_id"] == "r1" and summary["mode"] == "til"
    assert summary["bwt"] == pytest.approx(-12.5) and summary["params"] == {"adapter": 10}
    assert summary["growth"]["union"] == [2, 2, 2]
    run_id, back = read_evaluations(paths[2])
    assert run_id == "r1" and back == m


def test_joint_report_has_no_bwt():
    report = build_report(AccuracyMatrix.from_rows([[0.8, 0.9, 0.7]]))
    assert report.bwt is None and report.avg == pytest.approx(0.8)
