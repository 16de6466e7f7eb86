"""Accuracy matrices, Avg/BWT, mask-union growth, and report files."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError, ParseError

MATRIX_FILE = "transfer_matrix.tsv"
SUMMARY_FILE = "summary.json"
EVALS_FILE = "evaluations.tsv"


class AccuracyMatrix:
    """``A[i][j]``: accuracy on task ``j`` after training through ``i`` (both 1-based).

    Sequential runs fill the lower triangle of a ``T x T`` grid; a joint run
    has a single row.
    """

    def __init__(self, n_tasks: int, n_rows: int | None = None):
        self.n_tasks = int(n_tasks)
        self.n_rows = self.n_tasks if n_rows is None else int(n_rows)
        self.values = np.full((self.n_rows, self.n_tasks), np.nan)

    @property
    def T(self) -> int:
        return self.n_tasks

    def set(self, i: int, j: int, acc: float) -> None:
        if not (1 <= i <= self.n_rows and 1 <= j <= self.n_tasks):
            raise IndexError(f"cell ({i}, {j}) outside {self.n_rows} x {self.n_tasks}")
        if self.n_rows == self.n_tasks and j > i:
            raise ContractError(f"task {j} cannot be evaluated after training only through {i}")
        if not 0.0 <= acc <= 1.0:
            raise ValueError(f"accuracy {acc} outside [0, 1]")
        self.values[i - 1, j - 1] = float(acc)

    def get(self, i: int, j: int) -> float | None:
        v = self.values[i - 1, j - 1]
        return None if math.isnan(v) else float(v)

    def row(self, i: int) -> list[float | None]:
        return [self.get(i, j) for j in range(1, self.n_tasks + 1)]

    def final_row(self) -> list[float | None]:
        return self.row(self.n_rows)

    def rows(self) -> list[list[float | None]]:
        return [self.row(i) for i in range(1, self.n_rows + 1)]

    def cells(self) -> list[tuple[int, int, float]]:
        return [(i, j, v) for i, row in enumerate(self.rows(), 1) for j, v in enumerate(row, 1) if v is not None]

    def copy(self) -> "AccuracyMatrix":
        out = AccuracyMatrix(self.n_tasks, self.n_rows)
        out.values = self.values.copy()
        return out

    def __eq__(self, other) -> bool:
        return (isinstance(other, AccuracyMatrix) and self.values.shape == other.values.shape
                and np.array_equal(self.values, other.values, equal_nan=True))

    def __repr__(self) -> str:
        return f"AccuracyMatrix({self.rows()})"

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float | None]]) -> "AccuracyMatrix":
        width = max(len(r) for r in rows)
        m = cls(width, len(rows))
        for i, r in enumerate(rows, 1):
            for j, v in enumerate(r, 1):
                if v is not None:
                    m.values[i - 1, j - 1] = float(v)
        return m


def average_performance(m: AccuracyMatrix) -> float:
    last = m.final_row()
    if any(v is None for v in last):
        raise ContractError("final row of the accuracy matrix is incomplete")
    return float(sum(last) / len(last))


def backward_transfer(m: AccuracyMatrix) -> float:
    """Mean change in earlier-task accuracy after the final task, in percent."""
    if m.n_tasks < 2 or m.n_rows != m.n_tasks:
        raise ContractError("backward transfer needs a square matrix with T >= 2")
    T = m.n_tasks
    diffs = []
    for j in range(1, T):
        final, own = m.get(T, j), m.get(j, j)
        if final is None or own is None:
            raise ContractError(f"missing A[{T}][{j}] or A[{j}][{j}]")
        diffs.append(final - own)
    return 100.0 * sum(diffs) / (T - 1)


@dataclass
class GrowthCurve:
    per_task: list[int]
    union: list[int]
    overlap: list[float]
    linear: list[int]

    @property
    def total(self) -> list[int]:
        return [u + l for u, l in zip(self.union, self.linear)]


def parameter_growth(masks: Sequence[Mapping[str, np.ndarray]], linear_per_task: int | Sequence[int] = 0
                     ) -> GrowthCurve:
    """Cumulative mask-union size after each task and the fraction of each mask already in use.

    ``masks[t]`` maps tensor names to boolean arrays for task ``t+1``.
    ``linear_per_task`` counts parameters that grow with every task regardless
    of reuse (prompts, keys).
    """
    if not masks:
        raise ContractError("parameter_growth needs at least one snapshot")
    names = sorted(masks[0])
    union = {n: np.zeros(np.asarray(masks[0][n]).shape, dtype=bool) for n in names}
    if isinstance(linear_per_task, int):
        linear_per_task = [linear_per_task] * len(masks)
    per_task, curve, overlap, linear = [], [], [], []
    acc_linear = 0
    for t, snap in enumerate(masks):
        if sorted(snap) != names:
            raise ContractError(f"snapshot {t + 1} covers different tensors than snapshot 1")
        count = new = 0
        for n in names:
            bits = np.asarray(snap[n], dtype=bool)
            if bits.shape != union[n].shape:
                raise ContractError(f"bitset {n!r} of snapshot {t + 1} has shape {bits.shape}, "
                                    f"expected {union[n].shape}")
            count += int(bits.sum())
            new += int((bits & ~union[n]).sum())
            union[n] |= bits
        per_task.append(count)
        curve.append(sum(int(u.sum()) for u in union.values()))
        overlap.append(1.0 - new / count if count else 0.0)
        acc_linear += int(linear_per_task[t])
        linear.append(acc_linear)
    return GrowthCurve(per_task, curve, overlap, linear)


# --- files ------------------------------------------------------------------

def format_cell(v: float) -> str:
    return str(Decimal(repr(float(v))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def transfer_matrix_lines(m: AccuracyMatrix) -> list[str]:
    lines = ["source\\target\t" + "\t".join(str(j) for j in range(1, m.n_tasks + 1))]
    for i, row in enumerate(m.rows(), 1):
        lines.append("\t".join([str(i)] + ["" if v is None else format_cell(v) for v in row]))
    return lines


def transfer_matrix_export(m: AccuracyMatrix, path: str | os.PathLike) -> Path:
    """Tab-separated grid: rows are the task trained through, columns the task evaluated."""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(transfer_matrix_lines(m)) + "\n")
    return path


def parse_transfer_matrix(path: str | os.PathLike) -> AccuracyMatrix:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().rstrip("\n").split("\n")
    width = len(lines[0].split("\t")) - 1
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != width + 1:
            raise ParseError(f"expected {width + 1} fields, got {len(parts)}", lineno, str(path))
        try:
            rows.append([float(p) if p else None for p in parts[1:]])
        except ValueError as exc:
            raise ParseError(str(exc), lineno, str(path)) from None
    m = AccuracyMatrix(width, len(rows))
    for i, r in enumerate(rows):
        for j, v in enumerate(r):
            if v is not None:
                m.values[i, j] = v
    return m


@dataclass
class MetricsReport:
    matrix: AccuracyMatrix
    avg: float
    bwt: float | None
    params: dict[str, int] = field(default_factory=dict)
    growth: GrowthCurve | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def run_id(self) -> str:
        return str(self.metadata.get("run_id", ""))

    def summary(self) -> dict:
        out = {
            "run_id": self.run_id,
            "avg": self.avg,
            "bwt": self.bwt,
            "params": dict(self.params),
            "matrix": self.matrix.rows(),
        }
        if self.growth is not None:
            out["growth"] = asdict(self.growth)
        out.update({k: v for k, v in self.metadata.items() if k != "run_id"})
        return out


def build_report(m: AccuracyMatrix, params: dict[str, int] | None = None, growth: GrowthCurve | None = None,
                 metadata: dict | None = None) -> MetricsReport:
    bwt = backward_transfer(m) if m.n_rows == m.n_tasks and m.n_tasks >= 2 else None
    return MetricsReport(m, average_performance(m), bwt, dict(params or {}), growth, dict(metadata or {}))


def emit_report(report: MetricsReport, directory: str | os.PathLike) -> list[Path]:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        grid = transfer_matrix_export(report.matrix, directory / MATRIX_FILE)
        summary = directory / SUMMARY_FILE
        with open(summary, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(report.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        evals = directory / EVALS_FILE
        with open(evals, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["run_id", "trained_through", "eval_task", "accuracy"])
            for i, j, v in report.matrix.cells():
                w.writerow([report.run_id, i, j, repr(v)])
    except OSError as exc:
        raise OSError(f"cannot write report under {directory}: {exc}") from exc
    return [grid, summary, evals]


def read_evaluations(path: str | os.PathLike, n_tasks: int | None = None) -> tuple[str, AccuracyMatrix]:
    """Rebuild the accuracy matrix from an evaluations table."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    if not rows:
        raise ParseError("no evaluation rows", None, str(path))
    run_id = rows[0]["run_id"]
    width = n_tasks or max(int(r["eval_task"]) for r in rows)
    height = max(int(r["trained_through"]) for r in rows)
    m = AccuracyMatrix(width, height)
    for r in rows:
        m.values[int(r["trained_through"]) - 1, int(r["eval_task"]) - 1] = float(r["accuracy"])
    return run_id, m
