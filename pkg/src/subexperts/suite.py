"""Seeded synthetic sequence-classification tasks for continual-learning runs.

Vocabulary layout for ``T`` tasks and marker block size ``M``::

    [0, F)              filler pool; task t owns n_fillers consecutive tokens
    [F, F+M)            shared marker block
    [F+M+(t-1)M, ...)   private marker block of task t

Each task draws ``round(sigma*M)`` markers from the shared block and the rest
from its private block, so ``sigma=0`` gives disjoint marker sets. Sequences
are the task's own filler tokens with a few markers planted; the label rule
depends on the task:

    0  parity of the marker count (0 or 6 against 3, so both classes have
       the same mean count and token frequencies carry no signal)
    1  majority marker class (markers are partitioned into C classes)
    2  bucket of the first marker's position (drawn from the leading half
       of the bucket, so classes are separated by a margin; the other
       markers follow inside the same bucket when it has room)
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numeric as nx
from .errors import ConfigError, ParseError

RULES = ("parity", "majority", "position")
MIN_FILLER = 4
PARITY_COUNTS = ((0, 6), (3,))  # even, odd; both classes average 3 markers


@dataclass(frozen=True)
class SuiteConfig:
    n_tasks: int = 5
    n_train: int = 500
    n_test: int = 100
    seq_len: int = 16
    sigma: float = 0.2
    seed: int = 0
    vocab_size: int = 64
    block_size: int = 8
    n_fillers: int = 2

    def validate(self) -> None:
        if self.n_tasks < 2:
            raise ConfigError("need at least two tasks", "suite.n_tasks")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("splits must be nonempty", "suite.n_train")
        if self.seq_len < 4:
            raise ConfigError("sequence length must be >= 4", "suite.seq_len")
        if not 0.0 <= self.sigma <= 1.0:
            raise ConfigError(f"sigma must lie in [0, 1], got {self.sigma}", "suite.sigma")
        if self.block_size < 4:
            raise ConfigError("marker blocks need at least 4 tokens", "suite.block_size")
        if self.filler_count < max(MIN_FILLER, self.n_tasks * self.n_fillers):
            raise ConfigError(
                f"vocab_size={self.vocab_size} cannot hold {self.n_tasks} disjoint blocks of "
                f"{self.block_size}, a shared block and {self.n_fillers} fillers per task", "suite.vocab_size")
        if self.n_fillers < 1:
            raise ConfigError("each task needs at least one filler token", "suite.n_fillers")

    @property
    def filler_count(self) -> int:
        return self.vocab_size - (self.n_tasks + 1) * self.block_size


@dataclass
class SyntheticTask:
    task_id: int
    rule: int
    n_classes: int
    markers: list[int]
    train: list[tuple[list[int], int]] = field(repr=False)
    test: list[tuple[list[int], int]] = field(repr=False)

    @property
    def rule_name(self) -> str:
        return RULES[self.rule]

    def arrays(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        rows = self.train if split == "train" else self.test
        return (np.array([s for s, _ in rows], dtype=np.int64).reshape(len(rows), -1),
                np.array([y for _, y in rows], dtype=np.int64))


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def task_layout(cfg: SuiteConfig, t: int) -> tuple[int, int, list[int]]:
    """Rule id, class count and marker tokens for task ``t`` (1-based)."""
    rule = (t - 1) % 3
    cycle = (t - 1) // 3
    n_classes = {0: 2, 1: 3 + cycle % 2, 2: 2 + cycle % 2}[rule]
    m = cfg.block_size
    f = cfg.filler_count
    n_shared = _half_up(cfg.sigma * m)
    rng = nx.stream(cfg.seed, "suite", "markers", t)
    shared = sorted(rng.choice(np.arange(f, f + m), size=n_shared, replace=False).tolist())
    own_start = f + m + (t - 1) * m
    own = list(range(own_start, own_start + m - n_shared))
    return rule, n_classes, sorted(own + shared)


def task_fillers(cfg: SuiteConfig, t: int) -> np.ndarray:
    return np.arange((t - 1) * cfg.n_fillers, t * cfg.n_fillers)


def _sample(rule: int, n_classes: int, y: int, markers: list[int], fillers: np.ndarray,
            length: int, rng: np.random.Generator) -> list[int]:
    seq = rng.choice(fillers, size=length)
    mk = np.asarray(markers)
    if rule == 0:
        # even counts {0, 6} against 3: every class has the same mean marker count
        count = int(rng.choice(PARITY_COUNTS[y]))
        pos = rng.choice(length, size=count, replace=False)
        seq[pos] = rng.choice(mk, size=count)
    elif rule == 1:
        groups = [mk[i::n_classes] for i in range(n_classes)]
        others = [g for g in range(n_classes) if g != y]
        picks = list(rng.choice(groups[y], size=3)) + [rng.choice(groups[g])
                                                       for g in rng.choice(others, size=2, replace=False)]
        pos = rng.choice(length, size=len(picks), replace=False)
        seq[pos] = picks
    else:
        span = length - 2
        lo, hi = -(-y * span // n_classes), -(-(y + 1) * span // n_classes)
        # first marker sits in the leading half of its bucket, leaving a margin before the next;
        # the later markers stay inside the bucket when it has room
        first = int(rng.integers(lo, lo + max(1, (hi - lo + 1) // 2)))
        room = np.arange(first + 1, hi if hi - first > 2 else length)
        later = rng.choice(room, size=2, replace=False)
        seq[first] = rng.choice(mk)
        seq[later] = rng.choice(mk, size=2)
    return [int(v) for v in seq]


def label_of(rule: int, n_classes: int, seq: list[int], markers: list[int]) -> int:
    """Recompute the label of ``seq`` directly from its rule."""
    mk = sorted(markers)
    hits = [i for i, tok in enumerate(seq) if tok in set(mk)]
    if rule == 0:
        return len(hits) % 2
    if rule == 1:
        counts = [0] * n_classes
        for i in hits:
            counts[mk.index(seq[i]) % n_classes] += 1
        return int(np.argmax(counts))
    span = len(seq) - 2
    return min(hits[0] * n_classes // span, n_classes - 1)


def generate_suite(cfg: SuiteConfig | None = None) -> list[SyntheticTask]:
    cfg = cfg or SuiteConfig()
    cfg.validate()
    tasks = []
    for t in range(1, cfg.n_tasks + 1):
        rule, n_classes, markers = task_layout(cfg, t)
        fillers = task_fillers(cfg, t)
        rng = nx.stream(cfg.seed, "suite", "examples", t)
        seen: set[tuple[int, ...]] = set()
        splits = []
        for n in (cfg.n_train, cfg.n_test):
            labels = [i % n_classes for i in range(n)]
            rng.shuffle(labels)
            rows = []
            for y in labels:
                for _ in range(1000):
                    seq = _sample(rule, n_classes, int(y), markers, fillers, cfg.seq_len, rng)
                    if tuple(seq) not in seen:
                        break
                else:
                    raise ConfigError("could not draw enough distinct sequences", "suite.seq_len")
                seen.add(tuple(seq))
                rows.append((seq, int(y)))
            splits.append(rows)
        tasks.append(SyntheticTask(t, rule, n_classes, markers, splits[0], splits[1]))
    return tasks


# --- text format ------------------------------------------------------------

def _task_path(directory: Path, t: int) -> Path:
    return directory / f"task_{t:03d}.txt"


def export_suite(tasks: list[SyntheticTask], directory: str | os.PathLike) -> list[Path]:
    """One UTF-8 file per task: a header line, then ``tokens<TAB>label`` lines (train first)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for task in tasks:
        head = (f"id={task.task_id}\tC={task.n_classes}\ttrain={len(task.train)}\ttest={len(task.test)}"
                f"\trule={task.rule}\tmarkers={','.join(map(str, task.markers))}")
        lines = [head] + [" ".join(map(str, s)) + f"\t{y}" for s, y in task.train + task.test]
        path = _task_path(directory, task.task_id)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
        paths.append(path)
    return paths


def _parse_header(line: str, path: str) -> dict[str, str]:
    fields = {}
    for part in line.split("\t"):
        key, sep, value = part.partition("=")
        if not sep:
            raise ParseError(f"malformed header field {part!r}", 1, path)
        fields[key] = value
    missing = {"id", "C", "train", "test", "rule", "markers"} - fields.keys()
    if missing:
        raise ParseError(f"header lacks {sorted(missing)}", 1, path)
    return fields


def read_task(path: str | os.PathLike) -> SyntheticTask:
    path = str(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty file", 1, path)
    head = _parse_header(lines[0], path)
    try:
        task_id, n_classes = int(head["id"]), int(head["C"])
        n_train, n_test, rule = int(head["train"]), int(head["test"]), int(head["rule"])
        markers = [int(v) for v in head["markers"].split(",") if v]
    except ValueError as exc:
        raise ParseError(f"bad header value: {exc}", 1, path) from None
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        toks, sep, label = line.partition("\t")
        try:
            if not sep:
                raise ValueError("missing tab before label")
            seq = [int(v) for v in toks.split(" ")]
            y = int(label)
        except ValueError as exc:
            raise ParseError(f"malformed example: {exc}", lineno, path) from None
        if not 0 <= y < n_classes:
            raise ParseError(f"label {y} outside [0, {n_classes})", lineno, path)
        rows.append((seq, y))
    if len(rows) != n_train + n_test:
        raise ParseError(f"expected {n_train + n_test} examples, found {len(rows)}", len(lines) + 1, path)
    return SyntheticTask(task_id, rule, n_classes, markers, rows[:n_train], rows[n_train:])


def import_suite(directory: str | os.PathLike) -> list[SyntheticTask]:
    paths = sorted(Path(directory).glob("task_*.txt"))
    if not paths:
        raise ParseError("no task files found", None, str(directory))
    return sorted((read_task(p) for p in paths), key=lambda task: task.task_id)
