"""Command-line entry point.

Exit status is 0 on success, 1 on a usage error and 2 when a command fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import build_backbone
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config, parse_config_text, with_override
from .errors import ConfigError, SubExpertsError
from .metrics import (EVALS_FILE, MetricsReport, build_report, emit_report, read_evaluations)
from .suite import export_suite, generate_suite, import_suite
from .trainer import RunState, StepRecord, continue_sequence, new_run, run_joint

log = logging.getLogger("subexperts")

CONFIG_FILE = "config.ini"
CHECKPOINT_FILE = "checkpoint.bin"
STEPS_FILE = "steps.tsv"
ABLATION_FILE = "ablation.tsv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="subexperts", description="Continual-learning runs with masked low-rank sub-experts.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-suite", help="write the synthetic task files")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a run and write its report")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint of the same config")
    t.add_argument("--suite", metavar="DIR", help="read tasks from DIR instead of generating them")
    t.add_argument("--stop-after", type=int, metavar="K", help="stop once task K is trained")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a suite")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--suite", required=True)
    e.add_argument("--mode", choices=("til", "tail"), default="til")

    a = sub.add_parser("ablate", help="one full run per value of a config key")
    a.add_argument("--config", required=True)
    a.add_argument("--sweep", required=True, metavar="KEY=V1,V2,...")
    a.add_argument("--out", required=True)

    r = sub.add_parser("report", help="re-emit the metrics of a finished run")
    r.add_argument("--run", required=True)
    return p


# --- helpers ---------------------------------------------------------------------

def write_steps(logs: Sequence[StepRecord], path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["step", "task", "epoch", "task_loss", "pull_loss", "total_loss"])
        for rec in logs:
            w.writerow([rec.step, rec.task, rec.epoch, repr(rec.task_loss), repr(rec.pull_loss),
                        repr(rec.total_loss)])


def run_report(state: RunState, cfg: RunConfig, matrix=None) -> MetricsReport:
    learner = state.learner
    growth = learner.growth() if learner.snapshots else None
    meta = {"run_id": cfg.run_id(), "config": cfg.sections(), "seed": cfg.trainer.seed,
            "kind": cfg.adapter.kind, "mode": cfg.trainer.mode, "eval_mode": cfg.trainer.eval_mode,
            "tasks_trained": state.done}
    return build_report(state.matrix if matrix is None else matrix, learner.param_counts(), growth, meta)


def _load_tasks(cfg: RunConfig, suite_dir: str | None):
    tasks = import_suite(suite_dir) if suite_dir else generate_suite(cfg.suite)
    if len(tasks) != cfg.suite.n_tasks:
        raise ConfigError(f"suite has {len(tasks)} tasks, config expects {cfg.suite.n_tasks}", "suite.n_tasks")
    return tasks


def train_run(cfg: RunConfig, out: Path, resume: str | None = None, suite_dir: str | None = None,
              stop_after: int | None = None) -> RunState:
    tasks = _load_tasks(cfg, suite_dir)
    if cfg.trainer.mode == "joint":
        if resume:
            raise ConfigError("joint runs train in a single phase and cannot resume", "trainer.mode")
        backbone = build_backbone(cfg.backbone, cfg.backbone_seed)
        state = run_joint(tasks, backbone, cfg.adapter, cfg.prompt, cfg.trainer)
    else:
        if resume:
            ck = load_checkpoint(resume)
            if ck.config.digest() != cfg.digest():
                raise ConfigError("checkpoint was written by a different configuration", "run")
            state = ck.state
        else:
            backbone = build_backbone(cfg.backbone, cfg.backbone_seed)
            state = new_run(backbone, cfg.adapter, cfg.prompt, cfg.trainer, len(tasks))
        continue_sequence(state, tasks, stop_after)

    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(cfg.to_text(), encoding="utf-8")
    save_checkpoint(state, cfg, out / CHECKPOINT_FILE)
    write_steps(state.logs, out / STEPS_FILE)
    if state.done == len(tasks):
        emit_report(run_report(state, cfg), out)
    return state


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9._=-]+", "_", text)


# --- commands ----------------------------------------------------------------------

def cmd_gen_suite(args) -> int:
    cfg = parse_config(args.config)
    paths = export_suite(generate_suite(cfg.suite), args.out)
    print(f"wrote {len(paths)} task files to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    out = Path(args.out)
    state = train_run(cfg, out, args.resume, args.suite, args.stop_after)
    row = state.matrix.row(state.matrix.n_rows if cfg.trainer.mode == "joint" else max(state.done, 1))
    print(json.dumps({"run_id": cfg.run_id(), "tasks_trained": state.done, "final_row": row}))
    return 0


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.ckpt)
    learner = ck.state.learner
    tasks = [t for t in import_suite(args.suite) if learner.has_task(t.task_id)]
    if not tasks:
        raise ConfigError("the suite shares no task ids with the checkpoint", "suite")
    acc, matched = {}, []
    for task in tasks:
        x, y = task.arrays("test")
        preds, chosen = learner.predict(x, args.mode, task.task_id)
        acc[task.task_id] = float(np.mean(preds == y))
        matched.append(chosen == task.task_id)
    result = {"run_id": ck.config.run_id(), "mode": args.mode, "accuracy": acc,
              "avg": float(np.mean(list(acc.values())))}
    if args.mode == "tail":
        result["match_accuracy"] = float(np.mean(np.concatenate(matched)))
    print(json.dumps(result))
    return 0


def cmd_ablate(args) -> int:
    key, sep, values = args.sweep.partition("=")
    vals = [v.strip() for v in values.split(",") if v.strip()]
    if not sep or not vals:
        raise UsageError("--sweep expects KEY=V1,V2,...")
    base = Path(args.config).read_text(encoding="utf-8")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for v in vals:
        cfg = parse_config_text(with_override(base, key, v), source=f"{args.config} [{key}={v}]")
        run_dir = out / _slug(f"{key}={v}")
        state = train_run(cfg, run_dir)
        report = run_report(state, cfg)
        rows.append([key, v, cfg.run_id(), repr(report.avg), "" if report.bwt is None else repr(report.bwt),
                     str(run_dir)])
        print(f"{key}={v}\tavg={report.avg:.4f}\tbwt={report.bwt}")
    with open(out / ABLATION_FILE, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["key", "value", "run_id", "avg", "bwt", "run_dir"])
        w.writerows(rows)
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    ck = load_checkpoint(run_dir / CHECKPOINT_FILE)
    matrix = None
    if (run_dir / EVALS_FILE).exists():
        run_id, matrix = read_evaluations(run_dir / EVALS_FILE, ck.config.suite.n_tasks)
        if run_id != ck.config.run_id():
            raise ConfigError(f"evaluations belong to run {run_id}, checkpoint to {ck.config.run_id()}", "run")
    report = run_report(ck.state, ck.config, matrix)
    emit_report(report, run_dir)
    print(json.dumps({"run_id": report.run_id, "avg": report.avg, "bwt": report.bwt}))
    return 0


COMMANDS = {"gen-suite": cmd_gen_suite, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"subexperts {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (SubExpertsError, OSError) as exc:
        print(f"subexperts {args.command}: {exc}", file=sys.stderr)
        return 2


def cli(argv: Sequence[str] | None = None) -> int:
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
