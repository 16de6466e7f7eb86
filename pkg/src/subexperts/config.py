"""Run configuration: a sectioned ``key = value`` file, validated as a whole.

Every key is optional except that the file must parse; unknown sections and
keys are rejected so that a misspelt sweep key cannot silently fall back to a
default. Errors name the offending ``section.key``.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .adapters import AdapterConfig
from .backbone import BackboneConfig
from .errors import ConfigError
from .suite import SuiteConfig
from .trainer import PromptConfig, TrainConfig

SEED_ENV = "MOSE_SEED"


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none", "auto") else int(text)


def _layer_range(text: str) -> tuple[int, int] | None:
    """``"a-b"`` or ``"a"`` (inclusive), ``"none"`` for no exclusion."""
    t = text.strip().strip("[]")
    if t.lower() in ("", "none"):
        return None
    lo, sep, hi = t.partition("-")
    return (int(lo), int(hi)) if sep else (int(lo), int(lo))


def _kind(text: str) -> str:
    return text.strip().lower()


def _projections(text: str) -> tuple[str, ...]:
    return tuple(p.strip().lower() for p in text.replace("&", ",").split(",") if p.strip())


# section -> key -> (parser, attribute)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], str]]] = {
    "backbone": {
        "vocab_size": (int, "vocab_size"), "d_model": (int, "d_model"), "n_layers": (int, "n_layers"),
        "n_heads": (int, "n_heads"), "max_seq": (int, "max_seq"), "d_ff": (int, "d_ff"), "seed": (int, "seed"),
    },
    "adapter": {
        "kind": (_kind, "kind"), "n_experts": (int, "n_experts"), "top_k": (int, "top_k"), "c": (float, "c"),
        "r": (int, "r"), "alpha": (float, "alpha"), "exclude": (_layer_range, "exclude"),
        "projections": (_projections, "projections"),
    },
    "prompt": {"length": (int, "length"), "start": (_opt_int, "start"), "end": (_opt_int, "end")},
    "trainer": {
        "lambda_pull": (float, "lambda_pull"), "epochs": (int, "epochs"), "batch_size": (int, "batch_size"),
        "lr": (float, "lr"), "optimizer": (_kind, "optimizer"), "seed": (int, "seed"), "mode": (_kind, "mode"),
        "eval_mode": (_kind, "eval_mode"), "grad_clip": (float, "grad_clip"),
        "private_lr_scale": (float, "private_lr_scale"),
    },
    "suite": {
        "n_tasks": (int, "n_tasks"), "n_train": (int, "n_train"), "n_test": (int, "n_test"),
        "seq_len": (int, "seq_len"), "sigma": (float, "sigma"), "seed": (int, "seed"),
        "vocab_size": (int, "vocab_size"), "block_size": (int, "block_size"), "n_fillers": (int, "n_fillers"),
    },
    "run": {"out": (str, "out")},
}

DEFAULT_TRAIN = TrainConfig()


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    backbone_seed: int = 0
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    trainer: TrainConfig = field(default_factory=lambda: dataclasses.replace(DEFAULT_TRAIN))
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    out: str | None = None

    def validate(self) -> "RunConfig":
        self.backbone.validate()
        self.adapter.validate(self.backbone.n_layers)
        bad = [p for p in self.adapter.projections if p not in ("q", "v")]
        if bad or not self.adapter.projections:
            raise ConfigError(f"projections must be drawn from q, v; got {self.adapter.projections}",
                              "adapter.projections")
        self.prompt.validate(self.adapter.layers(self.backbone.n_layers), self.backbone.n_layers)
        self.trainer.validate()
        self.suite.validate()
        if self.suite.vocab_size > self.backbone.vocab_size:
            raise ConfigError(f"suite needs {self.suite.vocab_size} tokens but the backbone has "
                              f"{self.backbone.vocab_size}", "suite.vocab_size")
        if self.suite.seq_len > self.backbone.max_seq:
            raise ConfigError(f"seq_len exceeds backbone.max_seq={self.backbone.max_seq}", "suite.seq_len")
        return self

    def sections(self) -> dict[str, dict[str, Any]]:
        objs = {"backbone": self.backbone, "adapter": self.adapter, "prompt": self.prompt,
                "trainer": self.trainer, "suite": self.suite}
        out: dict[str, dict[str, Any]] = {}
        for sec, keys in SCHEMA.items():
            if sec == "run":
                continue
            out[sec] = {}
            for key, (_, attr) in keys.items():
                if sec == "backbone" and key == "seed":
                    out[sec][key] = self.backbone_seed
                else:
                    out[sec][key] = getattr(objs[sec], attr)
        return out

    def to_text(self) -> str:
        """Canonical file form; parsing it yields an equal config."""
        lines = []
        for sec, values in self.sections().items():
            lines.append(f"[{sec}]")
            for key, v in values.items():
                lines.append(f"{key} = {_render(key, v)}")
            lines.append("")
        if self.out is not None:
            lines += ["[run]", f"out = {self.out}", ""]
        return "\n".join(lines)

    def digest(self) -> str:
        body = "\n".join(l for l in self.to_text().splitlines() if not l.startswith("out ="))
        return hashlib.sha256(body.encode("utf-8")).hexdigest()

    def run_id(self) -> str:
        return self.digest()[:12]


def _render(key: str, v: Any) -> str:
    if v is None:
        return "none"
    if key == "exclude":
        return f"{v[0]}-{v[1]}"
    if key == "projections":
        return ",".join(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config_text(text: str, env: dict[str, str] | None = None, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {source}: {exc}") from None
    values: dict[str, dict[str, Any]] = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]", sec)
        values[sec] = {}
        for key, raw in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError("unknown key", f"{sec}.{key}")
            parser, attr = SCHEMA[sec][key]
            try:
                values[sec][attr] = parser(raw)
            except (TypeError, ValueError):
                raise ConfigError(f"cannot read {raw!r} as {getattr(parser, '__name__', 'value')}",
                                  f"{sec}.{key}") from None
    bb = dict(values.get("backbone", {}))
    seed = bb.pop("seed", 0)
    train = dataclasses.asdict(DEFAULT_TRAIN)
    train.update(values.get("trainer", {}))
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            train["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env[SEED_ENV]!r} is not an integer", "trainer.seed") from None
    backbone = BackboneConfig(**bb)
    suite = dict(values.get("suite", {}))
    suite.setdefault("vocab_size", backbone.vocab_size)
    cfg = RunConfig(
        backbone=backbone,
        backbone_seed=seed,
        adapter=AdapterConfig(**values.get("adapter", {})),
        prompt=PromptConfig(**values.get("prompt", {})),
        trainer=TrainConfig(**train),
        suite=SuiteConfig(**suite),
        out=values.get("run", {}).get("out"),
    )
    return cfg.validate()


def parse_config(path: str | os.PathLike, env: dict[str, str] | None = None) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, env, str(path))


def with_override(text: str, dotted: str, value: str) -> str:
    """Config text with ``section.key`` set to ``value``; the key must be known."""
    sec, _, key = dotted.partition(".")
    if sec not in SCHEMA or key not in SCHEMA[sec]:
        raise ConfigError("unknown key", dotted)
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.read_string(text)
    if not cp.has_section(sec):
        cp.add_section(sec)
    cp.set(sec, key, value)
    lines = []
    for s in cp.sections():
        lines.append(f"[{s}]")
        lines += [f"{k} = {v}" for k, v in cp.items(s)]
        lines.append("")
    return "\n".join(lines)
