"""A tiny frozen transformer encoder standing in for a pre-trained model.

Weights are drawn once from a seed and marked read-only. Adapters hook into
the query and value projections of chosen layers; prompts are extra rows that
take part in a layer's attention and are dropped from its output.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numeric as nx
from .errors import ConfigError, InputError
from .numeric import DTensor

AdapterHook = Callable[[DTensor], DTensor]
PROJECTIONS = ("q", "v")


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq: int = 32
    d_ff: int = 128

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "max_seq", "d_ff"):
            if int(getattr(self, name)) < 1:
                raise ConfigError("must be a positive integer", f"backbone.{name}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}",
                              "backbone.n_heads")


@dataclass
class FrozenBackbone:
    config: BackboneConfig
    seed: int
    weights: dict[str, np.ndarray] = field(repr=False)

    @property
    def d_model(self) -> int:
        return self.config.d_model

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(self.weights[name].tobytes())
        return h.hexdigest()


def build_backbone(config: BackboneConfig | None = None, seed: int = 0) -> FrozenBackbone:
    config = config or BackboneConfig()
    config.validate()
    d, f = config.d_model, config.d_ff
    rng = nx.stream(seed, "backbone")
    std = 1.0 / np.sqrt(d)
    w: dict[str, np.ndarray] = {
        "tok_emb": rng.normal(0.0, std, (config.vocab_size, d)),
        "pos_emb": rng.normal(0.0, std, (config.max_seq, d)),
    }
    for l in range(config.n_layers):
        for proj in ("wq", "wk", "wv", "wo"):
            w[f"{l}.{proj}"] = rng.normal(0.0, std, (d, d))
        w[f"{l}.w1"] = rng.normal(0.0, std, (d, f))
        w[f"{l}.b1"] = np.zeros(f)
        w[f"{l}.w2"] = rng.normal(0.0, std, (f, d))
        w[f"{l}.b2"] = np.zeros(d)
        for ln in ("ln1", "ln2"):
            w[f"{l}.{ln}.g"] = np.ones(d)
            w[f"{l}.{ln}.b"] = np.zeros(d)
    w["lnf.g"] = np.ones(d)
    w["lnf.b"] = np.zeros(d)
    for arr in w.values():
        arr.flags.writeable = False
    return FrozenBackbone(config, int(seed), w)


def _as_batch(b: FrozenBackbone, tokens) -> np.ndarray:
    arr = np.asarray(tokens)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise InputError(f"expected a nonempty token sequence or batch, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise InputError("token ids must be integers")
    if arr.min() < 0 or arr.max() >= b.config.vocab_size:
        raise InputError(f"token id outside [0, {b.config.vocab_size})")
    if arr.shape[1] > b.config.max_seq:
        raise InputError(f"sequence length {arr.shape[1]} exceeds max_seq={b.config.max_seq}")
    return arr


def _attention(b: FrozenBackbone, l: int, x: DTensor, hooks: Mapping) -> DTensor:
    w = b.weights
    n, length, d = x.shape
    heads = b.config.n_heads
    dh = d // heads
    flat = nx.reshape(x, (n * length, d))

    def project(name: str, tag: str | None) -> DTensor:
        out = nx.matmul(flat, DTensor(w[f"{l}.{name}"]))
        hook = hooks.get((l, tag)) if tag else None
        if hook is not None:
            out = nx.add(out, hook(flat))
        return nx.permute(nx.reshape(out, (n, length, heads, dh)), (0, 2, 1, 3))

    q = project("wq", "q")
    k = project("wk", None)
    v = project("wv", "v")
    att = nx.softmax(nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / np.sqrt(dh)), axis=-1)
    ctx = nx.reshape(nx.permute(nx.matmul(att, v), (0, 2, 1, 3)), (n * length, d))
    return nx.reshape(nx.matmul(ctx, DTensor(w[f"{l}.wo"])), (n, length, d))


def forward(b: FrozenBackbone, tokens, adapters: Mapping[tuple[int, str], AdapterHook] | None = None,
            prompts: Mapping[int, DTensor] | None = None, head: tuple[DTensor, DTensor] | None = None,
            skip_layers: Sequence[int] = ()) -> tuple[list[DTensor], DTensor | None]:
    """Run the encoder on a token sequence or a batch of equal-length sequences.

    Returns the hidden state after the embedding and after every layer, each
    of shape ``batch x L x D``, plus the head logits (``None`` without a head).
    Adapter hooks receive the normalised layer input flattened to
    ``(batch*L) x D`` and return the already-scaled delta for that projection.
    """
    tok = _as_batch(b, tokens)
    adapters = dict(adapters or {})
    prompts = dict(prompts or {})
    skip = set(skip_layers)
    for (l, tag) in adapters:
        if not 0 <= l < b.n_layers or tag not in PROJECTIONS:
            raise InputError(f"adapter site ({l}, {tag!r}) outside the backbone")
        if l in skip:
            raise ConfigError(f"adapter attached to skipped layer {l}", "adapter.exclude")
    for l, e in prompts.items():
        if not 0 <= l < b.n_layers:
            raise InputError(f"prompt layer {l} outside [0, {b.n_layers})")
        if l in skip:
            raise ConfigError(f"prompt attached to skipped layer {l}", "adapter.exclude")
        if e.data.ndim != 2 or e.shape[1] != b.d_model:
            raise InputError(f"prompt for layer {l} has shape {e.shape}, expected L_e x {b.d_model}")

    w = b.weights
    n, length = tok.shape
    x = DTensor(w["tok_emb"][tok] + w["pos_emb"][:length][None, :, :])
    hidden = [x]
    for l in range(b.n_layers):
        inp = x
        e = prompts.get(l)
        if e is not None:
            inp = nx.concat([nx.repeat_batch(e, n), x], axis=1)
        h = nx.layer_norm(inp, w[f"{l}.ln1.g"], w[f"{l}.ln1.b"])
        att = _attention(b, l, h, adapters)
        if e is not None:
            att = nx.slice_axis(att, 1, e.shape[0], e.shape[0] + length)
        x = nx.add(x, att)
        h = nx.layer_norm(x, w[f"{l}.ln2.g"], w[f"{l}.ln2.b"])
        ff = nx.gelu(nx.add(nx.matmul(h, DTensor(w[f"{l}.w1"])), DTensor(w[f"{l}.b1"])))
        ff = nx.add(nx.matmul(ff, DTensor(w[f"{l}.w2"])), DTensor(w[f"{l}.b2"]))
        x = nx.add(x, ff)
        hidden.append(x)
    if head is None:
        return hidden, None
    pooled = nx.mean(nx.layer_norm(x, w["lnf.g"], w["lnf.b"]), axis=1)
    weight, bias = head
    return hidden, nx.add(nx.matmul(pooled, weight), bias)


def pooled_features(b: FrozenBackbone, tokens) -> np.ndarray:
    """Mean-pooled final hidden state of the plain frozen forward, one row per sequence."""
    hidden, _ = forward(b, tokens)
    w = b.weights
    return nx.layer_norm(hidden[-1], w["lnf.g"], w["lnf.b"]).data.mean(axis=1)


def query_features(b: FrozenBackbone, tokens, chunk: int = 256) -> np.ndarray:
    """Unit-norm task-matching features for a batch of sequences."""
    tok = _as_batch(b, tokens)
    rows = [pooled_features(b, tok[i:i + chunk]) for i in range(0, tok.shape[0], chunk)]
    return nx.l2_normalize(np.concatenate(rows, axis=0))


def query_feature(b: FrozenBackbone, tokens) -> DTensor:
    seq = np.asarray(tokens)
    if seq.ndim != 1 or seq.size == 0:
        raise InputError("query_feature needs one nonempty token sequence")
    return DTensor(query_features(b, seq)[0])
