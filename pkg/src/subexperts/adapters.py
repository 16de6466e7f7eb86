"""Low-rank adapters: plain LoRA, dense top-k MoE, and masked sub-experts.

All three produce the ``beta``-scaled delta added to a frozen projection.
Rows of the input are tokens; weights follow the ``out x in`` convention so a
low-rank expert maps ``x -> x A^T B^T`` with ``A: r x d_in`` and
``B: d_out x r``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import numeric as nx
from .errors import ConfigError, ContractError, DimensionError, InputError
from .numeric import DTensor

KINDS = ("mose", "lora", "moe")


def _check_density(c: float) -> None:
    if not (0.0 < c <= 1.0) or math.isnan(c):
        raise ConfigError(f"density must lie in (0, 1], got {c}", "adapter.c")


def mask_size(density: float, n: int) -> int:
    """Number of entries kept by a top-``density`` mask over ``n`` entries.

    ``max(1, round(density * n))`` with halves rounded up.
    """
    _check_density(density)
    if n < 1:
        raise DimensionError(f"a mask needs at least one entry, got {n}")
    return max(1, int(math.floor(density * n + 0.5)))


class ScoreMask:
    """Trainable scores over one weight tensor and the binary top-c% mask they induce.

    With ``per_row=True`` each row of a 2-D tensor is ranked independently,
    which is how router rows get one mask per expert.
    """

    def __init__(self, scores: DTensor, density: float, per_row: bool = False):
        _check_density(density)
        if scores.size < 1:
            raise DimensionError("scores must have at least one entry")
        self.scores = scores
        self.density = float(density)
        self.per_row = per_row
        self.mask = np.zeros(scores.shape, dtype=bool)
        self._derived_from: np.ndarray | None = None

    @property
    def target_len(self) -> int:
        return self.scores.size

    @property
    def expected_popcount(self) -> int:
        if self.per_row:
            rows, cols = self.scores.shape
            return rows * mask_size(self.density, cols)
        return mask_size(self.density, self.target_len)

    def derive(self) -> np.ndarray:
        s = self.scores.data
        mask = np.zeros(s.shape, dtype=bool)
        if self.per_row:
            k = mask_size(self.density, s.shape[1])
            order = np.argsort(-s, axis=1, kind="stable")[:, :k]
            np.put_along_axis(mask, order, True, axis=1)
        else:
            flat = mask.reshape(-1)
            flat[nx.topk_indices(s.reshape(-1), mask_size(self.density, s.size))] = True
        self.mask = mask
        self._derived_from = s.copy()
        return mask

    def assign(self, bits: np.ndarray) -> np.ndarray:
        """Install an externally chosen mask (used by tests to force masks)."""
        bits = np.asarray(bits, dtype=bool).reshape(self.scores.shape)
        self.mask = bits.copy()
        self._derived_from = self.scores.data.copy()
        return self.mask

    def is_fresh(self) -> bool:
        return self._derived_from is not None and np.array_equal(self._derived_from, self.scores.data)

    def check_fresh(self) -> None:
        if not self.is_fresh():
            raise ContractError("mask is stale: scores changed since the last derive")


def derive_mask(sm: ScoreMask) -> np.ndarray:
    return sm.derive()


def masked_linear(x: DTensor, w: DTensor, sm: ScoreMask) -> DTensor:
    """``x (w * m)^T`` where ``m`` is the current mask of ``sm``.

    Backward gives ``w`` the masked gradient and the scores the
    straight-through gradient on all entries.
    """
    sm.check_fresh()
    if sm.scores.shape != w.shape:
        raise DimensionError(f"mask over {sm.scores.shape} applied to weight {w.shape}")
    return nx.matmul(x, nx.transpose(nx.masked_weight(w, sm.mask, sm.scores)))


def _linear(x: DTensor, w: DTensor, mask: np.ndarray | None = None) -> DTensor:
    if mask is None:
        return nx.matmul(x, nx.transpose(w))
    return nx.matmul(x, nx.transpose(nx.masked_weight(w, mask)))


@dataclass
class LowRankSubExpert:
    A: DTensor
    B: DTensor
    mask_A: ScoreMask | None = None
    mask_B: ScoreMask | None = None

    @property
    def rank(self) -> int:
        return self.A.shape[0]


@dataclass
class SparseRouter:
    W: DTensor
    top_k: int
    mask: ScoreMask | None = None

    @property
    def n_experts(self) -> int:
        return self.W.shape[0]

    @property
    def row_masks(self) -> list[np.ndarray]:
        return [] if self.mask is None else [row.copy() for row in self.mask.mask]


def _check_topk(k: int, n: int) -> None:
    if not 1 <= k <= n:
        raise ConfigError(f"top_k={k} must lie in [1, N={n}]", "adapter.top_k")


def _init_expert(rng: np.random.Generator, r: int, d_in: int, d_out: int) -> tuple[DTensor, DTensor]:
    a = DTensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), (r, d_in)), requires_grad=True)
    b = DTensor(np.zeros((d_out, r)), requires_grad=True)
    return a, b


def _mix(x: DTensor, gates: DTensor, experts: list[tuple[DTensor, DTensor]],
         masks: list[tuple[np.ndarray | ScoreMask | None, np.ndarray | ScoreMask | None]]) -> DTensor:
    out = None
    used = (gates.data > 0).any(axis=0)
    for j, ((a, b), (ma, mb)) in enumerate(zip(experts, masks)):
        if not used[j]:
            continue
        h = masked_linear(x, a, ma) if isinstance(ma, ScoreMask) else _linear(x, a, ma)
        h = masked_linear(h, b, mb) if isinstance(mb, ScoreMask) else _linear(h, b, mb)
        term = nx.row_scale(h, nx.column(gates, j))
        out = term if out is None else nx.add(out, term)
    return out


def _as_rows(x: DTensor, d_in: int) -> DTensor:
    x = nx.as_tensor(x)
    if x.data.ndim == 1:
        x = nx.reshape(x, (1, x.size))
    if x.data.ndim != 2 or x.shape[1] != d_in:
        raise DimensionError(f"adapter input {x.shape} does not have width {d_in}")
    return x


class MoSELayerState:
    """N masked low-rank sub-experts with a masked top-k router at one projection."""

    def __init__(self, d_in: int, d_out: int, n_experts: int, top_k: int, rank: int, alpha: float,
                 density: float, rng: np.random.Generator, layer: int = 0, proj: str = "q"):
        if rank < 1:
            raise ConfigError("rank must be >= 1", "adapter.r")
        _check_topk(top_k, n_experts)
        _check_density(density)
        self.d_in, self.d_out, self.rank = d_in, d_out, rank
        self.alpha = float(alpha)
        self.beta = self.alpha / rank
        self.density = float(density)
        self.layer, self.proj = layer, proj
        self.experts: list[LowRankSubExpert] = []
        for _ in range(n_experts):
            a, b = _init_expert(rng, rank, d_in, d_out)
            self.experts.append(LowRankSubExpert(
                a, b,
                ScoreMask(DTensor(np.zeros(a.shape), requires_grad=True), density),
                ScoreMask(DTensor(np.zeros(b.shape), requires_grad=True), density),
            ))
        w = DTensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), (n_experts, d_in)), requires_grad=True)
        self.router = SparseRouter(w, top_k, ScoreMask(DTensor(np.zeros(w.shape), requires_grad=True),
                                                        density, per_row=True))
        self.frozen_masks: dict[int, dict[str, np.ndarray]] = {}
        self.reinit_scores(rng)

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def top_k(self) -> int:
        return self.router.top_k

    def score_masks(self) -> dict[str, ScoreMask]:
        out = {"router": self.router.mask}
        for j, e in enumerate(self.experts):
            out[f"e{j}.A"] = e.mask_A
            out[f"e{j}.B"] = e.mask_B
        return out

    def params(self) -> dict[str, DTensor]:
        out = {"router": self.router.W}
        for j, e in enumerate(self.experts):
            out[f"e{j}.A"] = e.A
            out[f"e{j}.B"] = e.B
        return out

    def scores(self) -> dict[str, DTensor]:
        return {name: sm.scores for name, sm in self.score_masks().items()}

    def reinit_scores(self, rng: np.random.Generator) -> None:
        for sm in self.score_masks().values():
            sm.scores.data[...] = rng.random(sm.scores.shape)
            sm.derive()

    def derive_masks(self) -> None:
        for sm in self.score_masks().values():
            sm.derive()

    def live_masks(self) -> dict[str, np.ndarray]:
        return {name: sm.mask.copy() for name, sm in self.score_masks().items()}

    def __call__(self, x: DTensor, task: int | None = None) -> DTensor:
        return mose_forward(self, x, task)


def route(router: SparseRouter, x: DTensor, mask: np.ndarray | None = None) -> tuple[list[int], list[float]]:
    """Top-k experts for one input vector and their renormalised gates, best first."""
    x = _as_rows(x, router.W.shape[1])
    if x.shape[0] != 1:
        raise DimensionError("route takes a single input vector")
    _check_topk(router.top_k, router.n_experts)
    if mask is not None:
        logits = _linear(x, router.W, mask)
    elif router.mask is not None:
        logits = masked_linear(x, router.W, router.mask)
    else:
        logits = _linear(x, router.W)
    gates = nx.topk_gates(logits, router.top_k).data[0]
    idx = nx.topk_indices(logits.data[0], router.top_k)
    return idx, [float(gates[j]) for j in idx]


def mose_forward(state: MoSELayerState, x: DTensor, task: int | None = None) -> DTensor:
    """``beta * sum_j gate_j (B_j * xi_B)(A_j * xi_A) x`` over the routed experts.

    With ``task=None`` the live, freshly derived masks are used and gradients
    reach the scores; otherwise the masks frozen for ``task`` are applied.
    """
    x = _as_rows(x, state.d_in)
    if task is None:
        logits = masked_linear(x, state.router.W, state.router.mask)
        masks = [(e.mask_A, e.mask_B) for e in state.experts]
    else:
        frozen = state.frozen_masks.get(task)
        if frozen is None:
            raise ContractError(f"no masks recorded for task {task} at layer {state.layer}/{state.proj}")
        logits = _linear(x, state.router.W, frozen["router"])
        masks = [(frozen[f"e{j}.A"], frozen[f"e{j}.B"]) for j in range(state.n_experts)]
    gates = nx.topk_gates(logits, state.top_k)
    experts = [(e.A, e.B) for e in state.experts]
    return nx.scale(_mix(x, gates, experts, masks), state.beta)


def snapshot_masks(state: MoSELayerState, task_id: int) -> dict[str, np.ndarray]:
    if task_id in state.frozen_masks:
        raise ContractError(f"masks for task {task_id} already recorded at layer {state.layer}/{state.proj}")
    snap = state.live_masks()
    for arr in snap.values():
        arr.flags.writeable = False
    state.frozen_masks[task_id] = snap
    return snap


class LoRAAdapter:
    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float, rng: np.random.Generator,
                 layer: int = 0, proj: str = "q"):
        if rank < 1:
            raise ConfigError("rank must be >= 1", "adapter.r")
        self.A, self.B = _init_expert(rng, rank, d_in, d_out)
        self.rank, self.alpha, self.beta = rank, float(alpha), float(alpha) / rank
        self.d_in, self.d_out = d_in, d_out
        self.layer, self.proj = layer, proj

    def params(self) -> dict[str, DTensor]:
        return {"A": self.A, "B": self.B}

    def __call__(self, x: DTensor, task: int | None = None) -> DTensor:
        return lora_forward(self.A, self.B, self.beta, x)


def lora_forward(A: DTensor, B: DTensor, beta: float, x: DTensor) -> DTensor:
    x = _as_rows(x, A.shape[1])
    if B.shape[1] != A.shape[0]:
        raise DimensionError(f"LoRA factors do not chain: A {A.shape}, B {B.shape}")
    return nx.scale(_linear(_linear(x, A), B), beta)


class MoEAdapter:
    def __init__(self, d_in: int, d_out: int, n_experts: int, top_k: int, rank: int, alpha: float,
                 rng: np.random.Generator, layer: int = 0, proj: str = "q"):
        if rank < 1:
            raise ConfigError("rank must be >= 1", "adapter.r")
        _check_topk(top_k, n_experts)
        self.experts = [LowRankSubExpert(*_init_expert(rng, rank, d_in, d_out)) for _ in range(n_experts)]
        self.router = SparseRouter(
            DTensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), (n_experts, d_in)), requires_grad=True), top_k)
        self.rank, self.alpha, self.beta = rank, float(alpha), float(alpha) / rank
        self.d_in, self.d_out = d_in, d_out
        self.layer, self.proj = layer, proj

    def params(self) -> dict[str, DTensor]:
        out = {"router": self.router.W}
        for j, e in enumerate(self.experts):
            out[f"e{j}.A"] = e.A
            out[f"e{j}.B"] = e.B
        return out

    def __call__(self, x: DTensor, task: int | None = None) -> DTensor:
        return nx.scale(moe_forward([(e.A, e.B) for e in self.experts], self.router.W, self.router.top_k, x),
                        self.beta)


def moe_forward(experts: list[tuple[DTensor, DTensor]], router_w: DTensor, k: int, x: DTensor) -> DTensor:
    """Unscaled dense top-k mixture ``sum_j gate_j B_j A_j x``."""
    x = _as_rows(x, router_w.shape[1])
    _check_topk(k, len(experts))
    gates = nx.topk_gates(_linear(x, router_w), k)
    return _mix(x, gates, experts, [(None, None)] * len(experts))


# --- configuration and accounting -------------------------------------------

@dataclass
class AdapterConfig:
    kind: str = "mose"
    n_experts: int = 2
    top_k: int = 2
    c: float = 0.30
    r: int = 2
    alpha: float = 8.0
    exclude: tuple[int, int] | None = None
    projections: tuple[str, ...] = ("q", "v")

    @property
    def beta(self) -> float:
        return self.alpha / self.r

    def validate(self, n_layers: int) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}", "adapter.kind")
        if self.r < 1:
            raise ConfigError("rank must be >= 1", "adapter.r")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive", "adapter.alpha")
        if self.kind != "lora":
            if self.n_experts < 1:
                raise ConfigError("need at least one expert", "adapter.n_experts")
            _check_topk(self.top_k, self.n_experts)
        if self.kind == "mose":
            _check_density(self.c)
        if self.exclude is not None:
            a, b = self.exclude
            if not (0 <= a <= b < n_layers):
                raise ConfigError(f"exclusion [{a}-{b}] outside [0, {n_layers})", "adapter.exclude")
        if not self.layers(n_layers):
            raise ConfigError("every layer is excluded; nothing to adapt", "adapter.exclude")

    def layers(self, n_layers: int) -> list[int]:
        if self.exclude is None:
            return list(range(n_layers))
        a, b = self.exclude
        return [l for l in range(n_layers) if not a <= l <= b]

    def skipped(self, n_layers: int) -> list[int]:
        return [l for l in range(n_layers) if l not in self.layers(n_layers)]


def build_adapter(cfg: AdapterConfig, d_model: int, rng: np.random.Generator, layer: int, proj: str):
    if cfg.kind == "lora":
        return LoRAAdapter(d_model, d_model, cfg.r, cfg.alpha, rng, layer, proj)
    if cfg.kind == "moe":
        return MoEAdapter(d_model, d_model, cfg.n_experts, cfg.top_k, cfg.r, cfg.alpha, rng, layer, proj)
    return MoSELayerState(d_model, d_model, cfg.n_experts, cfg.top_k, cfg.r, cfg.alpha, cfg.c, rng, layer, proj)


@dataclass(frozen=True)
class ParamCount:
    adapter: int
    router: int = 0
    prompt: int = 0
    key: int = 0

    @property
    def total(self) -> int:
        return self.adapter + self.router + self.prompt + self.key


def count_trainable(cfg: AdapterConfig, d_model: int, n_layers: int, prompt_len: int = 0,
                    prompt_layers: int = 0, with_key: bool = False) -> int:
    return param_breakdown(cfg, d_model, n_layers, prompt_len, prompt_layers, with_key).total


def param_breakdown(cfg: AdapterConfig, d_model: int, n_layers: int, prompt_len: int = 0,
                    prompt_layers: int = 0, with_key: bool = False) -> ParamCount:
    """Trainable parameters attributable to one task.

    LoRA and MoE count every adapter entry. MoSE counts only mask-selected
    entries: the union of the expert masks plus the router-row masks. Prompt
    and key parameters are added when requested.
    """
    sites = len(cfg.layers(n_layers)) * len(cfg.projections)
    d_in = d_out = d_model
    lora_site = cfg.r * (d_in + d_out)
    if cfg.kind == "lora":
        adapter, router = sites * lora_site, 0
    elif cfg.kind == "moe":
        adapter, router = sites * cfg.n_experts * lora_site, sites * cfg.n_experts * d_in
    else:
        per_expert = mask_size(cfg.c, cfg.r * d_in) + mask_size(cfg.c, d_out * cfg.r)
        adapter = sites * cfg.n_experts * per_expert
        router = sites * cfg.n_experts * mask_size(cfg.c, d_in)
    return ParamCount(adapter, router, prompt_len * d_model * prompt_layers, d_model if with_key else 0)
