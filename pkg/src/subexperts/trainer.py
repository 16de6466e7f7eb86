"""Sequential task training with per-task masks, prompts, keys and heads.

A :class:`ContinualLearner` owns the frozen backbone, one adapter per adapted
``(layer, projection)`` site, the prompt pool, the key set and the per-task
classification heads. Each task:

1. redraws every score tensor from the task's stream (``reinit_scores``),
2. trains for ``epochs`` passes, re-deriving the top-c% masks before every
   batch and updating only mask-selected adapter entries,
3. freezes its masks, prompts, key and head into a :class:`TaskSnapshot`.

Adapter weights themselves are never frozen; later tasks may overwrite
entries an earlier task also selected.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numeric as nx
from .adapters import AdapterConfig, MoSELayerState, build_adapter, param_breakdown, snapshot_masks
from .backbone import FrozenBackbone, forward, query_features
from .errors import ConfigError, ContractError, InputError, TrainingError
from .metrics import AccuracyMatrix, GrowthCurve, parameter_growth
from .numeric import DTensor
from .prompts import PromptPool, TaskKeySet, match_tasks, pull_loss, total_loss
from .suite import SyntheticTask

log = logging.getLogger(__name__)

Site = tuple[int, str]
MODES = ("sequential", "joint")
EVAL_MODES = ("til", "tail")
OPTIMIZERS = ("adam", "sgd")


@dataclass
class TrainConfig:
    lambda_pull: float = 0.1
    epochs: int = 15
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    mode: str = "sequential"
    eval_mode: str = "til"
    grad_clip: float = 1.0
    # lr multiplier for tensors owned by one task (scores, prompts, keys, heads)
    private_lr_scale: float = 20.0

    def validate(self) -> None:
        if self.lambda_pull < 0:
            raise ConfigError("must be >= 0", "trainer.lambda_pull")
        if self.epochs < 1:
            raise ConfigError("must be >= 1", "trainer.epochs")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "trainer.batch_size")
        if not self.lr > 0:
            raise ConfigError("must be positive", "trainer.lr")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"must be one of {OPTIMIZERS}", "trainer.optimizer")
        if self.mode not in MODES:
            raise ConfigError(f"must be one of {MODES}", "trainer.mode")
        if self.eval_mode not in EVAL_MODES:
            raise ConfigError(f"must be one of {EVAL_MODES}", "trainer.eval_mode")
        if not self.grad_clip > 0:
            raise ConfigError("must be positive", "trainer.grad_clip")
        if not self.private_lr_scale > 0:
            raise ConfigError("must be positive", "trainer.private_lr_scale")


@dataclass
class PromptConfig:
    length: int = 1
    start: int | None = None
    end: int | None = None

    def layers(self, adapted: Sequence[int]) -> list[int]:
        if self.length == 0:
            return []
        lo = min(adapted) if self.start is None else self.start
        hi = max(adapted) if self.end is None else self.end
        return list(range(lo, hi + 1))

    def validate(self, adapted: Sequence[int], n_layers: int) -> None:
        if self.length < 0:
            raise ConfigError("must be >= 0", "prompt.length")
        if self.length == 0:
            return
        for name in ("start", "end"):
            v = getattr(self, name)
            if v is not None and not 0 <= v < n_layers:
                raise ConfigError(f"layer {v} outside [0, {n_layers})", f"prompt.{name}")
        layers = self.layers(adapted)
        if not layers:
            raise ConfigError("empty prompted layer range", "prompt.start")
        skipped = [l for l in layers if l not in adapted]
        if skipped:
            raise ConfigError(f"prompted layers {skipped} are excluded from adaptation", "prompt.start")


@dataclass
class TrainHooks:
    """Test instrumentation. Production runs leave every field unset."""

    force_masks: Callable[[int, Site, str, tuple[int, ...]], np.ndarray] | None = None
    force_scores: Callable[[int, Site, str, tuple[int, ...]], np.ndarray] | None = None
    freeze_scores: bool = False
    on_step: Callable[["StepRecord"], None] | None = None
    before_step: Callable[["ContinualLearner"], None] | None = None


@dataclass(frozen=True)
class StepRecord:
    step: int
    task: int
    epoch: int
    task_loss: float
    pull_loss: float
    total_loss: float


@dataclass(frozen=True)
class TaskSnapshot:
    task_id: int
    masks: dict[str, dict[str, np.ndarray]]
    prompts: dict[int, np.ndarray]
    key: np.ndarray
    heads: dict[int, tuple[np.ndarray, np.ndarray]]
    stamp: dict[str, float] = field(default_factory=dict)

    def flat_masks(self) -> dict[str, np.ndarray]:
        return {f"{site}/{name}": bits for site, per in self.masks.items() for name, bits in per.items()}


def site_name(site: Site) -> str:
    return f"{site[0]}.{site[1]}"


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=arr.dtype, copy=True)
    out.flags.writeable = False
    return out


class Optimizer:
    """Adam (or plain SGD) whose updates can be restricted to a boolean mask.

    Moment entries outside the mask are neither read nor written.
    """

    def __init__(self, kind: str = "adam", lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.kind, self.lr, self.betas, self.eps = kind, lr, betas, eps
        self.state: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.t = 0

    def reset(self, params: Iterable[DTensor] | None = None) -> None:
        if params is None:
            self.state.clear()
        else:
            for p in params:
                self.state.pop(id(p), None)
        self.t = 0

    def tick(self) -> None:
        self.t += 1

    def update(self, p: DTensor, mask: np.ndarray | None = None, scale: float = 1.0) -> None:
        g = p.grad
        if g is None:
            return
        sel = slice(None) if mask is None else mask
        lr = self.lr * scale
        if self.kind == "sgd":
            p.data[sel] -= lr * g[sel]
            return
        m, v = self.state.setdefault(id(p), (np.zeros_like(p.data), np.zeros_like(p.data)))
        b1, b2 = self.betas
        m[sel] = b1 * m[sel] + (1 - b1) * g[sel]
        v[sel] = b2 * v[sel] + (1 - b2) * g[sel] ** 2
        mhat = m[sel] / (1 - b1 ** self.t)
        vhat = v[sel] / (1 - b2 ** self.t)
        p.data[sel] -= lr * mhat / (np.sqrt(vhat) + self.eps)


class ContinualLearner:
    def __init__(self, backbone: FrozenBackbone, adapter: AdapterConfig, prompt: PromptConfig | None = None,
                 train: TrainConfig | None = None, hooks: TrainHooks | None = None):
        self.backbone = backbone
        self.adapter_cfg = adapter
        self.prompt_cfg = prompt or PromptConfig()
        self.cfg = train or TrainConfig()
        self.hooks = hooks or TrainHooks()
        n_layers, d = backbone.n_layers, backbone.d_model
        adapter.validate(n_layers)
        self.layers = adapter.layers(n_layers)
        self.prompt_cfg.validate(self.layers, n_layers)
        self.cfg.validate()
        rng = nx.stream(self.cfg.seed, "adapters")
        self.sites: dict[Site, object] = {}
        for l in self.layers:
            for proj in adapter.projections:
                self.sites[(l, proj)] = build_adapter(adapter, d, rng, l, proj)
        self.pool = PromptPool(self.prompt_cfg.length, self.prompt_cfg.layers(self.layers), d)
        self.keys = TaskKeySet(d)
        self.heads: dict[int, tuple[DTensor, DTensor]] = {}
        self.snapshots: dict[int, TaskSnapshot] = {}
        self.head_owner: dict[int, int] = {}
        self.opt = Optimizer(self.cfg.optimizer, self.cfg.lr)
        self.step = 0
        self._open: int | None = None
        self._reinit_for: int | None = None

    # --- state views ---------------------------------------------------------

    @property
    def is_mose(self) -> bool:
        return self.adapter_cfg.kind == "mose"

    def mose_sites(self) -> dict[Site, MoSELayerState]:
        return {s: a for s, a in self.sites.items() if isinstance(a, MoSELayerState)}

    def adapter_params(self) -> dict[str, DTensor]:
        return {f"{site_name(s)}/{n}": p for s, a in self.sites.items() for n, p in a.params().items()}

    def score_tensors(self) -> dict[str, DTensor]:
        return {f"{site_name(s)}/{n}": t for s, a in self.mose_sites().items() for n, t in a.scores().items()}

    def live_masks(self) -> dict[str, np.ndarray]:
        return {f"{site_name(s)}/{n}": m for s, a in self.mose_sites().items() for n, m in a.live_masks().items()}

    def has_task(self, task: int) -> bool:
        return task in self.head_owner

    def completed_tasks(self) -> list[int]:
        return sorted(self.head_owner)

    # --- task lifecycle ------------------------------------------------------

    def reinit_scores(self, t: int) -> None:
        """Redraw every score tensor for task ``t`` and reset adapter optimiser moments."""
        if self._open is not None:
            raise ContractError(f"reinit_scores called while task {self._open} is in progress")
        rng = nx.stream(self.cfg.seed, "scores", t)
        for site, state in self.mose_sites().items():
            for name, sm in state.score_masks().items():
                draw = rng.random(sm.scores.shape)
                if self.hooks.force_scores is not None:
                    draw = np.asarray(self.hooks.force_scores(t, site, name, sm.scores.shape), dtype=np.float64)
                sm.scores.data[...] = draw
        self._derive_masks(t)
        self.opt.reset()
        self._reinit_for = t

    def _derive_masks(self, t: int) -> None:
        for site, state in self.mose_sites().items():
            for name, sm in state.score_masks().items():
                if self.hooks.force_masks is not None:
                    sm.assign(self.hooks.force_masks(t, site, name, sm.scores.shape))
                else:
                    sm.derive()

    def _begin(self, phase: int, heads: dict[int, int], first_queries: np.ndarray) -> None:
        if self._reinit_for != phase:
            raise ContractError(f"reinit_scores({phase}) must run before training phase {phase}")
        if phase in self.snapshots:
            raise ContractError(f"task {phase} was already trained")
        self._open = phase
        self.pool.add_task(phase, nx.stream(self.cfg.seed, "prompt", phase))
        self.keys.init_key(phase, first_queries)
        d = self.backbone.d_model
        for task, n_classes in heads.items():
            if task in self.head_owner or task in self.heads:
                raise ContractError(f"head for task {task} already exists")
            rng = nx.stream(self.cfg.seed, "head", task)
            self.heads[task] = (DTensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d, n_classes)), requires_grad=True),
                                DTensor(np.zeros(n_classes), requires_grad=True))

    def _finish(self, phase: int, heads: Iterable[int], stamp: dict[str, float]) -> TaskSnapshot:
        masks = {}
        for site, state in self.mose_sites().items():
            masks[site_name(site)] = snapshot_masks(state, phase)
        prompts = {l: _readonly(e.data) for l, e in self.pool.for_task(phase).items()}
        self.pool.freeze(phase)
        self.keys.freeze(phase)
        head_arrays = {}
        for task in heads:
            w, b = self.heads[task]
            w.requires_grad = b.requires_grad = False
            head_arrays[task] = (_readonly(w.data), _readonly(b.data))
            self.head_owner[task] = phase
        snap = TaskSnapshot(phase, masks, prompts, _readonly(self.keys.keys[phase].data), head_arrays, stamp)
        self.snapshots[phase] = snap
        self._open = None
        self._reinit_for = None
        return snap

    # --- forward paths ---------------------------------------------------------

    def _hooks(self, phase: int | None) -> dict:
        return {site: (lambda x, a=a: a(x, phase)) for site, a in self.sites.items()}

    def _pooled(self, tokens: np.ndarray, phase: int | None, prompts: dict[int, DTensor]) -> DTensor:
        w = self.backbone.weights
        hidden, _ = forward(self.backbone, tokens, self._hooks(phase), prompts,
                            skip_layers=self.adapter_cfg.skipped(self.backbone.n_layers))
        return nx.mean(nx.layer_norm(hidden[-1], w["lnf.g"], w["lnf.b"]), axis=1)

    def query(self, tokens) -> np.ndarray:
        return query_features(self.backbone, tokens)

    def task_logits(self, tokens, task: int) -> np.ndarray:
        """Logits of the frozen snapshot that owns ``task``'s head, on current adapter weights."""
        owner = self.head_owner.get(task)
        if owner is None:
            raise InputError(f"unknown task id {task}")
        snap = self.snapshots[owner]
        tok = np.atleast_2d(np.asarray(tokens))
        prompts = {l: DTensor(e) for l, e in snap.prompts.items()}
        pooled = self._pooled(tok, owner, prompts)
        w, b = snap.heads[task]
        return pooled.data @ w + b

    def predict(self, tokens: np.ndarray, mode: str = "til", task: int | None = None,
                chunk: int = 128) -> tuple[np.ndarray, np.ndarray]:
        """Class predictions and the task used for each row."""
        tok = np.atleast_2d(np.asarray(tokens))
        if mode == "til":
            if task is None:
                raise InputError("TIL prediction needs a task id")
            chosen = np.full(tok.shape[0], task)
        elif mode == "tail":
            if any(len(s.heads) > 1 for s in self.snapshots.values()):
                raise ContractError("task matching needs one head per key; joint runs evaluate in TIL mode")
            chosen = match_tasks(self.keys, self.query(tok))
        else:
            raise InputError(f"unknown evaluation mode {mode!r}")
        preds = np.empty(tok.shape[0], dtype=np.int64)
        for t in np.unique(chosen):
            rows = np.nonzero(chosen == t)[0]
            for i in range(0, rows.size, chunk):
                part = rows[i:i + chunk]
                preds[part] = np.argmax(self.task_logits(tok[part], int(t)), axis=1)
        return preds, chosen

    def evaluate(self, task: SyntheticTask, mode: str = "til") -> float:
        x, y = task.arrays("test")
        preds, _ = self.predict(x, mode, task.task_id)
        return float(np.mean(preds == y))

    # --- training ---------------------------------------------------------------

    def _trainables(self, phase: int, heads: Iterable[int]) -> list[tuple[DTensor, np.ndarray | None, float]]:
        """``(tensor, update mask, lr scale)`` for everything trained in ``phase``."""
        own = self.cfg.private_lr_scale
        out: list[tuple[DTensor, np.ndarray | None, float]] = []
        for a in self.sites.values():
            if isinstance(a, MoSELayerState):
                masks = a.score_masks()
                for name, p in a.params().items():
                    out.append((p, masks[name].mask, 1.0))
                if not self.hooks.freeze_scores:
                    out.extend((sm.scores, None, own) for sm in masks.values())
            else:
                out.extend((p, None, 1.0) for p in a.params().values())
        out.extend((e, None, own) for e in self.pool.for_task(phase).values())
        out.append((self.keys.keys[phase], None, own))
        for t in heads:
            out.extend((p, None, own) for p in self.heads[t])
        return out

    def train_phase(self, phase: int, tasks: Sequence[SyntheticTask], log_sink: list[StepRecord] | None = None
                    ) -> TaskSnapshot:
        """Train one mask/prompt/key set on the union of ``tasks`` (one task when sequential)."""
        xs, ys, owners = [], [], []
        for task in tasks:
            x, y = task.arrays("train")
            xs.append(x)
            ys.append(y)
            owners.append(np.full(len(y), task.task_id))
        x, y, owner = np.concatenate(xs), np.concatenate(ys), np.concatenate(owners)
        queries = self.query(x)
        n, bsz = len(y), self.cfg.batch_size
        first = nx.stream(self.cfg.seed, "shuffle", phase, 1).permutation(n)[:bsz]
        self._begin(phase, {t.task_id: t.n_classes for t in tasks}, queries[first])
        head_ids = [t.task_id for t in tasks]
        epoch_loss = []
        batch_index = 0
        for epoch in range(1, self.cfg.epochs + 1):
            order = nx.stream(self.cfg.seed, "shuffle", phase, epoch).permutation(n)
            losses = []
            for start in range(0, n, bsz):
                idx = order[start:start + bsz]
                rec = self._step(phase, epoch, x[idx], y[idx], owner[idx], queries[idx], head_ids, batch_index)
                losses.append(rec.total_loss)
                batch_index += 1
                if log_sink is not None:
                    log_sink.append(rec)
            epoch_loss.append(float(np.mean(losses)))
            log.debug("phase %d epoch %d loss %.5f", phase, epoch, epoch_loss[-1])
        stamp = {"steps": float(batch_index), "first_epoch_loss": epoch_loss[0], "last_epoch_loss": epoch_loss[-1]}
        return self._finish(phase, head_ids, stamp)

    def batch_loss(self, phase: int, xb, yb, ob, qb, head_ids) -> tuple[DTensor, DTensor, DTensor]:
        """Total, task and pull loss of one batch under the live masks of ``phase``.

        ``ob`` names the head of each row; joint phases mix several heads in
        one batch and weight each head's term by its share of the rows.
        """
        prompts = self.pool.for_task(phase)
        pooled = self._pooled(xb, None, prompts)
        task_loss = None
        for t in head_ids:
            rows = np.nonzero(ob == t)[0]
            if rows.size == 0:
                continue
            part = pooled if rows.size == len(yb) else nx.take_rows(pooled, rows)
            w, b = self.heads[t]
            ce = nx.cross_entropy(nx.add(nx.matmul(part, w), b), yb[rows])
            term = ce if rows.size == len(yb) else nx.scale(ce, rows.size / len(yb))
            task_loss = term if task_loss is None else nx.add(task_loss, term)
        pull = pull_loss(self.keys, phase, DTensor(qb))
        return total_loss(task_loss, pull, self.cfg.lambda_pull), task_loss, pull

    def _step(self, phase, epoch, xb, yb, ob, qb, head_ids, batch_index) -> StepRecord:
        if self.hooks.before_step is not None:
            self.hooks.before_step(self)
        self._derive_masks(phase)
        loss, task_loss, pull = self.batch_loss(phase, xb, yb, ob, qb, head_ids)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss {value} in task {phase}", batch_index)
        trainables = self._trainables(phase, head_ids)
        for p, _, _ in trainables:
            p.grad = None
        loss.backward()
        grads = [p.grad for p, _, _ in trainables if p.grad is not None]
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
        if norm > self.cfg.grad_clip:
            factor = self.cfg.grad_clip / norm
            for g in grads:
                g *= factor
        self.opt.tick()
        for p, mask, scale in trainables:
            self.opt.update(p, mask, scale)
        self.keys.renormalize(phase)
        self.step += 1
        rec = StepRecord(self.step, phase, epoch, float(task_loss.data), float(pull.data), value)
        if self.hooks.on_step is not None:
            self.hooks.on_step(rec)
        return rec

    # --- accounting -------------------------------------------------------------

    def growth(self) -> GrowthCurve:
        """Mask-union growth over completed phases; dense adapters count as all-ones masks."""
        phases = sorted(self.snapshots)
        linear = self.pool.length * len(self.pool.layers) * self.backbone.d_model + self.backbone.d_model
        if self.is_mose:
            return parameter_growth([self.snapshots[p].flat_masks() for p in phases], linear)
        dense = {n: np.ones(p.shape, dtype=bool) for n, p in self.adapter_params().items()}
        return parameter_growth([dense for _ in phases], linear)

    def param_counts(self) -> dict[str, int]:
        pc = param_breakdown(self.adapter_cfg, self.backbone.d_model, self.backbone.n_layers,
                             self.pool.length, len(self.pool.layers), with_key=True)
        heads = sum(w.size + b.size for w, b in self.heads.values())
        stored = sum(p.size for p in self.adapter_params().values())
        return {"per_task_adapter": pc.adapter, "per_task_router": pc.router, "per_task_prompt": pc.prompt,
                "per_task_key": pc.key, "per_task_total": pc.total, "adapter_storage": stored,
                "heads": int(heads)}


# --- runs -----------------------------------------------------------------------

@dataclass
class RunState:
    learner: ContinualLearner
    matrix: AccuracyMatrix
    logs: list[StepRecord] = field(default_factory=list)
    done: int = 0


def new_run(backbone: FrozenBackbone, adapter: AdapterConfig, prompt: PromptConfig, train: TrainConfig,
            n_tasks: int, hooks: TrainHooks | None = None) -> RunState:
    learner = ContinualLearner(backbone, adapter, prompt, train, hooks)
    rows = 1 if train.mode == "joint" else n_tasks
    return RunState(learner, AccuracyMatrix(n_tasks, rows))


def train_task(state: RunState, task: SyntheticTask) -> TaskSnapshot:
    state.learner.reinit_scores(task.task_id)
    return state.learner.train_phase(task.task_id, [task], state.logs)


def continue_sequence(state: RunState, tasks: Sequence[SyntheticTask], stop_after: int | None = None) -> RunState:
    """Train the remaining tasks in order, filling one matrix row per task."""
    learner = state.learner
    last = len(tasks) if stop_after is None else min(stop_after, len(tasks))
    for i in range(state.done + 1, last + 1):
        task = tasks[i - 1]
        if task.task_id != i:
            raise InputError(f"tasks must be numbered 1..T in order; position {i} holds task {task.task_id}")
        train_task(state, task)
        for j in range(1, i + 1):
            state.matrix.set(i, j, learner.evaluate(tasks[j - 1], learner.cfg.eval_mode))
        state.done = i
        log.info("task %d done: row %s", i, state.matrix.row(i))
    return state


def run_sequence(tasks: Sequence[SyntheticTask], backbone: FrozenBackbone, adapter: AdapterConfig,
                 prompt: PromptConfig | None = None, train: TrainConfig | None = None,
                 hooks: TrainHooks | None = None) -> RunState:
    train = train or TrainConfig()
    if train.mode != "sequential":
        raise ConfigError("run_sequence needs trainer.mode = sequential", "trainer.mode")
    state = new_run(backbone, adapter, prompt or PromptConfig(), train, len(tasks), hooks)
    return continue_sequence(state, tasks)


def run_joint(tasks: Sequence[SyntheticTask], backbone: FrozenBackbone, adapter: AdapterConfig,
              prompt: PromptConfig | None = None, train: TrainConfig | None = None,
              hooks: TrainHooks | None = None) -> RunState:
    """Multi-task baseline: one phase over the shuffled union, one head per task, TIL evaluation."""
    train = train or TrainConfig(mode="joint")
    state = new_run(backbone, adapter, prompt or PromptConfig(), train, len(tasks), hooks)
    state.matrix = AccuracyMatrix(len(tasks), 1)
    learner = state.learner
    learner.reinit_scores(1)
    learner.train_phase(1, list(tasks), state.logs)
    for task in tasks:
        state.matrix.set(1, task.task_id, learner.evaluate(task, "til"))
    state.done = len(tasks)
    return state


def run(tasks: Sequence[SyntheticTask], backbone: FrozenBackbone, adapter: AdapterConfig,
        prompt: PromptConfig | None = None, train: TrainConfig | None = None,
        hooks: TrainHooks | None = None) -> RunState:
    train = train or TrainConfig()
    fn = run_joint if train.mode == "joint" else run_sequence
    return fn(tasks, backbone, adapter, prompt, train, hooks)
