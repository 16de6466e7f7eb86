"""Per-task prompts, task keys, the pull loss and key-based task matching."""

from __future__ import annotations

from typing import Protocol

import numpy as np

from . import numeric as nx
from .errors import ContractError, InputError
from .numeric import DTensor


class PromptPool:
    """Prompt rows ``e[t, l]`` of shape ``L_e x D`` for every task and prompted layer."""

    def __init__(self, length: int, layers: list[int], d_model: int, init_std: float = 0.02):
        self.length = int(length)
        self.layers = list(layers)
        self.d_model = d_model
        self.init_std = init_std
        self.prompts: dict[tuple[int, int], DTensor] = {}
        self.frozen: set[int] = set()

    @property
    def enabled(self) -> bool:
        return self.length > 0 and bool(self.layers)

    def add_task(self, t: int, rng: np.random.Generator) -> dict[int, DTensor]:
        if any(key[0] == t for key in self.prompts):
            raise ContractError(f"prompts for task {t} already exist")
        if not self.enabled:
            return {}
        for l in self.layers:
            self.prompts[(t, l)] = DTensor(rng.normal(0.0, self.init_std, (self.length, self.d_model)),
                                           requires_grad=True)
        return self.for_task(t)

    def for_task(self, t: int) -> dict[int, DTensor]:
        return {l: self.prompts[(t, l)] for l in self.layers if (t, l) in self.prompts}

    def freeze(self, t: int) -> None:
        for (tt, _), e in self.prompts.items():
            if tt == t:
                e.requires_grad = False
                e.data.flags.writeable = False
        self.frozen.add(t)


def attach_prompt(pool: PromptPool, t: int, layer: int, x: DTensor) -> DTensor:
    """Prepend the task's prompt rows to a ``L x D`` (or ``batch x L x D``) layer input."""
    if layer not in pool.layers:
        raise ContractError(f"layer {layer} is outside the prompted layers {pool.layers}")
    e = pool.prompts.get((t, layer))
    if e is None:
        raise ContractError(f"no prompt for task {t} at layer {layer}")
    x = nx.as_tensor(x)
    if x.data.ndim == 2:
        return nx.concat([e, x], axis=0)
    return nx.concat([nx.repeat_batch(e, x.shape[0]), x], axis=1)


class TaskKeySet:
    def __init__(self, d_model: int):
        self.d_model = d_model
        self.keys: dict[int, DTensor] = {}
        self.frozen: set[int] = set()

    def __len__(self) -> int:
        return len(self.keys)

    def init_key(self, t: int, queries: np.ndarray) -> DTensor:
        """New key for task ``t``: the normalised mean of a batch of query features."""
        if t in self.keys:
            raise ContractError(f"key for task {t} already exists")
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        k = DTensor(nx.l2_normalize(q.mean(axis=0)), requires_grad=True)
        self.keys[t] = k
        return k

    def renormalize(self, t: int) -> None:
        k = self.keys[t]
        k.data[...] = nx.l2_normalize(k.data)

    def freeze(self, t: int) -> None:
        k = self.keys[t]
        k.requires_grad = False
        k.data.flags.writeable = False
        self.frozen.add(t)

    def matrix(self) -> tuple[list[int], np.ndarray]:
        ids = sorted(self.keys)
        return ids, np.stack([self.keys[t].data for t in ids]) if ids else np.zeros((0, self.d_model))


def pull_loss(keys: TaskKeySet, t: int, queries) -> DTensor:
    """Negative mean cosine similarity between the batch queries and the key of task ``t``."""
    if t not in keys.keys:
        raise ContractError(f"no key for task {t}")
    q = nx.as_tensor(queries)
    if q.data.ndim == 1:
        q = nx.reshape(q, (1, q.size))
    if q.shape[0] < 1:
        raise InputError("pull_loss needs at least one query")
    return nx.scale(nx.mean(nx.cosine_rows(q, keys.keys[t])), -1.0)


def total_loss(task_loss: DTensor, pull: DTensor, lambda_pull: float) -> DTensor:
    return nx.add(nx.as_tensor(task_loss), nx.scale(pull, lambda_pull))


def match_tasks(keys: TaskKeySet, queries: np.ndarray) -> np.ndarray:
    """Vectorised :func:`match_task` over the rows of ``queries``."""
    ids, k = keys.matrix()
    if not ids:
        raise ContractError("no task keys have been trained")
    q = nx.l2_normalize(np.atleast_2d(np.asarray(queries, dtype=np.float64)))
    # argmin of cosine distance; argmax returns the first (lowest-id) maximum
    dist = 1.0 - q @ nx.l2_normalize(k).T
    return np.asarray(ids)[np.argmin(dist, axis=1)]


def match_task(keys: TaskKeySet, q) -> int:
    q = q.data if isinstance(q, DTensor) else np.asarray(q, dtype=np.float64)
    return int(match_tasks(keys, q.reshape(1, -1))[0])


class Inferable(Protocol):
    keys: TaskKeySet

    def query(self, tokens) -> np.ndarray: ...

    def task_logits(self, tokens, task: int) -> np.ndarray: ...

    def has_task(self, task: int) -> bool: ...


def infer(learner: Inferable, tokens, task_id: int | None = None) -> tuple[int, int]:
    """Predict the class of one sequence, matching its task by key when none is given."""
    if task_id is None:
        if len(learner.keys) == 0:
            raise ContractError("no completed task to match against")
        task = match_task(learner.keys, learner.query(tokens)[0])
    else:
        if not learner.has_task(task_id):
            raise InputError(f"unknown task id {task_id}")
        task = task_id
    logits = learner.task_logits(tokens, task)
    return int(np.argmax(logits[0])), task
