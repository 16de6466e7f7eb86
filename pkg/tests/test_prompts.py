import numpy as np
import pytest

from subexperts import numeric as nx
from subexperts.errors import ContractError, InputError
from subexperts.numeric import DTensor
from subexperts.prompts import (PromptPool, TaskKeySet, attach_prompt, infer, match_task, match_tasks,
                                pull_loss, total_loss)


def test_attach_prompt_shapes(rng):
    pool = PromptPool(1, [0, 1], 8)
    pool.add_task(1, rng)
    x = DTensor(rng.normal(size=(5, 8)))
    out = attach_prompt(pool, 1, 1, x)
    assert out.shape == (6, 8)
    np.testing.assert_array_equal(out.data[0], pool.prompts[(1, 1)].data[0])
    np.testing.assert_array_equal(out.data[1:], x.data)
    batch = attach_prompt(pool, 1, 0, DTensor(rng.normal(size=(3, 5, 8))))
    assert batch.shape == (3, 6, 8)


def test_attach_prompt_errors(rng):
    pool = PromptPool(1, [1], 8)
    pool.add_task(1, rng)
    x = DTensor(np.zeros((2, 8)))
    with pytest.raises(ContractError):
        attach_prompt(pool, 2, 1, x)
    with pytest.raises(ContractError):
        attach_prompt(pool, 1, 0, x)
    with pytest.raises(ContractError):
        pool.add_task(1, rng)


def test_zero_prompt_keeps_outputs_finite(backbone, rng):
    from subexperts.backbone import forward
    hidden, _ = forward(backbone, rng.integers(0, 64, 5), prompts={0: DTensor(np.zeros((1, 64)))})
    assert hidden[-1].shape == (1, 5, 64) and np.isfinite(hidden[-1].data).all()


def test_frozen_prompts_are_read_only(rng):
    pool = PromptPool(2, [0], 4)
    pool.add_task(1, rng)
    pool.freeze(1)
    with pytest.raises(ValueError):
        pool.prompts[(1, 0)].data[0, 0] = 1.0


def test_pull_loss_is_negative_mean_cosine(rng):
    keys = TaskKeySet(6)
    q = rng.normal(size=(4, 6))
    k = keys.init_key(1, q[:2])
    np.testing.assert_allclose(np.linalg.norm(k.data), 1.0)
    cos = (q @ k.data) / np.linalg.norm(q, axis=1)
    assert pull_loss(keys, 1, DTensor(q)).item() == pytest.approx(-cos.mean(), abs=1e-12)
    with pytest.raises(ContractError):
        pull_loss(keys, 2, DTensor(q))


def test_pull_loss_gradient_moves_key_toward_queries(rng):
    keys = TaskKeySet(6)
    q = rng.normal(size=(8, 6))
    keys.init_key(1, rng.normal(size=(1, 6)))
    before = pull_loss(keys, 1, DTensor(q)).item()
    loss = pull_loss(keys, 1, DTensor(q))
    loss.backward()
    keys.keys[1].data -= 0.1 * keys.keys[1].grad
    keys.renormalize(1)
    assert pull_loss(keys, 1, DTensor(q)).item() < before


def test_total_loss_weights_pull_term():
    t, p = DTensor(np.array(2.0)), DTensor(np.array(-0.5))
    assert total_loss(t, p, 0.1).item() == pytest.approx(1.95)


def test_match_task_argmin_and_ties():
    keys = TaskKeySet(2)
    keys.init_key(1, np.array([[1.0, 0.0]]))
    keys.init_key(2, np.array([[0.0, 1.0]]))
    keys.init_key(3, np.array([[1.0, 0.0]]))
    assert match_task(keys, np.array([0.2, 0.9])) == 2
    assert match_task(keys, np.array([3.0, 0.1])) == 1  # tie between keys 1 and 3
    np.testing.assert_array_equal(match_tasks(keys, np.array([[0.2, 0.9], [3.0, 0.1]])), [2, 1])
    with pytest.raises(ContractError):
        match_task(TaskKeySet(2), np.array([1.0, 0.0]))


class FakeLearner:
    def __init__(self):
        self.keys = TaskKeySet(2)
        self.keys.init_key(1, np.array([[1.0, 0.0]]))
        self.keys.init_key(2, np.array([[0.0, 1.0]]))

    def query(self, tokens):
        return np.array([[0.0, 1.0]]) if tokens[0] > 5 else np.array([[1.0, 0.0]])

    def task_logits(self, tokens, task):
        return np.array([[0.0, 1.0]]) if task == 2 else np.array([[1.0, 0.0]])

    def has_task(self, task):
        return task in (1, 2)


def test_infer_uses_key_match_or_given_task():
    lr = FakeLearner()
    assert infer(lr, [9]) == (1, 2)
    assert infer(lr, [0]) == (0, 1)
    assert infer(lr, [9], task_id=1) == (0, 1)
    with pytest.raises(InputError):
        infer(lr, [0], task_id=3)
