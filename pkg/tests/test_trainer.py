import numpy as np
import pytest
from conftest import DESK_LORA, DESK_MOSE

from subexperts.errors import ConfigError, ContractError, TrainingError
from subexperts.metrics import average_performance, backward_transfer
from subexperts.suite import SuiteConfig, generate_suite
from subexperts.trainer import (ContinualLearner, PromptConfig, TrainConfig, TrainHooks, continue_sequence,
                                new_run, run_joint, run_sequence, site_name, train_task)

SMALL = SuiteConfig(n_tasks=3, n_train=64, n_test=32)
QUICK = TrainConfig(epochs=2)


def disjoint_masks(n_tasks):
    """Test hook: task t owns the entries whose flat index is t-1 modulo n_tasks."""
    def force(t, site, name, shape):
        return (np.arange(int(np.prod(shape))) % n_tasks == t - 1).reshape(shape)
    return force


@pytest.fixture(scope="module")
def small_tasks():
    return generate_suite(SMALL)


def test_masked_entries_never_change(small_tasks, backbone):
    state = new_run(backbone, DESK_MOSE, PromptConfig(1), QUICK, 3)
    learner = state.learner
    before = {}
    checked = []

    def snapshot(lr):
        before.clear()
        before.update({n: p.data.copy() for n, p in lr.adapter_params().items()})

    def compare(rec):
        masks = learner.live_masks()
        for name, p in learner.adapter_params().items():
            off = ~masks[name]
            assert np.array_equal(p.data[off], before[name][off])
        checked.append(rec.step)

    learner.hooks.before_step = snapshot
    learner.hooks.on_step = compare
    continue_sequence(state, small_tasks)
    assert len(checked) == 3 * 2 * 2


def test_forced_disjoint_masks_isolate_tasks(small_tasks, backbone):
    hooks = TrainHooks()
    hooks.force_masks = disjoint_masks(3)
    state = run_sequence(small_tasks, backbone, DESK_MOSE, PromptConfig(1), QUICK, hooks)
    m = state.matrix
    for j in range(1, 4):
        for i in range(j, 4):
            assert m.get(i, j) == m.get(j, j)
    assert backward_transfer(m) == 0.0


def test_snapshots_are_complete_and_frozen(small_tasks, backbone):
    state = run_sequence(small_tasks, backbone, DESK_MOSE, PromptConfig(1), QUICK)
    learner = state.learner
    sites = {site_name(s) for s in learner.mose_sites()}
    assert sorted(learner.snapshots) == [1, 2, 3]
    for t, snap in learner.snapshots.items():
        assert set(snap.masks) == sites
        assert set(snap.prompts) == set(learner.pool.layers) == {1}
        assert snap.key.shape == (64,) and set(snap.heads) == {t}
        with pytest.raises(ValueError):
            snap.key[0] = 0.0
        for per in snap.masks.values():
            assert set(per) == {"router", "e0.A", "e0.B", "e1.A", "e1.B"}
    # the last snapshot holds the final derived masks of its task
    last = learner.snapshots[3].flat_masks()
    for name, bits in learner.live_masks().items():
        assert np.array_equal(last[name], bits)


def test_loss_decreases_within_a_task(small_tasks, backbone):
    state = run_sequence(small_tasks, backbone, DESK_MOSE, PromptConfig(1), TrainConfig(epochs=4))
    for snap in state.learner.snapshots.values():
        assert snap.stamp["last_epoch_loss"] < snap.stamp["first_epoch_loss"]
    assert [r.step for r in state.logs] == list(range(1, len(state.logs) + 1))


def test_runs_are_deterministic(small_tasks, backbone):
    a = run_sequence(small_tasks, backbone, DESK_MOSE, PromptConfig(1), QUICK)
    b = run_sequence(small_tasks, backbone, DESK_MOSE, PromptConfig(1), QUICK)
    assert a.matrix == b.matrix and a.logs == b.logs


def test_reinit_scores_is_seeded_and_keeps_popcount(backbone):
    a = ContinualLearner(backbone, DESK_MOSE, PromptConfig(1), QUICK)
    b = ContinualLearner(backbone, DESK_MOSE, PromptConfig(1), QUICK)
    a.reinit_scores(2)
    b.reinit_scores(2)
    for (name, s), t in zip(a.score_tensors().items(), b.score_tensors().values()):
        assert np.array_equal(s.data, t.data)
    for state in a.mose_sites().values():
        for sm in state.score_masks().values():
            assert sm.mask.sum() == sm.expected_popcount
    first = a.live_masks()
    a.reinit_scores(3)
    assert any(not np.array_equal(first[n], m) for n, m in a.live_masks().items())


def test_task_masks_overlap_partially_at_large_n():
    from subexperts.adapters import ScoreMask
    from subexperts import numeric as nx
    from subexperts.numeric import DTensor
    masks = [ScoreMask(DTensor(nx.stream(0, "scores", t).random(8192)), 0.3).derive() for t in (1, 2)]
    shared = (masks[0] & masks[1]).sum() / masks[0].sum()
    assert 0.0 < shared < 1.0
    assert abs(shared - 0.3) < 0.05


def test_lifecycle_contracts(small_tasks, backbone):
    learner = ContinualLearner(backbone, DESK_MOSE, PromptConfig(1), QUICK)
    with pytest.raises(ContractError, match="reinit_scores"):
        learner.train_phase(1, small_tasks[:1])
    state = new_run(backbone, DESK_MOSE, PromptConfig(1), QUICK, 3)
    train_task(state, small_tasks[0])
    with pytest.raises(ContractError):
        train_task(state, small_tasks[0])

    def reinit_mid_task(lr):
        lr.reinit_scores(2)

    learner = ContinualLearner(backbone, DESK_MOSE, PromptConfig(1), QUICK)
    learner.hooks.before_step = reinit_mid_task
    learner.reinit_scores(1)
    with pytest.raises(ContractError, match="in progress"):
        learner.train_phase(1, small_tasks[:1])


def test_non_finite_loss_reports_batch(small_tasks, backbone):
    learner = ContinualLearner(backbone, DESK_MOSE, PromptConfig(1), QUICK)
    calls = []

    def poison(lr):
        calls.append(1)
        if len(calls) == 3:
            lr.heads[1][1].data[:] = np.nan

    learner.hooks.before_step = poison
    learner.reinit_scores(1)
    with pytest.raises(TrainingError) as info:
        learner.train_phase(1, small_tasks[:1])
    assert info.value.batch_index == 2


def test_config_validation():
    with pytest.raises(ConfigError, match="trainer.lambda_pull"):
        TrainConfig(lambda_pull=-1.0).validate()
    with pytest.raises(ConfigError, match="trainer.batch_size"):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ConfigError, match="trainer.mode"):
        run_sequence([], None, DESK_MOSE, train=TrainConfig(mode="joint"))


def test_joint_with_one_task_equals_sequential(small_tasks, backbone):
    joint = run_joint(small_tasks[:1], backbone, DESK_MOSE, PromptConfig(1), TrainConfig(epochs=2, mode="joint"))
    seq = new_run(backbone, DESK_MOSE, PromptConfig(1), QUICK, 1)
    continue_sequence(seq, small_tasks[:1])
    assert joint.matrix == seq.matrix and joint.logs == seq.logs


def test_joint_runs_evaluate_in_til_only(small_tasks, backbone):
    state = run_joint(small_tasks, backbone, DESK_MOSE, PromptConfig(1), TrainConfig(epochs=1, mode="joint"))
    assert state.matrix.n_rows == 1 and None not in state.matrix.final_row()
    with pytest.raises(ContractError, match="TIL"):
        state.learner.evaluate(small_tasks[0], "tail")


@pytest.mark.slow
def test_mose_forgets_less_than_lora(mose_run, lora_run):
    assert backward_transfer(lora_run.matrix) < backward_transfer(mose_run.matrix)


@pytest.mark.slow
def test_joint_beats_sequential_lora(desk_tasks, backbone, lora_run):
    joint = run_joint(desk_tasks, backbone, DESK_MOSE, PromptConfig(1), TrainConfig(mode="joint"))
    assert average_performance(joint.matrix) >= average_performance(lora_run.matrix)
