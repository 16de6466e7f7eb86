import time

import numpy as np
import pytest

from subexperts.adapters import AdapterConfig
from subexperts.backbone import BackboneConfig, build_backbone
from subexperts.suite import SuiteConfig, generate_suite
from subexperts.trainer import PromptConfig, TrainConfig, run_sequence

ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(number: int, passed: bool, detail: str) -> str:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture(scope="session")
def backbone():
    return build_backbone(BackboneConfig(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# desk presets: MoSE E2T2 with layer 0 excluded, and the dense LoRA baseline on every layer
DESK_MOSE = AdapterConfig(kind="mose", n_experts=2, top_k=2, c=0.3, r=2, alpha=8.0, exclude=(0, 0))
DESK_LORA = AdapterConfig(kind="lora", r=8, alpha=32.0)


@pytest.fixture(scope="session")
def desk_tasks():
    return generate_suite(SuiteConfig())


@pytest.fixture(scope="session")
def mose_run(desk_tasks, backbone):
    start = time.process_time()
    state = run_sequence(desk_tasks, backbone, DESK_MOSE, PromptConfig(1), TrainConfig())
    state.cpu_seconds = time.process_time() - start
    return state


@pytest.fixture(scope="session")
def lora_run(desk_tasks, backbone):
    start = time.process_time()
    state = run_sequence(desk_tasks, backbone, DESK_LORA, PromptConfig(0), TrainConfig())
    state.cpu_seconds = time.process_time() - start
    return state
