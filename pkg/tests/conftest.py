import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from peft_forge.backbone import Batch, ModelConfig, build_model


@pytest.fixture(autouse=True, scope="session")
def _single_thread_blas():
    with threadpool_limits(limits=1):
        yield


def tiny_cfg(**overrides) -> ModelConfig:
    base = dict(d_model=8, n_enc_layers=1, n_dec_layers=1, n_heads=2, d_ff=12, vocab_size=16,
                max_positions=32, d_visual=6, n_visual_tokens=8, dtype="f64")
    base.update(overrides)
    return ModelConfig(**base)


def random_batch(rng, cfg: ModelConfig, B: int = 4, n_tasks: int = 2, nv: int = 3, ns: int = 4, m: int = 3) -> Batch:
    visual_len = rng.integers(1, nv + 1, size=B)
    visual_len[0] = nv
    token_len = rng.integers(0, ns + 1, size=B)
    token_len[0] = ns
    tokens = rng.integers(4, cfg.vocab_size, size=(B, ns))
    targets = rng.integers(4, cfg.vocab_size, size=(B, m))
    targets[:, -1] = 2
    tasks = np.arange(B) % n_tasks
    return Batch(rng.standard_normal((B, nv, cfg.d_visual)), visual_len, tokens, token_len, targets, tasks)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return build_model(tiny_cfg(), seed=0)


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(criterion: int, name: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {name} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
