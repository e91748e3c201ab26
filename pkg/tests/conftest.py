import numpy as np
import pytest

from csasn import tensor as T


@pytest.fixture(autouse=True)
def f64():
    """Every test runs at 64-bit unless it switches explicitly; the global is restored."""
    with T.precision("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY = dict(image_size=32, stem_channels=4, stage_channels=(4, 4, 8, 8), conv_out=8, patch_size=8, vit_dim=8,
            vit_heads=2, vit_layers=1, se_reduction=4, head_heads=2, head_hidden=(8, 8))


@pytest.fixture
def tiny_config():
    """A few-thousand-parameter model for fast loop and IO tests."""
    from csasn.model import ModelConfig
    return ModelConfig(**TINY)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per criterion; the lines are printed at the end of the run."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(criterion: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
