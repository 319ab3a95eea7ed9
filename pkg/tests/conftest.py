import numpy as np
import pytest
from hypothesis import settings

from dskd.config import RunConfig
from dskd import trainer as tr

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def small_config(tmp_path, **overrides) -> RunConfig:
    """A few-second distillation run on a shrunken toy task."""
    base = RunConfig().replace(
        dataset__train_per_class=40,
        dataset__test_per_class=25,
        optimizer__epochs=2,
        optimizer__teacher_epochs=8,
        output_dir=str(tmp_path / "run"),
    )
    return base.replace(**overrides) if overrides else base


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def shared_teacher(tmp_path_factory):
    cfg = small_config(tmp_path_factory.mktemp("teacher"))
    clean, _, test = tr.load_data(cfg)
    teacher, acc = tr.pretrain_teacher(cfg, clean, test)
    assert acc >= tr.MIN_TEACHER_ACC
    return teacher


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
