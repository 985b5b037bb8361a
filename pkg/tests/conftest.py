import pytest

from fclsim.config import ExperimentConfig

TINY = {
    "federation.n_clients": 8,
    "federation.k": 5,
    "federation.rounds": 3,
    "federation.pretrain_rounds": 2,
    "federation.eval_every": 1,
    "data.n_classes": 4,
    "data.n_per_class": 10,
    "data.task_n_per_class": 9,
    "data.monitor_n_per_class": 6,
    "attack.target_classes": (1, 3),
    "federation.n_attackers": 2,
    "attack.local_epochs": 2,
    "eval.probe_epochs": 50,
    "eval.cdf_probe_size": 10,
}

_VERDICTS: dict[int, str] = {}


def verdict(criterion: int, ok: bool, detail: str) -> None:
    """Record the outcome of one acceptance criterion for the session summary."""
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    _VERDICTS[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[n])


@pytest.fixture
def tiny_cfg() -> ExperimentConfig:
    return ExperimentConfig(dict(TINY))
