import pytest

import helpers
from spantrace.training import Checkpoint


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """One full seeded CLI pipeline run shared by every test that needs trained models."""
    return helpers.run_pipeline(tmp_path_factory.mktemp("pipeline"))


@pytest.fixture(scope="session")
def warm_checkpoint(pipeline):
    return Checkpoint.load(pipeline["dir"] / "warmup.ckpt.json")


@pytest.fixture(scope="session")
def joint_checkpoint(pipeline):
    return Checkpoint.load(pipeline["dir"] / "joint.ckpt.json")


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
