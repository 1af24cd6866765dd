import numpy as np
import pytest

from stereopose.scene import parametric_model

SHAPES = ("box", "cylinder", "triblock")

_criteria: list[tuple[str, bool, str]] = []


def record_criterion(name: str, passed: bool, detail: str = "") -> None:
    """Log an acceptance criterion outcome for the end-of-run report."""
    _criteria.append((name, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _criteria:
        line = f"{'PASS' if passed else 'FAIL'}  {name}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))


@pytest.fixture(scope="session")
def models():
    return {name: parametric_model(name) for name in SHAPES}


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_pose(rng, spread=0.5):
    from scipy.spatial.transform import Rotation

    from stereopose.geometry import Pose

    return Pose(Rotation.random(random_state=rng).as_matrix(), rng.normal(0.0, spread, 3))
