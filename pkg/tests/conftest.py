import math

import numpy as np
import pytest

from roadlift import synth
from roadlift.geometry import Box3D, CameraModel


@pytest.fixture(scope="session")
def flat_bench():
    return synth.benchmark(0, "flat")


@pytest.fixture(scope="session")
def small_bench():
    # every profile kind, two scenes per pose
    return synth.benchmark(5, None, scenes_per_pose=2)


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds") / "d"
    synth.write_dataset(synth.benchmark(11, None, scenes_per_pose=1, vehicles_per_scene=4), root)
    return root


@pytest.fixture
def simple_camera():
    # at the origin looking along world +X, camera frame as usual
    r = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    return CameraModel(1000.0, 1000.0, 960.0, 540.0, 1920, 1080, r, np.zeros(3))


def random_box(rng, spread=5.0, tilt=0.3):
    c = rng.uniform(-spread, spread, 3)
    size = rng.uniform(0.5, 4.0, 3)
    rot = (rng.uniform(-math.pi, math.pi), rng.uniform(-tilt, tilt), rng.uniform(-tilt, tilt))
    return Box3D(c, size, rot)


@pytest.fixture(scope="session")
def default_bench():
    return synth.benchmark(0)


# -- acceptance summary: one PASS/FAIL line per criterion ----------------------

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def _criterion_label(name: str) -> str:
    # test_criterion_03_pipeline_round_trip -> "criterion 3: pipeline round trip"
    parts = name.split("_")
    return f"criterion {int(parts[2])}: {' '.join(parts[3:])}"


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    if report.when == "call" or report.failed or report.skipped:
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        if name not in _ACCEPTANCE or status != "PASS":
            _ACCEPTANCE[name] = (status, _criterion_label(name))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        status, label = _ACCEPTANCE[name]
        terminalreporter.write_line(f"{status} {label}")
