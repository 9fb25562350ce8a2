import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from crowdspeak.ingest import N_KEYPOINTS, KeypointSet

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_pose(frame, points=None, person=None, conf=1.0):
    """Pose with the given {index: (x, y)} keypoints detected and the rest undetected."""
    kp = np.zeros((N_KEYPOINTS, 3))
    for j, (x, y) in (points or {}).items():
        kp[j] = (x, y, conf)
    return KeypointSet(kp, frame, person)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_scene(tmp_path_factory):
    """A five-agent, 40 s synthetic dataset shared by the slower tests (read-only)."""
    from crowdspeak.synth import SceneConfig, gen_scene
    d = tmp_path_factory.mktemp("scene")
    gen_scene(SceneConfig(n_agents=5, duration=40.0, seed=3), d)
    return d


@pytest.fixture(scope="session")
def small_table(small_scene):
    from crowdspeak.dataset import prepare
    return prepare(small_scene)


ACCEPTANCE: list[str] = []


def record_acceptance(number: int, name: str, ok: bool, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
