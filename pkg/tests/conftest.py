import numpy as np
import pytest

from freehand_us.geom import FrameId, RigidTransform, RoiBox, UsIntrinsics


def random_transform(rng, src=FrameId.US, dst=FrameId.REF, scale=50.0) -> RigidTransform:
    q = rng.normal(size=4)
    return RigidTransform(q / np.linalg.norm(q), rng.uniform(-scale, scale, 3), src, dst)


def matrix_of(T: RigidTransform) -> np.ndarray:
    """Homogeneous matrix assembled independently of the library's own helpers."""
    w, x, y, z = T.quat
    R = np.array(
        [
            [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
        ]
    )
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = T.t
    return M


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def world():
    from freehand_us.sim.world import SimWorld

    return SimWorld()


@pytest.fixture
def intr_01():
    return UsIntrinsics(0.1, RoiBox(100, 50, 400, 300))


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
