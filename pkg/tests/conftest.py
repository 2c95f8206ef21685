import numpy as np
import pytest

from morphface.gradcheck import small_rig
from morphface.model import build_upsampling
from morphface.objective import Rig
from morphface.scene import Camera
from morphface.template import make_template


@pytest.fixture(scope="session")
def small():
    """124-vertex template rig rendering at 16x16."""
    return small_rig(16)


@pytest.fixture(scope="session")
def desk_rig():
    """Default template (about 2100 vertices, 80 nodes) rendering at 64x64."""
    tpl = make_template()
    graph = build_upsampling(tpl)
    return Rig(tpl, graph, Camera.for_template(tpl, width=64))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def world(desk_rig):
    from morphface.synth import make_gt_model
    return make_gt_model(desk_rig, (8, 6, 8), seed=1)


@pytest.fixture(scope="session")
def gt_clip(world):
    from morphface.synth import sample_clip
    return sample_clip(world, 4, neutral=False, rng=11)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion; returns the verdict."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(number, name, ok, detail):
        line = f"criterion {number} ({name}): {'PASS' if ok else 'FAIL'} - {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
