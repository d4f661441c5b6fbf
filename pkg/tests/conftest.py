import numpy as np
import pytest
from hypothesis import settings

from occpcnn import shapegen
from occpcnn.geometry import TriangleMesh

settings.register_profile("default", max_examples=30, deadline=None)
settings.load_profile("default")

CUBE_VERTS = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])


@pytest.fixture
def cube() -> TriangleMesh:
    return shapegen.make_primitive(shapegen.box((1.0, 1.0, 1.0)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_network_config(input_size=24):
    """Smallest useful U: 2 shrinking blocks, 5 blocks total."""
    from occpcnn.occnet import NetworkConfig

    return NetworkConfig(input_size, ((12, 3), (4, 4), (4, 4), (12, 3), (input_size, 2)), (5,), 1.0, 0.5)


def pytest_terminal_summary(terminalreporter):
    from _report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
