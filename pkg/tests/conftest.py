import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from macns.fields import VelocityField
from macns.grid import DomainSpec, build_grid

settings.register_profile(
    "macns", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("macns")

DOMAINS = {
    "square": DomainSpec.unit_box(2),
    "ell": DomainSpec(2, (((0.0, 1.0), (0.0, 1.0)), ((1.0, 2.0), (0.0, 0.5)))),
    "strip": DomainSpec(2, (((0.0, 2.0), (0.0, 0.5)),)),
    "cube": DomainSpec.unit_box(3),
    "ell3": DomainSpec(3, (((0.0, 1.0), (0.0, 1.0), (0.0, 1.0)), ((1.0, 2.0), (0.0, 1.0), (0.0, 0.5)))),
}


def lines_for(spec, extra):
    """Grid lines through every box coordinate plus the points in ``extra``."""
    out = []
    for a in range(spec.dimension):
        lo, hi = spec.bounding_box[a]
        pts = set(float(c) for c in spec.box_coordinates(a))
        for t in extra[a]:
            x = lo + t * (hi - lo)
            if min(abs(x - p) for p in pts) > 0.02 * (hi - lo):
                pts.add(x)
        if len(pts) == 2:
            pts.add(0.5 * (lo + hi))
        out.append(np.array(sorted(pts)))
    return out


@st.composite
def grids(draw, names=tuple(DOMAINS), max_extra=4):
    name = draw(st.sampled_from(names))
    spec = DOMAINS[name]
    d = spec.dimension
    extra = [draw(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=max_extra if d == 2 else 2)) for _ in range(d)]
    return build_grid(spec, lines_for(spec, extra))


def random_velocity(g, rng, scale=1.0):
    arrays = []
    for f in g.faces:
        a = scale * rng.uniform(-1.0, 1.0, f.count)
        a[~f.is_interior] = 0.0
        arrays.append(a)
    return VelocityField.from_arrays(g, arrays)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
