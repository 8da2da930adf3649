import numpy as np
import pytest
from hypothesis import settings

from splat_uncert.scene import Camera, Primitive, Scene
from splat_uncert.sh import SH_C0, sh_basis_size

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def make_primitive(mean=(0.0, 0.0, 5.0), scale=(0.3, 0.3, 0.3), opacity=0.8, color=0.5, degree=0, udeg=0, uncert=None):
    s = sh_basis_size(degree)
    c = np.zeros((3, s))
    c[:, 0] = color / SH_C0
    u = np.zeros(sh_basis_size(udeg)) if uncert is None else np.asarray(uncert, dtype=float)
    return Primitive(mean, (1.0, 0.0, 0.0, 0.0), scale, opacity, c, u)


def axis_camera(width=101, height=101, f=100.0, cx=50.0, cy=50.0):
    """Camera at the origin looking down +z."""
    return Camera(f, f, cx, cy, width, height, np.eye(3), np.zeros(3))


def random_scene(rng, n=30, color_degree=2, uncert_degree=2, spread=0.8, depth=4.0):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    sc = sh_basis_size(color_degree)
    color = rng.normal(0.0, 0.2, size=(n, 3, sc))
    color[:, :, 0] = rng.uniform(0.2, 0.8, size=(n, 3)) / SH_C0
    return Scene.from_arrays(
        rng.uniform(-spread, spread, size=(n, 3)) + np.array([0.0, 0.0, depth]),
        q,
        np.exp(rng.uniform(-2.5, -1.2, size=(n, 3))),
        rng.uniform(0.3, 0.95, size=n),
        color,
        rng.normal(0.0, 0.5, size=(n, sh_basis_size(uncert_degree))),
        color_degree,
        uncert_degree,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_scene(rng):
    return random_scene(rng)


@pytest.fixture
def small_camera():
    return axis_camera(24, 20, 22.0, 11.5, 9.5)


# ---- acceptance reporting ---------------------------------------------------

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_logreport(report):
    marker = dict(report.user_properties).get("criterion")
    if marker is None:
        return
    n, title = marker
    detail = dict(report.user_properties).get("detail", "")
    failed = report.failed
    if report.when == "call" or failed:
        prev = _CRITERIA.get(n)
        if prev is None or prev[1] == "PASS":
            _CRITERIA[n] = (title, "FAIL" if failed else ("SKIP" if report.skipped else "PASS"), detail)


def pytest_runtest_setup(item):
    m = item.get_closest_marker("criterion")
    if m is not None:
        item.user_properties.append(("criterion", tuple(m.args)))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        line = f"criterion {n:2d} {status}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
