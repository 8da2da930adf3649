import numpy as np
import pytest
from numpy.testing import assert_array_equal

from splat_uncert.avs import farthest_point_init
from splat_uncert.experiments import prepare, residual_views
from splat_uncert.raster import render
from splat_uncert.scene import Camera, dumps_scene
from splat_uncert.synthetic import (
    ChangeRegion,
    SyntheticSpec,
    apply_changes,
    degrade_scene,
    generate_scene,
    holdout_split,
    make_sparse_split,
    orbit_cameras,
)


def small(**kw):
    base = dict(primitive_count=30, width=16, height=16, view_count=8)
    base.update(kw)
    return SyntheticSpec(**base)


def test_generation_deterministic():
    a, ca, ia = generate_scene(small(seed=4))
    b, cb, ib = generate_scene(small(seed=4))
    assert dumps_scene(a) == dumps_scene(b)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(ia, ib))
    c, _, _ = generate_scene(small(seed=5))
    assert dumps_scene(a) != dumps_scene(c)


def test_spec_validation_and_roundtrip():
    with pytest.raises(ValueError):
        SyntheticSpec(primitive_count=0)
    with pytest.raises(ValueError):
        SyntheticSpec(view_count=1)
    with pytest.raises(ValueError):
        SyntheticSpec(degradation="blur")
    s = small(changes=(ChangeRegion((0, 0, 0), 0.2),), backdrop_count=5)
    assert SyntheticSpec.from_dict(s.to_dict()) == s


def test_orbit_looks_at_origin():
    spec = small(view_count=6)
    for cam in orbit_cameras(spec):
        pc = cam.rotation @ np.zeros(3) + cam.translation
        assert abs(pc[0]) < 1e-12 and abs(pc[1]) < 1e-12
        assert np.linalg.norm(cam.center) == pytest.approx(spec.orbit_radius)


def test_subsample_increases_residual():
    base = dict(primitive_count=60, width=16, height=16, view_count=8, seed=1)
    none = prepare(SyntheticSpec(**base, degradation="none"), base_iterations=20)
    sub = prepare(SyntheticSpec(**base, degradation="subsample"), base_iterations=20)

    def mean_res(p):
        return np.mean([r.mean() for _, r in residual_views(p.fitted, p.views(p.train))])

    assert len(sub.fitted) == 30
    assert mean_res(sub) > mean_res(none)


def test_single_primitive_single_footprint():
    from scipy.ndimage import label

    spec = small(primitive_count=1, view_count=4, scale_range=(0.3, 0.4))
    _, _, imgs = generate_scene(spec)
    for img in imgs:
        _, n = label(img.sum(axis=2) > 1e-3)
        assert n == 1


def test_degradations():
    truth, _, _ = generate_scene(small())
    jit = degrade_scene(truth, small(degradation="jitter", jitter_sigma=0.1))
    assert len(jit) == len(truth) and not np.array_equal(jit.means, truth.means)
    assert_array_equal(jit.color_coeffs, truth.color_coeffs)
    trunc = degrade_scene(truth, small(fitted_color_degree=1))
    assert trunc.sh_degree_color == 1 and trunc.color_coeffs.shape[2] == 4
    gray = degrade_scene(truth, small(reset_color=True))
    assert np.allclose(render(gray, orbit_cameras(small())[0]).color.max(), 0.5, atol=0.5)


def test_apply_changes():
    truth, _, _ = generate_scene(small())
    ins = apply_changes(truth, [ChangeRegion((0, 0, 0), 0.3, count=4)])
    assert len(ins) == len(truth) + 4
    rem = apply_changes(truth, [ChangeRegion((0, 0, 0), 10.0, kind="remove")])
    assert len(rem) == 0


def test_holdout_split():
    train, test = holdout_split(32, 8)
    assert test == [0, 8, 16, 24] and len(train) == 28


def test_sparse_split_32():
    cams = orbit_cameras(SyntheticSpec(view_count=32))
    train, test = make_sparse_split(cams, 4)
    assert len(train) == 4 and len(test) == 4 and not set(train) & set(test)
    assert train == farthest_point_init(cams, 4)


def test_sparse_split_one_test_view():
    cams = orbit_cameras(small(view_count=5))
    train, test = make_sparse_split(cams, 4)
    assert len(train) == 4 and len(test) == 1
    with pytest.raises(ValueError):
        make_sparse_split(cams, 5)


def test_sparse_split_collinear():
    cams = [Camera.look_at([x, 0, -3], [x, 0, 0], [0, 1, 0], 5, 5, 4, 4) for x in [0, 0, 1, 2, 2, 3, 5]]
    train, test = make_sparse_split(cams, 4)
    assert len(set(train)) == 4
    centers = np.array([c.center[0] for c in cams])
    assert {centers[train[0]], centers[train[1]]} == {0.0, 5.0}
