import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_pose
from svrecon.geometry import (DegenerateGeometryError, DisplacementField, PixelGrid, RigidTransform,
                              arun_fit, compose, field_from_transform, interpolate_rigid_trajectory,
                              level_factor, level_grid, orientation, prescribed_pose_field,
                              prescribed_pose_matrix, project_to_rigid, rigid_residual,
                              rotation_about, upsample_field)

angles = st.floats(-170, 170)
shifts = st.floats(-20, 20)
params = st.tuples(angles, angles, angles, shifts, shifts, shifts)


def _tf(p):
    return RigidTransform.from_params(np.array(p[:3]) / np.sqrt(3), p[3:])


@given(params, params)
def test_compose_matches_matrix_product(a, b):
    ta, tb = _tf(a), _tf(b)
    np.testing.assert_allclose(compose(ta, tb).matrix, ta.matrix @ tb.matrix, atol=1e-10)


@given(params)
def test_inverse_round_trip(p):
    t = _tf(p)
    np.testing.assert_allclose((t @ t.inverse()).matrix, np.eye(4), atol=1e-10)


@given(params)
def test_list_round_trip_is_exact(p):
    t = _tf(p)
    back = RigidTransform.from_list(t.to_list())
    assert np.array_equal(back.rotation, t.rotation)
    assert np.array_equal(back.translation, t.translation)


def test_rejects_non_rotation():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError):
        RigidTransform(2 * np.eye(3))
    with pytest.raises(ValueError):
        RigidTransform.from_list([0.0] * 11)


def test_rotation_about_fixes_center(rng):
    c = rng.uniform(0, 10, 3)
    t = rotation_about(RigidTransform.from_params((10, 20, 30)).rotation, c)
    np.testing.assert_allclose(t.apply(c), c, atol=1e-12)


def test_orientations_are_exact_permutations():
    for label in ("axial", "coronal", "sagittal"):
        r = orientation(label).rotation
        assert set(np.unique(r)) <= {-1.0, 0.0, 1.0}
        assert np.linalg.det(r) == 1.0
    with pytest.raises(ValueError):
        orientation("oblique")


def test_field_from_transform_targets():
    grid = PixelGrid(5, 4)
    t = RigidTransform.from_params((0, 0, 90), (1, 2, 3))
    f = field_from_transform(t, grid)
    np.testing.assert_allclose(f.targets(grid), t.apply(grid.points()), atol=1e-12)
    assert f.data.shape == (5, 4, 3)


def test_level_factor_and_grid():
    assert [level_factor(s, 4) for s in range(4)] == [8, 4, 2, 1]
    with pytest.raises(ValueError):
        level_factor(4, 4)
    g = level_grid(PixelGrid(33, 17), 4)
    assert g.shape == (9, 5) and g.spacing == 4.0


# [DERIVED] pose field against the homogeneous matrix written out by hand
@pytest.mark.parametrize("case", range(10))
def test_prescribed_pose_field_matches_direct_evaluation(case):
    rng = np.random.default_rng(case)
    k = int(2 ** rng.integers(0, 3))
    grid = level_grid(PixelGrid(24, 20), k)
    trans = RigidTransform.from_translation(rng.uniform(-5, 5, 3))
    orient = RigidTransform.from_params(rng.uniform(-90, 90, 3))
    f = prescribed_pose_field(trans, orient, grid, scale=k)
    c = np.array([(grid.width - 1) / 2, (grid.height - 1) / 2, 0.0])
    for i in range(grid.width):
        for j in range(grid.height):
            p = np.array([i, j, 0.0])
            x = orient.rotation @ ((p + trans.translation) / k - c) + c
            np.testing.assert_allclose(f.data[i, j], x - p, atol=1e-9)


def test_prescribed_pose_matrix_custom_center():
    grid = PixelGrid(8, 8)
    rot = orientation("coronal")
    c = np.array([3.5, 3.5, 3.5])
    m = prescribed_pose_matrix(RigidTransform.identity(), rot, grid, center=c)
    np.testing.assert_allclose(m[:3, :3] @ c + m[:3, 3], c)
    with pytest.raises(ValueError):
        prescribed_pose_matrix(RigidTransform.identity(), rot, grid, scale=0.0)


# [DERIVED] point-set fit recovers an exactly rigid map
@given(params)
def test_arun_recovers_rigid_map(p):
    t = _tf(p)
    src = np.random.default_rng(0).uniform(-10, 10, (30, 3))
    r, tr = arun_fit(src, t.apply(src))
    np.testing.assert_allclose(r, t.rotation, atol=1e-9)
    np.testing.assert_allclose(tr, t.translation, atol=1e-9)


def test_arun_handles_reflection_case():
    # planar points whose cross-covariance SVD suggests a reflection
    src = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    t = RigidTransform.from_params((180, 0, 0), (0, 0, 1))
    r, _ = arun_fit(src, t.apply(src))
    assert np.linalg.det(r) == pytest.approx(1.0)
    np.testing.assert_allclose(r @ src.T, t.rotation @ src.T, atol=1e-9)


def test_arun_degenerate_inputs():
    with pytest.raises(DegenerateGeometryError):
        arun_fit(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(5.0), [1, 0, 0])
    with pytest.raises(DegenerateGeometryError):
        arun_fit(line, line)
    with pytest.raises(ValueError):
        arun_fit(np.zeros((5, 3)), np.zeros((4, 3)))


def test_weighted_arun_ignores_zero_weight_outlier(rng):
    t = random_pose(rng)
    src = rng.uniform(0, 10, (20, 3))
    dst = t.apply(src)
    dst[0] += 100.0
    w = np.ones(20)
    w[0] = 0.0
    r, tr = arun_fit(src, dst, w)
    np.testing.assert_allclose(r, t.rotation, atol=1e-9)


# [DERIVED] rigid fields survive projection; noisy ones stay within the noise level
def test_project_to_rigid_round_trip(rng):
    for _ in range(20):
        grid = PixelGrid(int(rng.integers(3, 16)), int(rng.integers(3, 16)))
        t = random_pose(rng, rot_deg=60, shift=5)
        back = project_to_rigid(field_from_transform(t, grid), grid)
        np.testing.assert_allclose(back.matrix, t.matrix, atol=1e-9)
        assert rigid_residual(field_from_transform(t, grid), back, grid).max() < 1e-9


def test_project_to_rigid_noisy_within_noise_rms(rng):
    grid = PixelGrid(16, 16)
    for _ in range(20):
        t = random_pose(rng, rot_deg=60, shift=5)
        f = field_from_transform(t, grid)
        noise = rng.normal(0, 0.5, f.data.shape)
        back = project_to_rigid(DisplacementField(f.data + noise), grid)
        err = np.linalg.norm(back.apply(grid.points()) - t.apply(grid.points()), axis=1)
        assert np.sqrt(np.mean(err ** 2)) <= np.sqrt(np.mean(np.sum(noise ** 2, -1)))


def test_upsample_reproduces_affine_fields(rng):
    full = PixelGrid(17, 12)
    t = random_pose(rng)
    for k in (2, 4):
        coarse = level_grid(full, k)
        fine_field = field_from_transform(RigidTransform(t.rotation, t.translation), full)
        lvl = field_from_transform(RigidTransform(t.rotation, t.translation / k), coarse)
        up = upsample_field(lvl, full, k)
        np.testing.assert_allclose(up.data, fine_field.data, atol=1e-9)


def test_trajectory_passes_through_keyframes(rng):
    keys = [(float(t), random_pose(rng)) for t in (0, 3, 7, 12, 20)]
    out = interpolate_rigid_trajectory(keys, [k[0] for k in keys])
    for (_, want), got in zip(keys, out):
        np.testing.assert_allclose(got.matrix, want.matrix, atol=1e-9)
    single = interpolate_rigid_trajectory(keys[:1], np.arange(4.0))
    assert len(single) == 4
    with pytest.raises(ValueError):
        interpolate_rigid_trajectory([(1.0, keys[0][1]), (1.0, keys[1][1])], [0.0])
