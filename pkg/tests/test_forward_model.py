import numpy as np
import pytest

from conftest import random_pose
from svrecon.forward_model import (Slice, SliceStack, assemble_dense_system, psf_coords,
                                   simulate_slice_field, simulate_slice_psf)
from svrecon.geometry import PixelGrid, RigidTransform, field_from_transform
from svrecon.optim.system import SliceSystem
from svrecon.sampling import Volume, make_boxcar_psf, make_gaussian_psf, thin_psf


def test_slice_validation():
    g = PixelGrid(3, 2)
    with pytest.raises(ValueError):
        Slice(g, np.zeros((2, 3)))
    with pytest.raises(ValueError):
        Slice(g, np.zeros((3, 2)), np.ones((2, 2), bool))
    s = Slice(g, np.ones((3, 2)), np.array([[1, 0], [1, 1], [0, 1]], bool))
    assert s.data.sum() == 4.0
    with pytest.raises(ValueError):
        SliceStack([s], "axial", 0.0)
    with pytest.raises(ValueError):
        SliceStack([s, Slice(PixelGrid(2, 2), np.zeros((2, 2)))], "axial", 1.0)


def test_axial_slice_reads_plane(rng):
    vol = rng.standard_normal((5, 6, 7))
    pose = RigidTransform.from_translation((0, 0, 3))
    sl = simulate_slice_psf(Volume(vol), pose, PixelGrid(5, 6))
    np.testing.assert_allclose(sl.data, vol[:, :, 3])
    assert sl.mask.all()


def test_field_and_pose_simulation_agree(rng):
    vol = Volume(rng.standard_normal((10, 10, 10)))
    grid = PixelGrid(10, 10)
    pose = random_pose(rng, (4.5, 4.5, 4.5), rot_deg=15, shift=1)
    a = simulate_slice_psf(vol, pose, grid)
    b = simulate_slice_field(vol, field_from_transform(pose, grid), grid)
    np.testing.assert_allclose(a.data[a.mask & b.mask], b.data[a.mask & b.mask], atol=1e-12)


def test_slice_outside_volume_warns():
    vol = Volume(np.ones((4, 4, 4)))
    with pytest.warns(RuntimeWarning):
        sl = simulate_slice_psf(vol, RigidTransform.from_translation((0, 0, 50)), PixelGrid(4, 4))
    assert sl.status == "empty" and not sl.mask.any()


def test_psf_taps_follow_slice_normal():
    psf = make_boxcar_psf(3.0, 1.0)
    pose = RigidTransform.from_params((90, 0, 0))
    x = psf_coords(pose, PixelGrid(2, 2), psf)
    normal = pose.rotation[:, 2]
    d = x[:, 1:, :] - x[:, :1, :]
    assert np.allclose(np.cross(d.reshape(-1, 3), normal), 0.0)


# [DERIVED] matrix-free operators against the explicit matrix on a tiny grid
@pytest.mark.parametrize("psf", [thin_psf(), make_boxcar_psf(2.0, 1.0), make_gaussian_psf(1.5, 1.0, 1.0)],
                         ids=["thin", "boxcar", "gaussian"])
def test_dense_system_matches_operators(rng, psf):
    dims = (4, 4, 4)
    grid = PixelGrid(4, 4)
    poses = [random_pose(rng, (1.5, 1.5, 1.5), rot_deg=10, shift=0.2) @ RigidTransform.from_translation((0, 0, k % 4))
             for k in range(12)]
    slices = [Slice(grid, rng.standard_normal(grid.shape)) for _ in poses]
    a, b = assemble_dense_system(dims, poses, grid, psf, slices=slices)
    sysm = SliceSystem(slices, poses, psf, dims)
    v = rng.standard_normal(dims)
    np.testing.assert_allclose(sysm.apply(v), a @ v.reshape(-1), atol=1e-12)
    np.testing.assert_allclose(sysm.adjoint(b).reshape(-1), a.T @ b, atol=1e-12)
    for pose, row in zip(poses, (a @ v.reshape(-1)).reshape(len(poses), -1)):
        sim = simulate_slice_psf(Volume(v), pose, grid, psf)
        m = sim.mask.reshape(-1)
        np.testing.assert_allclose(sim.data.reshape(-1)[m], row[m], atol=1e-6)


def test_dense_system_size_limit():
    with pytest.raises(ValueError):
        assemble_dense_system((64, 64, 64), [RigidTransform()], PixelGrid(2, 2))
