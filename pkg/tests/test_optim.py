import numpy as np
import pytest

from conftest import random_pose
from svrecon.forward_model import Slice, assemble_dense_system, simulate_slice_psf
from svrecon.geometry import DisplacementField, PixelGrid, RigidTransform, compose, field_from_transform
from svrecon.metrics import tre
from svrecon.motion_sim import MotionConfig, extract_stacks, prescribed_fields, simulate
from svrecon.optim import (DivergenceError, ReconConfig, SliceSystem, alternating_svr, cgls,
                           finalize, flow_residual, multilayer_residual_loss, multiscale_refine,
                           pose_jacobian, pose_update, volume_update)
from svrecon.optim.refine import downsample_slice, level_dims, level_pose
from svrecon.optim.registration import register_volumes
from svrecon.optim.svr import smooth_trajectory
from svrecon.phantoms import make_phantom
from svrecon.sampling import Volume, make_boxcar_psf, thin_psf


@pytest.fixture(scope="module")
def phantom():
    return make_phantom("ellipsoids", 24, 0)


# ---------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(ValueError):
        ReconConfig(outer_iters=0)
    with pytest.raises(ValueError):
        ReconConfig(cg_tol=0)
    with pytest.raises(ValueError):
        ReconConfig(trajectory_smoothing=-1)
    with pytest.raises(ValueError):
        ReconConfig.from_dict({"outer_iterations": 3})
    cfg = ReconConfig(pose_smoothing=[2, 1], volume_dims=[8, 8, 8])
    assert ReconConfig.from_dict(cfg.to_dict()) == cfg


# -------------------------------------------------------- volume update

def _tiny_problem(rng, n=12):
    dims = (4, 4, 4)
    grid = PixelGrid(4, 4)
    poses = [random_pose(rng, (1.5, 1.5, 1.5), rot_deg=10, shift=0.2) @ RigidTransform.from_translation((0, 0, k % 4))
             for k in range(n)]
    slices = [Slice(grid, rng.standard_normal(grid.shape)) for _ in poses]
    return dims, grid, poses, slices


# [DERIVED] CG least squares equals the pseudo-inverse solution
def test_cgls_matches_pseudo_inverse(rng):
    dims, grid, poses, slices = _tiny_problem(rng)
    a, b = assemble_dense_system(dims, poses, grid, slices=slices)
    x, info = cgls(SliceSystem(slices, poses, thin_psf(), dims), np.zeros(dims), 500, tol=1e-12)
    np.testing.assert_allclose(x.reshape(-1), np.linalg.pinv(a) @ b, atol=1e-8)
    assert info.status == "converged"


def test_cgls_residual_never_increases(rng):
    dims, grid, poses, slices = _tiny_problem(rng)
    _, info = cgls(SliceSystem(slices, poses, thin_psf(), dims), np.zeros(dims), 30, tol=1e-14)
    assert np.all(np.diff(info.data_consistency) <= 1e-12)
    _, info = cgls(SliceSystem(slices, poses, thin_psf(), dims), np.zeros(dims), 2)
    assert info.status == "truncated" and info.iterations == 2


def test_cgls_divergence_is_reported(rng):
    dims, grid, poses, slices = _tiny_problem(rng)
    slices[0] = Slice(grid, np.full(grid.shape, np.inf))
    with pytest.raises(DivergenceError):
        cgls(SliceSystem(slices, poses, thin_psf(), dims), np.zeros(dims), 5)


def test_volume_update_fits_consistent_data(phantom):
    stacks = extract_stacks(phantom, thickness=2.0)
    slices = [s for st in stacks for s in st.slices]
    psf = make_boxcar_psf(2.0, 1.0)
    v0 = Volume(np.zeros(phantom.dims))
    out, info = volume_update(slices, [s.pose for s in slices], psf, v0, 20, return_info=True)
    assert info.data_consistency[-1] < 1e-2 * info.data_consistency[0]


def test_fit_scales_recovers_gain(rng, phantom):
    stacks = extract_stacks(phantom, ("axial",), thickness=1.0)
    slices = [s.copy(data=2.5 * s.data) for s in stacks[0].slices if s.mask.any()]
    sysm = SliceSystem(slices, [s.pose for s in slices], thin_psf(), phantom.dims)
    np.testing.assert_allclose(sysm.fit_scales(phantom.data), 2.5, atol=1e-9)
    assert sysm.residual_norm2(phantom.data) < 1e-18


# ----------------------------------------------------------- registration

def test_pose_jacobian_orders_agree(rng, phantom):
    stacks = extract_stacks(phantom, ("axial",), thickness=1.0)
    sl = stacks[0].slices[12]
    pose = compose(RigidTransform.from_params((1, -1, 2), (0.3, 0.2, -0.1)), sl.pose)
    j2 = pose_jacobian(sl, phantom, pose, order=2)
    j4 = pose_jacobian(sl, phantom, pose, order=4)
    assert j2.shape == (int(sl.mask.sum()), 6)
    assert np.linalg.norm(j2 - j4) <= 0.05 * np.linalg.norm(j4)
    with pytest.raises(ValueError):
        pose_jacobian(sl, phantom, pose, order=3)


@pytest.mark.parametrize("label", ["axial", "coronal", "sagittal"])
def test_pose_update_recovers_small_motion(phantom, label):
    st = extract_stacks(phantom, (label,), thickness=1.0)[0]
    rng = np.random.default_rng(0)
    ok = 0
    for _ in range(20):
        sl = st.slices[int(rng.integers(6, 19))]
        start = compose(RigidTransform.from_params(rng.normal(0, 1.5, 3), rng.uniform(-0.6, 0.6, 3)), sl.pose)
        res = pose_update(sl, phantom, start, config=ReconConfig(pose_max_iters=40), return_result=True)
        assert res.objective <= res.objective_initial
        g = sl.grid
        ok += tre(field_from_transform(res.pose, g), field_from_transform(sl.pose, g), 1, sl.mask) < 0.2
    # a smooth phantom leaves occasional out-of-plane local minima
    assert ok >= 17


def test_pose_update_skips_empty_slice(phantom):
    g = PixelGrid(24, 24)
    sl = Slice(g, np.zeros(g.shape), np.zeros(g.shape, bool))
    res = pose_update(sl, phantom, RigidTransform(), return_result=True)
    assert res.status == "skipped"


def test_register_volumes_recovers_rigid_offset(phantom):
    t = RigidTransform.from_params((3, -2, 4), (1.0, -0.5, 0.7))
    c = phantom.center
    t = compose(compose(RigidTransform.from_translation(c), t), RigidTransform.from_translation(-c))
    from svrecon.pipeline import resample

    # moved(x) = phantom(t x), so the estimate should be t itself
    moved = resample(phantom, t.inverse(), phantom)
    est = register_volumes(moved, phantom)
    pts = np.argwhere(phantom.data > 0.2).astype(float)
    err = np.linalg.norm(est.apply(pts) - t.apply(pts), axis=1)
    assert err.max() < 0.3


# ------------------------------------------------------------------- flow

def _smooth_volume(n=24):
    x = np.arange(n, dtype=float)[:, None, None]
    y = np.arange(n, dtype=float)[None, :, None]
    z = np.arange(n, dtype=float)[None, None, :]
    c = (n - 1) / 2
    blob = np.exp(-((x - c + 2) ** 2 + (y - c) ** 2 * 0.7 + (z - c - 1) ** 2 * 1.3) / (2 * 5.0 ** 2))
    wave = 0.2 * np.sin(0.35 * x + 0.2 * y + 0.3 * z)
    return Volume(blob + wave + 0.5)


def test_flow_residual_known_inplane_shift_smooth_image():
    # observed(p) = simulated(p + (1, 0)) on a smooth image
    vol = _smooth_volume()
    g = PixelGrid(24, 24)
    pose = RigidTransform.from_translation((0.0, 0.0, 11.0))
    sim = simulate_slice_psf(vol, pose, g, thin_psf())
    obs = simulate_slice_psf(vol, compose(pose, RigidTransform.from_translation((1.0, 0.0, 0.0))),
                             g, thin_psf())
    d = flow_residual(sim, obs, 2.0)
    interior = np.zeros(g.shape, bool)
    interior[4:-4, 4:-4] = True
    mean = d.data[interior].mean(axis=0)
    assert np.linalg.norm(mean[:2] - (1.0, 0.0)) <= 0.1


def test_flow_residual_through_plane_matches_probe_search():
    vol = _smooth_volume()
    g = PixelGrid(24, 24)
    pose = RigidTransform.from_translation((0.0, 0.0, 11.0))

    def at(dz):
        return simulate_slice_psf(vol, compose(pose, RigidTransform.from_translation((0, 0, dz))),
                                  g, thin_psf())

    obs = at(1.0)  # one plane deeper
    d = flow_residual(at(0.0), obs, 2.0, probes=(at(-1.0), at(1.0)))
    m = obs.mask
    w = d.data[..., 2][m].mean()
    assert w > 0
    # brute force: the best whole-slice shift over ±2 voxels has the same sign
    shifts = np.arange(-2, 3)
    err = [np.sum((at(float(s)).data[m] - obs.data[m]) ** 2) for s in shifts]
    assert np.sign(shifts[int(np.argmin(err))]) == np.sign(w)


def test_flow_residual_finds_inplane_shift_on_phantom(phantom):
    # sharp edges break the linearization, so only direction and rough size hold
    sl = extract_stacks(phantom, ("axial",), thickness=1.0)[0].slices[12]
    moved = RigidTransform.from_translation((0.4, -0.3, 0.0))
    sim = simulate_slice_psf(phantom, compose(moved, sl.pose), sl.grid)
    d = flow_residual(sim, sl, 2.0)
    m = sl.mask & sim.mask
    # observed(p) = simulated(p + d): the shift that undoes the motion
    assert -0.8 < np.median(d.data[..., 0][m]) < -0.2
    assert 0.15 < np.median(d.data[..., 1][m]) < 0.6
    assert np.all(d.data[..., 2] == 0)


def test_flow_residual_zero_for_identical_slices():
    vol = _smooth_volume()
    g = PixelGrid(24, 24)
    pose = RigidTransform.from_translation((0.0, 0.0, 11.0))
    sim = simulate_slice_psf(vol, pose, g, thin_psf())
    probes = tuple(simulate_slice_psf(vol, compose(pose, RigidTransform.from_translation((0, 0, s))),
                                      g, thin_psf()) for s in (-1.0, 1.0))
    d = flow_residual(sim, sim, 2.0, probes=probes)
    assert np.abs(d.data).max() < 1e-12


def test_flow_residual_clamps_and_validates(phantom):
    sl = extract_stacks(phantom, ("axial",), thickness=1.0)[0].slices[12]
    sim = simulate_slice_psf(phantom, compose(RigidTransform.from_translation((3, 0, 0)), sl.pose), sl.grid)
    d = flow_residual(sim, sl, 0.5)
    assert np.linalg.norm(d.data, axis=-1).max() <= 0.5 + 1e-12
    with pytest.raises(ValueError):
        flow_residual(sim, Slice(PixelGrid(3, 3), np.zeros((3, 3))), 1.0)
    empty = Slice(sl.grid, sl.data, np.zeros(sl.grid.shape, bool))
    assert not flow_residual(sim, empty, 1.0).data.any()


# --------------------------------------------------------------- pyramid

def test_downsampled_pixels_sit_on_full_grid(phantom):
    sl = extract_stacks(phantom, ("axial",), thickness=1.0)[0].slices[12]
    half = downsample_slice(sl, 2)
    assert half.grid.shape == (12, 12) and half.grid.spacing == 2.0
    pose = sl.pose
    full_pts = pose.apply(sl.grid.points()).reshape(24, 24, 3)[::2, ::2]
    lvl = level_pose(pose, 2).apply(half.grid.points()).reshape(12, 12, 3)
    np.testing.assert_allclose(lvl * 2, full_pts, atol=1e-12)
    assert level_dims((24, 24, 24), 4) == (6, 6, 6)


# [DERIVED] zero motion: refinement stays at the prescribed poses
@pytest.mark.parametrize("levels", [1, 3, 5])
def test_multiscale_refine_null_motion_drift(phantom, levels):
    stacks = extract_stacks(phantom, thickness=1.0)
    out = multiscale_refine(stacks, None, ReconConfig(pyramid_levels=levels))
    assert len(out) == levels
    slices = [s for st in stacks for s in st.slices]
    grids = [s.grid for s in slices]
    poses = finalize(out[-1], grids)
    drift = [tre(field_from_transform(p, g), f, 1, sl.mask)
             for p, g, f, sl in zip(poses, grids, prescribed_fields(stacks), slices)]
    assert max(drift) <= 0.25


def test_multiscale_refine_single_stack_keeps_through_plane():
    ph = make_phantom("ellipsoids", 24, 1)
    sim = simulate(ph, MotionConfig(rot_sigma=0, trans_range=1.0, bulk_inplane_rot_range=0),
                   seed=3, thickness=1.0, orientations=("axial",))
    assert len(sim.stacks) == 1
    out = multiscale_refine(sim.stacks, None, ReconConfig(pyramid_levels=2))
    for f, sl in zip(out[-1], sim.stacks[0].slices):
        pre = field_from_transform(sl.pose, sl.grid)
        normal = sl.pose.rotation[:, 2]
        # no probes with one stack: the offset along the prescribed normal is unchanged
        assert np.allclose((f.data - pre.data) @ normal, 0.0, atol=1e-6)


def test_level_loss_zero_for_consistent_levels(rng):
    full = PixelGrid(9, 9)
    t = random_pose(rng)
    gts = [field_from_transform(t, full)]
    from svrecon.geometry import level_factor, level_grid

    levels = []
    for s in range(3):
        k = level_factor(s, 3)
        levels.append([field_from_transform(RigidTransform(t.rotation, t.translation / k), level_grid(full, k), s)])
    assert multilayer_residual_loss(levels, gts) < 1e-18
    with pytest.raises(ValueError):
        multilayer_residual_loss([[DisplacementField(np.zeros((2, 2, 3)))]], gts)


# ------------------------------------------------------------ alternation

@pytest.mark.parametrize("seed", [0, 1])
def test_alternating_svr_monotone_and_improves(seed):
    ph = make_phantom("ellipsoids", 16, seed)
    sim = simulate(ph, MotionConfig(rot_sigma=2, trans_range=1, bulk_inplane_rot_range=0,
                                    n_perturbations=(1, 2)), seed=seed, thickness=2.0)
    res = alternating_svr(sim.stacks, None, ReconConfig(outer_iters=3, pose_max_iters=5))
    h = np.array(res.data_consistency_history)
    assert len(h) == 4
    assert np.all(np.diff(h) <= 1e-6 * h[:-1])
    assert h[-1] < h[0]
    assert len(res.metrics_log) == 3 and len(res.poses) == sum(len(s) for s in sim.stacks)


def test_alternating_svr_writes_log(tmp_path):
    import io as _io
    import json

    ph = make_phantom("ellipsoids", 12, 0)
    sim = simulate(ph, MotionConfig(rot_sigma=1, trans_range=0.5), seed=0, thickness=2.0)
    buf = _io.StringIO()
    alternating_svr(sim.stacks, prescribed_fields(sim.stacks), ReconConfig(outer_iters=2, pose_max_iters=2),
                    log=buf)
    rows = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert [r["iteration"] for r in rows] == [1, 2]
    assert {"data_consistency", "slice_ncc", "mean_pose_step_deg"} <= set(rows[0])


def test_smooth_trajectory_keeps_constant_motion(phantom):
    stacks = extract_stacks(phantom, ("axial",), thickness=2.0)
    pre = [s.pose for s in stacks[0].slices]
    c = phantom.center
    m = compose(RigidTransform.from_translation(c), compose(RigidTransform.from_params((3, 1, -2), (0.5, 0, 0)),
                                                            RigidTransform.from_translation(-c)))
    moved = [compose(m, p) for p in pre]
    out = smooth_trajectory(moved, pre, np.arange(len(pre)), 2.0, c)
    for a, b in zip(out, moved):
        np.testing.assert_allclose(a.matrix, b.matrix, atol=1e-9)
