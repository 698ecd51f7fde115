import numpy as np
import pytest

from svrecon.forward_model import Slice, SliceStack
from svrecon.geometry import PixelGrid
from svrecon.init_recon import EmptyInputError, default_geometry, flatten_fields, init_volume
from svrecon.motion_sim import extract_stacks, prescribed_fields
from svrecon.phantoms import make_phantom
from svrecon.sampling import make_boxcar_psf


# [DERIVED] lattice-aligned thin slices splat back to the exact voxel values
@pytest.mark.parametrize("kind", ["ellipsoids", "checker"])
def test_lossless_round_trip(kind):
    ph = make_phantom(kind, 16, 3)
    stacks = extract_stacks(ph, psf_kind="thin")
    vol = init_volume(stacks, prescribed_fields(stacks), ph.dims, 1.0)
    cov = vol.covered
    assert cov.sum() > 0.5 * (ph.data > 0).sum()
    assert np.abs(vol.data[cov] - ph.data[cov]).max() <= 1e-6


def test_boxcar_thick_slices_reproduce_smooth_volume():
    # a volume constant along z is reproduced by thick axial slices
    data = np.zeros((12, 12, 12))
    data[3:9, 3:9, :] = 0.7
    from svrecon.sampling import Volume

    ph = Volume(data)
    stacks = extract_stacks(ph, ("axial",), thickness=3.0, psf_kind="boxcar")
    psf = make_boxcar_psf(3.0, 1.0)
    vol = init_volume(stacks, prescribed_fields(stacks), ph.dims, 1.0, psf=psf)
    cov = vol.covered
    np.testing.assert_allclose(vol.data[cov], data[cov], atol=1e-12)


def test_fields_may_be_nested_or_flat():
    ph = make_phantom("checker", 8)
    stacks = extract_stacks(ph, psf_kind="thin")
    flat = prescribed_fields(stacks)
    nested, i = [], 0
    for st in stacks:
        nested.append(flat[i:i + len(st)])
        i += len(st)
    assert len(flatten_fields(stacks, nested)) == len(flat)
    with pytest.raises(ValueError):
        flatten_fields(stacks, flat[:-1])


def test_indicator_ignores_zero_intensities():
    ph = make_phantom("checker", 8)
    stacks = extract_stacks(ph, psf_kind="thin")
    vol = init_volume(stacks, prescribed_fields(stacks), indicator=True)
    assert np.all(vol.data[vol.covered] > 0)


def test_default_geometry_and_empty_input():
    g = PixelGrid(6, 6)
    st = SliceStack([Slice(g, np.zeros((6, 6)), np.zeros((6, 6), bool))], "axial", 1.0)
    assert default_geometry([st]) == ((6, 6, 6), 1.0)
    from svrecon.geometry import DisplacementField

    with pytest.raises(EmptyInputError):
        init_volume([st], [DisplacementField.zeros(g)])
