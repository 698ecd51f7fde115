import json

import numpy as np
import pytest

from svrecon import io
from svrecon.geometry import DisplacementField, RigidTransform
from svrecon.motion_sim import MotionConfig, simulate
from svrecon.phantoms import make_phantom
from svrecon.sampling import Volume


@pytest.fixture
def volume(rng):
    data = rng.standard_normal((5, 6, 7)).astype(np.float32).astype(np.float64)
    weight = (rng.uniform(size=data.shape) > 0.3).astype(np.float64)
    return Volume(data, (1.0, 1.5, 2.0), (0.5, -1.0, 3.0), weight)


def test_volume_round_trip_is_bitwise(tmp_path, volume):
    io.write_volume(tmp_path / "v", volume)
    back = io.read_volume(tmp_path / "v.json")
    assert np.array_equal(back.data, volume.data)
    assert np.array_equal(back.covered, volume.covered)
    assert np.array_equal(back.spacing, volume.spacing) and np.array_equal(back.origin, volume.origin)
    # x-fastest payload order
    raw = np.frombuffer((tmp_path / "v.raw").read_bytes(), "<f4")
    assert raw[1] == np.float32(volume.data[1, 0, 0])
    assert (tmp_path / "v.raw").stat().st_size == 5 * 6 * 7 * 4


def test_volume_without_mask(tmp_path, volume):
    io.write_volume(tmp_path / "v", volume, mask=False)
    assert not (tmp_path / "v.mask.raw").exists()
    assert io.read_volume(tmp_path / "v").covered.all()


def test_truncated_payload(tmp_path, volume):
    io.write_volume(tmp_path / "v", volume)
    raw = tmp_path / "v.raw"
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(io.TruncatedPayloadError) as err:
        io.read_volume(tmp_path / "v")
    assert err.value.to_dict()["error"] == "truncated_payload"


def test_dims_mismatch_names_the_field(tmp_path, volume):
    io.write_volume(tmp_path / "v", volume)
    head = json.loads((tmp_path / "v.json").read_text())
    head["dims"] = [5, 6, 6]
    (tmp_path / "v.json").write_text(json.dumps(head))
    with pytest.raises(io.DimsMismatchError) as err:
        io.read_volume(tmp_path / "v")
    assert err.value.to_dict()["field"] == "dims"


def test_dtype_mismatch(tmp_path, volume):
    io.write_volume(tmp_path / "v", volume)
    head = json.loads((tmp_path / "v.json").read_text())
    head["dtype"] = "int16"
    (tmp_path / "v.json").write_text(json.dumps(head))
    with pytest.raises(io.DtypeMismatchError):
        io.read_volume(tmp_path / "v")
    head["dtype"] = "float32"
    head["endianness"] = "big"
    (tmp_path / "v.json").write_text(json.dumps(head))
    with pytest.raises(io.DtypeMismatchError):
        io.read_volume(tmp_path / "v")


@pytest.mark.parametrize("header, field", [
    ("not json", "header"),
    ("[1, 2]", "header"),
    ('{"format": "other"}', "format"),
    ('{"format": "svrecon-volume", "dtype": "float32"}', "dims"),
    ('{"format": "svrecon-volume", "dims": [0, 2, 2], "dtype": "float32", "spacing": [1, 1, 1]}', "dims"),
    ('{"format": "svrecon-volume", "dims": [2, 2, 2], "dtype": "float32", "spacing": [1, 1]}', "spacing"),
])
def test_malformed_headers(tmp_path, header, field):
    (tmp_path / "v.json").write_text(header)
    (tmp_path / "v.raw").write_bytes(b"\0" * 32)
    with pytest.raises(io.MalformedHeaderError) as err:
        io.read_volume(tmp_path / "v")
    assert err.value.details["field"] == field


def test_error_codes_are_distinct():
    codes = {c.code for c in (io.MalformedHeaderError, io.TruncatedPayloadError,
                              io.DtypeMismatchError, io.DimsMismatchError)}
    assert len(codes) == 4


def test_stack_round_trip(tmp_path):
    ph = make_phantom("ellipsoids", 12, 0)
    sim = simulate(ph, MotionConfig(rot_sigma=3), seed=1, thickness=2.0)
    st = sim.stacks[1]
    for s in st.slices:
        s.data = s.data.astype(np.float32).astype(np.float64)
    io.write_stack(tmp_path / "s", st, provenance={"seed": 1})
    back = io.read_stack(tmp_path / "s.json")
    assert back.orientation_label == st.orientation_label
    assert back.slice_thickness == st.slice_thickness and back.slice_gap == st.slice_gap
    for a, b in zip(st.slices, back.slices):
        assert np.array_equal(a.data, b.data)
        assert np.array_equal(a.mask, b.mask)
        assert np.array_equal(a.pose.matrix, b.pose.matrix)
        assert a.acquisition_time_index == b.acquisition_time_index
    assert json.loads((tmp_path / "s.json").read_text())["provenance"] == {"seed": 1}
    # x-fastest within each slice, slices concatenated
    raw = np.frombuffer((tmp_path / "s.raw").read_bytes(), "<f4").reshape(len(st), 12, 12)
    for k in (0, 5):
        assert np.array_equal(raw[k], st.slices[k].data.T.astype(np.float32))


def test_stack_count_mismatch(tmp_path):
    ph = make_phantom("ellipsoids", 12, 0)
    st = simulate(ph, MotionConfig(), seed=1).stacks[0]
    io.write_stack(tmp_path / "s", st)
    head = json.loads((tmp_path / "s.json").read_text())
    head["slice_count"] += 1
    (tmp_path / "s.json").write_text(json.dumps(head))
    with pytest.raises(io.DimsMismatchError) as err:
        io.read_stack(tmp_path / "s")
    assert err.value.details["field"] == "slice_count"
    head["slices"].append(head["slices"][0])
    (tmp_path / "s.json").write_text(json.dumps(head))
    with pytest.raises(io.TruncatedPayloadError):
        io.read_stack(tmp_path / "s")


def test_fields_and_transforms_round_trip(tmp_path, rng):
    fields = [DisplacementField(rng.standard_normal((4, 3, 3)), level=i % 2) for i in range(5)]
    io.write_fields(tmp_path / "f", fields)
    back = io.read_fields(tmp_path / "f")
    for a, b in zip(fields, back):
        assert np.array_equal(a.data, b.data) and a.level == b.level
    with pytest.raises(ValueError):
        io.write_fields(tmp_path / "g", [fields[0], DisplacementField(np.zeros((2, 2, 3)))])
    ts = [RigidTransform.from_params(rng.normal(size=3) * 30, rng.normal(size=3)) for _ in range(4)]
    io.write_transforms(tmp_path / "t.json", ts)
    for a, b in zip(ts, io.read_transforms(tmp_path / "t.json")):
        assert np.array_equal(a.matrix, b.matrix)
    (tmp_path / "bad.json").write_text(json.dumps({"format": "svrecon-transforms", "transforms": [[1, 2]]}))
    with pytest.raises(io.MalformedHeaderError):
        io.read_transforms(tmp_path / "bad.json")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    io.atomic_write_bytes(tmp_path / "a" / "x.bin", b"123")
    io.atomic_write_bytes(tmp_path / "a" / "x.bin", b"45")
    assert (tmp_path / "a" / "x.bin").read_bytes() == b"45"
    assert [p.name for p in (tmp_path / "a").iterdir()] == ["x.bin"]


def test_manifest(tmp_path):
    cfg = {"b": 1, "a": [1, 2]}
    io.write_manifest(tmp_path, command="simulate", argv=["simulate"], config=cfg, seed=3,
                      inputs={"x": "y"}, outputs=["b", "a"])
    m = io.read_manifest(tmp_path)
    assert m["seed"] == 3 and m["outputs"] == ["a", "b"]
    assert m["config_sha256"] == io.config_hash({"a": [1, 2], "b": 1})
    assert {"svrecon", "numpy", "scipy", "python"} <= set(m["versions"])
    first = (tmp_path / "manifest.json").read_bytes()
    io.write_manifest(tmp_path, command="simulate", argv=["simulate"], config=cfg, seed=3,
                      inputs={"x": "y"}, outputs=["b", "a"])
    assert (tmp_path / "manifest.json").read_bytes() == first
