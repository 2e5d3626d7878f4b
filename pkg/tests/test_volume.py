import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial import cKDTree

from vamos_octa.errors import ConfigError, DataError, TruncationError, VolumeFormatError
from vamos_octa.volume import (MAGIC, PhantomConfig, ValidityMask, Volume, extract_stack,
                               generate_phantom, generate_phantom_with_vessels, load_mask,
                               load_volume, normalize, save_mask, save_volume)


def _write_raw(path, dims, values, magic=MAGIC):
    header = json.dumps({"n_slices": dims[0], "height": dims[1], "width": dims[2],
                         "dtype": "f32le"}).encode()
    with open(path, "wb") as fh:
        fh.write(magic + struct.pack("<I", len(header)) + header)
        fh.write(struct.pack(f"<{len(values)}f", *values))


unit_volumes = arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5)),
                      elements=st.floats(0, 1, width=32))


@settings(max_examples=50, deadline=None)
@given(data=unit_volumes)
def test_round_trip_bit_exact(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("rt") / "v.octav"
    v = Volume(data)
    save_volume(v, path)
    back = load_volume(path)
    assert back.shape == v.shape
    assert back.data.tobytes() == v.data.tobytes()


def test_save_is_deterministic(tmp_path, phantom7):
    save_volume(phantom7.volume, tmp_path / "a.octav")
    save_volume(phantom7.volume, tmp_path / "b.octav")
    assert (tmp_path / "a.octav").read_bytes() == (tmp_path / "b.octav").read_bytes()


def test_single_voxel_payload(tmp_path):
    save_volume(Volume(np.full((1, 1, 1), 0.5)), tmp_path / "v.octav")
    raw = (tmp_path / "v.octav").read_bytes()
    assert raw[:8] == b"OCTAVOL1"
    (hlen,) = struct.unpack_from("<I", raw, 8)
    assert json.loads(raw[12:12 + hlen]) == {"n_slices": 1, "height": 1, "width": 1, "dtype": "f32le"}
    assert raw[12 + hlen:] == struct.pack("<f", 0.5) == bytes.fromhex("0000003f")


def test_truncated_payload(tmp_path):
    _write_raw(tmp_path / "t.octav", (2, 2, 2), [0.1] * 7)
    with pytest.raises(TruncationError):
        load_volume(tmp_path / "t.octav")


def test_bad_magic(tmp_path):
    _write_raw(tmp_path / "m.octav", (1, 1, 1), [0.1], magic=b"NOTOCTA!")
    with pytest.raises(VolumeFormatError):
        load_volume(tmp_path / "m.octav")


def test_non_finite_payload(tmp_path):
    _write_raw(tmp_path / "n.octav", (1, 1, 2), [0.1, float("nan")])
    with pytest.raises(DataError):
        load_volume(tmp_path / "n.octav")


def test_phantom_file_dims(tmp_path):
    save_volume(generate_phantom(PhantomConfig(), 7), tmp_path / "p.octav")
    v = load_volume(tmp_path / "p.octav")
    assert (v.n_slices, v.height, v.width) == (64, 48, 96)


def test_volume_is_immutable(phantom7):
    with pytest.raises(ValueError):
        phantom7.volume.data[0, 0, 0] = 1.0
    with pytest.raises(AttributeError):
        phantom7.volume.data = np.zeros((1, 1, 1))


def test_normalize_range(rng):
    out = normalize(rng.normal(size=(3, 4, 5)) * 7 + 2)
    assert out.min() == 0.0 and out.max() == 1.0
    assert np.all(normalize(np.full((2, 2), 3.0)) == 0.0)


# --- masks and stacks -----------------------------------------------------


def test_mask_json_round_trip(tmp_path):
    m = ValidityMask.from_corrupted(10, [7, 2, 3])
    save_mask(m, tmp_path / "m.mask.json")
    assert json.loads((tmp_path / "m.mask.json").read_text()) == {"n_slices": 10, "corrupted": [2, 3, 7]}
    assert load_mask(tmp_path / "m.mask.json") == m


def _ramp_volume(n=64, h=3, w=4):
    # slice i holds the constant (i + 1) / (n + 1): every slice is distinguishable and non-zero
    return Volume(np.broadcast_to(((np.arange(n) + 1) / (n + 1))[:, None, None], (n, h, w)))


def test_stack_interior_fully_valid():
    v = _ramp_volume()
    st_ = extract_stack(v, ValidityMask.all_valid(64), 20, 9)
    expected = v.data[16:25].copy()
    expected[4] = 0
    np.testing.assert_array_equal(st_.slices, expected)
    assert st_.center_index == 20
    assert list(st_.stack_mask) == [True] * 4 + [False] + [True] * 4


def test_stack_boundary_clamp():
    v = _ramp_volume()
    st_ = extract_stack(v, ValidityMask.all_valid(64), 0, 9)
    # positions 0..3 replicate slice 0, which is the blanked target
    assert np.all(st_.slices[:5] == 0)
    np.testing.assert_array_equal(st_.slices[5:], v.data[1:5])
    last = extract_stack(v, ValidityMask.all_valid(64), 63, 9)
    np.testing.assert_array_equal(last.slices[:4], v.data[59:63])
    assert np.all(last.slices[4:] == 0)


def test_stack_boundary_clamp_without_blanking():
    v = _ramp_volume()
    st_ = extract_stack(v, ValidityMask.all_valid(64), 0, 9, blank_center=False)
    for pos in range(5):
        np.testing.assert_array_equal(st_.slices[pos], v.data[0])


def test_stack_neighbour_mask_zero_count():
    v = _ramp_volume()
    mask = ValidityMask.from_corrupted(64, [29, 31])
    st_ = extract_stack(v, mask, 30, 9)
    zero = [pos for pos in range(9) if not st_.slices[pos].any()]
    assert zero == [3, 4, 5]


def test_stack_target_out_of_range():
    with pytest.raises(IndexError):
        extract_stack(_ramp_volume(), ValidityMask.all_valid(64), 64, 9)
    with pytest.raises(ConfigError):
        extract_stack(_ramp_volume(), ValidityMask.all_valid(64), 3, 8)


@settings(max_examples=60, deadline=None)
@given(target=st.integers(0, 11), s=st.sampled_from([1, 3, 5, 9, 15]),
       bad=st.sets(st.integers(0, 11)))
def test_stack_shape_and_blank_centre(target, s, bad):
    v = _ramp_volume(12, 2, 3)
    st_ = extract_stack(v, ValidityMask.from_corrupted(12, bad), target, s)
    assert st_.slices.shape == (s, 2, 3)
    assert not st_.slices[s // 2].any()
    for pos in range(s):
        assert st_.slices[pos].any() == bool(st_.stack_mask[pos])


# --- phantoms ---------------------------------------------------------------


def test_phantom_deterministic(small_cfg):
    a = generate_phantom(small_cfg, 3)
    b = generate_phantom(small_cfg, 3)
    assert a.data.tobytes() == b.data.tobytes()
    assert generate_phantom(small_cfg, 4) != a


def test_phantom_vessel_support_within_radius():
    cfg = PhantomConfig(n_vessels=1, noise_level=0.0)
    ph = generate_phantom_with_vessels(cfg, 11)
    (vessel,) = ph.vessels
    nz = np.argwhere(ph.volume.data > 0)
    assert len(nz) > 0
    dist, _ = cKDTree(vessel.points).query(nz)
    assert dist.max() <= cfg.radius_range[1] + 1e-9
    assert 0.6 <= vessel.peak <= 1.0


def test_phantom_default_mean(phantom7):
    assert 0.02 < float(phantom7.volume.data.mean()) < 0.4


def test_phantom_config_errors():
    with pytest.raises(ConfigError):
        generate_phantom(PhantomConfig(n_vessels=0), 0)
    with pytest.raises(ConfigError):
        generate_phantom(PhantomConfig(height=0), 0)
