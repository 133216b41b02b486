import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from vbmix.errors import ValidationError, VolumeFormatError
from vbmix.volume import (
    MissingPattern,
    MultiChannelVolume,
    PhantomSpec,
    apply_fov_mask,
    concentric_probabilities,
    drop_channels,
    generate_phantom,
    phantom_spec_from_dict,
    read_volume,
    write_volume,
)


def _write_raw(tmp_path, name, header, payload):
    (tmp_path / f"{name}.json").write_text(json.dumps(header))
    (tmp_path / f"{name}.raw").write_bytes(payload)
    return tmp_path / name


HEADER = {"dims": [2, 2, 1], "channels": 1, "dtype": "f32le", "order": "channel-major", "version": 1}


def test_smallest_well_formed_file(tmp_path):
    p = _write_raw(tmp_path, "v", HEADER, np.arange(4, dtype="<f4").tobytes())
    vol = read_volume(p)
    assert vol.n_voxels == 4 and vol.channels == 1
    np.testing.assert_array_equal(vol.data[:, 0], [0, 1, 2, 3])


def test_truncated_data_is_size_mismatch(tmp_path):
    p = _write_raw(tmp_path, "v", HEADER, np.arange(4, dtype="<f4").tobytes()[:-4])
    with pytest.raises(VolumeFormatError, match="size mismatch"):
        read_volume(p)


@pytest.mark.parametrize(
    "header",
    [
        {k: v for k, v in HEADER.items() if k != "dims"},
        {**HEADER, "dims": [2, 2]},
        {**HEADER, "dtype": "f64le"},
        {**HEADER, "version": 2},
    ],
)
def test_bad_header_rejected(tmp_path, header):
    p = _write_raw(tmp_path, "v", header, np.zeros(4, dtype="<f4").tobytes())
    with pytest.raises(VolumeFormatError):
        read_volume(p)


def test_missing_files(tmp_path):
    with pytest.raises(VolumeFormatError, match="header"):
        read_volume(tmp_path / "nothing")
    (tmp_path / "v.json").write_text(json.dumps(HEADER))
    with pytest.raises(VolumeFormatError, match="data file"):
        read_volume(tmp_path / "v")


def test_all_missing_file_rejected(tmp_path):
    p = _write_raw(tmp_path, "v", HEADER, np.full(4, np.nan, dtype="<f4").tobytes())
    with pytest.raises(VolumeFormatError):
        read_volume(p)


def test_inf_rejected():
    with pytest.raises(ValidationError):
        MultiChannelVolume((1, 1, 2), np.array([[1.0], [np.inf]]))


def test_single_voxel_three_channels_is_12_bytes(tmp_path):
    write_volume(MultiChannelVolume((1, 1, 1), np.array([[1.0, 2.0, 3.0]])), tmp_path / "v")
    assert (tmp_path / "v.raw").stat().st_size == 12


def test_missing_entry_offset(tmp_path):
    dims, M = (3, 4, 5), 2
    rng = np.random.default_rng(1)
    grid = rng.standard_normal((M,) + dims).astype(np.float32)
    i, j, k, c = 2, 1, 3, 1
    grid[c, i, j, k] = np.nan
    # data[d, c] with d the C-order flat index of (i, j, k)
    data = grid.reshape(M, -1).T
    write_volume(MultiChannelVolume(dims, data), tmp_path / "v")
    raw = np.frombuffer((tmp_path / "v.raw").read_bytes(), dtype="<f4")
    expected_offset = c * (3 * 4 * 5) + (i * 4 + j) * 5 + k
    assert np.flatnonzero(np.isnan(raw)).tolist() == [expected_offset]


@settings(max_examples=40, deadline=None)
@given(
    dims=st.tuples(*[st.integers(1, 4)] * 3),
    M=st.integers(1, 4),
    seed=st.integers(0, 2**32 - 1),
    p=st.floats(0.0, 0.9),
)
def test_round_trip_is_bitwise(tmp_path_factory, dims, M, seed, p):
    rng = np.random.default_rng(seed)
    D = int(np.prod(dims))
    data = (rng.standard_normal((D, M)) * 10.0 ** rng.integers(-20, 20)).astype(np.float32)
    data[rng.random((D, M)) < p] = np.nan
    data[0, 0] = 1.0
    vol = MultiChannelVolume(dims, data)
    path = tmp_path_factory.mktemp("rt") / "v"
    write_volume(vol, path)
    back = read_volume(str(path) + ".raw")
    assert back == vol
    assert back.data.tobytes() == vol.data.tobytes()


def test_pattern_codes_and_groups():
    data = np.array([[1, np.nan], [np.nan, np.nan], [1, 2], [np.nan, 3], [4, 5]], dtype=float)
    vol = MultiChannelVolume((5, 1, 1), data)
    assert vol.pattern_codes.tolist() == [1, 0, 3, 2, 3]
    groups = {g.pattern.code: g.index.tolist() for g in vol.pattern_groups}
    assert groups == {0: [1], 1: [0], 2: [3], 3: [2, 4]}
    pat = MissingPattern.from_observed([0, 2], 3)
    assert pat.o.tolist() == [0, 2] and pat.m.tolist() == [1]
    assert MissingPattern.from_code(pat.code, 3) == pat


def _vol(dims, M=2, seed=0):
    rng = np.random.default_rng(seed)
    return MultiChannelVolume(dims, rng.standard_normal((int(np.prod(dims)), M)))


def test_fov_fraction_zero_and_one():
    vol = _vol((3, 3, 4))
    assert apply_fov_mask(vol, 1, 0.0) == vol
    full = apply_fov_mask(vol, 1, 1.0)
    assert np.isnan(full.data[:, 1]).all()
    assert np.isfinite(full.data[:, 0]).all()


def test_fov_half_slab_inferior_counts():
    vol = _vol((4, 4, 8))
    out = apply_fov_mask(vol, 1, 0.5, "slab-inferior")
    grid = out.channel_grid(1)
    # independent count of missing voxels per slice along the third axis
    per_slice = [int(np.isnan(grid[:, :, s]).sum()) for s in range(8)]
    assert per_slice == [16] * 4 + [0] * 4
    sup = apply_fov_mask(vol, 1, 0.5, "slab-superior").channel_grid(1)
    assert [int(np.isnan(sup[:, :, s]).sum()) for s in range(8)] == [0] * 4 + [16] * 4


def test_fov_random_scheme():
    vol = _vol((5, 5, 4))
    a = apply_fov_mask(vol, 0, 0.3, "random", seed=7)
    b = apply_fov_mask(vol, 0, 0.3, "random", seed=7)
    assert a == b
    assert np.isnan(a.data[:, 0]).sum() == math.ceil(0.3 * 100)


def test_fov_validation():
    vol = _vol((2, 2, 2))
    with pytest.raises(ValidationError):
        apply_fov_mask(vol, 2, 0.5)
    with pytest.raises(ValidationError):
        apply_fov_mask(vol, 0, 1.5)
    with pytest.raises(ValidationError):
        apply_fov_mask(vol, 0, 0.5, "diagonal")


def test_drop_channels():
    out = drop_channels(_vol((2, 2, 2), M=3), [0, 2])
    assert np.isnan(out.data[:, [0, 2]]).all() and np.isfinite(out.data[:, 1]).all()


def test_phantom_determinism():
    spec = PhantomSpec((4, 4, 4), [[0.0], [5.0]], [[[1.0]], [[2.0]]], [0.3, 0.7], seed=3)
    v1, l1 = generate_phantom(spec)
    v2, l2 = generate_phantom(spec)
    assert v1.data.tobytes() == v2.data.tobytes() and np.array_equal(l1, l2)
    v3, _ = generate_phantom(spec.with_seed(4))
    assert v3 != v1


def test_phantom_mean_within_standard_error():
    dims = (50, 50, 40)
    D = int(np.prod(dims))
    mean = [1.5, -2.0, 0.25]
    spec = PhantomSpec(dims, [mean], [np.eye(3)], [1.0], seed=11)
    vol, labels = generate_phantom(spec)
    assert (labels == 0).all()
    bound = 3.0 / math.sqrt(D)
    assert bound < 0.02
    np.testing.assert_array_less(np.abs(vol.data.astype(float).mean(axis=0) - mean), bound)


def test_phantom_degenerate_probabilities():
    dims = (3, 3, 3)
    probs = np.zeros((27, 3))
    probs[:, 1] = 1.0
    spec = PhantomSpec(dims, [[0.0], [1.0], [2.0]], [[[1.0]]] * 3, probs, seed=0)
    _, labels = generate_phantom(spec)
    assert (labels == 1).all()


def test_phantom_label_frequencies_chi_square():
    props = np.array([0.2, 0.5, 0.3])
    spec = PhantomSpec((20, 20, 20), [[0.0], [1.0], [2.0]], [[[1.0]]] * 3, props, seed=5)
    _, labels = generate_phantom(spec)
    counts = np.bincount(labels, minlength=3)
    assert stats.chisquare(counts, props * counts.sum()).pvalue > 1e-3


def test_phantom_spec_validation():
    with pytest.raises(ValidationError):
        PhantomSpec((2, 2, 2), [[0.0]], [[[-1.0]]], [1.0])
    with pytest.raises(ValidationError):
        PhantomSpec((2, 2, 2), [[0.0], [1.0]], [[[1.0]], [[1.0]]], [0.5, 0.6])


def test_concentric_probabilities_and_spec_dict():
    probs = concentric_probabilities((6, 6, 6), 3)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    centre = probs.reshape(6, 6, 6, 3)[3, 3, 3]
    corner = probs.reshape(6, 6, 6, 3)[0, 0, 0]
    assert centre.argmax() == 0 and corner.argmax() == 2
    doc = {"dims": [6, 6, 6], "means": [[0.0], [1.0], [2.0]], "covariances": [[[1.0]]] * 3,
           "layout": "concentric", "seed": 9}
    spec = phantom_spec_from_dict(doc)
    assert spec.seed == 9 and spec.probabilities.shape == (216, 3)
    with pytest.raises(ValidationError):
        phantom_spec_from_dict({"dims": [1, 1, 1]})
