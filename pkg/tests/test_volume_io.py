import json

import numpy as np
import pytest

from mmdnn.volume_io import (
    HeaderError,
    NonFiniteError,
    PayloadLengthError,
    RoiAtlas,
    Volume,
    VolumeValidationError,
    read_volume,
    write_volume,
)


def test_single_voxel_round_trip(tmp_path):
    vol = Volume((1, 1, 1), (1.0, 1.0, 1.0), [0.0])
    path = tmp_path / "a.svol"
    write_volume(vol, path)
    raw = path.read_bytes()
    header_len = raw.index(b"\n") + 1
    assert len(raw) == header_len + 4
    head = json.loads(raw[:header_len])
    assert head == {"dims": [1, 1, 1], "spacing": [1.0, 1.0, 1.0], "dtype": "f32", "count": 1}
    assert read_volume(path) == vol


def test_x_fastest_ordering(tmp_path):
    vol = Volume((2, 2, 2), (1.0, 2.0, 3.0), np.arange(8, dtype=np.float32))
    write_volume(vol, tmp_path / "b.svol")
    back = read_volume(tmp_path / "b.svol")
    assert back == vol
    grid = back.grid()
    nx, ny = 2, 2
    for z in range(2):
        for y in range(2):
            for x in range(2):
                assert grid[x, y, z] == x + nx * (y + ny * z)
    payload = (tmp_path / "b.svol").read_bytes().split(b"\n", 1)[1]
    assert np.frombuffer(payload, "<f4").tolist() == list(range(8))


def test_exhaustive_ordering_random_dims(rng):
    dims = (3, 4, 5)
    grid = rng.normal(size=dims).astype(np.float32)
    vol = Volume.from_grid(grid)
    for (x, y, z), v in np.ndenumerate(grid):
        assert vol.data[x + 3 * (y + 4 * z)] == v
    coords = vol.coordinates()
    assert np.array_equal(vol.grid()[coords[:, 0], coords[:, 1], coords[:, 2]], vol.data)


def test_nan_rejected(tmp_path):
    with pytest.raises(NonFiniteError):
        Volume((2, 1, 1), (1, 1, 1), [0.0, np.nan])
    vol = Volume((2, 1, 1), (1, 1, 1), [0.0, 1.0])
    vol.data[1] = np.inf
    with pytest.raises(NonFiniteError):
        write_volume(vol, tmp_path / "bad.svol")


def test_truncated_payload(tmp_path):
    vol = Volume((2, 2, 1), (1, 1, 1), [1, 2, 3, 4])
    path = tmp_path / "t.svol"
    write_volume(vol, path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(PayloadLengthError):
        read_volume(path)


def test_zero_dim_header(tmp_path):
    path = tmp_path / "z.svol"
    path.write_bytes(b'{"dims":[0,1,1],"spacing":[1,1,1],"dtype":"f32"}\n')
    with pytest.raises(VolumeValidationError):
        read_volume(path)


@pytest.mark.parametrize("header", [b"not json\n", b'{"dims":[1,1,1]}\n', b"no newline"])
def test_malformed_header(tmp_path, header):
    path = tmp_path / "m.svol"
    path.write_bytes(header + b"\0\0\0\0")
    with pytest.raises(HeaderError):
        read_volume(path)


def test_error_kinds_are_distinct():
    assert not issubclass(PayloadLengthError, HeaderError)
    assert not issubclass(HeaderError, PayloadLengthError)
    assert not issubclass(NonFiniteError, (HeaderError, PayloadLengthError))


def test_bit_exact_round_trip_random(tmp_path, rng):
    for i in range(5):
        dims = tuple(int(d) for d in rng.integers(1, 7, size=3))
        data = rng.normal(scale=10 ** rng.uniform(-30, 30), size=int(np.prod(dims))).astype(np.float32)
        vol = Volume(dims, tuple(rng.uniform(0.1, 3, size=3)), data)
        write_volume(vol, tmp_path / f"r{i}.svol")
        back = read_volume(tmp_path / f"r{i}.svol")
        assert back.data.tobytes() == vol.data.tobytes()
        assert back.spacing_mm == vol.spacing_mm


def test_roi_atlas_validation():
    ok = Volume((3, 1, 1), (1, 1, 1), [0, 1, 2])
    assert RoiAtlas(ok, 2).roi_sizes().tolist() == [1, 1, 1]
    with pytest.raises(VolumeValidationError):
        RoiAtlas(Volume((3, 1, 1), (1, 1, 1), [0, 1, 1.5]), 2)
    with pytest.raises(VolumeValidationError):
        RoiAtlas(Volume((3, 1, 1), (1, 1, 1), [0, 1, 1]), 2)  # label 2 missing
    with pytest.raises(VolumeValidationError):
        RoiAtlas(Volume((3, 1, 1), (1, 1, 1), [0, 1, 3]), 2)
