import numpy as np
import pytest

from cfquant import fileio
from cfquant.errors import FileFormatError
from cfquant.volume import Volume3D


def test_v3d_roundtrip_float(tmp_path):
    rng = np.random.default_rng(0)
    vol = Volume3D(rng.normal(size=(4, 5, 6)), (1.0, 1.5, 2.0))
    path = tmp_path / "vol.v3d"
    fileio.write_v3d(path, vol, meta={"subject_id": "s0001", "label": "CN"})
    back, meta = fileio.read_v3d(path)
    assert back.dims == (4, 5, 6)
    assert back.spacing_mm == pytest.approx((1.0, 1.5, 2.0))
    assert np.allclose(back.data, vol.data, atol=1e-6)   # f32 storage
    assert meta == {"subject_id": "s0001", "label": "CN"}


def test_v3d_roundtrip_labels(tmp_path):
    labels = np.arange(24, dtype=np.int32).reshape(2, 3, 4) % 5
    path = tmp_path / "atlas.v3d"
    fileio.write_v3d(path, None, labels=labels, spacing_mm=(2.0, 2.0, 2.0))
    back, spacing, _ = fileio.read_v3d(path)
    assert np.array_equal(back, labels)
    assert spacing == pytest.approx((2.0, 2.0, 2.0))


def test_v3d_payload_is_x_fastest(tmp_path):
    data = np.zeros((2, 2, 2))
    data[1, 0, 0] = 7.0
    path = tmp_path / "v.v3d"
    fileio.write_v3d(path, Volume3D(data))
    blob = path.read_bytes()
    voxels = np.frombuffer(blob, dtype="<f4", offset=4 + 4 * 4 + 3 * 4)
    assert voxels[1] == 7.0  # second voxel walks x first


def test_bad_magic_names_file(tmp_path):
    path = tmp_path / "broken.v3d"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(FileFormatError) as err:
        fileio.read_v3d(path)
    assert "broken.v3d" in str(err.value)


def test_truncated_payload(tmp_path):
    import struct
    path = tmp_path / "short.v3d"
    header = fileio.V3D_MAGIC + struct.pack("<4I3f", 4, 4, 4, 0, 1, 1, 1)
    path.write_bytes(header + b"\x00" * 8)
    with pytest.raises(FileFormatError):
        fileio.read_v3d(path)


def test_ckpt_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    params = {"enc1_w": rng.normal(size=(4, 1, 3, 3, 3)).astype(np.float32),
              "head_b": rng.normal(size=3).astype(np.float32)}
    path = tmp_path / "model.ckpt"
    fileio.write_ckpt(path, params)
    back = fileio.read_ckpt(path)
    assert set(back) == set(params)
    for name in params:
        assert np.array_equal(back[name], params[name])


def test_ckpt_bad_magic(tmp_path):
    path = tmp_path / "model.ckpt"
    path.write_bytes(b"JUNK!")
    with pytest.raises(FileFormatError):
        fileio.read_ckpt(path)


def test_meta_sorted_and_parsed(tmp_path):
    path = tmp_path / "x.v3d"
    fileio.write_meta(path, {"zeta": "1", "alpha": "two words", "mid": "3.5"})
    text = fileio.meta_path(path).read_text()
    assert text.splitlines() == ["alpha=two words", "mid=3.5", "zeta=1"]
    assert fileio.read_meta(path)["alpha"] == "two words"


def test_csv_roundtrip(tmp_path):
    path = tmp_path / "table.csv"
    fileio.write_csv(path, ["a", "b"], [[1, 2.5], ["x", "y"]])
    header, rows = fileio.read_csv(path)
    assert header == ["a", "b"]
    assert rows == [["1", "2.5"], ["x", "y"]]
