import numpy as np
import pytest

from avdec import checkpoint


def test_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "enc/W": rng.standard_normal((3, 4)).astype(np.float32),
        "enc/b": rng.standard_normal((1, 4)).astype(np.float32),
        "scalar": np.float32(2.5).reshape(()),
        "core": rng.standard_normal((2, 3, 4)).astype(np.float32),
    }
    path = tmp_path / "m.dcav"
    checkpoint.save_tensors(path, tensors)
    loaded = checkpoint.load_tensors(path)
    assert set(loaded) == set(tensors)
    for name in tensors:
        assert np.array_equal(loaded[name], np.asarray(tensors[name]))
        assert loaded[name].dtype == np.float32


def test_header_layout(tmp_path):
    path = tmp_path / "m.dcav"
    checkpoint.save_tensors(path, {"x": np.zeros((2,), dtype=np.float32)})
    blob = path.read_bytes()
    assert blob[:4] == b"DCAV"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:12], "little") == 1  # name length
    assert blob[12:13] == b"x"
    assert int.from_bytes(blob[13:17], "little") == 1  # rank
    assert int.from_bytes(blob[17:21], "little") == 2  # dim
    assert len(blob) == 21 + 8


def test_sorted_names_give_identical_bytes(tmp_path):
    a = {"b": np.ones(2, dtype=np.float32), "a": np.zeros(3, dtype=np.float32)}
    b = dict(reversed(list(a.items())))
    checkpoint.save_tensors(tmp_path / "1.dcav", a)
    checkpoint.save_tensors(tmp_path / "2.dcav", b)
    assert (tmp_path / "1.dcav").read_bytes() == (tmp_path / "2.dcav").read_bytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.dcav"
    path.write_bytes(b"NOPE" + b"\x00" * 8)
    with pytest.raises(ValueError):
        checkpoint.load_tensors(path)
