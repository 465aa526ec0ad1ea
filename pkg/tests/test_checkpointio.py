import numpy as np
import pytest

from syncanim.checkpointio import read_container, write_container
from syncanim.errors import CorruptHeader

MAGIC = b"SYTST\x01"


def sample_tensors():
    rng = np.random.default_rng(0)
    return {
        "weights.a": rng.normal(size=(3, 4)).astype(np.float32),
        "weights.b": rng.normal(size=(7,)).astype(np.float64),
        "counts": np.arange(5, dtype=np.int64),
        "blob": rng.integers(0, 255, 16).astype(np.uint8),
    }


def test_round_trip(tmp_path):
    path = tmp_path / "c.bin"
    tensors = sample_tensors()
    meta = {"config": {"x": 1, "name": "t"}, "note": "hello"}
    write_container(path, MAGIC, tensors, meta)
    back, meta2 = read_container(path, MAGIC)
    assert meta2 == meta
    assert set(back) == set(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype
        assert np.array_equal(back[k], tensors[k])


def test_save_load_save_byte_identical(tmp_path):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    write_container(a, MAGIC, sample_tensors(), {"v": 2})
    tensors, meta = read_container(a, MAGIC)
    write_container(b, MAGIC, tensors, meta)
    assert a.read_bytes() == b.read_bytes()


def test_wrong_magic(tmp_path):
    path = tmp_path / "c.bin"
    write_container(path, MAGIC, sample_tensors(), {})
    with pytest.raises(CorruptHeader):
        read_container(path, b"WRONG\x01")


def test_truncated_payload(tmp_path):
    path = tmp_path / "c.bin"
    write_container(path, MAGIC, sample_tensors(), {})
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(CorruptHeader):
        read_container(path, MAGIC)


def test_truncated_header(tmp_path):
    path = tmp_path / "c.bin"
    path.write_bytes(MAGIC + b"\xff\xff\xff\x7f" + b"{}")
    with pytest.raises(CorruptHeader):
        read_container(path, MAGIC)
