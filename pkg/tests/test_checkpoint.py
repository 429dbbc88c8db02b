"""Binary tensor-record checkpoint format."""

import numpy as np
import pytest

from scvqa.checkpoint import (MAGIC, CheckpointError, load_tensors,
                              save_tensors)


@pytest.fixture
def tensors():
    rng = np.random.default_rng(0)
    return {"enc/w": rng.standard_normal((4, 3)),
            "enc/b": rng.standard_normal(3),
            "scalarish": np.array(2.5),
            "deep": rng.standard_normal((2, 2, 2))}


def test_roundtrip_exact(tmp_path, tensors):
    path = tmp_path / "ck.bin"
    save_tensors(path, tensors)
    loaded = load_tensors(path)
    assert set(loaded) == set(tensors)
    for name, arr in tensors.items():
        np.testing.assert_array_equal(loaded[name], np.atleast_1d(arr)
                                      if arr.ndim == 0 else arr)
        assert loaded[name].dtype == np.float64


def test_two_saves_byte_identical(tmp_path, tensors):
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_tensors(p1, tensors)
    save_tensors(p2, dict(reversed(list(tensors.items()))))
    assert p1.read_bytes() == p2.read_bytes()


def test_magic_present(tmp_path, tensors):
    path = tmp_path / "ck.bin"
    save_tensors(path, tensors)
    assert path.read_bytes()[:4] == MAGIC


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "ck.bin"
    path.write_bytes(b"XXXX" + b"\x00" * 32)
    with pytest.raises(CheckpointError):
        load_tensors(path)


def test_truncation_rejected(tmp_path, tensors):
    path = tmp_path / "ck.bin"
    save_tensors(path, tensors)
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(CheckpointError):
        load_tensors(path)


def test_trailing_bytes_rejected(tmp_path, tensors):
    path = tmp_path / "ck.bin"
    save_tensors(path, tensors)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(CheckpointError):
        load_tensors(path)


def test_empty_dict_roundtrip(tmp_path):
    path = tmp_path / "ck.bin"
    save_tensors(path, {})
    assert load_tensors(path) == {}
