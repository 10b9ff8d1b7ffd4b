import io

import numpy as np
import pytest

from viciousbench import tensorio
from viciousbench.errors import CheckpointFormatError


@pytest.mark.parametrize("dtype", ["<f4", "<f8", "<i8", "u1", "<i4", "?"])
def test_round_trip_each_dtype(dtype, rng):
    arr = (rng.random((3, 4, 2)) * 10).astype(dtype)
    buf = io.BytesIO()
    tensorio.write_tensor(buf, arr)
    buf.seek(0)
    back = tensorio.read_tensor(buf)
    assert back.dtype == arr.dtype and back.shape == arr.shape
    np.testing.assert_array_equal(back, arr)
    assert tensorio.read_tensor(buf) is None


def test_scalar_and_empty(tmp_path):
    arrays = [np.float64(3.5) * np.ones(()), np.zeros((0, 5), dtype=np.float32)]
    tensorio.save_tensors(tmp_path / "t.vbt", arrays)
    back = tensorio.read_tensors(tmp_path / "t.vbt")
    assert back[0].shape == () and back[0] == 3.5
    assert back[1].shape == (0, 5)


def test_many_records_in_order(tmp_path, rng):
    arrays = [rng.normal(size=(i + 1, 2)) for i in range(5)]
    tensorio.save_tensors(tmp_path / "m.vbt", arrays)
    back = tensorio.read_tensors(tmp_path / "m.vbt")
    assert len(back) == 5
    for a, b in zip(arrays, back):
        np.testing.assert_array_equal(a, b)
    assert not (tmp_path / "m.vbt.tmp").exists()


def test_bad_magic_rejected():
    with pytest.raises(CheckpointFormatError):
        tensorio.read_tensor(io.BytesIO(b"NOPE" + b"\0" * 20))


def test_truncated_body_rejected():
    buf = io.BytesIO()
    tensorio.write_tensor(buf, np.arange(10, dtype=np.int64))
    with pytest.raises(CheckpointFormatError):
        tensorio.read_tensor(io.BytesIO(buf.getvalue()[:-3]))


def test_unsupported_dtype():
    with pytest.raises(CheckpointFormatError):
        tensorio.write_tensor(io.BytesIO(), np.zeros(2, dtype=np.complex64))
