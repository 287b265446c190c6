import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from rlbind import tensorio


@given(st.dictionaries(st.text(min_size=1, max_size=8),
                       arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4),
                              elements=st.floats(allow_nan=False, width=64)),
                       max_size=4))
def test_round_trip_is_bit_exact(tensors):
    blob = tensorio.dumps(tensors, {"k": 1})
    back, meta = tensorio.loads(blob)
    assert meta == {"k": 1}
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == np.asarray(tensors[k]).tobytes()
    assert tensorio.dumps(back, meta) == blob


def test_layout(tmp_path):
    path = tmp_path / "t.rlbd"
    tensorio.save(path, {"a": np.array([1.0, 2.0])})
    raw = path.read_bytes()
    assert raw[:4] == b"RLBD"
    version, mlen = struct.unpack("<II", raw[4:12])
    assert version == 1
    assert raw[12 + mlen:] == np.array([1.0, 2.0], dtype="<f8").tobytes()
    assert not (tmp_path / "t.rlbd.tmp").exists()


@pytest.mark.parametrize("mutate, msg", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], "version"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b[:10], "truncated"),
    (lambda b: b + b"\0" * 8, "trailing"),
])
def test_corruption_detected(mutate, msg):
    blob = tensorio.dumps({"w": np.ones((2, 2))})
    with pytest.raises(tensorio.ContainerError, match=msg):
        tensorio.loads(mutate(blob))
