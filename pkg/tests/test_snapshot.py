import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sacseg import snapshot


def test_header_then_doubles():
    blob = snapshot.encode(np.array([[1.0, 2.0, 3.0]]))
    assert struct.unpack("<4I", blob[:16]) == (1, 1, 1, 3)
    assert np.frombuffer(blob[16:], "<f8").tolist() == [1.0, 2.0, 3.0]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=0, max_size=4), st.integers(0, 2 ** 32 - 1))
def test_round_trip(shape, seed):
    arr = np.random.default_rng(seed).normal(size=shape)
    out, end = snapshot.decode(snapshot.encode(arr))
    assert end == 16 + 8 * arr.size
    np.testing.assert_array_equal(out.reshape(arr.shape), arr)


def test_truncation_reports_offset():
    blob = snapshot.encode(np.ones((2, 2)))[:-4]
    with pytest.raises(ValueError, match="byte 16"):
        snapshot.decode(blob)


def test_rejects_five_dims():
    with pytest.raises(ValueError):
        snapshot.encode(np.zeros((1, 1, 1, 1, 1)))


def test_state_manifest(tmp_path):
    state = {"a.weight": np.arange(6.0).reshape(2, 3), "b": np.array([0.5])}
    snapshot.save_state(tmp_path / "w.bin", tmp_path / "w.json", state)
    back = snapshot.load_state(tmp_path / "w.bin", tmp_path / "w.json")
    assert list(back) == list(state)
    for k in state:
        np.testing.assert_array_equal(back[k], state[k])
    import json
    entries = json.loads((tmp_path / "w.json").read_text())["tensors"]
    assert entries[1]["offset"] == entries[0]["nbytes"] == 16 + 48
