import json

import numpy as np
import pytest

from cgsolver.checkpoint import load_checkpoint, save_checkpoint
from cgsolver.exceptions import ParseError


def test_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a": rng.normal(size=(3, 4)),
        "b": np.array([np.pi, -0.0, 5e-324, 1.7976931348623157e308]),
        "scalar": np.array(2.5),
        "empty": np.zeros((0, 3)),
    }
    path = tmp_path / "ck.bin"
    save_checkpoint(path, tensors, {"solver.gamma": 0.5})
    back, cfg = load_checkpoint(path)
    assert cfg == {"solver.gamma": 0.5}
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_manifest_layout(tmp_path):
    path = tmp_path / "ck.bin"
    save_checkpoint(path, {"w": np.arange(3.0), "v": np.ones((2, 2))})
    raw = path.read_bytes()
    header, body = raw.split(b"\n", 1)
    manifest = json.loads(header)
    assert manifest["format"] == "cgsolver-checkpoint"
    entries = manifest["tensors"]
    assert [e["byte_offset"] for e in entries] == [0, 24]
    assert all(e["dtype"] == "f64" for e in entries)
    np.testing.assert_array_equal(np.frombuffer(body[:24], dtype="<f8"), [0.0, 1.0, 2.0])


def test_truncated_file(tmp_path):
    path = tmp_path / "ck.bin"
    save_checkpoint(path, {"w": np.arange(4.0)})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ParseError):
        load_checkpoint(path)


def test_wrong_format(tmp_path):
    path = tmp_path / "ck.bin"
    path.write_bytes(b'{"format": "other"}\n')
    with pytest.raises(ParseError):
        load_checkpoint(path)
