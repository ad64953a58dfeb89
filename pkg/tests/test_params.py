import math
import struct

import numpy as np
import pytest

from rexup.errors import CheckpointError
from rexup.harness import REFERENCE_LR
from rexup.params import (
    ParamStore,
    adam_step,
    checkpoint_bytes,
    clip_grad_norm,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)


def _store(rng):
    s = ParamStore()
    s.xavier("w", 3, 4, rng)
    s.zeros("b", 4)
    s.constant("gate", 1, 1.0)
    return s


def test_default_learning_rate():
    assert REFERENCE_LR == 0.0003
    assert adam_step.__defaults__[0] == 0.0003


def test_adam_zero_gradient_is_identity(rng):
    s = _store(rng)
    before = s.snapshot()
    for _ in range(3):
        adam_step(s)
    for k, v in before.items():
        assert np.array_equal(s.value(k), v)
    assert s.step_count == 3


def test_adam_first_step_moves_by_lr():
    s = ParamStore()
    s.add("x", np.array([1.0, 1.0]))
    s.accumulate("x", np.array([0.1, -0.1]))
    adam_step(s, lr=0.0003)
    np.testing.assert_allclose(s.value("x"), [1.0 - 0.0003, 1.0 + 0.0003], rtol=0, atol=1e-10)
    assert np.all(s.grad("x") == 0.0)


def test_adam_matches_reference_trajectory():
    s = ParamStore()
    s.add("x", np.array([0.5]))
    m = v = 0.0
    x = 0.5
    for t in range(1, 6):
        g = 2 * x
        s.accumulate("x", np.array([g]))
        adam_step(s, lr=0.1)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.1 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert math.isclose(s.value("x")[0], x, rel_tol=1e-12)


def test_clip_grad_norm():
    s = ParamStore()
    s.add("a", np.zeros(2))
    s.accumulate("a", np.array([6.0, 8.0]))
    assert clip_grad_norm(s, 8.0) == 10.0
    np.testing.assert_allclose(s.grad("a"), [4.8, 6.4])
    assert math.isclose(clip_grad_norm(s, 20.0), 8.0)
    np.testing.assert_allclose(s.grad("a"), [4.8, 6.4])


def test_entry_shapes_agree_and_names_unique(rng):
    s = _store(rng)
    for e in s.entries.values():
        assert e.value.shape == e.grad.shape == e.m.shape == e.v.shape
    with pytest.raises(ValueError):
        s.zeros("b", 4)


def test_xavier_is_seeded_and_bounded():
    a = ParamStore().xavier("w", 10, 6, np.random.default_rng(5))
    b = ParamStore().xavier("w", 10, 6, np.random.default_rng(5))
    assert np.array_equal(a, b)
    assert np.abs(a).max() <= math.sqrt(6 / 16)


@pytest.mark.parametrize("dtype", ["float64", "float32"])
def test_checkpoint_round_trip(tmp_path, rng, dtype):
    s = ParamStore(dtype)
    s.xavier("w", 3, 4, rng)
    s.zeros("b", 4)
    s.step_count = 17
    path = save_checkpoint(tmp_path / "m.ckpt", s, {"note": "x"})
    t, meta = load_checkpoint(path)
    assert meta == {"note": "x"}
    assert t.step_count == 17
    assert t.names() == s.names()
    for n in s.names():
        assert t.value(n).dtype == s.value(n).dtype
        assert t.value(n).tobytes() == s.value(n).tobytes()
    assert t.checksum() == s.checksum()


def test_checkpoint_layout(rng):
    blob = checkpoint_bytes(_store(rng))
    assert blob[:4] == b"RXUP"
    version, hlen = struct.unpack("<II", blob[4:12])
    assert version == 1
    import json

    header = json.loads(blob[12 : 12 + hlen])
    assert [e["name"] for e in header["entries"]] == ["w", "b", "gate"]
    assert header["entries"][1]["offset"] == 12 * 8
    assert len(blob) == 12 + hlen + (12 + 4 + 1) * 8


def test_checkpoint_errors(tmp_path, rng):
    blob = checkpoint_bytes(_store(rng))
    with pytest.raises(CheckpointError, match="magic"):
        parse_checkpoint(b"NOPE" + blob[4:])
    with pytest.raises(CheckpointError, match="version"):
        parse_checkpoint(blob[:4] + struct.pack("<I", 9) + blob[8:])
    with pytest.raises(CheckpointError, match="truncated"):
        parse_checkpoint(blob[:-8])
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_snapshot_restore_and_checksum(rng):
    s = _store(rng)
    snap, digest = s.snapshot(), s.checksum()
    s.value("w")[0, 0] += 1.0
    assert s.checksum() != digest
    s.restore(snap)
    assert s.checksum() == digest
