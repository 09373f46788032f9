import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxinit import checkpoint as C
from voxinit.dataio import FormatError
from voxinit.model import SSL_HEADS, HybridSegModel, ModelConfig


def sample_ckpt():
    rng = np.random.default_rng(0)
    return C.Checkpoint({"a.weight": rng.normal(size=(2, 3)).astype(np.float32),
                         "b": np.array(1.5, dtype=np.float32),
                         "c.bias": rng.normal(size=(4,)).astype(np.float32)},
                        {"dims": [8, 8, 8]}, {"seed": 3}, {"step": "step1"})


def test_round_trip_bit_exact(tmp_path):
    ck = sample_ckpt()
    C.save(tmp_path / "x.ckpt", ck)
    back = C.load(tmp_path / "x.ckpt")
    assert list(back.tensors) == list(ck.tensors)
    for n in ck.tensors:
        assert back.tensors[n].tobytes() == ck.tensors[n].tobytes()
        assert back.tensors[n].shape == ck.tensors[n].shape
    assert (back.model_config, back.run_config, back.extra) == (ck.model_config, ck.run_config, ck.extra)


def test_model_round_trip():
    m = HybridSegModel(ModelConfig(), SSL_HEADS, seed=4)
    back = C.decode(C.encode(C.from_model(m, {"seed": 4})))
    assert ModelConfig.from_dict(back.model_config) == m.cfg
    for n, t in m.params.items():
        assert back.tensors[n].tobytes() == t.data.tobytes()


def test_layout_prefix():
    buf = C.encode(C.Checkpoint({"w": np.ones((2,), np.float32)}))
    assert buf[:4] == b"VWI1"
    assert struct.unpack_from("<II", buf, 4) == (1, 1)
    assert struct.unpack_from("<I", buf, 12) == (1,) and buf[16:17] == b"w"


@pytest.mark.parametrize("mutate,msg", [
    (lambda b: b"ABCD" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 7) + b[8:], "version"),
    (lambda b: b[:20], "truncated"),
    (lambda b: b + b"!", "trailing"),
    (lambda b: b[:-3] + b"\xff\xfe}", "JSON"),
])
def test_corrupt_checkpoints(mutate, msg):
    with pytest.raises(FormatError, match=msg):
        C.decode(mutate(C.encode(sample_ckpt())))


def test_duplicate_names_rejected():
    one = C.encode(C.Checkpoint({"w": np.ones(1, np.float32)}))
    entry = one[12:12 + 4 + 1 + 4 + 4 + 4]
    buf = one[:8] + struct.pack("<I", 2) + entry + entry + one[12 + len(entry):]
    with pytest.raises(FormatError, match="duplicate"):
        C.decode(buf)


@settings(max_examples=80, deadline=None)
@given(st.data())
def test_random_truncation_or_flip_never_crashes(data):
    buf = bytearray(C.encode(sample_ckpt()))
    if data.draw(st.booleans()):
        buf = buf[:data.draw(st.integers(0, len(buf) - 1))]
    else:
        i = data.draw(st.integers(0, len(buf) - 1))
        buf[i] ^= data.draw(st.integers(1, 255))
    try:
        C.decode(bytes(buf))
    except FormatError:
        pass
