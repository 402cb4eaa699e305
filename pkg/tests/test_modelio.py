import struct

import numpy as np
import pytest

from protoprobe.engine import ModelState, ShapeError, forward, init_model
from protoprobe.modelio import (
    MAGIC, ModelFileError, fingerprint, load_model, model_from_bytes, model_to_bytes, save_model,
    spec_from_text, spec_to_text, split,
)

from conftest import L, random_model, random_small_spec, tiny_conv_spec
from protoprobe.engine import NetworkSpec


def test_round_trip_is_bit_exact(tmp_path, rng):
    m = random_model(tiny_conv_spec(), rng)
    path = tmp_path / "m.ppm"
    save_model(m, path)
    back = load_model(path)
    assert back.spec == m.spec
    for a, b in zip(m.params, back.params):
        assert a.tobytes() == b.tobytes()
    probe = rng.random(m.spec.input_shape).astype(np.float32)
    assert forward(m, probe)[1].tobytes() == forward(back, probe)[1].tobytes()


def test_saving_twice_gives_identical_bytes(tmp_path, tiny_model):
    save_model(tiny_model, tmp_path / "a")
    save_model(tiny_model, tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_invalid_model_rejected_before_writing(tmp_path, tiny_model):
    bad = object.__new__(ModelState)
    object.__setattr__(bad, "spec", tiny_model.spec)
    object.__setattr__(bad, "params", (np.zeros((2, 2)),) + tiny_model.params[1:])
    with pytest.raises(ShapeError):
        save_model(bad, tmp_path / "bad")
    assert not (tmp_path / "bad").exists()


def test_header_layout(tiny_model):
    raw = model_to_bytes(tiny_model)
    assert raw[:8] == MAGIC == b"PROTOPRB"
    version, length = struct.unpack_from("<HI", raw, 8)
    assert version == 1
    text = raw[14:14 + length].decode()
    assert text.startswith("input=1,6,6\nclasses=3\nfeature_index=5\n")
    (count,) = struct.unpack_from("<I", raw, 14 + length)
    assert count == tiny_model.params[0].size
    first = np.frombuffer(raw, "<f4", count=count, offset=18 + length)
    assert first.tobytes() == tiny_model.params[0].astype("<f4").tobytes()


def test_wrong_magic(tiny_model):
    raw = bytearray(model_to_bytes(tiny_model))
    raw[0] ^= 0xFF
    with pytest.raises(ModelFileError, match="not a model file"):
        model_from_bytes(bytes(raw))


def test_truncated_parameter_block_names_layer(tiny_model):
    raw = model_to_bytes(tiny_model)
    with pytest.raises(ModelFileError, match="corrupt file.*layer"):
        model_from_bytes(raw[:-7])


def test_unknown_version(tiny_model):
    raw = bytearray(model_to_bytes(tiny_model))
    raw[8:10] = struct.pack("<H", 9)
    with pytest.raises(ModelFileError, match="unsupported version"):
        model_from_bytes(bytes(raw))


def test_trailing_bytes_are_corrupt(tiny_model):
    with pytest.raises(ModelFileError, match="corrupt file"):
        model_from_bytes(model_to_bytes(tiny_model) + b"\0")


def test_spec_text_round_trip(rng):
    for _ in range(20):
        spec = random_small_spec(rng)
        assert spec_from_text(spec_to_text(spec)) == spec


def test_spec_text_is_human_editable():
    text = """
    # hand-written fixture
    input=1,4,4
    classes=2
    feature_index=3
    conv2d in=1 out=2 kernel=3 stride=1 padding=1
    relu
    global_avg_pool
    dense in=2 out=2
    """
    spec = spec_from_text(text)
    assert spec.layers[0] == L.conv2d(1, 2, 3, 1, 1)
    assert spec.feature_width == 2
    with pytest.raises(ValueError, match="missing header"):
        spec_from_text("relu\n")
    with pytest.raises(ValueError, match="unknown keys"):
        spec_from_text("input=1,2,2\nclasses=4\nfeature_index=1\nflatten size=3\n")


def test_split_composes_bitwise(tiny_model, rng):
    g, h = split(tiny_model)
    for _ in range(10):
        x = rng.random(tiny_model.spec.input_shape).astype(np.float32)
        feats, probs = forward(tiny_model, x)
        assert g(x).tobytes() == feats.tobytes()
        assert h(g(x)).tobytes() == probs.tobytes()


def test_split_at_last_layer_is_softmax_only(rng):
    spec = NetworkSpec([L("flatten"), L.dense(4, 3)], (1, 2, 2), 3, 2)
    m = random_model(spec, rng)
    g, h = split(m)
    x = rng.random((1, 2, 2)).astype(np.float32)
    feats, probs = forward(m, x)
    assert feats.shape == (3,)
    assert h(g(x)).tobytes() == probs.tobytes()


def test_split_does_not_copy_parameters(tiny_model):
    g, h = split(tiny_model)
    assert g.model.params[0] is tiny_model.params[0]
    assert h.model.params[-1] is tiny_model.params[-1]


def test_fingerprint_tracks_parameters(tiny_model):
    other = init_model(tiny_model.spec, seed=99)
    assert fingerprint(tiny_model) == fingerprint(ModelState(tiny_model.spec, tiny_model.params))
    assert fingerprint(tiny_model) != fingerprint(other)
