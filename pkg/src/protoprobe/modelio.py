"""Model files and the feature-extractor / head split.

File layout (all integers little-endian)::

    0..7     magic  b"PROTOPRB"
    8..9     version (uint16, currently 1)
    10..13   spec block length L (uint32)
    14..14+L UTF-8 spec text
    rest     per parameter tensor: uint32 element count, then float32 values

The spec text has header lines ``input=C,H,W``, ``classes=K``,
``feature_index=i`` followed by one ``kind key=value ...`` line per layer.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from pathlib import Path

import numpy as np

from .engine import LayerSpec, ModelState, NetworkSpec, Tape, _as_batch, softmax

MAGIC = b"PROTOPRB"
VERSION = 1

_LAYER_KEYS = {
    "dense": (("in", "in_size"), ("out", "out_size")),
    "conv2d": (("in", "in_size"), ("out", "out_size"), ("kernel", "kernel"),
               ("stride", "stride"), ("padding", "padding")),
}


class ModelFileError(ValueError):
    pass


def spec_to_text(spec: NetworkSpec) -> str:
    lines = [
        "input=" + ",".join(str(s) for s in spec.input_shape),
        f"classes={spec.classes}",
        f"feature_index={spec.feature_index}",
    ]
    for layer in spec.layers:
        keys = _LAYER_KEYS.get(layer.kind, ())
        lines.append(" ".join([layer.kind] + [f"{k}={getattr(layer, attr)}" for k, attr in keys]))
    return "\n".join(lines) + "\n"


def spec_from_text(text: str) -> NetworkSpec:
    header, layers = {}, []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        if "=" in head and not rest:
            key, value = head.split("=", 1)
            header[key] = value
            continue
        kind = head
        try:
            kv = dict(item.split("=", 1) for item in rest)
            names = dict(_LAYER_KEYS.get(kind, ()))
            unknown = set(kv) - set(names)
            if unknown:
                raise ValueError(f"unknown keys {sorted(unknown)}")
            layers.append(LayerSpec(kind, **{names[k]: int(v) for k, v in kv.items()}))
        except (TypeError, ValueError) as exc:
            raise ValueError(f"spec line {n} ({line!r}): {exc}") from None
    try:
        shape = tuple(int(v) for v in header["input"].split(","))
        return NetworkSpec(tuple(layers), shape, int(header["classes"]), int(header["feature_index"]))
    except KeyError as exc:
        raise ValueError(f"spec is missing header line {exc.args[0]}=...") from None


def model_to_bytes(model: ModelState) -> bytes:
    # re-validate so nothing malformed reaches the writer
    model = ModelState(model.spec, model.params)
    text = spec_to_text(model.spec).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(text)))
    buf.write(text)
    for p in model.params:
        buf.write(struct.pack("<I", p.size))
        buf.write(p.astype("<f4").tobytes())
    return buf.getvalue()


def model_from_bytes(raw: bytes) -> ModelState:
    if len(raw) < 8 or raw[:8] != MAGIC:
        raise ModelFileError("not a model file")
    if len(raw) < 14:
        raise ModelFileError("corrupt file: header truncated")
    version, length = struct.unpack_from("<HI", raw, 8)
    if version != VERSION:
        raise ModelFileError(f"unsupported version {version}")
    if len(raw) < 14 + length:
        raise ModelFileError("corrupt file: spec block truncated")
    try:
        spec = spec_from_text(raw[14:14 + length].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise ModelFileError(f"corrupt file: bad spec block ({exc})") from None

    owners = [(i, layer) for i, layer in enumerate(spec.layers) for _ in layer.param_shapes()]
    shapes = spec.param_shapes()
    params, pos = [], 14 + length
    for n, ((i, layer), shape) in enumerate(zip(owners, shapes)):
        what = f"layer {i} ({layer.kind}) {'weight' if n % 2 == 0 else 'bias'}"
        if pos + 4 > len(raw):
            raise ModelFileError(f"corrupt file: missing {what}")
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if count != int(np.prod(shape)):
            raise ModelFileError(f"corrupt file: {what} declares {count} values, expected {int(np.prod(shape))}")
        if pos + 4 * count > len(raw):
            raise ModelFileError(f"corrupt file: {what} truncated")
        params.append(np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape))
        pos += 4 * count
    if pos != len(raw):
        raise ModelFileError(f"corrupt file: {len(raw) - pos} trailing bytes")
    return ModelState(spec, tuple(params))


def save_model(model: ModelState, destination) -> None:
    """Write `model`; invalid models are rejected before the file is touched."""
    data = model_to_bytes(model)
    path = Path(destination)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def load_model(source) -> ModelState:
    return model_from_bytes(Path(source).read_bytes())


def fingerprint(model: ModelState) -> str:
    """First 16 hex digits of the SHA-256 of the serialised model."""
    return hashlib.sha256(model_to_bytes(model)).hexdigest()[:16]


# --------------------------------------------------------------------------
# g / h split


class FeatureExtractor:
    """Layers before ``feature_index``: input -> float32 feature vectors."""

    def __init__(self, model: ModelState):
        self.model = model

    def __call__(self, x: np.ndarray) -> np.ndarray:
        m = self.model
        single = np.asarray(x).shape == m.spec.input_shape
        tape = Tape(m.spec, m.layer_params(), _as_batch(m, x), 0, m.spec.feature_index)
        feats = tape.features.astype(np.float32)
        return feats[0] if single else feats


class ClassifierHead:
    """Layers from ``feature_index`` on, then softmax: features -> probabilities."""

    def __init__(self, model: ModelState):
        self.model = model

    def __call__(self, features: np.ndarray) -> np.ndarray:
        m = self.model
        f = np.asarray(features, dtype=np.float32)
        single = f.ndim == 1
        f = f[None] if single else f
        tape = Tape(m.spec, m.layer_params(), f, m.spec.feature_index)
        probs = softmax(tape.output).astype(np.float32)
        return probs[0] if single else probs


def split(model: ModelState) -> tuple[FeatureExtractor, ClassifierHead]:
    """Views sharing `model`'s parameters; ``head(extractor(x)) == forward(x)[1]``."""
    return FeatureExtractor(model), ClassifierHead(model)
