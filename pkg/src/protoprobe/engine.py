"""Small conv/dense network engine with reverse-mode gradients.

Tensors are plain numpy arrays. Parameters and returned values are stored as
float32; every layer computes in float64 so reductions (dot products, pooling,
softmax sums) accumulate in 64 bits. Layout is channels-first, row-major.

All batched kernels evaluate each sample with its own matrix product, so the
result for one sample never depends on what else sits in the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_KINDS = ("dense", "conv2d", "relu", "global_avg_pool", "flatten")
PARAM_KINDS = ("dense", "conv2d")


class ShapeError(ValueError):
    """Input or layer shapes do not line up."""


class NumericError(ArithmeticError):
    """A NaN or Inf showed up during evaluation."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_size: int = 0
    out_size: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in PARAM_KINDS and (self.in_size <= 0 or self.out_size <= 0):
            raise ValueError(f"{self.kind}: in/out sizes must be positive")
        if self.kind == "conv2d" and self.kernel <= 0:
            raise ValueError("conv2d: kernel must be positive")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.padding < 0:
            raise ValueError("padding must be >= 0")

    @classmethod
    def dense(cls, in_features: int, out_features: int) -> "LayerSpec":
        return cls("dense", in_features, out_features)

    @classmethod
    def conv2d(cls, in_channels, out_channels, kernel, stride=1, padding=0) -> "LayerSpec":
        return cls("conv2d", in_channels, out_channels, kernel, stride, padding)

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS

    def param_shapes(self) -> tuple[tuple[int, ...], ...]:
        if self.kind == "dense":
            return (self.out_size, self.in_size), (self.out_size,)
        if self.kind == "conv2d":
            return (self.out_size, self.in_size, self.kernel, self.kernel), (self.out_size,)
        return ()

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        """Shape produced from a single (unbatched) input of `shape`."""
        if self.kind == "dense":
            if shape != (self.in_size,):
                raise ShapeError(f"dense expects ({self.in_size},), got {shape}")
            return (self.out_size,)
        if self.kind == "conv2d":
            if len(shape) != 3 or shape[0] != self.in_size:
                raise ShapeError(f"conv2d expects ({self.in_size}, H, W), got {shape}")
            _, h, w = shape
            ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
            wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
            if ho < 1 or wo < 1:
                raise ShapeError(f"conv2d kernel {self.kernel} larger than padded input {shape}")
            return (self.out_size, ho, wo)
        if self.kind == "global_avg_pool":
            if len(shape) != 3:
                raise ShapeError(f"global_avg_pool expects (C, H, W), got {shape}")
            return (shape[0],)
        if self.kind == "flatten":
            return (int(np.prod(shape)),)
        return shape


@dataclass(frozen=True)
class NetworkSpec:
    """Layer stack plus the index splitting it into feature extractor and head.

    ``layers[:feature_index]`` is the feature extractor; ``layers[feature_index:]``
    followed by softmax is the classifier head. ``feature_index == len(layers)``
    leaves a softmax-only head.
    """

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    classes: int
    feature_index: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ShapeError(f"input_shape must be positive C,H,W; got {self.input_shape}")
        if self.classes < 1:
            raise ValueError("classes must be positive")
        if not 1 <= self.feature_index <= len(self.layers):
            raise ValueError(f"feature_index {self.feature_index} outside 1..{len(self.layers)}")
        shapes = self.layer_shapes()
        if len(shapes[self.feature_index]) != 1:
            raise ShapeError(
                f"layer {self.feature_index - 1} ({self.layers[self.feature_index - 1].kind}) "
                f"yields {shapes[self.feature_index]}, features must be rank-1"
            )
        if shapes[-1] != (self.classes,):
            raise ShapeError(f"final layer yields {shapes[-1]}, expected ({self.classes},) logits")

    def layer_shapes(self) -> list[tuple[int, ...]]:
        """Input shape followed by the output shape of every layer."""
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(layer.output_shape(shapes[-1]))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        return shapes

    @property
    def feature_width(self) -> int:
        return self.layer_shapes()[self.feature_index][0]

    def param_shapes(self) -> list[tuple[int, ...]]:
        return [s for layer in self.layers for s in layer.param_shapes()]


@dataclass(frozen=True)
class ModelState:
    """A network spec and its parameters (weight then bias for each parameterized layer)."""

    spec: NetworkSpec
    params: tuple[np.ndarray, ...] = field(repr=False)

    def __post_init__(self):
        expected = self.spec.param_shapes()
        if len(self.params) != len(expected):
            raise ShapeError(f"expected {len(expected)} parameter tensors, got {len(self.params)}")
        frozen = []
        for i, (p, shape) in enumerate(zip(self.params, expected)):
            arr = np.array(p, dtype=np.float32, copy=True)
            if arr.shape != shape:
                raise ShapeError(f"parameter {i}: shape {arr.shape} != {shape}")
            arr.setflags(write=False)
            frozen.append(arr)
        object.__setattr__(self, "params", tuple(frozen))

    def layer_params(self) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        """Map layer index -> (weight, bias)."""
        return _param_map(self.spec, self.params)

    def with_params(self, params: Sequence[np.ndarray]) -> "ModelState":
        return ModelState(self.spec, tuple(params))


def _param_map(spec, params):
    out, it = {}, iter(params)
    for i, layer in enumerate(spec.layers):
        if layer.has_params:
            out[i] = (next(it), next(it))
    return out


def init_model(spec: NetworkSpec, seed: int = 0) -> ModelState:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    for layer in spec.layers:
        if not layer.has_params:
            continue
        wshape, bshape = layer.param_shapes()
        fan_in = int(np.prod(wshape[1:]))
        params.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), wshape))
        params.append(np.zeros(bshape))
    return ModelState(spec, tuple(params))


# --------------------------------------------------------------------------
# layer kernels (float64, batched along axis 0)


def _im2col(x, k, stride, padding):
    """(B, C, H, W) -> columns of shape (B, C*k*k, Ho*Wo)."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, ho * wo)
    return cols, ho, wo


def _col2im(dcols, x_shape, k, stride, padding, ho, wo):
    b, c, h, w = x_shape
    dx = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
    d = dcols.reshape(b, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, :, i, j]
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def _layer_forward(layer, wb, x):
    """Returns (output, cache) for one layer."""
    if layer.kind == "dense":
        w, b = wb
        y = np.matmul(x[:, None, :], w.T)[:, 0, :] + b
        return y, x
    if layer.kind == "conv2d":
        w, b = wb
        cols, ho, wo = _im2col(x, layer.kernel, layer.stride, layer.padding)
        y = np.matmul(w.reshape(w.shape[0], -1), cols) + b[:, None]
        return y.reshape(x.shape[0], w.shape[0], ho, wo), (cols, x.shape, ho, wo)
    if layer.kind == "relu":
        return np.maximum(x, 0.0), x > 0
    if layer.kind == "global_avg_pool":
        return x.mean(axis=(2, 3)), x.shape
    if layer.kind == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    raise AssertionError(layer.kind)


def _layer_backward(layer, wb, cache, dy, need_params, need_input=True):
    """Returns (dx, (dw, db) or None). Parameter gradients are summed over the batch."""
    if layer.kind == "dense":
        w, _ = wb
        x = cache
        dx = np.matmul(dy[:, None, :], w)[:, 0, :] if need_input else None
        grads = (dy.T @ x, dy.sum(axis=0)) if need_params else None
        return dx, grads
    if layer.kind == "conv2d":
        w, _ = wb
        cols, x_shape, ho, wo = cache
        o = w.shape[0]
        dyr = dy.reshape(dy.shape[0], o, ho * wo)
        dx = None
        if need_input:
            dcols = np.matmul(w.reshape(o, -1).T, dyr)
            dx = _col2im(dcols, x_shape, layer.kernel, layer.stride, layer.padding, ho, wo)
        grads = None
        if need_params:
            dw = np.tensordot(dyr, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
            grads = (dw, dyr.sum(axis=(0, 2)))
        return dx, grads
    if layer.kind == "relu":
        return dy * cache, None
    if layer.kind == "global_avg_pool":
        b, c, h, w_ = cache
        return np.broadcast_to((dy / (h * w_))[:, :, None, None], cache).copy(), None
    if layer.kind == "flatten":
        return dy.reshape(cache), None
    raise AssertionError(layer.kind)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def argmax(v: np.ndarray) -> int:
    """Index of the largest entry; ties resolve to the lowest index."""
    return int(np.argmax(v))


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values at {where}")


class Tape:
    """Forward activations recorded for a batch, replayable backwards.

    Built by :func:`run`. Layers ``start:stop`` are evaluated. Feature
    activations are rounded to float32 where the extractor hands over to the
    head, so running the two halves separately reproduces the whole network
    bit for bit; ``round_features=False`` keeps everything in float64.
    """

    def __init__(self, spec: NetworkSpec, params: dict, xs: np.ndarray,
                 start: int = 0, stop: Optional[int] = None, round_features: bool = True):
        self.spec = spec
        self.start = start
        self.stop = len(spec.layers) if stop is None else stop
        self._params = params
        self._caches = []
        h = np.asarray(xs, dtype=np.float64)
        self.features = h if start == spec.feature_index else None
        for i in range(self.start, self.stop):
            layer = spec.layers[i]
            h, cache = _layer_forward(layer, self._params.get(i), h)
            _check_finite(h, f"layer {i} ({layer.kind})")
            self._caches.append(cache)
            if i + 1 == spec.feature_index:
                if round_features:
                    h = h.astype(np.float32).astype(np.float64)
                self.features = h
        self.output = h

    @property
    def logits(self) -> np.ndarray:
        return self.output

    def backward(self, dout: np.ndarray, need_params: bool = False, need_input: bool = True):
        """Propagate `dout` (gradient w.r.t. the tape output) back to the input.

        Returns ``(dx, param_grads)`` where ``param_grads`` maps layer index to
        ``(dW, db)`` summed over the batch (empty unless ``need_params``).
        """
        spec = self.spec
        grads = {}
        d = np.asarray(dout, dtype=np.float64)
        for i in range(self.stop - 1, self.start - 1, -1):
            layer = spec.layers[i]
            d, g = _layer_backward(layer, self._params.get(i), self._caches[i - self.start], d,
                                   need_params, need_input or i > self.start)
            if g is not None:
                grads[i] = g
        if need_input:
            _check_finite(d, "input gradient")
        return d, grads


def _as_batch(model: ModelState, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    shape = model.spec.input_shape
    if x.shape == shape:
        return x[None]
    if x.ndim == 4 and x.shape[1:] == shape:
        return x
    first = model.spec.layers[0]
    raise ShapeError(f"input shape {x.shape} does not match layer 0 ({first.kind}) input {shape}")


def run(model: ModelState, xs: np.ndarray) -> Tape:
    """Full forward pass over a batch (or a single input), recording a tape."""
    return Tape(model.spec, model.layer_params(), _as_batch(model, xs))


def forward(model: ModelState, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Feature vector and class probabilities for one input, both float32."""
    single = np.asarray(x).shape == model.spec.input_shape
    tape = run(model, x)
    feats = tape.features.astype(np.float32)
    probs = softmax(tape.logits).astype(np.float32)
    return (feats[0], probs[0]) if single else (feats, probs)


def logit_jacobian(model: ModelState, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Logits (K,) and their input gradients (K, *input_shape) at one input, float64."""
    tape = run(model, x)
    k = model.spec.classes
    rows = [tape.backward(np.eye(k)[[j]])[0][0] for j in range(k)]
    return tape.logits[0], np.stack(rows)


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-row -sum(y * log softmax(z))."""
    return -(np.asarray(targets, dtype=np.float64) * log_softmax(logits)).sum(axis=-1)


def loss_and_input_gradient(model: ModelState, xs: np.ndarray, targets: np.ndarray):
    """Per-sample cross-entropy, probabilities and input gradients, all float64."""
    tape = run(model, xs)
    targets = np.asarray(targets, dtype=np.float64).reshape(tape.logits.shape)
    loss = cross_entropy(tape.logits, targets)
    _check_finite(loss, "loss")
    probs = softmax(tape.logits)
    dx, _ = tape.backward(probs - targets)
    return loss, probs, dx


def _check_target(y, classes):
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != classes:
        raise ShapeError(f"target has {y.shape[-1]} entries, model has {classes} classes")
    if np.any(y < 0) or not np.allclose(y.sum(axis=-1), 1.0, atol=1e-6):
        raise ValueError("target must be a non-negative probability vector")
    return y


def input_gradient(model: ModelState, x: np.ndarray, y_target: np.ndarray) -> np.ndarray:
    """Gradient of cross-entropy against ``y_target`` with respect to the input."""
    y = _check_target(y_target, model.spec.classes)
    single = np.asarray(x).shape == model.spec.input_shape
    _, _, dx = loss_and_input_gradient(model, x, y)
    dx = dx.astype(np.float32)
    return dx[0] if single else dx


def _targets_from(labels, targets, classes, n):
    if targets is not None:
        return _check_target(targets, classes).reshape(n, classes)
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} inputs")
    if np.any(labels < 0) or np.any(labels >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    return np.eye(classes)[labels]


def parameter_gradients(model, xs, labels=None, targets=None, dtype=np.float32):
    """Mean cross-entropy gradient over a batch for every parameter tensor.

    Either integer ``labels`` or probability ``targets`` supply the target.
    Returns ``(mean_loss, grads)`` with grads in the order of ``model.params``.
    """
    xs = np.asarray(xs)
    if xs.shape[0] == 0:
        raise ValueError("empty batch")
    xs = _as_batch(model, xs)
    n = xs.shape[0]
    y = _targets_from(labels, targets, model.spec.classes, n)
    tape = Tape(model.spec, model.layer_params(), xs)
    loss = cross_entropy(tape.logits, y)
    _check_finite(loss, "loss")
    _, grads = tape.backward((softmax(tape.logits) - y) / n, need_params=True, need_input=False)
    out = []
    for i in sorted(grads):
        out.extend(g.astype(dtype) for g in grads[i])
    return float(loss.mean()), out


# --------------------------------------------------------------------------
# finite-difference validation


def relative_error(analytic, numeric) -> float:
    """Worst entrywise deviation scaled by the larger gradient magnitude.

    ``max|a - n| / max(max|a|, max|n|)``; 0 when both are zero.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def _tape64(spec, params64, x):
    # float64 end to end: parameters are not rounded to float32
    return Tape(spec, _param_map(spec, params64), x[None], round_features=False)


def _loss64(model, params64, x, y):
    return float(cross_entropy(_tape64(model.spec, params64, x).output, y[None])[0])


def numeric_input_gradient(model, x, y, step=1e-3):
    x = np.asarray(x, dtype=np.float64)
    params = [p.astype(np.float64) for p in model.params]
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = _loss64(model, params, x, y)
        flat[i] = orig - step
        down = _loss64(model, params, x, y)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return g


def finite_difference_check(model: ModelState, x: np.ndarray, step: float = 1e-3,
                            target: Optional[np.ndarray] = None, param_samples: int = 50,
                            seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Every input coordinate is checked; for parameters, ``param_samples``
    randomly chosen entries are checked. The numeric side runs fully in float64.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    _as_batch(model, x)
    k = model.spec.classes
    y = np.full(k, 1.0 / k) if target is None else _check_target(target, k)

    params64 = [p.astype(np.float64) for p in model.params]
    tape = _tape64(model.spec, params64, x)
    dlogits = softmax(tape.output) - y[None]
    dx, pgrads = tape.backward(dlogits, need_params=True)
    errs = [relative_error(dx[0], numeric_input_gradient(model, x, y, step))]

    if params64 and param_samples > 0:
        analytic = [g for i in sorted(pgrads) for g in pgrads[i]]
        rng = np.random.default_rng(seed)
        sizes = np.array([p.size for p in params64])
        picks = rng.integers(0, sizes.sum(), size=param_samples)
        offsets = np.cumsum(sizes) - sizes
        a_vals, n_vals = [], []
        for flat_idx in picks:
            t = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
            j = int(flat_idx - offsets[t])
            p = params64[t].reshape(-1)
            orig = p[j]
            p[j] = orig + step
            up = _loss64(model, params64, x, y)
            p[j] = orig - step
            down = _loss64(model, params64, x, y)
            p[j] = orig
            a_vals.append(analytic[t].reshape(-1)[j])
            n_vals.append((up - down) / (2 * step))
        errs.append(relative_error(a_vals, n_vals))
    return max(errs)
