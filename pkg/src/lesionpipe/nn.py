"""From-scratch tensor layers, network assembly, Adam, and the training loop.

All tensors are plain numpy arrays, float32 in production; the ops are
dtype-generic so float64 gradient checks run through the same code.
Convolutions are stride-1 with zero same-padding (even kernels pad the extra
row/column at the bottom/right); pooling is valid with first-found argmax
routing on the backward pass.
"""

from __future__ import annotations

import json
import struct
import hashlib
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (CorruptStream, EmptyDataset, LabelOutOfRange, ShapeError,
                     ShapeMismatch, SpecMismatch)
from .seeding import stream_rng

# When set, every layer output is checked for NaN/Inf.
DEBUG_CHECK_FINITE = False


def _check_finite(x: np.ndarray) -> np.ndarray:
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite value in tensor")
    return x


# ---------------------------------------------------------------------------
# functional ops


def _same_pad(k: int) -> tuple[int, int]:
    before = (k - 1) // 2
    return before, k - 1 - before


def _im2col(padded: np.ndarray, kh: int, kw: int, oh: int, ow: int) -> np.ndarray:
    c = padded.shape[2]
    cols = np.empty((oh, ow, kh, kw, c), dtype=padded.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j, :] = padded[i:i + oh, j:j + ow, :]
    return cols.reshape(oh * ow, kh * kw * c)


def conv2d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1 same-padding convolution: (H, W, C) x (kh, kw, C, F) -> (H, W, F)."""
    if x.ndim != 3 or weights.ndim != 4:
        raise ShapeMismatch("conv2d expects x (H, W, C) and weights (kh, kw, C, F)")
    kh, kw, cin, f = weights.shape
    if x.shape[2] != cin:
        raise ShapeMismatch(f"input has {x.shape[2]} channels, weights expect {cin}")
    if bias.shape != (f,):
        raise ShapeMismatch(f"bias must have shape ({f},)")
    h, w = x.shape[:2]
    pt, pb = _same_pad(kh)
    pl, pr = _same_pad(kw)
    padded = np.pad(x, ((pt, pb), (pl, pr), (0, 0)))
    cols = _im2col(padded, kh, kw, h, w)
    out = cols @ weights.reshape(-1, f) + bias
    return _check_finite(out.reshape(h, w, f))


def conv2d_backward(dout: np.ndarray, x: np.ndarray, weights: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv2d w.r.t. input, weights, and bias."""
    kh, kw, cin, f = weights.shape
    h, w = x.shape[:2]
    pt, pb = _same_pad(kh)
    pl, pr = _same_pad(kw)
    padded = np.pad(x, ((pt, pb), (pl, pr), (0, 0)))
    cols = _im2col(padded, kh, kw, h, w)
    dflat = dout.reshape(h * w, f)
    dw = (cols.T @ dflat).reshape(weights.shape)
    db = dflat.sum(axis=0)
    dcols = (dflat @ weights.reshape(-1, f).T).reshape(h, w, kh, kw, cin)
    dpadded = np.zeros_like(padded)
    for i in range(kh):
        for j in range(kw):
            dpadded[i:i + h, j:j + w, :] += dcols[:, :, i, j, :]
    dx = dpadded[pt:pt + h, pl:pl + w, :]
    return dx, dw, db


def maxpool(x: np.ndarray, window: tuple[int, int], strides: tuple[int, int]
            ) -> np.ndarray:
    """Valid max pooling: output extent = floor((extent - window) / stride) + 1."""
    out, _ = _maxpool_with_indices(x, window, strides)
    return out


def _maxpool_with_indices(x, window, strides):
    if x.ndim != 3:
        raise ShapeMismatch("maxpool expects (H, W, C)")
    wh, ww = window
    sh, sw = strides
    if wh < 1 or ww < 1 or sh < 1 or sw < 1:
        raise ValueError("window and strides must be positive")
    h, w, c = x.shape
    if wh > h or ww > w:
        raise ShapeMismatch(f"window {window} exceeds input {h}x{w}")
    view = sliding_window_view(x, (wh, ww), axis=(0, 1))[::sh, ::sw]
    oh, ow = view.shape[:2]
    flat = view.reshape(oh, ow, c, wh * ww)
    idx = flat.argmax(axis=3)  # first occurrence wins ties (row-major scan)
    out = np.take_along_axis(flat, idx[..., None], axis=3)[..., 0]
    return _check_finite(out), idx


def maxpool_backward(dout: np.ndarray, x: np.ndarray, window: tuple[int, int],
                     strides: tuple[int, int], indices: np.ndarray | None = None
                     ) -> np.ndarray:
    """Route each output gradient to the window position that won the max."""
    if indices is None:
        _, indices = _maxpool_with_indices(x, window, strides)
    wh, ww = window
    sh, sw = strides
    oh, ow, c = dout.shape
    rows = (np.arange(oh) * sh)[:, None, None] + indices // ww
    cols = (np.arange(ow) * sw)[None, :, None] + indices % ww
    chan = np.broadcast_to(np.arange(c)[None, None, :], indices.shape)
    dx = np.zeros_like(x)
    np.add.at(dx, (rows, cols, chan), dout)
    return dx


def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map: (N,) x (N, M) -> (M,)."""
    if x.ndim != 1 or weights.ndim != 2:
        raise ShapeMismatch("dense expects x (N,) and weights (N, M)")
    if x.shape[0] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise ShapeMismatch(
            f"dense shapes incompatible: x {x.shape}, w {weights.shape}, b {bias.shape}")
    return _check_finite(x @ weights + bias)


def dense_backward(dout: np.ndarray, x: np.ndarray, weights: np.ndarray
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dx = dout @ weights.T
    dw = np.outer(x, dout)
    db = dout.copy()
    return dx, dw, db


def relu(x: np.ndarray) -> np.ndarray:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    return np.maximum(x, 0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over a class-logit vector."""
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def sparse_ce_loss(probs: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Cross entropy -ln(probs[label]) and its gradient w.r.t. the logits.

    The probability is clamped below at 1e-12. The returned gradient is the
    combined softmax+CE form, probs - onehot.
    """
    k = probs.shape[0]
    if not 0 <= label < k:
        raise LabelOutOfRange(f"label {label} outside [0, {k})")
    p = max(float(probs[label]), 1e-12)
    loss = -np.log(p)
    grad = probs.copy()
    grad[label] -= 1.0
    return float(loss), grad


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    rng_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]

    @staticmethod
    def zeros_like(params: Sequence[np.ndarray]) -> "AdamState":
        return AdamState(m=[np.zeros_like(p) for p in params],
                         v=[np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState, t: int, cfg: TrainConfig
              ) -> tuple[Sequence[np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied to the params in place.

        m <- b1*m + (1-b1)*g        m_hat = m / (1 - b1^t)
        v <- b2*v + (1-b2)*g^2      v_hat = v / (1 - b2^t)
        p <- p - lr * m_hat / (sqrt(v_hat) + eps)
    """
    if t < 1:
        raise ValueError("step counter t must be >= 1")
    if len(params) != len(grads):
        raise ShapeMismatch("params and grads differ in length")
    b1, b2 = cfg.beta1, cfg.beta2
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p -= (cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)).astype(p.dtype)
    return params, state


# ---------------------------------------------------------------------------
# network assembly


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the stack; `kernel` doubles as the pooling window."""

    kind: str  # conv2d | maxpool | flatten | dense
    filters: int | None = None
    units: int | None = None
    kernel: tuple[int, int] | None = None
    strides: tuple[int, int] | None = None
    activation: str = "none"  # relu | softmax | none

    @staticmethod
    def conv(filters: int, kernel: tuple[int, int]) -> "LayerSpec":
        return LayerSpec("conv2d", filters=filters, kernel=kernel,
                         strides=(1, 1), activation="relu")

    @staticmethod
    def pool(window: tuple[int, int], strides: tuple[int, int]) -> "LayerSpec":
        return LayerSpec("maxpool", kernel=window, strides=strides)

    @staticmethod
    def flat() -> "LayerSpec":
        return LayerSpec("flatten")

    @staticmethod
    def fc(units: int, activation: str = "relu") -> "LayerSpec":
        return LayerSpec("dense", units=units, activation=activation)


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]


def default_network_spec(rows: int = 256, cols: int = 256) -> NetworkSpec:
    """Default classifier layout for 256x256 (or the reduced 64x64) gray input.

    Six stride-1 same-padded conv blocks interleaved with valid max pooling,
    collapsing to a 128-wide flatten, then seven dense layers ending in a
    2-class softmax.
    """
    if (rows, cols) == (256, 256):
        pools = [((3, 3), (3, 3)), ((3, 3), (3, 3)), ((2, 2), (2, 2)),
                 ((3, 3), (3, 3)), ((2, 2), (2, 2)), ((2, 2), (2, 2))]
    elif (rows, cols) == (64, 64):
        pools = [((2, 2), (2, 2))] * 6
    else:
        raise ShapeError(f"no predefined layer stack for input {rows}x{cols}")
    convs = [(128, (7, 7)), (64, (4, 4)), (32, (5, 5)),
             (128, (6, 6)), (32, (5, 5)), (128, (6, 6))]
    layers: list[LayerSpec] = []
    for (filters, kernel), (window, strides) in zip(convs, pools):
        layers.append(LayerSpec.conv(filters, kernel))
        layers.append(LayerSpec.pool(window, strides))
    layers.append(LayerSpec.flat())
    for units in (512, 128, 64, 512, 512, 64):
        layers.append(LayerSpec.fc(units))
    layers.append(LayerSpec.fc(2, activation="softmax"))
    return NetworkSpec(input_shape=(rows, cols, 1), layers=tuple(layers))


def propagate_shapes(spec: NetworkSpec) -> list[tuple[int, ...]]:
    """Output shape after every layer; raises ShapeError naming the bad layer."""
    shape: tuple[int, ...] = tuple(spec.input_shape)
    if len(shape) != 3 or any(d < 1 for d in shape):
        raise ShapeError(f"invalid input shape {shape}")
    shapes = []
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv2d":
            if len(shape) != 3:
                raise ShapeError(f"layer {i}: conv2d needs a 3-D input, got {shape}")
            if layer.strides not in (None, (1, 1)):
                raise ShapeError(f"layer {i}: conv2d supports stride 1 only")
            if not layer.filters or not layer.kernel:
                raise ShapeError(f"layer {i}: conv2d needs filters and kernel")
            shape = (shape[0], shape[1], layer.filters)
        elif layer.kind == "maxpool":
            if len(shape) != 3:
                raise ShapeError(f"layer {i}: maxpool needs a 3-D input, got {shape}")
            wh, ww = layer.kernel
            sh, sw = layer.strides
            if wh > shape[0] or ww > shape[1]:
                raise ShapeError(
                    f"layer {i}: window {layer.kernel} exceeds input {shape[:2]}")
            shape = ((shape[0] - wh) // sh + 1, (shape[1] - ww) // sw + 1, shape[2])
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif layer.kind == "dense":
            if len(shape) != 1:
                raise ShapeError(f"layer {i}: dense needs a flat input, got {shape}")
            if not layer.units:
                raise ShapeError(f"layer {i}: dense needs units")
            shape = (layer.units,)
        else:
            raise ShapeError(f"layer {i}: unknown kind {layer.kind!r}")
        shapes.append(shape)
    return shapes


class _Conv:
    def __init__(self, w, b, activation):
        self.w = w
        self.b = b
        self.activation = activation
        self.gw = np.zeros_like(w)
        self.gb = np.zeros_like(b)
        self._x = None
        self._out = None

    def forward(self, x, train):
        out = conv2d(x, self.w, self.b)
        if self.activation == "relu":
            out = relu(out)
        if train:
            self._x = x
            self._out = out
        return out

    def backward(self, d):
        if self.activation == "relu":
            d = d * (self._out > 0)
        dx, dw, db = conv2d_backward(d, self._x, self.w)
        self.gw += dw
        self.gb += db
        return dx


class _MaxPool:
    def __init__(self, window, strides):
        self.window = window
        self.strides = strides
        self._x = None
        self._idx = None

    def forward(self, x, train):
        out, idx = _maxpool_with_indices(x, self.window, self.strides)
        if train:
            self._x = x
            self._idx = idx
        return out

    def backward(self, d):
        return maxpool_backward(d, self._x, self.window, self.strides, self._idx)


class _Flatten:
    def __init__(self):
        self._shape = None

    def forward(self, x, train):
        if train:
            self._shape = x.shape
        return x.reshape(-1)

    def backward(self, d):
        return d.reshape(self._shape)


class _Dense:
    def __init__(self, w, b, activation):
        self.w = w
        self.b = b
        self.activation = activation
        self.gw = np.zeros_like(w)
        self.gb = np.zeros_like(b)
        self._x = None
        self._pre = None

    def forward(self, x, train):
        pre = dense(x, self.w, self.b)
        if self.activation == "relu":
            out = relu(pre)
        elif self.activation == "softmax":
            out = softmax(pre)
        else:
            out = pre
        if train:
            self._x = x
            self._pre = pre
        return out

    def backward(self, d):
        # For the softmax head, d is already the gradient w.r.t. the logits
        # (the combined softmax+cross-entropy form).
        if self.activation == "relu":
            d = d * (self._pre > 0)
        dx, dw, db = dense_backward(d, self._x, self.w)
        self.gw += dw
        self.gb += db
        return dx


class Network:
    """A built layer stack with parameters, forward/backward, and grad buffers."""

    def __init__(self, spec: NetworkSpec, layers: list):
        self.spec = spec
        self._layers = layers

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.spec.input_shape)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self._layers:
            if hasattr(layer, "w"):
                out.extend([layer.w, layer.b])
        return out

    def gradients(self) -> list[np.ndarray]:
        out = []
        for layer in self._layers:
            if hasattr(layer, "w"):
                out.extend([layer.gw, layer.gb])
        return out

    def zero_gradients(self):
        for g in self.gradients():
            g[...] = 0

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if tuple(x.shape) != self.input_shape:
            raise ShapeMismatch(
                f"input shape {x.shape} does not match network input {self.input_shape}")
        out = x
        for layer in self._layers:
            out = layer.forward(out, train)
        return out

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        d = dlogits
        for layer in reversed(self._layers):
            d = layer.backward(d)
        return d


def build_network(spec: NetworkSpec, seed: int = 0) -> Network:
    """Allocate and initialize all parameters for the spec, deterministically.

    ReLU layers draw He-uniform weights; the softmax head draws
    Glorot-uniform. Biases start at zero.
    """
    shapes = propagate_shapes(spec)
    last = spec.layers[-1]
    if last.kind != "dense" or last.units != 2 or last.activation != "softmax":
        raise ShapeError("final layer must be a 2-unit softmax dense layer")
    rng = stream_rng(seed, "init")
    layers = []
    shape: tuple[int, ...] = tuple(spec.input_shape)
    for layer, out_shape in zip(spec.layers, shapes):
        if layer.kind == "conv2d":
            kh, kw = layer.kernel
            cin = shape[2]
            fan_in = kh * kw * cin
            fan_out = layer.filters
            limit = _init_limit(layer.activation, fan_in, fan_out)
            w = rng.uniform(-limit, limit, (kh, kw, cin, layer.filters)).astype(np.float32)
            b = np.zeros(layer.filters, dtype=np.float32)
            layers.append(_Conv(w, b, layer.activation))
        elif layer.kind == "maxpool":
            layers.append(_MaxPool(layer.kernel, layer.strides))
        elif layer.kind == "flatten":
            layers.append(_Flatten())
        elif layer.kind == "dense":
            fan_in = shape[0]
            limit = _init_limit(layer.activation, fan_in, layer.units)
            w = rng.uniform(-limit, limit, (fan_in, layer.units)).astype(np.float32)
            b = np.zeros(layer.units, dtype=np.float32)
            layers.append(_Dense(w, b, layer.activation))
        shape = out_shape
    return Network(spec, layers)


def _init_limit(activation: str, fan_in: int, fan_out: int) -> float:
    if activation == "relu":
        return float(np.sqrt(6.0 / fan_in))
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


# ---------------------------------------------------------------------------
# training and inference


class EpochStats(NamedTuple):
    loss: float
    accuracy: float


def train(net: Network, data: Sequence[tuple[np.ndarray, int]], cfg: TrainConfig
          ) -> tuple[Network, list[EpochStats]]:
    """Mini-batch training with per-epoch seeded shuffles; runs exactly cfg.epochs.

    Batch gradients are the mean over the batch, accumulated in a fixed
    sample order, so identical seeds and data reproduce identical parameters.
    """
    if len(data) == 0:
        raise EmptyDataset("no training samples")
    xs = [np.asarray(x, dtype=np.float32) for x, _ in data]
    ys = [int(y) for _, y in data]
    params = net.parameters()
    grads = net.gradients()
    state = AdamState.zeros_like(params)
    rng = stream_rng(cfg.rng_seed, "shuffle")
    history: list[EpochStats] = []
    t = 0
    n = len(xs)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            net.zero_gradients()
            for i in batch:
                probs = net.forward(xs[i], train=True)
                loss, dlogits = sparse_ce_loss(probs, ys[i])
                total_loss += loss
                correct += int(np.argmax(probs) == ys[i])
                net.backward(dlogits)
            inv = 1.0 / len(batch)
            for g in grads:
                g *= inv
            t += 1
            adam_step(params, grads, state, t, cfg)
        history.append(EpochStats(total_loss / n, correct / n))
    return net, history


def predict(net: Network, img: np.ndarray) -> np.ndarray:
    """Class probabilities for one input tensor."""
    x = np.asarray(img, dtype=np.float32)
    return net.forward(x, train=False)


def predict_class(net: Network, img: np.ndarray) -> int:
    """argmax of the class probabilities; exact ties resolve to class 0."""
    return int(np.argmax(predict(net, img)))


# ---------------------------------------------------------------------------
# weight serialization

_MAGIC = b"LPWT"
_VERSION = 1


def _spec_to_json(spec: NetworkSpec) -> str:
    payload = {
        "input_shape": list(spec.input_shape),
        "layers": [
            {"kind": l.kind, "filters": l.filters, "units": l.units,
             "kernel": list(l.kernel) if l.kernel else None,
             "strides": list(l.strides) if l.strides else None,
             "activation": l.activation}
            for l in spec.layers
        ],
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def _spec_from_json(text: str) -> NetworkSpec:
    payload = json.loads(text)
    layers = tuple(
        LayerSpec(kind=d["kind"], filters=d["filters"], units=d["units"],
                  kernel=tuple(d["kernel"]) if d["kernel"] else None,
                  strides=tuple(d["strides"]) if d["strides"] else None,
                  activation=d["activation"])
        for d in payload["layers"]
    )
    return NetworkSpec(input_shape=tuple(payload["input_shape"]), layers=layers)


def spec_fingerprint(spec: NetworkSpec) -> bytes:
    return hashlib.sha256(_spec_to_json(spec).encode("utf-8")).digest()


def save_weights(net: Network) -> bytes:
    """Serialize: magic, version, spec JSON, spec fingerprint, then raw
    little-endian float32 parameter data in declaration order."""
    spec_json = _spec_to_json(net.spec).encode("utf-8")
    head = _MAGIC + struct.pack("<II", _VERSION, len(spec_json)) + spec_json
    head += spec_fingerprint(net.spec)
    body = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes()
                    for p in net.parameters())
    return head + body


def load_weights(data: bytes, expected_spec: NetworkSpec | None = None) -> Network:
    """Rebuild a network from a weight stream, verifying structure and length."""
    if len(data) < 12 or data[:4] != _MAGIC:
        raise CorruptStream("bad magic bytes")
    version, spec_len = struct.unpack("<II", data[4:12])
    if version != _VERSION:
        raise CorruptStream(f"unknown format version {version}")
    if len(data) < 12 + spec_len + 32:
        raise CorruptStream("truncated header")
    spec_json = data[12:12 + spec_len]
    try:
        spec = _spec_from_json(spec_json.decode("utf-8"))
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CorruptStream("unreadable layer description") from exc
    fp = data[12 + spec_len:12 + spec_len + 32]
    if fp != spec_fingerprint(spec):
        raise CorruptStream("fingerprint does not match layer description")
    if expected_spec is not None and fp != spec_fingerprint(expected_spec):
        raise SpecMismatch("weight stream was saved for a different network layout")
    net = build_network(spec, seed=0)
    body = data[12 + spec_len + 32:]
    offset = 0
    for p in net.parameters():
        nbytes = p.size * 4
        chunk = body[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CorruptStream("weight data truncated")
        p[...] = np.frombuffer(chunk, dtype="<f4").reshape(p.shape)
        offset += nbytes
    if offset != len(body):
        raise CorruptStream("trailing bytes after weight data")
    return net
