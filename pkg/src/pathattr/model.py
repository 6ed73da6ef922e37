"""Reference tiny CNN with exact forward and backward passes.

The network is ``[conv(k x k, same) -> activation -> max-pool] * L -> dense ... -> dense(K)``.
Everything is batched over a leading sample axis and computed in float64.
Images are ``(C, H, W)`` arrays; a bare ``(H, W)`` array is treated as one channel
and gradients come back in the shape the caller passed in.

The module also defines the gradient-oracle contract used by the attribution
code, plus two analytic oracles (linear and constant) used as test fixtures.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError

CHECKPOINT_MAGIC = b"PATHATTR-CKPT 1\n"
ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class LayerSpec:
    input_shape: tuple[int, int, int] = (1, 32, 32)
    conv_channels: tuple[int, ...] = (8, 16)
    kernel_size: int = 3
    stride: int = 1
    pool: int = 2
    dense_widths: tuple[int, ...] = (64,)
    num_classes: int = 3
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "conv_channels", tuple(int(v) for v in self.conv_channels))
        object.__setattr__(self, "dense_widths", tuple(int(v) for v in self.dense_widths))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ShapeError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.stride != 1:
            raise ValueError("only stride 1 convolutions are supported")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd for same padding")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        _, h, w = self.input_shape
        shrink = self.pool ** len(self.conv_channels)
        if h % shrink or w % shrink:
            raise ShapeError(f"spatial size {h}x{w} not divisible by total pooling {shrink}")

    @property
    def flat_features(self) -> int:
        _, h, w = self.input_shape
        shrink = self.pool ** len(self.conv_channels)
        channels = self.conv_channels[-1] if self.conv_channels else self.input_shape[0]
        return channels * (h // shrink) * (w // shrink)

    @property
    def embedding_width(self) -> int:
        return self.dense_widths[-1] if self.dense_widths else self.flat_features

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        c_in = self.input_shape[0]
        k = self.kernel_size
        for i, c_out in enumerate(self.conv_channels):
            shapes[f"conv{i}.weight"] = (c_out, c_in, k, k)
            shapes[f"conv{i}.bias"] = (c_out,)
            c_in = c_out
        widths = [self.flat_features, *self.dense_widths, self.num_classes]
        for i in range(len(widths) - 1):
            shapes[f"dense{i}.weight"] = (widths[i], widths[i + 1])
            shapes[f"dense{i}.bias"] = (widths[i + 1],)
        return shapes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerSpec":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


@dataclass
class TinyCnnParams:
    spec: LayerSpec
    tensors: dict[str, np.ndarray]
    seed: int | None = None

    def __post_init__(self):
        expected = self.spec.tensor_shapes()
        if set(expected) != set(self.tensors):
            raise ShapeError(f"tensor names {sorted(self.tensors)} != {sorted(expected)}")
        for name, shape in expected.items():
            arr = np.asarray(self.tensors[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {shape}")
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"{name} contains non-finite values")
            self.tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def replace(self, tensors: Mapping[str, np.ndarray]) -> "TinyCnnParams":
        return TinyCnnParams(self.spec, {k: np.array(v, dtype=np.float64) for k, v in tensors.items()}, self.seed)

    def copy(self) -> "TinyCnnParams":
        return self.replace(self.tensors)

    @property
    def num_dense(self) -> int:
        return len(self.spec.dense_widths) + 1


@dataclass
class PredictionScores:
    probabilities: np.ndarray
    logits: np.ndarray
    predicted_class: int


def init_params(spec: LayerSpec, seed: int = 0) -> TinyCnnParams:
    """He-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in spec.tensor_shapes().items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
        limit = np.sqrt(6.0 / fan_in)
        tensors[name] = rng.uniform(-limit, limit, size=shape)
    return TinyCnnParams(spec, tensors, seed)


def zero_params(spec: LayerSpec) -> TinyCnnParams:
    return TinyCnnParams(spec, {n: np.zeros(s) for n, s in spec.tensor_shapes().items()})


# ---------------------------------------------------------------------------
# batched primitives


def _as_batch(spec: LayerSpec, images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    c, h, w = spec.input_shape
    if x.ndim == 3 and c == 1 and x.shape[1:] == (h, w):
        x = x[:, None]
    if x.ndim != 4 or x.shape[1:] != (c, h, w):
        raise ShapeError(f"expected batch of {spec.input_shape} images, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("input contains non-finite values")
    return x


def _as_single(spec: LayerSpec, image) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    c, h, w = spec.input_shape
    if x.shape == (h, w) and c == 1:
        return x[None, None]
    if x.shape != (c, h, w):
        raise ShapeError(f"expected image of shape {spec.input_shape}, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("input contains non-finite values")
    return x[None]


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(np.float64)
    return 1.0 - a * a


def _conv_forward(x, weight, bias):
    k = weight.shape[-1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))
    out = np.tensordot(cols, weight, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2) + bias[None, :, None, None], cols


def _conv_backward(dout, cols, weight, need_input=True):
    k = weight.shape[-1]
    p = k // 2
    dw = np.tensordot(dout, cols, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    if not need_input:
        return None, dw, db
    n, _, h, w = dout.shape
    dxp = np.zeros((n, weight.shape[1], h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + h, j:j + w] += np.tensordot(dout, weight[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
    return dxp[:, :, p:p + h, p:p + w], dw, db


def _pool_forward(a, size):
    n, c, h, w = a.shape
    win = a.reshape(n, c, h // size, size, w // size, size).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // size, w // size, size * size)
    idx = np.argmax(win, axis=-1)
    return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0], idx


def _pool_backward(dout, idx, size):
    n, c, ho, wo = dout.shape
    dwin = np.zeros((n, c, ho, wo, size * size))
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dwin = dwin.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
    return dwin.reshape(n, c, ho * size, wo * size)


def _forward_batch(params: TinyCnnParams, x: np.ndarray, dropout_masks=None, keep_prob: float = 1.0):
    """Returns ``(logits, cache)``; ``dropout_masks`` switches on train mode."""
    spec = params.spec
    act = spec.activation
    cache: dict = {"conv": [], "dense": []}
    a = x
    for i in range(len(spec.conv_channels)):
        z, cols = _conv_forward(a, params[f"conv{i}.weight"], params[f"conv{i}.bias"])
        r = _activate(z, act)
        pooled, idx = _pool_forward(r, spec.pool)
        cache["conv"].append((cols, z, r, idx))
        a = pooled
    cache["pooled_shape"] = a.shape
    h = a.reshape(a.shape[0], -1)
    n_dense = params.num_dense
    for i in range(n_dense):
        inp = h
        scale = None
        if dropout_masks is not None:
            mask = dropout_masks.get(f"dense{i}")
            if mask is not None:
                scale = np.broadcast_to(np.asarray(mask, dtype=np.float64), inp.shape) / keep_prob
                inp = inp * scale
        z = inp @ params[f"dense{i}.weight"] + params[f"dense{i}.bias"]
        last = i == n_dense - 1
        h = z if last else _activate(z, act)
        cache["dense"].append((inp, scale, z, h))
    if not np.all(np.isfinite(h)):
        raise NumericError("non-finite logits in forward pass")
    return h, cache


def _backward_batch(params: TinyCnnParams, cache, dlogits, need_params=True, need_input=True):
    spec = params.spec
    act = spec.activation
    grads: dict[str, np.ndarray] = {}
    n_dense = params.num_dense
    d = dlogits
    for i in reversed(range(n_dense)):
        inp, scale, z, h = cache["dense"][i]
        if i != n_dense - 1:
            d = d * _activate_grad(z, h, act)
        if need_params:
            grads[f"dense{i}.weight"] = inp.T @ d
            grads[f"dense{i}.bias"] = d.sum(axis=0)
        if i == 0 and not need_input and not spec.conv_channels:
            return None, grads
        d = d @ params[f"dense{i}.weight"].T
        if scale is not None:
            d = d * scale
    d = d.reshape(cache["pooled_shape"])
    for i in reversed(range(len(spec.conv_channels))):
        cols, z, r, idx = cache["conv"][i]
        d = _pool_backward(d, idx, spec.pool)
        d = d * _activate_grad(z, r, act)
        want_dx = need_input or i > 0
        dx, dw, db = _conv_backward(d, cols, params[f"conv{i}.weight"], need_input=want_dx)
        if need_params:
            grads[f"conv{i}.weight"] = dw
            grads[f"conv{i}.bias"] = db
        d = dx
    return d, grads


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# public operations


def sample_dropout_masks(params: TinyCnnParams, batch_size: int, keep_prob: float, rng) -> dict[str, np.ndarray]:
    """Per-sample binary masks on every dense layer's input."""
    masks = {}
    widths = [params.spec.flat_features, *params.spec.dense_widths]
    for i, width in enumerate(widths):
        masks[f"dense{i}"] = (rng.random((batch_size, width)) < keep_prob).astype(np.float64)
    return masks


def forward(params: TinyCnnParams, image, mode: str = "eval", dropout_mask=None,
            keep_prob: float = 1.0, rng=None) -> PredictionScores:
    """Class scores for one image.

    In ``"train"`` mode the dense inputs are multiplied by ``dropout_mask / keep_prob``.
    When no mask is given and ``keep_prob < 1`` one is sampled from ``rng``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = _as_single(params.spec, image)
    masks = None
    if mode == "train":
        if not 0.0 < keep_prob <= 1.0:
            raise ValueError("keep_prob must be in (0, 1]")
        if dropout_mask is None:
            if keep_prob < 1.0 and rng is None:
                raise ValueError("train mode with keep_prob < 1 needs a mask or an rng")
            rng = rng if rng is not None else np.random.default_rng(0)
            dropout_mask = sample_dropout_masks(params, 1, keep_prob, rng)
        masks = dropout_mask
    logits, _ = _forward_batch(params, x, masks, keep_prob)
    logits = logits[0]
    probs = softmax(logits)
    return PredictionScores(probs, logits, int(np.argmax(probs)))


def predict_logits(params: TinyCnnParams, images, chunk_size: int = 256) -> np.ndarray:
    """Eval-mode logits for a batch of images, shape ``(N, K)``."""
    x = _as_batch(params.spec, images)
    out = [
        _forward_batch(params, x[i:i + chunk_size])[0]
        for i in range(0, len(x), chunk_size)
    ]
    return np.concatenate(out, axis=0) if out else np.zeros((0, params.spec.num_classes))


def input_gradients(params: TinyCnnParams, images, class_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Logits of ``class_index`` and their input gradients for a batch."""
    if not 0 <= class_index < params.spec.num_classes:
        raise ValueError(f"class_index {class_index} out of range")
    x = _as_batch(params.spec, images)
    logits, cache = _forward_batch(params, x)
    dlogits = np.zeros_like(logits)
    dlogits[:, class_index] = 1.0
    dx, _ = _backward_batch(params, cache, dlogits, need_params=False)
    if not np.all(np.isfinite(dx)):
        raise NumericError("non-finite input gradient")
    return logits[:, class_index], dx


def input_gradient(params: TinyCnnParams, image, class_index: int) -> np.ndarray:
    """d logit[class_index] / d image, same shape as ``image``."""
    shape = np.shape(image)
    x = _as_single(params.spec, image)
    _, dx = input_gradients(params, x, class_index)
    return dx[0].reshape(shape)


def _batch_arrays(spec: LayerSpec, batch) -> tuple[np.ndarray, np.ndarray]:
    if (isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray)
            and batch[0].ndim >= 3 and np.ndim(batch[1]) == 1):
        images, labels = batch
    else:
        pairs = list(batch)
        if not pairs:
            raise ValueError("empty batch")
        images = np.stack([np.asarray(p[0], dtype=np.float64) for p in pairs])
        labels = np.array([int(p[1]) for p in pairs])
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("empty batch")
    if labels.min() < 0 or labels.max() >= spec.num_classes:
        raise ValueError(f"label out of range [0, {spec.num_classes})")
    return _as_batch(spec, images), labels


def loss_and_gradient(params: TinyCnnParams, images, labels, sample_weights=None,
                      dropout_masks=None, keep_prob: float = 1.0):
    """Weighted mean cross-entropy, its parameter gradient, and the batch logits."""
    x, y = _batch_arrays(params.spec, (images, labels))
    n = len(y)
    w = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    logits, cache = _forward_batch(params, x, dropout_masks, keep_prob)
    logp = _log_softmax(logits)
    loss = float(-(w * logp[np.arange(n), y]).sum() / n)
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits *= (w / n)[:, None]
    _, grads = _backward_batch(params, cache, dlogits, need_params=True, need_input=False)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    return loss, grads, logits


def parameter_gradient(params: TinyCnnParams, batch, class_weights=None) -> dict[str, np.ndarray]:
    """Gradient of ``(1/N) sum_m w[y_m] * CE(y_m, f(x_m))`` (no L2 term).

    ``batch`` is either a sequence of ``(image, label)`` pairs or an
    ``(images, labels)`` tuple of arrays.
    """
    x, y = _batch_arrays(params.spec, batch)
    weights = None
    if class_weights is not None:
        weights = np.asarray(class_weights, dtype=np.float64)[y]
    _, grads, _ = loss_and_gradient(params, x, y, weights)
    return grads


def batch_loss(params: TinyCnnParams, images, labels, sample_weights=None) -> float:
    x, y = _batch_arrays(params.spec, (images, labels))
    n = len(y)
    w = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    logits, _ = _forward_batch(params, x)
    return float(-(w * _log_softmax(logits)[np.arange(n), y]).sum() / n)


def embed_batch(params: TinyCnnParams, images, chunk_size: int = 256) -> np.ndarray:
    x = _as_batch(params.spec, images)
    rows = []
    for i in range(0, len(x), chunk_size):
        _, cache = _forward_batch(params, x[i:i + chunk_size])
        if len(cache["dense"]) >= 2:
            rows.append(cache["dense"][-2][3])
        else:
            rows.append(cache["dense"][-1][0])
    return np.concatenate(rows, axis=0)


def embed(params: TinyCnnParams, image) -> np.ndarray:
    """Penultimate-layer activations (input of the classification layer)."""
    return embed_batch(params, _as_single(params.spec, image))[0]


def activation_pattern(params: TinyCnnParams, images) -> tuple[np.ndarray, ...]:
    """ReLU on/off states and max-pool winners; identical patterns mean one linear piece."""
    x = _as_batch(params.spec, images)
    _, cache = _forward_batch(params, x)
    pattern = []
    for _, z, _, idx in cache["conv"]:
        pattern += [z > 0, idx]
    for _, _, z, _ in cache["dense"][:-1]:
        pattern.append(z > 0)
    return tuple(pattern)


# ---------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(params: TinyCnnParams, path, extra: Mapping | None = None) -> None:
    """Magic line, one-line JSON header, then little-endian float64 tensors."""
    offset = 0
    entries = []
    blobs = []
    for name in params.spec.tensor_shapes():
        data = np.ascontiguousarray(params[name], dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(params[name].shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "format": "pathattr-checkpoint",
        "version": 1,
        "dtype": "<f8",
        "layer_spec": params.spec.to_dict(),
        "activation": params.spec.activation,
        "seed": params.seed,
        "tensors": entries,
    }
    if extra:
        header["extra"] = dict(extra)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> TinyCnnParams:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a pathattr checkpoint")
    rest = raw[len(CHECKPOINT_MAGIC):]
    newline = rest.index(b"\n")
    header = json.loads(rest[:newline].decode("utf-8"))
    if header.get("version") != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    body = rest[newline + 1:]
    tensors = {}
    for entry in header["tensors"]:
        chunk = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        tensors[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
    return TinyCnnParams(LayerSpec.from_dict(header["layer_spec"]), tensors, header.get("seed"))


# ---------------------------------------------------------------------------
# gradient-oracle contract


class GradientOracle:
    """Class scores h_c(x) and exact input gradients dh_c/dx.

    Subclasses implement :meth:`score` and :meth:`gradient`; the batched
    variants default to loops and may be overridden for speed.
    """

    num_classes: int

    def score(self, x: np.ndarray, class_index: int) -> float:
        raise NotImplementedError

    def gradient(self, x: np.ndarray, class_index: int) -> np.ndarray:
        raise NotImplementedError

    def scores(self, xs: np.ndarray, class_index: int) -> np.ndarray:
        return np.array([self.score(x, class_index) for x in xs])

    def gradients(self, xs: np.ndarray, class_index: int) -> np.ndarray:
        return np.stack([self.gradient(x, class_index) for x in xs])


class CnnOracle(GradientOracle):
    def __init__(self, params: TinyCnnParams, chunk_size: int = 64):
        self.params = params
        self.num_classes = params.spec.num_classes
        self.chunk_size = chunk_size

    def score(self, x, class_index):
        return float(forward(self.params, x).logits[class_index])

    def gradient(self, x, class_index):
        return input_gradient(self.params, x, class_index)

    def scores(self, xs, class_index):
        xs = np.asarray(xs, dtype=np.float64)
        return predict_logits(self.params, xs.reshape(len(xs), *self.params.spec.input_shape))[:, class_index]

    def gradients(self, xs, class_index):
        xs = np.asarray(xs, dtype=np.float64)
        out = np.empty_like(xs)
        shaped = xs.reshape(len(xs), *self.params.spec.input_shape)
        for i in range(0, len(xs), self.chunk_size):
            _, g = input_gradients(self.params, shaped[i:i + self.chunk_size], class_index)
            out[i:i + self.chunk_size] = g.reshape(out[i:i + self.chunk_size].shape)
        return out


class LinearOracle(GradientOracle):
    """h_c(x) = <w_c, x> + b_c."""

    def __init__(self, weights, bias=None):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.num_classes = self.weights.shape[0]
        self.bias = np.zeros(self.num_classes) if bias is None else np.asarray(bias, dtype=np.float64)

    def score(self, x, class_index):
        return float(np.sum(self.weights[class_index] * x) + self.bias[class_index])

    def gradient(self, x, class_index):
        if np.shape(x) != self.weights.shape[1:]:
            raise ShapeError(f"expected {self.weights.shape[1:]}, got {np.shape(x)}")
        return self.weights[class_index].copy()


class ConstantOracle(GradientOracle):
    def __init__(self, shape: Sequence[int], num_classes: int = 2, value: float = 0.0):
        self.shape = tuple(shape)
        self.num_classes = num_classes
        self.value = float(value)

    def score(self, x, class_index):
        return self.value

    def gradient(self, x, class_index):
        return np.zeros(self.shape)
