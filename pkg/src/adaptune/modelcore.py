"""Numeric core: seeded RNG streams, parameter containers, softmax and the
three reference classifiers with hand-written backward passes.

All arrays are float64 numpy arrays ("tensors"), row-major.
"""
from __future__ import annotations

import struct
import zlib
from typing import Callable, Dict, Iterator, Optional, Tuple

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


# ---------------------------------------------------------------- RNG


def _name_key(name) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name) & 0xFFFFFFFF
    return zlib.crc32(str(name).encode("utf-8"))


class SeededRng:
    """Philox4x64 stream keyed by ``SeedSequence([seed, *crc32(names)])``.

    ``child("name")`` derives an independent named substream; the same
    (seed, name path) always yields the same draws regardless of how much the
    parent stream has been advanced.  Draw methods of
    :class:`numpy.random.Generator` are available directly.
    """

    def __init__(self, seed: int, path: Tuple = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.path = tuple(path)
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32] + [_name_key(p) for p in self.path]
        self.generator = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def child(self, *names) -> "SeededRng":
        return SeededRng(self.seed, self.path + tuple(names))

    def __getattr__(self, item):
        return getattr(self.generator, item)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, path={self.path!r})"


# ---------------------------------------------------------------- params


class ModelParams:
    """Ordered mapping of uniquely named parameter tensors with a bias flag."""

    def __init__(self):
        self._tensors: Dict[str, np.ndarray] = {}
        self._bias: Dict[str, bool] = {}

    def add(self, name: str, value: np.ndarray, is_bias: bool = False) -> None:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.ascontiguousarray(value, dtype=np.float64)
        if is_bias and value.ndim != 1:
            raise ShapeError(f"bias {name!r} must be rank-1, got shape {value.shape}")
        self._tensors[name] = value
        self._bias[name] = bool(is_bias)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self._tensors:
            raise KeyError(name)
        value = np.ascontiguousarray(value, dtype=np.float64)
        if value.shape != self._tensors[name].shape:
            raise ShapeError(f"shape mismatch for {name!r}")
        self._tensors[name] = value

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __contains__(self, name) -> bool:
        return name in self._tensors

    def items(self):
        return self._tensors.items()

    def names(self):
        return list(self._tensors)

    def is_bias(self, name: str) -> bool:
        return self._bias[name]

    def size(self) -> int:
        return int(sum(v.size for v in self._tensors.values()))

    def copy(self) -> "ModelParams":
        out = ModelParams()
        for name, value in self._tensors.items():
            out.add(name, value.copy(), self._bias[name])
        return out

    def state(self) -> Dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self._tensors.items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self[k] = v.copy()


# ---------------------------------------------------------------- softmax


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] < 2:
        raise ShapeError(f"softmax expects [batch, C>=2], got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax: logits contain non-finite values")
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("log_softmax: logits contain non-finite values")
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------- cosine head


def _safe_norm(a: np.ndarray) -> np.ndarray:
    return np.maximum(np.sqrt((a * a).sum(axis=1, keepdims=True)), 1e-12)


def cosine_forward(features: np.ndarray, weights: np.ndarray):
    """Cosine similarity between each feature row and each class weight row."""
    fn = _safe_norm(features)
    wn = _safe_norm(weights)
    f_hat = features / fn
    w_hat = weights / wn
    return f_hat @ w_hat.T, (f_hat, fn, w_hat, wn)


def cosine_backward(dcos: np.ndarray, cache):
    f_hat, fn, w_hat, wn = cache
    df_hat = dcos @ w_hat
    dw_hat = dcos.T @ f_hat
    df = (df_hat - f_hat * (df_hat * f_hat).sum(axis=1, keepdims=True)) / fn
    dw = (dw_hat - w_hat * (dw_hat * w_hat).sum(axis=1, keepdims=True)) / wn
    return df, dw


# ---------------------------------------------------------------- models


class ClassifierModel:
    """Base for the reference models.

    ``forward`` returns ``(logits, features, cache)``; with ``head="cosine"``
    the logits are raw cosines between features and class weight rows (no
    bias).  ``backward`` turns d(loss)/d(logits) into a gradient dict keyed
    like ``params``.
    """

    kind = "base"

    def __init__(self, input_shape, num_classes: int, head: str = "linear"):
        if num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if head not in ("linear", "cosine"):
            raise ValueError(f"unknown head {head!r}")
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)
        self.head = head
        self.params = ModelParams()

    # subclasses implement the body: x -> features
    def _body_forward(self, x):
        raise NotImplementedError

    def _body_backward(self, cache, dfeatures, grads):
        raise NotImplementedError

    def feature_dim(self) -> int:
        raise NotImplementedError

    def _init_head(self, rng: SeededRng) -> None:
        d = self.feature_dim()
        w = rng.child("head").normal(0.0, np.sqrt(1.0 / d), size=(self.num_classes, d))
        self.params.add("head.weight", w)
        if self.head == "linear":
            self.params.add("head.bias", np.zeros(self.num_classes), is_bias=True)

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"expected input shape [N, {self.input_shape}], got {x.shape}")
        return x

    def forward(self, x):
        x = self._check_input(x)
        feats, body_cache = self._body_forward(x)
        w = self.params["head.weight"]
        if self.head == "linear":
            logits = feats @ w.T + self.params["head.bias"]
            head_cache = None
        else:
            logits, head_cache = cosine_forward(feats, w)
        return logits, feats, (body_cache, feats, head_cache)

    def backward(self, cache, dlogits) -> Dict[str, np.ndarray]:
        body_cache, feats, head_cache = cache
        dlogits = np.asarray(dlogits, dtype=np.float64)
        if dlogits.shape != (feats.shape[0], self.num_classes):
            raise ShapeError(f"dlogits shape {dlogits.shape} != {(feats.shape[0], self.num_classes)}")
        grads: Dict[str, np.ndarray] = {}
        w = self.params["head.weight"]
        if self.head == "linear":
            grads["head.weight"] = dlogits.T @ feats
            grads["head.bias"] = dlogits.sum(axis=0)
            dfeats = dlogits @ w
        else:
            dfeats, grads["head.weight"] = cosine_backward(dlogits, head_cache)
        self._body_backward(body_cache, dfeats, grads)
        return {name: grads[name] for name in self.params}

    def predict_logits(self, x, scale: float = 1.0) -> np.ndarray:
        logits, _, _ = self.forward(x)
        return logits * scale if self.head == "cosine" else logits

    def spec(self) -> dict:
        return {"kind": self.kind, "input_shape": list(self.input_shape),
                "num_classes": self.num_classes, "head": self.head}


class SoftmaxRegression(ClassifierModel):
    kind = "softmax"

    def __init__(self, input_shape, num_classes, head="linear", rng: Optional[SeededRng] = None):
        super().__init__(input_shape, num_classes, head)
        self._init_head(rng or SeededRng(0))

    def feature_dim(self):
        return int(np.prod(self.input_shape))

    def _body_forward(self, x):
        return x.reshape(x.shape[0], -1), None

    def _body_backward(self, cache, dfeatures, grads):
        pass


class MLP(ClassifierModel):
    """One hidden ReLU layer; the hidden activations are the features."""

    kind = "mlp"

    def __init__(self, input_shape, num_classes, hidden: int = 32, head="linear",
                 rng: Optional[SeededRng] = None):
        super().__init__(input_shape, num_classes, head)
        rng = rng or SeededRng(0)
        self.hidden = int(hidden)
        d = int(np.prod(self.input_shape))
        self.params.add("hidden.weight",
                        rng.child("hidden").normal(0.0, np.sqrt(2.0 / d), size=(self.hidden, d)))
        self.params.add("hidden.bias", np.zeros(self.hidden), is_bias=True)
        self._init_head(rng)

    def feature_dim(self):
        return self.hidden

    def _body_forward(self, x):
        flat = x.reshape(x.shape[0], -1)
        pre = flat @ self.params["hidden.weight"].T + self.params["hidden.bias"]
        return np.maximum(pre, 0.0), (flat, pre)

    def _body_backward(self, cache, dfeatures, grads):
        flat, pre = cache
        dpre = dfeatures * (pre > 0)
        grads["hidden.weight"] = dpre.T @ flat
        grads["hidden.bias"] = dpre.sum(axis=0)

    def spec(self):
        return {**super().spec(), "hidden": self.hidden}


class TinyCNN(ClassifierModel):
    """3x3 valid conv + ReLU + 2x2 average pooling + dense head.

    Input is [N, Cin, H, W]; [N, H, W] datasets are treated as one channel
    via ``input_shape=(1, H, W)`` by the caller.
    """

    kind = "cnn"

    def __init__(self, input_shape, num_classes, channels: int = 4, head="linear",
                 rng: Optional[SeededRng] = None):
        if len(input_shape) != 3:
            raise ShapeError("TinyCNN expects input_shape (Cin, H, W)")
        super().__init__(input_shape, num_classes, head)
        cin, h, w = self.input_shape
        if h < 4 or w < 4:
            raise ShapeError("TinyCNN needs images of at least 4x4")
        rng = rng or SeededRng(0)
        self.channels = int(channels)
        fan_in = cin * 9
        self.params.add("conv.weight",
                        rng.child("conv").normal(0.0, np.sqrt(2.0 / fan_in), size=(self.channels, cin, 3, 3)))
        self.params.add("conv.bias", np.zeros(self.channels), is_bias=True)
        self._ph, self._pw = (h - 2) // 2, (w - 2) // 2
        self._init_head(rng)

    def feature_dim(self):
        return self.channels * self._ph * self._pw

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3 and self.input_shape[0] == 1:
            x = x[:, None, :, :]
        return super()._check_input(x)

    def _body_forward(self, x):
        pre = kernels.conv2d_forward(x, self.params["conv.weight"])
        pre += self.params["conv.bias"][None, :, None, None]
        act = np.maximum(pre, 0.0)
        ph, pw = self._ph, self._pw
        cropped = act[:, :, :2 * ph, :2 * pw]
        pooled = cropped.reshape(x.shape[0], self.channels, ph, 2, pw, 2).mean(axis=(3, 5))
        return pooled.reshape(x.shape[0], -1), (x, pre)

    def _body_backward(self, cache, dfeatures, grads):
        x, pre = cache
        n = x.shape[0]
        ph, pw = self._ph, self._pw
        dpooled = dfeatures.reshape(n, self.channels, ph, pw)
        dact = np.zeros_like(pre)
        dact[:, :, :2 * ph, :2 * pw] = np.repeat(np.repeat(dpooled, 2, axis=2), 2, axis=3) / 4.0
        dpre = dact * (pre > 0)
        _, dw = kernels.conv2d_backward(x, self.params["conv.weight"], dpre)
        grads["conv.weight"] = dw
        grads["conv.bias"] = dpre.sum(axis=(0, 2, 3))

    def spec(self):
        return {**super().spec(), "channels": self.channels}


MODEL_KINDS = {"softmax": SoftmaxRegression, "mlp": MLP, "cnn": TinyCNN}


def build_model(kind: str, input_shape, num_classes: int, head: str = "linear",
                rng: Optional[SeededRng] = None, hidden: int = 32, channels: int = 4) -> ClassifierModel:
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {sorted(MODEL_KINDS)}")
    input_shape = tuple(input_shape)
    if kind == "cnn":
        if len(input_shape) == 2:
            input_shape = (1,) + input_shape
        return TinyCNN(input_shape, num_classes, channels=channels, head=head, rng=rng)
    if kind == "mlp":
        return MLP(input_shape, num_classes, hidden=hidden, head=head, rng=rng)
    return SoftmaxRegression(input_shape, num_classes, head=head, rng=rng)


# ---------------------------------------------------------------- gradients


def forward_backward(model: ClassifierModel, x, dlogits) -> Dict[str, np.ndarray]:
    """Gradients of sum(logits * dlogits) w.r.t. every parameter."""
    x = np.asarray(x, dtype=np.float64)
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if x.shape[0] != dlogits.shape[0]:
        raise ShapeError(f"batch mismatch: x has {x.shape[0]} rows, dlogits has {dlogits.shape[0]}")
    _, _, cache = model.forward(x)
    return model.backward(cache, dlogits)


def grad_check(model: ClassifierModel, batch, loss_fn: Callable, eps: float = 1e-5) -> float:
    """Max over parameter tensors of ||analytic - central_diff|| / max(||a||, ||cd||, 1e-12).

    ``loss_fn(logits, y)`` must return an object with ``.value`` and ``.dlogits``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    x, y = batch
    logits, _, cache = model.forward(x)
    analytic = model.backward(cache, loss_fn(logits, y).dlogits)

    def value():
        return loss_fn(model.forward(x)[0], y).value

    worst = 0.0
    for name, p in model.params.items():
        numeric = np.zeros_like(p)
        flat, nflat = p.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * eps)
        a = analytic[name]
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(a - numeric) / denom))
    return worst


# ---------------------------------------------------------------- weights file
#
# Layout (all little-endian):
#   b"ADPW" | u32 version=1 | u32 n_tensors
#   per tensor: u16 name_len | name (utf-8) | u8 is_bias | u8 ndim | u32 dims[ndim] | f64 values[prod(dims)]

_MAGIC = b"ADPW"


def save_weights(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<II", 1, len(params)))
        for name, value in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<BB", int(params.is_bias(name)), value.ndim))
            fh.write(struct.pack(f"<{value.ndim}I", *value.shape))
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def load_weights(path) -> ModelParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not an adaptune weights file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported weights version {version}")
    pos = 12
    params = ModelParams()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        is_bias, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        value = np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * n
        params.add(name, value, bool(is_bias))
    return params
