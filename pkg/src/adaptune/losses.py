"""Classification losses with exact logit gradients.

Every loss returns a :class:`LossOutput` whose ``dlogits`` is the gradient of
the batch-mean ``value`` with respect to the logits it was given.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .modelcore import ShapeError, cosine_backward, cosine_forward, log_softmax, softmax

Q_FLOOR = 1e-12


@dataclass
class LossOutput:
    value: float
    dlogits: np.ndarray
    dfeatures: Optional[np.ndarray] = None
    dweights: Optional[np.ndarray] = None
    parts: dict = field(default_factory=dict)


@dataclass(frozen=True)
class AmSoftmaxParams:
    scale: float = 1.0
    margin: float = 0.0
    class_count: Optional[int] = None

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("AM-Softmax scale must be > 0")
        if not 0.0 <= self.margin < 1.0:
            raise ValueError("AM-Softmax margin must lie in [0, 1)")

    @classmethod
    def for_classes(cls, num_classes: int, margin: float = 0.35) -> "AmSoftmaxParams":
        """Scale from ``am_scale(C)`` with the given margin (direct AM-Softmax training)."""
        return cls(scale=am_scale(num_classes), margin=margin, class_count=num_classes)


def _labels(y, num_classes: int, batch: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (batch,):
        raise ShapeError(f"expected {batch} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
    if batch and (y.min() < 0 or y.max() >= num_classes):
        bad = int(y[(y < 0) | (y >= num_classes)][0])
        raise ValueError(f"invalid label {bad}: must lie in [0, {num_classes})")
    return y.astype(np.int64)


def _onehot(y: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((y.shape[0], num_classes))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def soft_cross_entropy(logits, targets) -> LossOutput:
    """Mean of -sum(t * log softmax(z)) for target distributions ``t``."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if z.shape != t.shape:
        raise ShapeError(f"logits {z.shape} vs targets {t.shape}")
    b = z.shape[0]
    logp = log_softmax(z)
    value = float(-(t * logp).sum() / b)
    mass = t.sum(axis=1, keepdims=True)
    return LossOutput(value, (np.exp(logp) * mass - t) / b)


def cross_entropy(logits, y) -> LossOutput:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError(f"logits must be [batch, C], got {z.shape}")
    y = _labels(y, z.shape[1], z.shape[0])
    return soft_cross_entropy(z, _onehot(y, z.shape[1]))


def mixup_cross_entropy(logits, y1, y2, lam) -> LossOutput:
    """lam * CE(z, y1) + (1 - lam) * CE(z, y2); ``lam`` scalar or per-sample."""
    z = np.asarray(logits, dtype=np.float64)
    b, c = z.shape
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (b,))[:, None]
    targets = lam * _onehot(_labels(y1, c, b), c) + (1.0 - lam) * _onehot(_labels(y2, c, b), c)
    return soft_cross_entropy(z, targets)


def kl_div(p, q) -> float:
    """Batch mean of sum p log(p/q), with 0 log 0 = 0 and q clamped at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"p {p.shape} vs q {q.shape}")
    if p.ndim == 1:
        p, q = p[None, :], q[None, :]
    if (p < 0).any() or (q < 0).any():
        raise ValueError("kl_div: probabilities must be nonnegative")
    if not (np.allclose(p.sum(axis=1), 1.0, atol=1e-9, rtol=0)
            and np.allclose(q.sum(axis=1), 1.0, atol=1e-9, rtol=0)):
        raise ValueError("kl_div: rows must sum to 1")
    qc = np.maximum(q, Q_FLOOR)
    safe_p = np.where(p > 0, p, 1.0)
    terms = np.where(p > 0, p * (np.log(safe_p) - np.log(qc)), 0.0)
    return float(terms.sum() / p.shape[0])


def kl_to_target(logits, target) -> LossOutput:
    """KL(target || softmax(logits)); the target is a constant (no gradient)."""
    z = np.asarray(logits, dtype=np.float64)
    p = softmax(z)
    value = kl_div(target, p)
    return LossOutput(value, (p - np.asarray(target)) / z.shape[0])


def am_scale(num_classes: int) -> float:
    """max(sqrt(2) * ln(C - 1), 3)."""
    if num_classes < 2:
        raise ValueError("am_scale needs C >= 2")
    return max(math.sqrt(2.0) * math.log(num_classes - 1), 3.0)


def am_softmax_from_cosines(cosines, y, params: AmSoftmaxParams) -> LossOutput:
    """AM-Softmax on precomputed cosines; ``dlogits`` is w.r.t. the cosines."""
    cos = np.asarray(cosines, dtype=np.float64)
    b, c = cos.shape
    y = _labels(y, c, b)
    onehot = _onehot(y, c)
    scaled = params.scale * (cos - params.margin * onehot)
    ce = soft_cross_entropy(scaled, onehot)
    return LossOutput(ce.value, params.scale * ce.dlogits)


def am_softmax(features, class_weights, y, params: AmSoftmaxParams) -> LossOutput:
    """AM-Softmax from raw features and class weight rows.

    Gradients w.r.t. the un-normalized features and weights are returned in
    ``dfeatures`` and ``dweights``; ``dlogits`` holds d/d(cosines).
    """
    f = np.asarray(features, dtype=np.float64)
    w = np.asarray(class_weights, dtype=np.float64)
    if f.ndim != 2 or w.ndim != 2 or f.shape[1] != w.shape[1]:
        raise ShapeError(f"features {f.shape} and class weights {w.shape} incompatible")
    if (np.linalg.norm(f, axis=1) == 0).any():
        raise ValueError("am_softmax: zero-norm feature vector")
    if (np.linalg.norm(w, axis=1) == 0).any():
        raise ValueError("am_softmax: zero-norm class weight vector")
    cos, cache = cosine_forward(f, w)
    out = am_softmax_from_cosines(cos, y, params)
    out.dfeatures, out.dweights = cosine_backward(out.dlogits, cache)
    return out


def with_targets(loss_fn, logits, y) -> LossOutput:
    """Apply ``loss_fn(logits, labels)`` to plain labels or a mixed pair ``(y_a, y_b, w)``."""
    if isinstance(y, tuple):
        y_a, y_b, w = y
        if w >= 1.0:
            return loss_fn(logits, y_a)
        a, b = loss_fn(logits, y_a), loss_fn(logits, y_b)
        return LossOutput(w * a.value + (1.0 - w) * b.value, w * a.dlogits + (1.0 - w) * b.dlogits)
    return loss_fn(logits, y)


def _slow_setup(params: Optional[AmSoftmaxParams], slow_kind: str):
    if slow_kind == "am_softmax":
        params = params or AmSoftmaxParams(1.0, 0.0)
        return params.scale, (lambda z, y: am_softmax_from_cosines(z, y, params))
    if slow_kind == "ce":
        return 1.0, cross_entropy
    raise ValueError(f"unknown slow loss {slow_kind!r}")


def dml_fast_loss(logits_fast, p_slow, y) -> LossOutput:
    """CE(p1, y) + KL(p2 || p1) with ``p_slow`` held constant."""
    ce = with_targets(cross_entropy, logits_fast, y)
    kl = kl_to_target(logits_fast, p_slow)
    return LossOutput(ce.value + kl.value, ce.dlogits + kl.dlogits, parts={"ce": ce.value, "kl": kl.value})


def dml_slow_loss(logits_slow, p_fast, y, params: Optional[AmSoftmaxParams] = None,
                  slow_kind: str = "am_softmax") -> LossOutput:
    """AMS(cos, y) + KL(p1 || p2) with ``p_fast`` held constant; p2 = softmax(s * cos)."""
    scale, base_fn = _slow_setup(params, slow_kind)
    z = np.asarray(logits_slow, dtype=np.float64)
    base = with_targets(base_fn, z, y)
    kl = kl_to_target(scale * z, p_fast)
    return LossOutput(base.value + kl.value, base.dlogits + scale * kl.dlogits,
                      parts={slow_kind: base.value, "kl": kl.value})


def slow_distribution(logits_slow, params: Optional[AmSoftmaxParams] = None,
                      slow_kind: str = "am_softmax") -> np.ndarray:
    scale, _ = _slow_setup(params, slow_kind)
    return softmax(scale * np.asarray(logits_slow, dtype=np.float64))


def dml_losses(logits_fast, logits_slow, y, params: Optional[AmSoftmaxParams] = None,
               slow_kind: str = "am_softmax") -> Tuple[LossOutput, LossOutput]:
    """Mutual-learning pair objective.

    L_fast = CE(p1, y) + KL(p2 || p1);  L_slow = AMS(cos, y) + KL(p1 || p2)
    with p1 = softmax(logits_fast) and p2 = softmax(s * cos).  Each KL target
    is the other student's distribution, held constant.  With
    ``slow_kind="ce"`` the slow logits are ordinary logits and L_slow uses CE.
    """
    zf = np.asarray(logits_fast, dtype=np.float64)
    zs = np.asarray(logits_slow, dtype=np.float64)
    if zf.shape != zs.shape:
        raise ShapeError(f"fast logits {zf.shape} vs slow logits {zs.shape}")
    p1 = softmax(zf)
    p2 = slow_distribution(zs, params, slow_kind)
    return dml_fast_loss(zf, p2, y), dml_slow_loss(zs, p1, y, params, slow_kind)
