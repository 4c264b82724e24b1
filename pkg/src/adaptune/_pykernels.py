"""Pure numpy implementations of the hot kernels.

Used when the compiled ``_ckernels`` extension is unavailable, and as the
reference the compiled versions are tested against.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward(x, w):
    """x: [N, Cin, H, W], w: [Cout, Cin, K, K] -> [N, Cout, H-K+1, W-K+1]."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    k = w.shape[2]
    if w.shape[1] != x.shape[1] or w.shape[3] != k:
        raise ValueError("kernel shape does not match input channels")
    if x.shape[2] < k or x.shape[3] < k:
        raise ValueError("kernel larger than input")
    # windows: [N, Cin, OH, OW, K, K]
    windows = sliding_window_view(x, (k, k), axis=(2, 3))
    return np.einsum("ncijuv,ocuv->noij", windows, w, optimize=True)


def conv2d_backward(x, w, dout):
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    dout = np.ascontiguousarray(dout, dtype=np.float64)
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    oh, ow = h - k + 1, wd - k + 1
    if dout.shape != (n, cout, oh, ow):
        raise ValueError("upstream gradient shape mismatch")
    windows = sliding_window_view(x, (k, k), axis=(2, 3))
    dw = np.einsum("ncijuv,noij->ocuv", windows, dout, optimize=True)
    dx = np.zeros_like(x)
    for u in range(k):
        for v in range(k):
            dx[:, :, u:u + oh, v:v + ow] += np.einsum("noij,oc->ncij", dout, w[:, :, u, v])
    return dx, dw


def true_class_ranks(probs, labels):
    """1-based rank of each row's true class; ties rank the lower class index first."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = probs.shape
    if labels.shape != (n,):
        raise ValueError("labels length does not match probs rows")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label outside [0, {c})")
    p_true = probs[np.arange(n), labels][:, None]
    cols = np.arange(c)[None, :]
    ahead = (probs > p_true) | ((probs == p_true) & (cols < labels[:, None]))
    return 1 + ahead.sum(axis=1).astype(np.int64)
