import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptune import _pykernels, kernels
from adaptune.modelcore import SeededRng

try:
    from adaptune import _ckernels
except ImportError:  # pragma: no cover - extension not built
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled extension not built")


def conv_oracle(x, w):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    out = np.zeros((n, cout, h - k + 1, wd - k + 1))
    for b in range(n):
        for o in range(cout):
            for i in range(h - k + 1):
                for j in range(wd - k + 1):
                    out[b, o, i, j] = np.sum(x[b, :, i:i + k, j:j + k] * w[o])
    return out


def ranks_oracle(probs, labels):
    out = []
    for row, y in zip(probs, labels):
        order = sorted(range(len(row)), key=lambda c: (-row[c], c))
        out.append(order.index(y) + 1)
    return np.array(out)


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")
    if _ckernels is not None:
        assert kernels.BACKEND == "cython"


def test_pure_python_env_forces_fallback():
    env = dict(os.environ, ADAPTUNE_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from adaptune import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@pytest.mark.parametrize("impl", [_pykernels, pytest.param(_ckernels, marks=needs_ext)])
def test_conv_matches_loop_oracle(impl):
    r = SeededRng(3)
    x = r.normal(size=(2, 2, 6, 5))
    w = r.normal(size=(3, 2, 3, 3))
    np.testing.assert_allclose(impl.conv2d_forward(x, w), conv_oracle(x, w), rtol=0, atol=1e-12)


@pytest.mark.parametrize("impl", [_pykernels, pytest.param(_ckernels, marks=needs_ext)])
def test_conv_backward_is_adjoint(impl):
    # <conv(x, w), d> is bilinear, so its gradients are exact linear maps
    r = SeededRng(4)
    x = r.normal(size=(2, 3, 7, 6))
    w = r.normal(size=(2, 3, 3, 3))
    d = r.normal(size=(2, 2, 5, 4))
    dx, dw = impl.conv2d_backward(x, w, d)
    eps = 1e-6
    for arr, grad in ((x, dx), (w, dw)):
        idx = tuple(int(r.integers(s)) for s in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + eps
        up = np.sum(conv_oracle(x, w) * d)
        arr[idx] = orig - eps
        down = np.sum(conv_oracle(x, w) * d)
        arr[idx] = orig
        assert abs((up - down) / (2 * eps) - grad[idx]) < 1e-6


@needs_ext
@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(4, 9), st.integers(4, 9),
       st.integers(0, 2**32 - 1))
def test_backends_agree_conv(n, cin, cout, h, w, seed):
    r = SeededRng(seed)
    x = r.normal(size=(n, cin, h, w))
    k = r.normal(size=(cout, cin, 3, 3))
    d = r.normal(size=(n, cout, h - 2, w - 2))
    np.testing.assert_allclose(_ckernels.conv2d_forward(x, k), _pykernels.conv2d_forward(x, k), atol=1e-12, rtol=0)
    for a, b in zip(_ckernels.conv2d_backward(x, k, d), _pykernels.conv2d_backward(x, k, d)):
        np.testing.assert_allclose(a, b, atol=1e-11, rtol=0)


@pytest.mark.parametrize("impl", [_pykernels, pytest.param(_ckernels, marks=needs_ext)])
def test_ranks_match_oracle_with_ties(impl):
    r = SeededRng(5)
    probs = np.round(r.random((200, 6)), 1)  # coarse values force ties
    labels = r.integers(0, 6, size=200).astype(np.int64)
    np.testing.assert_array_equal(impl.true_class_ranks(probs, labels), ranks_oracle(probs, labels))


def test_ranks_reject_bad_labels():
    with pytest.raises(ValueError):
        kernels.true_class_ranks(np.full((2, 3), 1 / 3), np.array([0, 3]))
