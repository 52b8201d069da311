"""Rank-4 NCHW tensors and the elementwise/structural ops everything else uses.

A tensor is a plain numpy array of shape (n, c, h, w).  Model data lives in
float32; float64 is accepted everywhere so the gradient oracle can run with
extra headroom.
"""

import numpy as np

Tensor = np.ndarray


class ShapeError(ValueError):
    """Raised when tensor dimensions do not satisfy an operation's contract."""


def tensor(data, dtype=np.float32) -> Tensor:
    """Build a rank-4 NCHW tensor from nested sequences or an array."""
    a = np.asarray(data, dtype=dtype)
    if a.ndim != 4:
        raise ShapeError(f"expected rank-4 NCHW data, got rank {a.ndim}")
    if min(a.shape) < 1:
        raise ShapeError(f"all dims must be >= 1, got {a.shape}")
    return a


def zeros(n, c, h, w, dtype=np.float32) -> Tensor:
    return np.zeros((n, c, h, w), dtype=dtype)


def check_nchw(a: Tensor, name="tensor"):
    if not isinstance(a, np.ndarray) or a.ndim != 4:
        raise ShapeError(f"{name} must be a rank-4 NCHW array")


def concat_channels(a: Tensor, b: Tensor, c: Tensor) -> Tensor:
    """Join three tensors along the channel axis, order a then b then c."""
    for t in (a, b, c):
        check_nchw(t)
    na, _, ha, wa = a.shape
    for name, t in (("b", b), ("c", c)):
        n, _, h, w = t.shape
        if (n, h, w) != (na, ha, wa):
            raise ShapeError(
                f"concat_channels: {name} has n/h/w {(n, h, w)}, expected {(na, ha, wa)}"
            )
    return np.concatenate([a, b, c], axis=1)


def add(a: Tensor, b: Tensor) -> Tensor:
    check_nchw(a)
    check_nchw(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return a + b


def map_unary(a: Tensor, f) -> Tensor:
    """Apply a scalar function elementwise; dims and dtype preserved."""
    check_nchw(a)
    out = np.vectorize(f, otypes=[a.dtype])(a)
    return out.reshape(a.shape)
