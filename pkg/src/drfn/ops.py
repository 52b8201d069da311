"""Differentiable layer primitives: conv, transposed conv, PReLU.

Each op has an analytic forward and backward written against an im2col /
col2im pair, plus a central finite-difference oracle used by the tests and
the self-check command.  All ops are pure functions; dtype follows the
inputs (float32 for model data, float64 for the oracle build).
"""

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, check_nchw


@dataclass
class Conv2dParams:
    weight: Tensor  # (out_c, in_c, k, k)
    bias: np.ndarray  # (out_c,)
    stride: int = 1
    padding: int = 0

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def kernel(self):
        return self.weight.shape[2]


@dataclass
class TransposedConv2dParams:
    weight: Tensor  # (in_c, out_c, k, k)
    bias: np.ndarray  # (out_c,)
    stride: int = 1
    padding: int = 0

    @property
    def in_channels(self):
        return self.weight.shape[0]

    @property
    def out_channels(self):
        return self.weight.shape[1]

    @property
    def kernel(self):
        return self.weight.shape[2]


@dataclass
class PReluParams:
    slope: np.ndarray  # one value per channel


def conv_output_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def tconv_output_size(size, k, stride, padding):
    return (size - 1) * stride - 2 * padding + k


def _im2col(x, k, stride, pad):
    """Unfold x into (c*k*k, n*out_h*out_w) patch columns (one flat GEMM
    operand for the whole batch)."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(w, k, stride, pad)
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, (c, k, k, n, ho, wo), (s1, s2, s3, s0, s2 * stride, s3 * stride)
    )
    return np.ascontiguousarray(windows).reshape(c * k * k, n * ho * wo), ho, wo


def _col2im(cols, out_shape, k, stride, pad):
    """Adjoint of _im2col: scatter-add (c*k*k, n*ho*wo) columns onto images."""
    n, c, h, w = out_shape
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(w, k, stride, pad)
    cols = cols.reshape(c, k, k, n, ho, wo)
    img = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    view = img.transpose(1, 0, 2, 3)  # share storage, match cols layout
    for i in range(k):
        for j in range(k):
            view[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[
                :, i, j
            ]
    return img[:, :, pad : pad + h, pad : pad + w]


def conv2d_forward(x: Tensor, p: Conv2dParams) -> Tensor:
    """Cross-correlation with zero padding; bias added per output channel."""
    check_nchw(x)
    n, c, h, w = x.shape
    if c != p.in_channels:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {p.in_channels}")
    k = p.kernel
    ho = conv_output_size(h, k, p.stride, p.padding)
    wo = conv_output_size(w, k, p.stride, p.padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: non-positive output size {ho}x{wo}")
    cols, ho, wo = _im2col(x, k, p.stride, p.padding)
    w2 = p.weight.reshape(p.out_channels, -1)
    out = w2 @ cols + p.bias[:, None]
    out = out.reshape(p.out_channels, n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out, dtype=x.dtype)


def conv2d_backward(x: Tensor, p: Conv2dParams, grad_out: Tensor):
    """Analytic gradients of conv2d_forward w.r.t. input, weight, and bias."""
    check_nchw(grad_out)
    n, c, h, w = x.shape
    k = p.kernel
    ho = conv_output_size(h, k, p.stride, p.padding)
    wo = conv_output_size(w, k, p.stride, p.padding)
    if grad_out.shape != (n, p.out_channels, ho, wo):
        raise ShapeError(
            f"conv2d_backward: grad_out {grad_out.shape} != {(n, p.out_channels, ho, wo)}"
        )
    cols, _, _ = _im2col(x, k, p.stride, p.padding)
    g = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)).reshape(p.out_channels, -1)
    grad_bias = g.sum(axis=1)
    grad_weight = (g @ cols.T).reshape(p.weight.shape)
    w2 = p.weight.reshape(p.out_channels, -1)
    grad_cols = w2.T @ g
    grad_x = _col2im(grad_cols, x.shape, k, p.stride, p.padding)
    return grad_x, grad_weight, grad_bias


def transposed_conv2d_forward(x: Tensor, p: TransposedConv2dParams) -> Tensor:
    """Each input value scatters a stride-spaced copy of the kernel (adjoint
    of strided convolution)."""
    check_nchw(x)
    n, c, h, w = x.shape
    if c != p.in_channels:
        raise ShapeError(
            f"transposed_conv2d: input has {c} channels, weight expects {p.in_channels}"
        )
    k = p.kernel
    ho = tconv_output_size(h, k, p.stride, p.padding)
    wo = tconv_output_size(w, k, p.stride, p.padding)
    w2 = p.weight.reshape(p.in_channels, -1)  # (ic, oc*k*k)
    x_flat = np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, n * h * w)
    cols = w2.T @ x_flat
    out = _col2im(cols, (n, p.out_channels, ho, wo), k, p.stride, p.padding)
    out += p.bias.reshape(1, -1, 1, 1)
    return out.astype(x.dtype, copy=False)


def transposed_conv2d_backward(x: Tensor, p: TransposedConv2dParams, grad_out: Tensor):
    """Analytic gradients of transposed_conv2d_forward.

    grad_x is an ordinary strided convolution of grad_out with the same
    kernel; grad_weight correlates the input with unfolded grad_out patches.
    """
    check_nchw(grad_out)
    n, c, h, w = x.shape
    k = p.kernel
    ho = tconv_output_size(h, k, p.stride, p.padding)
    wo = tconv_output_size(w, k, p.stride, p.padding)
    if grad_out.shape != (n, p.out_channels, ho, wo):
        raise ShapeError(
            f"transposed_conv2d_backward: grad_out {grad_out.shape} != "
            f"{(n, p.out_channels, ho, wo)}"
        )
    cols_g, gh, gw = _im2col(grad_out, k, p.stride, p.padding)
    assert (gh, gw) == (h, w)
    w2 = p.weight.reshape(p.in_channels, -1)
    grad_x = (w2 @ cols_g).reshape(c, n, h, w).transpose(1, 0, 2, 3)
    grad_x = np.ascontiguousarray(grad_x)
    x_flat = np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, n * h * w)
    grad_weight = (x_flat @ cols_g.T).reshape(p.weight.shape)
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    return grad_x, grad_weight, grad_bias


def prelu_forward(x: Tensor, p: PReluParams) -> Tensor:
    """Per channel j: out = x if x >= 0 else slope[j]*x."""
    check_nchw(x)
    if len(p.slope) != x.shape[1]:
        raise ShapeError(f"prelu: {len(p.slope)} slopes for {x.shape[1]} channels")
    slope = np.asarray(p.slope, dtype=x.dtype).reshape(1, -1, 1, 1)
    return np.where(x >= 0, x, slope * x)


def prelu_backward(x: Tensor, p: PReluParams, grad_out: Tensor):
    """grad_x routes through 1 or slope[j]; grad_slope sums grad*x over the
    negative part of each channel.  Exact zeros take the positive branch."""
    if grad_out.shape != x.shape:
        raise ShapeError(f"prelu_backward: grad_out {grad_out.shape} != x {x.shape}")
    if len(p.slope) != x.shape[1]:
        raise ShapeError(f"prelu: {len(p.slope)} slopes for {x.shape[1]} channels")
    slope = np.asarray(p.slope, dtype=x.dtype).reshape(1, -1, 1, 1)
    neg = x < 0
    grad_x = np.where(neg, slope * grad_out, grad_out)
    grad_slope = np.where(neg, grad_out * x, 0).sum(axis=(0, 2, 3))
    return grad_x, grad_slope


def finite_difference_grad(f, x: Tensor, epsilon: float) -> np.ndarray:
    """Central differences (f(x+eps*e) - f(x-eps*e)) / (2*eps) per element.

    Perturbation and quotient run in float64; f itself sees an array of the
    same dtype as x so the oracle can exercise either precision.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = np.array(x)  # owned writable copy; caller's tensor is untouched
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = float(f(x))
        flat[i] = orig - epsilon
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * epsilon)
    return grad
