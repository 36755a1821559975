"""Differentiable operations on :class:`Tensor`.

Every op computes its forward pass with numpy and, when a tape is active
and an input requires a gradient, records a closure computing the
vector-Jacobian product.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import NonFiniteError, ShapeError, Tape, TapeEntry, Tensor, active_tape

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _emit(
    op: str,
    out_data: np.ndarray,
    inputs: Sequence[Optional[Tensor]],
    grad_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    live = tuple(t for t in inputs if t is not None)
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in live)
    out = Tensor(out_data, requires_grad=needs_grad)
    if needs_grad:
        def backward(g, _fn=grad_fn, _inputs=inputs):
            gs = _fn(g)
            return [gi for t, gi in zip(_inputs, gs) if t is not None]

        tape.record(TapeEntry(op, live, out, backward))
    return out


def _check_4d(name: str, t: Tensor) -> None:
    if t.data.ndim != 4:
        raise ShapeError(f"{name} expects a 4-D tensor, got shape {t.shape}")


# ---------------------------------------------------------------------------
# elementwise / reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    x, y = a.data, b.data
    return _emit("mul", x * y, (a, b), lambda g: (g * y, g * x))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _emit("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _emit(
        "mean",
        np.asarray(a.data.mean(), dtype=a.dtype),
        (a,),
        lambda g: (np.full(shape, g / n, dtype=g.dtype),),
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1 - s),))


def global_avg_pool2d(a: Tensor) -> Tensor:
    _check_4d("global_avg_pool2d", a)
    n, c, h, w = a.shape

    def grad(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), a.shape).astype(g.dtype),)

    return _emit("global_avg_pool2d", a.data.mean(axis=(2, 3)), (a,), grad)


def mse_loss(prediction: Tensor, target: Tensor) -> Tensor:
    if prediction.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {prediction.shape} vs target {target.shape}")
    diff = prediction.data - target.data
    n = diff.size
    # accumulate in float64; the scalar is rounded once at the end
    d64 = diff.astype(np.float64)
    loss = np.asarray(np.dot(d64.ravel(), d64.ravel()) / n, dtype=prediction.dtype)

    def grad(g):
        d = g * (2.0 / n) * diff
        return (d, -d)

    return _emit("mse_loss", loss, (prediction, target), grad)


# ---------------------------------------------------------------------------
# affine layers


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[1]} != weight in_features {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def grad(g):
        return (g @ wd, g.T @ xd, g.sum(axis=0) if bias is not None else None)

    return _emit("linear", out, (x, weight, bias), grad)



def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Strided view [N, C, Ho, Wo, kh, kw] over an already padded input."""
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _conv_forward(x: np.ndarray, k: np.ndarray, stride: int, padding: int) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = _windows(xp, k.shape[2], k.shape[3], stride)
    out = np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, F
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_input_grad(g: np.ndarray, k: np.ndarray, in_hw: tuple[int, int], stride: int, padding: int) -> np.ndarray:
    """Adjoint of the convolution with respect to its input (a scatter-add)."""
    n, _, ho, wo = g.shape
    c, kh, kw = k.shape[1], k.shape[2], k.shape[3]
    h, w = in_hw
    cols = np.tensordot(g, k, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # N, C, kh, kw, Ho, Wo
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    if padding:
        dxp = dxp[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(dxp)


def _conv_kernel_grad(x: np.ndarray, g: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = _windows(xp, kh, kw, stride)[:, :, : g.shape[2], : g.shape[3]]
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # F, C, kh, kw


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` [N,C,H,W] with ``kernel`` [F,C,kh,kw]."""
    _check_4d("conv2d input", x)
    _check_4d("conv2d kernel", kernel)
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: input channels (axis 1) {c} != kernel channels (axis 1) {kc}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding} (axes 2, 3)")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({f},)")

    xd, kd = x.data, kernel.data
    out = _conv_forward(xd, kd, stride, padding)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def grad(g):
        return (
            _conv_input_grad(g, kd, (h, w), stride, padding) if x.requires_grad else None,
            _conv_kernel_grad(xd, g, kh, kw, stride, padding) if kernel.requires_grad else None,
            g.sum(axis=(0, 2, 3)) if bias is not None else None,
        )

    return _emit("conv2d", out, (x, kernel, bias), grad)


def conv_transpose2d(
    x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Transposed convolution of ``x`` [N,C,H,W] with ``kernel`` [C,F,kh,kw].

    Output spatial size is ``(H - 1) * stride - 2 * padding + kh``.
    """
    _check_4d("conv_transpose2d input", x)
    _check_4d("conv_transpose2d kernel", kernel)
    n, c, h, w = x.shape
    kc, f, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv_transpose2d: input channels (axis 1) {c} != kernel axis 0 {kc}")
    if stride < 1 or padding < 0 or padding >= kh or padding >= kw:
        raise ShapeError(f"conv_transpose2d: need stride >= 1 and 0 <= padding < kernel, got {stride}, {padding}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({f},)")
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: empty output {ho}x{wo}")

    xd, kd = x.data, kernel.data
    # A transposed conv is the input-adjoint of conv2d with kernel [C, F, kh, kw].
    out = _conv_input_grad(xd, kd, (ho, wo), stride, padding)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def grad(g):
        return (
            _conv_forward(g, kd, stride, padding) if x.requires_grad else None,
            _conv_kernel_grad(g, xd, kh, kw, stride, padding) if kernel.requires_grad else None,
            g.sum(axis=(0, 2, 3)) if bias is not None else None,
        )

    return _emit("conv_transpose2d", out, (x, kernel, bias), grad)


# ---------------------------------------------------------------------------
# normalization


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode normalizes with batch statistics and, unless
    ``update_stats`` is False, folds them into the running buffers in place.
    """
    _check_4d("batch_norm2d", x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm2d: gamma/beta shapes {gamma.shape}/{beta.shape} must be ({c},)")
    xd = x.data
    gd = gamma.data[None, :, None, None]
    bd = beta.data[None, :, None, None]

    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        # batch statistics and normalization in float64, rounded once to the working dtype
        x64 = xd.astype(np.float64)
        mu = x64.mean(axis=(0, 2, 3), keepdims=True)
        var = ((x64 - mu) ** 2).mean(axis=(0, 2, 3), keepdims=True)
        inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
        xhat = ((x64 - mu) * inv_std).astype(xd.dtype)
        out = xhat * gd + bd
        if update_stats:
            unbiased = var.reshape(-1) * (m / (m - 1) if m > 1 else 1.0)
            running_mean *= 1 - momentum
            running_mean += momentum * mu.reshape(-1)
            running_var *= 1 - momentum
            running_var += momentum * unbiased

        def grad(g):
            dxhat = g * gd
            dx = (inv_std / m) * (
                m * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True) - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
            return (dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

    else:
        rm = running_mean.astype(xd.dtype)[None, :, None, None]
        inv_std = (1.0 / np.sqrt(running_var.astype(xd.dtype) + eps))[None, :, None, None]
        xhat = (xd - rm) * inv_std
        out = xhat * gd + bd

        def grad(g):
            return (g * gd * inv_std, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

    return _emit("batch_norm2d", out.astype(xd.dtype, copy=False), (x, gamma, beta), grad)


__all__ = [
    "Tape",
    "add",
    "mul",
    "scale",
    "sum",
    "mean",
    "reshape",
    "flatten",
    "relu",
    "sigmoid",
    "global_avg_pool2d",
    "mse_loss",
    "linear",
    "conv2d",
    "conv_transpose2d",
    "batch_norm2d",
]
