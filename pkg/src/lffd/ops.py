"""Minimal deterministic conv/relu/residual kernels with forward and backward passes.

Everything here operates on plain float32 numpy arrays laid out channel-major:
``(C, H, W)`` or ``(B, C, H, W)``. Convolution uses cross-correlation semantics
(no kernel flip) in both directions. The fast path lowers 3x3 windows onto a
single BLAS matmul (im2col); accumulation order is therefore fixed by the GEMM
kernel and repeated runs on one machine are bitwise identical. A 64-bit
accumulation mode exists for oracle comparisons.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

_DEBUG_FINITE = bool(os.environ.get("LFFD_DEBUG"))


class ShapeError(ValueError):
    """Raised when tensor shapes disagree with an op's contract."""


@dataclass
class ConvParams:
    """One convolution layer: geometry plus its weights ``(out, in, k, k)`` and bias ``(out,)``."""

    kernel: int
    stride: int
    pad: int
    in_channels: int
    out_channels: int
    weights: np.ndarray = field(repr=False)
    bias: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.kernel not in (1, 3):
            raise ShapeError(f"kernel must be 1 or 3, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {self.stride}")
        expected_pad = 1 if self.kernel == 3 else 0
        if self.pad != expected_pad:
            raise ShapeError(f"pad must be {expected_pad} for kernel {self.kernel}, got {self.pad}")
        w = np.asarray(self.weights)
        if w.shape != (self.out_channels, self.in_channels, self.kernel, self.kernel):
            raise ShapeError(
                f"weights shape {w.shape} != "
                f"{(self.out_channels, self.in_channels, self.kernel, self.kernel)}"
            )
        b = np.asarray(self.bias)
        if b.shape != (self.out_channels,):
            raise ShapeError(f"bias shape {b.shape} != ({self.out_channels},)")


def conv2d_output_shape(h: int, w: int, p: ConvParams) -> tuple[int, int]:
    """Spatial dims of the conv output: floor((in + 2*pad - k)/stride) + 1 per axis."""
    oh = (h + 2 * p.pad - p.kernel) // p.stride + 1
    ow = (w + 2 * p.pad - p.kernel) // p.stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"input {h}x{w} too small for kernel {p.kernel} pad {p.pad}")
    return oh, ow


def _check_finite(x: np.ndarray, what: str) -> None:
    if _DEBUG_FINITE and not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")


def _windows(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Strided view (B, C, oh, ow, k, k) over the padded input. No copy."""
    b, c = xp.shape[:2]
    sb, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, oh, ow, k, k),
        strides=(sb, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def _pad_input(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d_forward(x: np.ndarray, p: ConvParams, fp64: bool = False) -> np.ndarray:
    """Cross-correlate ``x`` with ``p``; returns (B?, out, oh, ow) matching input rank.

    ``fp64`` accumulates in float64 and returns float64 (oracle mode).
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"input must be rank 3 or 4, got {x.ndim}")
    b, c, h, w = x.shape
    if c != p.in_channels:
        raise ShapeError(f"input has {c} channels, layer expects {p.in_channels}")
    oh, ow = conv2d_output_shape(h, w, p)

    dtype = np.float64 if fp64 else np.float32
    wmat = p.weights.reshape(p.out_channels, -1).astype(dtype, copy=False)
    if p.kernel == 1 and p.stride == 1:
        cols = x.reshape(b, c, h * w).astype(dtype, copy=False)
    else:
        xp = _pad_input(x, p.pad)
        win = _windows(xp, p.kernel, p.stride, oh, ow)
        # (B, C, k, k, oh*ow) contiguous so the matmul sees one dense operand
        cols = (
            win.transpose(0, 1, 4, 5, 2, 3)
            .reshape(b, c * p.kernel * p.kernel, oh * ow)
            .astype(dtype, copy=False)
        )
    out = np.matmul(wmat, cols)
    out += p.bias.astype(dtype, copy=False)[:, None]
    out = out.reshape(b, p.out_channels, oh, ow)
    _check_finite(out, "conv2d_forward output")
    return out[0] if squeeze else out


def conv2d_backward(
    x: np.ndarray, p: ConvParams, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic gradients of conv2d_forward: (grad_input, grad_weights, grad_bias)."""
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
        grad_out = grad_out[None]
    b, c, h, w = x.shape
    if c != p.in_channels:
        raise ShapeError(f"input has {c} channels, layer expects {p.in_channels}")
    oh, ow = conv2d_output_shape(h, w, p)
    if grad_out.shape != (b, p.out_channels, oh, ow):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(b, p.out_channels, oh, ow)}")

    dtype = x.dtype if x.dtype == np.float64 else np.float32
    g = grad_out.reshape(b, p.out_channels, oh * ow).astype(dtype, copy=False)
    wmat = p.weights.reshape(p.out_channels, -1).astype(dtype, copy=False)

    grad_bias = grad_out.sum(axis=(0, 2, 3), dtype=dtype)

    k = p.kernel
    xp = _pad_input(x, p.pad)
    win = _windows(xp, k, p.stride, oh, ow)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, oh * ow).astype(dtype, copy=False)

    # grad_W: sum over batch of g @ cols^T
    grad_w = np.einsum("bol,bcl->oc", g, cols, optimize=True).reshape(p.weights.shape)

    # grad_input: scatter W^T @ g back through the windows
    gcols = np.matmul(wmat.T, g)  # (B, C*k*k, oh*ow)
    gcols = gcols.reshape(b, c, k, k, oh, ow)
    gxp = np.zeros_like(xp, dtype=dtype)
    hs = p.stride * (oh - 1) + 1
    ws = p.stride * (ow - 1) + 1
    for ki in range(k):
        for kj in range(k):
            gxp[:, :, ki : ki + hs : p.stride, kj : kj + ws : p.stride] += gcols[:, :, ki, kj]
    grad_input = np.ascontiguousarray(gxp[:, :, p.pad : p.pad + h, p.pad : p.pad + w])

    _check_finite(grad_input, "conv2d_backward grad_input")
    if squeeze:
        return grad_input[0], grad_w, grad_bias
    return grad_input, grad_w, grad_bias


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    # derivative at exactly 0 is defined as 0
    return np.where(x > 0, grad, 0)


def residual_add(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if x.shape != y.shape:
        raise ShapeError(f"residual_add shapes differ: {x.shape} vs {y.shape}")
    return x + y
