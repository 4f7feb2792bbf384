"""Differentiable layer primitives for causal convolutional audio models.

Signals are plain numpy arrays in [channel][time] order; a leading batch
axis is accepted everywhere, so shapes are (C, T) or (B, C, T). Every
forward operation has a matching exact adjoint, and a finite-difference
harness checks gradients end to end.

Convolutions are causal with zero left-padding: tap index 0 is the oldest
tap, at time offset -(width-1)*dilation; the last tap sees the current
sample. output[0] therefore depends only on input[0] and the biases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericsError, ShapeError

Tensor2 = np.ndarray


@dataclass
class ConvKernel:
    """Causal convolution weights: taps[out][in][tap], oldest tap first."""

    taps: np.ndarray
    bias: np.ndarray | None = None
    dilation: int = 1

    def __post_init__(self):
        self.taps = np.asarray(self.taps)
        if self.taps.dtype != np.float32:
            self.taps = self.taps.astype(np.float64, copy=False)
        if self.taps.ndim != 3:
            raise ShapeError(f"taps must be [out][in][tap], got shape {self.taps.shape}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias)
            if self.bias.dtype != np.float32:
                self.bias = self.bias.astype(np.float64, copy=False)
            if self.bias.shape != (self.taps.shape[0],):
                raise ShapeError(
                    f"bias shape {self.bias.shape} does not match {self.taps.shape[0]} out channels"
                )
        if self.dilation < 1:
            raise DomainError(f"dilation must be >= 1, got {self.dilation}")

    @property
    def out_channels(self) -> int:
        return self.taps.shape[0]

    @property
    def in_channels(self) -> int:
        return self.taps.shape[1]

    @property
    def width(self) -> int:
        return self.taps.shape[2]


def _as_batched(x, name="input"):
    x = np.asarray(x)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"{name} must be (C, T) or (B, C, T), got shape {x.shape}")


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic sigmoid via the identity 0.5*(1 + tanh(x/2)).

    tanh never overflows, so this is stable over the whole float range and
    costs a single ufunc pass.
    """
    x = np.asarray(x)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def causal_conv_forward(kernel: ConvKernel, x: Tensor2) -> Tensor2:
    """out[o][n] = bias[o] + sum_i sum_t taps[o][i][t] * x[i][n-(w-1-t)*d].

    Samples before time 0 read as zero.
    """
    x3, squeeze = _as_batched(x)
    if x3.shape[1] != kernel.in_channels:
        raise ShapeError(
            f"input has {x3.shape[1]} channels, kernel expects {kernel.in_channels}"
        )
    batch, _, length = x3.shape
    dtype = np.result_type(x3.dtype, kernel.taps.dtype, np.float32)
    taps = kernel.taps.astype(dtype, copy=False)
    out = np.zeros((batch, kernel.out_channels, length), dtype=dtype)
    for t in range(kernel.width):
        shift = (kernel.width - 1 - t) * kernel.dilation
        if shift >= length:
            continue
        if shift == 0:
            out += np.matmul(taps[:, :, t], x3)
        else:
            out[:, :, shift:] += np.matmul(taps[:, :, t], x3[:, :, : length - shift])
    if kernel.bias is not None:
        out += kernel.bias.astype(dtype, copy=False)[:, None]
    return out[0] if squeeze else out


def causal_conv_backward(kernel: ConvKernel, x: Tensor2, upstream: Tensor2):
    """Exact adjoint of causal_conv_forward under the zero-padding rule.

    Returns (input_grad, taps_grad, bias_grad); bias_grad is None when the
    kernel has no bias.
    """
    x3, squeeze = _as_batched(x)
    up3, _ = _as_batched(upstream, "upstream")
    if x3.shape[1] != kernel.in_channels:
        raise ShapeError(
            f"input has {x3.shape[1]} channels, kernel expects {kernel.in_channels}"
        )
    if up3.shape != (x3.shape[0], kernel.out_channels, x3.shape[2]):
        raise ShapeError(
            f"upstream shape {up3.shape} does not match forward output "
            f"{(x3.shape[0], kernel.out_channels, x3.shape[2])}"
        )
    length = x3.shape[2]
    dtype = np.result_type(x3.dtype, up3.dtype, kernel.taps.dtype, np.float32)
    taps = kernel.taps.astype(dtype, copy=False)
    input_grad = np.zeros_like(x3, dtype=dtype)
    taps_grad = np.zeros_like(taps)
    for t in range(kernel.width):
        shift = (kernel.width - 1 - t) * kernel.dilation
        if shift >= length:
            continue
        up_part = up3[:, :, shift:] if shift else up3
        x_part = x3[:, :, : length - shift] if shift else x3
        input_grad[:, :, : length - shift] += np.matmul(taps[:, :, t].T, up_part)
        taps_grad[:, :, t] = np.tensordot(up_part, x_part, axes=([0, 2], [0, 2]))
    bias_grad = None if kernel.bias is None else up3.sum(axis=(0, 2))
    return (input_grad[0] if squeeze else input_grad), taps_grad, bias_grad


def conv_forward_cm(kernel: ConvKernel, x_cm: np.ndarray) -> np.ndarray:
    """causal_conv_forward on channel-major batched activations (C, B, T).

    Merging batch and time lets every tap ride one large GEMM; used by the
    training path. Semantics match causal_conv_forward exactly (zero left
    padding applied per batch row).
    """
    c, b, t = x_cm.shape
    w, d = kernel.width, kernel.dilation
    o = kernel.out_channels
    if c != kernel.in_channels:
        raise ShapeError(f"input has {c} channels, kernel expects {kernel.in_channels}")
    dtype = np.result_type(x_cm.dtype, kernel.taps.dtype, np.float32)
    stacked = np.ascontiguousarray(kernel.taps.transpose(2, 0, 1), dtype=dtype).reshape(w * o, c)
    full = (stacked @ x_cm.reshape(c, b * t)).reshape(w, o, b, t)
    out = np.zeros((o, b, t), dtype=dtype)
    for tap in range(w):
        shift = (w - 1 - tap) * d
        if shift >= t:
            continue
        if shift == 0:
            out += full[tap]
        else:
            out[:, :, shift:] += full[tap][:, :, : t - shift]
    if kernel.bias is not None:
        out += kernel.bias.astype(dtype)[:, None, None]
    return out


def conv_backward_cm(kernel: ConvKernel, x_cm: np.ndarray, up_cm: np.ndarray):
    """Adjoint of conv_forward_cm; returns (input_grad, taps_grad, bias_grad)."""
    c, b, t = x_cm.shape
    w, d = kernel.width, kernel.dilation
    o = kernel.out_channels
    if up_cm.shape != (o, b, t):
        raise ShapeError(f"upstream shape {up_cm.shape} != {(o, b, t)}")
    dtype = np.result_type(x_cm.dtype, up_cm.dtype, kernel.taps.dtype, np.float32)
    stacked_t = np.ascontiguousarray(kernel.taps.transpose(2, 1, 0), dtype=dtype).reshape(w * c, o)
    full = (stacked_t @ up_cm.reshape(o, b * t)).reshape(w, c, b, t)
    input_grad = np.zeros((c, b, t), dtype=dtype)
    taps_grad = np.zeros((o, c, w), dtype=dtype)
    for tap in range(w):
        shift = (w - 1 - tap) * d
        if shift >= t:
            continue
        if shift == 0:
            input_grad += full[tap]
            taps_grad[:, :, tap] = np.tensordot(up_cm, x_cm, axes=([1, 2], [1, 2]))
        else:
            input_grad[:, :, : t - shift] += full[tap][:, :, shift:]
            taps_grad[:, :, tap] = np.tensordot(
                up_cm[:, :, shift:], x_cm[:, :, : t - shift], axes=([1, 2], [1, 2])
            )
    bias_grad = None if kernel.bias is None else up_cm.sum(axis=(1, 2))
    return input_grad, taps_grad, bias_grad


def gated_activation_forward(filter_pre: Tensor2, gate_pre: Tensor2) -> Tensor2:
    """tanh(filter) elementwise-times sigmoid(gate)."""
    filter_pre = np.asarray(filter_pre)
    gate_pre = np.asarray(gate_pre)
    if filter_pre.shape != gate_pre.shape:
        raise ShapeError(f"shape mismatch: {filter_pre.shape} vs {gate_pre.shape}")
    return np.tanh(filter_pre) * sigmoid(gate_pre)


def gated_activation_backward(filter_pre: Tensor2, gate_pre: Tensor2, upstream: Tensor2):
    """Adjoint of the gated activation; returns (filter_grad, gate_grad)."""
    filter_pre = np.asarray(filter_pre)
    gate_pre = np.asarray(gate_pre)
    upstream = np.asarray(upstream)
    if not filter_pre.shape == gate_pre.shape == upstream.shape:
        raise ShapeError(
            f"shape mismatch: {filter_pre.shape} vs {gate_pre.shape} vs {upstream.shape}"
        )
    t = np.tanh(filter_pre)
    s = sigmoid(gate_pre)
    return upstream * (1.0 - t * t) * s, upstream * t * s * (1.0 - s)


def init_taps(rng: np.random.Generator, out_channels: int, in_channels: int, width: int) -> np.ndarray:
    """Uniform draw from +-sqrt(1/(in_channels*width)), snapped to the
    float32 grid so model files round-trip bit-exactly."""
    bound = math.sqrt(1.0 / (in_channels * width))
    vals = rng.uniform(-bound, bound, size=(out_channels, in_channels, width))
    return vals.astype(np.float32).astype(np.float64)


def init_kernel(
    rng: np.random.Generator,
    out_channels: int,
    in_channels: int,
    width: int = 1,
    dilation: int = 1,
    bias: bool = True,
) -> ConvKernel:
    """Fresh kernel: uniformly drawn taps, zero biases. Deterministic per rng."""
    return ConvKernel(
        taps=init_taps(rng, out_channels, in_channels, width),
        bias=np.zeros(out_channels) if bias else None,
        dilation=dilation,
    )


def finite_difference_check(loss_and_grad, params: np.ndarray, h: float = 1e-6) -> float:
    """Compare a backprop gradient against central finite differences.

    loss_and_grad maps a flat float64 parameter vector to (scalar loss,
    flat gradient). Returns the worst relative error over all parameters,
    with denominator max(|analytic|, |numeric|, 1e-12).
    """
    if h <= 0:
        raise DomainError(f"step size h must be positive, got {h}")
    params = np.asarray(params, dtype=np.float64)
    loss, grad = loss_and_grad(params)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NumericsError("loss or gradient is non-finite")
    if grad.shape != params.shape:
        raise ShapeError(f"gradient shape {grad.shape} != parameter shape {params.shape}")
    worst = 0.0
    for i in range(params.size):
        bumped = params.copy()
        bumped[i] += h
        up, _ = loss_and_grad(bumped)
        bumped[i] = params[i] - h
        down, _ = loss_and_grad(bumped)
        numeric = (up - down) / (2.0 * h)
        if not np.isfinite(numeric):
            raise NumericsError(f"non-finite finite-difference loss at parameter {i}")
        denom = max(abs(numeric), abs(grad[i]), 1e-12)
        worst = max(worst, abs(numeric - grad[i]) / denom)
    return worst
