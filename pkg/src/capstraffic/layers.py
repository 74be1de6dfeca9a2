"""Convolution, pooling, dense layers, MSE loss and Adam.

Images are channels-last: ``(H, W, C)`` for one sample or ``(B, H, W, C)``
for a batch. Convolution kernels are stored as ``(out, kh, kw, in)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GradientError, ShapeError
from .tensor import Tensor, broadcast_to, matmul, mean, reshape, square, sub


class Layer:
    """Base for layers with named, lazily initialised parameters."""

    def param_specs(self) -> dict[str, tuple[tuple[int, ...], int | None]]:
        """Map parameter name to ``(shape, fan_in)``; ``fan_in=None`` means zero init."""
        return {}

    def parameters(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in self.param_specs()}

    def count_parameters(self) -> int:
        return sum(math.prod(shape) for shape, _ in self.param_specs().values())

    def initialize(self, rng: np.random.Generator) -> None:
        for name, (shape, fan_in) in self.param_specs().items():
            if fan_in is None:
                value = np.zeros(shape)
            else:
                bound = 1.0 / math.sqrt(fan_in)
                value = rng.uniform(-bound, bound, size=shape)
            setattr(self, name, Tensor(value, requires_grad=True, name=name))

    def load(self, values: dict[str, Tensor]) -> None:
        for name, (shape, _) in self.param_specs().items():
            value = values[name]
            if value.shape != tuple(shape):
                raise ShapeError(f"parameter {name!r} has wrong shape", value.shape, shape)
            setattr(self, name, value)


# ---------------------------------------------------------------------------
# convolution


def _same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _as_batch(x: Tensor, op: str) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{op} expects (H, W, C) or (B, H, W, C) input", x.shape)


def conv2d(
    x: Tensor,
    kernels: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: str = "same",
) -> Tensor:
    """2-D cross-correlation via im2col. No activation is applied."""
    x, single = _as_batch(x, "conv2d")
    n_out, kh, kw, c_in = kernels.shape
    batch, height, width, channels = x.shape
    if channels != c_in:
        raise ShapeError(
            f"conv2d channel mismatch: kernels expect {c_in} input channels, got {channels}",
            x.shape,
            kernels.shape,
        )
    if padding == "same":
        top, bottom = _same_padding(height, kh, stride)
        left, right = _same_padding(width, kw, stride)
    elif padding == "valid":
        top = bottom = left = right = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', not {padding!r}")
    if height + top + bottom < kh or width + left + right < kw:
        raise ShapeError("conv2d input smaller than kernel", x.shape, kernels.shape)

    padded = np.pad(x.data, ((0, 0), (top, bottom), (left, right), (0, 0)))
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    out_h, out_w = windows.shape[1], windows.shape[2]
    # (B, Ho, Wo, C, kh, kw) -> rows ordered like the kernel's (kh, kw, C)
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(batch * out_h * out_w, kh * kw * c_in)
    kmat = kernels.data.reshape(n_out, -1)
    out = cols @ kmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(batch, out_h, out_w, n_out)

    def vjp(g):
        g2 = g.reshape(-1, n_out)
        dk = (g2.T @ cols).reshape(kernels.shape)
        dcols = (g2 @ kmat).reshape(batch, out_h, out_w, kh, kw, c_in)
        dpad = np.zeros(padded.shape)
        for i in range(kh):
            for j in range(kw):
                dpad[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride, :] += dcols[
                    :, :, :, i, j, :
                ]
        dx = dpad[:, top : top + height, left : left + width, :]
        grads = [dx, dk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    result = Tensor._from_op(out, parents, vjp)
    return reshape(result, result.shape[1:]) if single else result


class Conv2D(Layer):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, padding: str = "same"):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.kernels: Tensor | None = None
        self.bias: Tensor | None = None

    def param_specs(self):
        k = self.kernel_size
        return {
            "kernels": ((self.out_channels, k, k, self.in_channels), k * k * self.in_channels),
            "bias": ((self.out_channels,), None),
        }

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernels, self.bias, self.stride, self.padding)

    def output_shape(self, height: int, width: int) -> tuple[int, int, int]:
        if self.padding == "same":
            return -(-height // self.stride), -(-width // self.stride), self.out_channels
        k = self.kernel_size
        return (height - k) // self.stride + 1, (width - k) // self.stride + 1, self.out_channels


# ---------------------------------------------------------------------------
# pooling


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; an odd trailing row/column is dropped.

    Ties send the gradient to the first maximum in row-major order.
    """
    x, single = _as_batch(x, "maxpool2x2")
    batch, height, width, channels = x.shape
    if height < 2 or width < 2:
        raise ShapeError("maxpool2x2 needs H >= 2 and W >= 2", x.shape)
    oh, ow = height // 2, width // 2
    blocks = (
        x.data[:, : 2 * oh, : 2 * ow, :]
        .reshape(batch, oh, 2, ow, 2, channels)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(batch, oh, ow, channels, 4)
    )
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        dblocks = np.zeros(blocks.shape)
        np.put_along_axis(dblocks, idx[..., None], g[..., None], axis=-1)
        dx = np.zeros(x.shape)
        dx[:, : 2 * oh, : 2 * ow, :] = (
            dblocks.reshape(batch, oh, ow, channels, 2, 2)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(batch, 2 * oh, 2 * ow, channels)
        )
        return (dx,)

    result = Tensor._from_op(out, (x,), vjp)
    return reshape(result, result.shape[1:]) if single else result


def flatten(x: Tensor) -> Tensor:
    """(B, ...) -> (B, prod(...)) in row-major order."""
    return reshape(x, (x.shape[0], -1)) if x.ndim > 1 else x


# ---------------------------------------------------------------------------
# dense


def dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weights + bias`` for a vector or a (B, F) batch."""
    single = x.ndim == 1
    if single:
        x = reshape(x, (1, x.shape[0]))
    if x.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError("dense input length does not match weights", x.shape, weights.shape)
    out = matmul(x, weights)
    if bias is not None:
        out = out + broadcast_to(bias, out.shape)
    return reshape(out, out.shape[1:]) if single else out


class Dense(Layer):
    def __init__(self, in_features: int, out_features: int):
        self.in_features = in_features
        self.out_features = out_features
        self.weights: Tensor | None = None
        self.bias: Tensor | None = None

    def param_specs(self):
        return {
            "weights": ((self.in_features, self.out_features), self.in_features),
            "bias": ((self.out_features,), None),
        }

    def __call__(self, x: Tensor) -> Tensor:
        return dense(x, self.weights, self.bias)


# ---------------------------------------------------------------------------
# loss


def mse_loss(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("mse_loss shapes differ", pred.shape, target.shape)
    return mean(square(sub(pred, target)))


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    """Adam moments plus an exponentially decaying learning rate ``lr0 * decay**t``."""

    lr0: float = 5e-4
    decay: float = 0.9999
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")

    @property
    def learning_rate(self) -> float:
        """Rate the next step will use."""
        return self.lr0 * self.decay**self.t


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState) -> dict[str, Tensor]:
    """One bias-corrected Adam update. Advances ``state`` in place and returns new tensors.

    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for parameter {name!r}")
    lr = state.learning_rate
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    updated = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        elif g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has wrong shape", g.shape, p.shape)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - state.beta1) * g if m is None else state.beta1 * m + (1.0 - state.beta1) * g
        v = (1.0 - state.beta2) * g * g if v is None else state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        updated[name] = Tensor(p.data - step, requires_grad=True, name=p.name)
    return updated
