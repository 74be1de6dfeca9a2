"""Capsule layers: squash, primary capsules, prediction transforms and routing-by-agreement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GradientError, ShapeError
from .layers import Conv2D, Layer
from .tensor import Tensor, relu, reshape, transpose

LENGTH_EPS = 1e-9


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """Shrink each vector along ``axis`` to length ``|s|^2 / (1 + |s|^2)``, keeping direction.

    The zero vector maps to zero.
    """
    if not np.all(np.isfinite(s.data)):
        raise GradientError("squash input contains non-finite values")
    n2 = (s.data * s.data).sum(axis=axis, keepdims=True)
    n = np.sqrt(n2)
    scale = n / (1.0 + n2)
    out = s.data * scale

    def vjp(g):
        # d/dn [n / (1 + n^2)] / n, finite limit irrelevant because it multiplies s s^T
        dscale = np.divide((1.0 - n2) / (1.0 + n2) ** 2, n, out=np.zeros_like(n), where=n > 0)
        return (scale * g + s.data * dscale * (s.data * g).sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (s,), vjp)


def capsule_lengths(v: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm of each capsule. The backward pass uses ``sqrt(|v|^2 + eps)``
    in the denominator so the gradient stays finite at zero length."""
    n2 = (v.data * v.data).sum(axis=axis)
    out = np.sqrt(n2)
    soft = np.expand_dims(np.sqrt(n2 + LENGTH_EPS), axis)

    def vjp(g):
        return (np.expand_dims(g, axis) * v.data / soft,)

    return Tensor._from_op(out, (v,), vjp)


class PrimaryCaps(Layer):
    """Convolution + ReLU whose channels are regrouped into capsules, then squashed.

    For an ``H x W`` feature map with ``channels = types * capsule_dim`` this
    yields ``H * W * types`` capsules, ordered by (row, column, type).
    """

    def __init__(self, in_channels: int, channels: int = 128, capsule_dim: int = 8,
                 kernel_size: int = 3):
        if channels % capsule_dim:
            raise ValueError(f"channels ({channels}) must be a multiple of capsule_dim ({capsule_dim})")
        self.conv = Conv2D(in_channels, channels, kernel_size)
        self.capsule_dim = capsule_dim

    @property
    def capsule_types(self) -> int:
        return self.conv.out_channels // self.capsule_dim

    def num_capsules(self, height: int, width: int) -> int:
        return height * width * self.capsule_types

    def param_specs(self):
        return self.conv.param_specs()

    def parameters(self):
        return self.conv.parameters()

    def initialize(self, rng):
        self.conv.initialize(rng)

    def load(self, values):
        self.conv.load(values)

    def __call__(self, features: Tensor) -> Tensor:
        single = features.ndim == 3
        h = relu(self.conv(features))
        if single:
            caps = reshape(h, (-1, self.capsule_dim))
        else:
            caps = reshape(h, (h.shape[0], -1, self.capsule_dim))
        return squash(caps)


def _transforms_out_major(u: Tensor, weights: Tensor) -> Tensor:
    """Prediction vectors laid out (B, num_out, num_in, out_dim), contiguous."""
    if u.ndim != 3 or weights.ndim != 4:
        raise ShapeError("predict_transforms expects u (B, in, d) and W (in, out, d, e)",
                         u.shape, weights.shape)
    n_in, n_out, d_in, d_out = weights.shape
    if u.shape[1:] != (n_in, d_in):
        raise ShapeError("capsule count or dimension does not match transforms", u.shape, weights.shape)
    batch = u.shape[0]
    # batched over input capsules: (in, B, d) @ (in, d, out*e)
    u_i = u.data.transpose(1, 0, 2)
    w_i = weights.data.transpose(0, 2, 1, 3).reshape(n_in, d_in, n_out * d_out)
    out = np.ascontiguousarray(
        (u_i @ w_i).reshape(n_in, batch, n_out, d_out).transpose(1, 2, 0, 3)
    )

    def vjp(g):
        g_i = g.transpose(2, 0, 1, 3).reshape(n_in, batch, n_out * d_out)
        du = (g_i @ w_i.transpose(0, 2, 1)).transpose(1, 0, 2)
        dw = (u_i.transpose(0, 2, 1) @ g_i).reshape(n_in, d_in, n_out, d_out).transpose(0, 2, 1, 3)
        return du, dw

    return Tensor._from_op(out, (u, weights), vjp)


def predict_transforms(u: Tensor, weights: Tensor) -> Tensor:
    """Prediction vectors ``u_hat[j|i] = u_i @ W_ij``.

    ``u`` is ``(num_in, in_dim)`` or ``(B, num_in, in_dim)``; ``weights`` is
    ``(num_in, num_out, in_dim, out_dim)``. Output is ``(..., num_in, num_out, out_dim)``.
    """
    single = u.ndim == 2
    if single:
        u = reshape(u, (1,) + u.shape)
    u_hat = transpose(_transforms_out_major(u, weights), (0, 2, 1, 3))
    return reshape(u_hat, u_hat.shape[1:]) if single else u_hat


def _softmax_axis1(b: np.ndarray) -> np.ndarray:
    e = np.exp(b - b.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _squash_arrays(s: np.ndarray):
    n2 = (s * s).sum(axis=-1, keepdims=True)
    n = np.sqrt(n2)
    scale = n / (1.0 + n2)
    return s * scale, n, n2, scale


def _squash_backward(s, n, n2, scale, g):
    dscale = np.divide((1.0 - n2) / (1.0 + n2) ** 2, n, out=np.zeros_like(n), where=n > 0)
    return scale * g + s * dscale * (s * g).sum(axis=-1, keepdims=True)


def _route(u_t: Tensor, iterations: int, trace: list | None = None) -> Tensor:
    """Fused routing over ``u_t`` laid out (B, num_out, num_in, d).

    Forward and reverse passes over the unrolled iterations are written out
    by hand; the gradient for ``u_t`` is assembled as one low-rank product
    instead of one full-size outer product per iteration.
    """
    u = u_t.data
    batch, n_out, n_in, _ = u.shape
    logits = np.zeros((batch, n_out, n_in))
    saved = []
    for r in range(iterations):
        c = _softmax_axis1(logits)
        s = (c[:, :, None, :] @ u)[:, :, 0, :]
        v, n, n2, scale = _squash_arrays(s)
        saved.append((c, s, v, n, n2, scale))
        if trace is not None:
            trace.append((c, s, v))
        if r < iterations - 1:
            logits = logits + (u @ v[..., None])[..., 0]
    if trace is not None:
        trace.append(logits)

    def vjp(g):
        left, right = [], []  # du = sum_k left_k (x) right_k
        grad_next_logits = None
        grad_v = g
        for r in reversed(range(iterations)):
            c, s, v, n, n2, scale = saved[r]
            if grad_next_logits is not None:
                # logits_{r+1} = logits_r + u . v_r
                left.append(grad_next_logits)
                right.append(v)
                grad_v = (grad_next_logits[:, :, None, :] @ u)[:, :, 0, :]
            grad_s = _squash_backward(s, n, n2, scale, grad_v)
            left.append(c)
            right.append(grad_s)
            grad_c = (u @ grad_s[..., None])[..., 0]
            grad_logits = c * (grad_c - (grad_c * c).sum(axis=1, keepdims=True))
            if grad_next_logits is not None:
                grad_logits = grad_logits + grad_next_logits
            grad_next_logits = grad_logits
        du = np.stack(left, axis=-1) @ np.stack(right, axis=-2)
        return (du,)

    return Tensor._from_op(saved[-1][2], (u_t,), vjp)


@dataclass
class RoutingState:
    """Snapshot of a routing pass (plain arrays, batch axis first).

    ``logits`` and each entry of ``coefficients`` are (B, num_in, num_out).
    """

    logits: np.ndarray
    coefficients: list[np.ndarray] = field(default_factory=list)
    s: np.ndarray | None = None
    v: np.ndarray | None = None


def dynamic_routing(u_hat: Tensor, iterations: int = 3, return_state: bool = False):
    """Routing-by-agreement between prediction vectors and output capsules.

    ``u_hat`` is ``(num_in, num_out, dim)`` or ``(B, num_in, num_out, dim)``.
    Coupling coefficients are a softmax over output capsules of logits that
    start at zero on every call and grow by the dot-product agreement
    ``u_hat[j|i] . v_j``; that update is skipped after the last iteration.
    Gradients flow through every unrolled iteration.
    """
    if iterations < 1:
        raise ValueError(f"routing needs at least one iteration, got {iterations}")
    single = u_hat.ndim == 3
    if single:
        u_hat = reshape(u_hat, (1,) + u_hat.shape)
    if u_hat.ndim != 4:
        raise ShapeError("dynamic_routing expects (B, in, out, dim)", u_hat.shape)
    u_t = _contiguous(transpose(u_hat, (0, 2, 1, 3)))
    trace = [] if return_state else None
    v = _route(u_t, iterations, trace)
    if single:
        v = reshape(v, v.shape[1:])
    if not return_state:
        return v
    state = RoutingState(
        logits=trace[-1].transpose(0, 2, 1),
        coefficients=[c.transpose(0, 2, 1) for c, _, _ in trace[:-1]],
        s=trace[-2][1],
        v=trace[-2][2],
    )
    return v, state


def _contiguous(x: Tensor) -> Tensor:
    return Tensor._from_op(np.ascontiguousarray(x.data), (x,), lambda g: (g,))


class TrafficCaps(Layer):
    """Output capsules: one per (horizon step, road segment), no bias."""

    def __init__(self, num_in: int, num_out: int, in_dim: int = 8, out_dim: int = 16,
                 routing_iterations: int = 3):
        self.num_in = num_in
        self.num_out = num_out
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.routing_iterations = routing_iterations
        self.W: Tensor | None = None

    def param_specs(self):
        return {"W": ((self.num_in, self.num_out, self.in_dim, self.out_dim), self.in_dim)}

    def __call__(self, u: Tensor) -> Tensor:
        single = u.ndim == 2
        if single:
            u = reshape(u, (1,) + u.shape)
        v = _route(_transforms_out_major(u, self.W), self.routing_iterations)
        return reshape(v, v.shape[1:]) if single else v
