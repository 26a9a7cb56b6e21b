"""Differentiable kernels used by the network.

Feature maps are laid out as ``(batch, channels, time)``. Every function
takes and returns :class:`~tfcrnn.nn.tensor.Tensor` objects and records its
own backward rule.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, log_branch

KERNEL_WIDTH = 3
POOL_WIDTH = 3


class ShapeError(ValueError):
    """Operand shapes are inconsistent."""


class BatchNormStateError(RuntimeError):
    """Eval-mode batch norm was asked to use running stats that were never set."""


def same_padding(length: int, stride: int, kernel: int = KERNEL_WIDTH) -> tuple[int, int]:
    out_len = -(-length // stride)
    total = max((out_len - 1) * stride + kernel - length, 0)
    return total // 2, total - total // 2


def conv1d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """Cross-correlation of ``x`` (N, C_in, L) with ``w`` (C_out, C_in, 3).

    Same padding gives ``ceil(L / stride)`` outputs, split as evenly as
    possible between the two ends.
    """
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d expects 3-d input and weight, got {x.shape} and {w.shape}")
    n, c_in, length = x.shape
    c_out, w_in, k = w.shape
    if w_in != c_in:
        raise ShapeError(f"conv1d channel mismatch: input has {c_in}, weight expects {w_in}")
    if k != KERNEL_WIDTH:
        raise ShapeError(f"kernel width must be {KERNEL_WIDTH}, got {k}")
    if stride not in (1, 3):
        raise ShapeError(f"stride must be 1 or 3, got {stride}")
    if padding == "same":
        left, right = same_padding(length, stride, k)
    elif padding == "valid":
        left = right = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right)))
    padded_len = xp.shape[2]
    if padded_len < k:
        raise ShapeError(f"input length {length} too short for kernel {k}")
    # (N, C_in, L_out, K) -> (N, L_out, C_in*K)
    windows = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
    out_len = windows.shape[2]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(n, out_len, c_in * k)
    w_mat = w.data.reshape(c_out, c_in * k)
    out = (cols @ w_mat.T).transpose(0, 2, 1)
    if b is not None:
        out = out + b.data[None, :, None]
    out = np.ascontiguousarray(out)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g_t = g.transpose(0, 2, 1)  # (N, L_out, C_out)
        if w.requires_grad:
            gw = np.einsum("nlo,nlk->ok", g_t, cols, optimize=True)
            w._accumulate(gw.reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2), dtype=np.float64))
        if x.requires_grad:
            gcols = (g_t @ w_mat).reshape(n, out_len, c_in, k).transpose(0, 2, 1, 3)
            gxp = np.zeros_like(xp)
            span = stride * (out_len - 1) + 1
            for tap in range(k):
                gxp[:, :, tap:tap + span:stride] += gcols[..., tap]
            x._accumulate(gxp[:, :, left:left + length])

    return Tensor.from_op(out, parents, backward)


def maxpool1d(x: Tensor, width: int = POOL_WIDTH) -> Tensor:
    """Non-overlapping max pooling; the trailing remainder is dropped.

    Gradient goes to the first maximal element of each window.
    """
    n, c, length = x.shape
    if length < width:
        raise ShapeError(f"maxpool1d needs length >= {width}, got {length}")
    out_len = length // width
    windows = x.data[:, :, :out_len * width].reshape(n, c, out_len, width)
    idx = np.argmax(windows, axis=3)
    log_branch(idx)
    out = np.take_along_axis(windows, idx[..., None], axis=3)[..., 0]

    def backward(g):
        gw = np.zeros((n, c, out_len, width), dtype=x.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=3)
        full = np.zeros_like(x.data)
        full[:, :, :out_len * width] = gw.reshape(n, c, out_len * width)
        x._accumulate(full)

    return Tensor.from_op(out, (x,), backward)


def global_maxpool(x: Tensor) -> Tensor:
    """Max over the whole time axis: (N, C, L) -> (N, C)."""
    idx = np.argmax(x.data, axis=2)
    log_branch(idx)
    out = np.take_along_axis(x.data, idx[..., None], axis=2)[..., 0]

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=2)
        x._accumulate(full)

    return Tensor.from_op(out, (x,), backward)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    initialized: bool = False
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def seed(self, mean, var) -> None:
        self.running_mean[...] = mean
        self.running_var[...] = var
        self.initialized = True


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                training: bool) -> Tensor:
    """Per-channel normalization over batch and time.

    In training mode the batch statistics are used and the running averages
    are updated (unbiased variance, as is customary). Eval mode uses the
    running averages and refuses to run before they exist.
    """
    n, c, length = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch norm expects affine params of shape ({c},)")
    eps = state.eps
    if training:
        count = n * length
        if count < 2:
            raise ShapeError("training-mode batch norm needs more than one value per channel")
        mean = x.data.mean(axis=(0, 2), dtype=np.float64)
        centered64 = x.data - mean[None, :, None]
        var = np.mean(centered64 * centered64, axis=(0, 2))
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mean
        state.running_var[...] = (1 - m) * state.running_var + m * var * count / (count - 1)
        state.initialized = True
    else:
        if not state.initialized:
            raise BatchNormStateError("batch norm running stats are uninitialized")
        mean = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = ((x.data - mean[None, :, None]) * inv_std[None, :, None]).astype(x.dtype)
    out = x_hat * gamma.data[None, :, None] + beta.data[None, :, None]

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate(np.sum(g * x_hat, axis=(0, 2), dtype=np.float64))
        if beta.requires_grad:
            beta._accumulate(np.sum(g, axis=(0, 2), dtype=np.float64))
        if not x.requires_grad:
            return
        g_hat = g * gamma.data[None, :, None]
        scale = inv_std[None, :, None]
        if training:
            m_g = g_hat.mean(axis=(0, 2), dtype=np.float64)[None, :, None]
            m_gx = np.mean(g_hat * x_hat, axis=(0, 2), dtype=np.float64)[None, :, None]
            x._accumulate(scale * (g_hat - m_g - x_hat * m_gx))
        else:
            x._accumulate(g_hat * scale)

    return Tensor.from_op(out, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    log_branch(mask)

    def backward(g):
        x._accumulate(g * mask)

    return Tensor.from_op(x.data * mask, (x,), backward)


def _open_unit_bounds(dtype) -> tuple[float, float]:
    info = np.finfo(dtype)
    return float(info.tiny), float(np.nextafter(dtype.type(1), dtype.type(0)))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clipped so the result stays strictly inside (0, 1)."""
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    lo, hi = _open_unit_bounds(z.dtype)
    s = np.clip(s, lo, hi).astype(z.dtype)

    def backward(g):
        x._accumulate(g * s * (1 - s))

    return Tensor.from_op(s, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1 - t * t))

    return Tensor.from_op(t, (x,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit random generator")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)

    def backward(g):
        x._accumulate(g * mask)

    return Tensor.from_op(x.data * mask, (x,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ w.T + b`` with ``w`` (D_out, D_in)."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear expects last dim {w.shape[1]}, got {x.shape[-1]}")
    out = x.data @ w.data.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} outputs")
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data)
        g2 = g.reshape(-1, g.shape[-1])
        if w.requires_grad:
            w._accumulate(g2.T @ x.data.reshape(-1, x.shape[-1]))
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=0, dtype=np.float64))

    return Tensor.from_op(out, parents, backward)


def channel_scale(x: Tensor, scale: Tensor) -> Tensor:
    """Multiply every time sample of channel ``c`` by ``scale[:, c]``."""
    if scale.shape != x.shape[:2]:
        raise ShapeError(f"scale shape {scale.shape} does not match channels {x.shape[:2]}")
    s = scale.data[:, :, None]

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * s)
        if scale.requires_grad:
            scale._accumulate(np.sum(g * x.data, axis=2, dtype=np.float64))

    return Tensor.from_op(x.data * s, (x, scale), backward)


@dataclass
class GRUParams:
    """Gate weights stacked in (update, reset, candidate) order."""

    w_input: Tensor   # (3H, D)
    w_hidden: Tensor  # (3H, H)
    bias: Tensor      # (3H,)
    hidden_dim: int = field(init=False)

    def __post_init__(self):
        self.hidden_dim = self.w_hidden.shape[1]
        h = self.hidden_dim
        if self.w_input.shape[0] != 3 * h or self.w_hidden.shape != (3 * h, h) or self.bias.shape != (3 * h,):
            raise ShapeError("inconsistent GRU parameter shapes")


def gru_cell(x: Tensor, h: Tensor, params: GRUParams) -> Tensor:
    """One GRU update on a batch: ``x`` (N, D), ``h`` (N, H) -> (N, H)."""
    hd = params.hidden_dim
    if h.shape[-1] != hd:
        raise ShapeError(f"hidden state has size {h.shape[-1]}, expected {hd}")
    if x.shape[-1] != params.w_input.shape[1]:
        raise ShapeError(f"GRU input has size {x.shape[-1]}, expected {params.w_input.shape[1]}")
    gx = linear(x, params.w_input, params.bias)
    w_zr = params.w_hidden[: 2 * hd]
    w_c = params.w_hidden[2 * hd:]
    gh = linear(h, w_zr)
    z = sigmoid(gx[:, :hd] + gh[:, :hd])
    r = sigmoid(gx[:, hd:2 * hd] + gh[:, hd:])
    candidate = tanh(gx[:, 2 * hd:] + linear(r * h, w_c))
    return h + z * (candidate - h)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Loss and gradient for a single logit vector."""
    logits = np.asarray(logits)
    k = logits.shape[-1]
    if not 0 <= label < k:
        raise ValueError(f"label {label} out of range for {k} classes")
    logp = log_softmax(logits)
    grad = np.exp(logp)
    grad[label] -= 1.0
    return float(-logp[label]), grad


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of a batch ``logits`` (N, K) against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        logits._accumulate(g * grad / n)

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def scale_by(x: Tensor, factor: float) -> Tensor:
    return x * as_tensor(factor, x.dtype)
