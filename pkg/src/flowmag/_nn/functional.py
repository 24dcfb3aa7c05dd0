"""
Differentiable operations on Tensors.

Exactly the operator set the inference network and its external subnet
need: element-wise arithmetic, ReLU, reductions, reshaping, same-padded
convolution, batch normalization, depth-to-space, dense, embedding lookup,
dropout, sum pooling / nearest upsampling and the N^2-Normalization built
from them.
"""

# Copyright 2025 Flowmag Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from ..errors import DomainError, ShapeError
from ..grid import block_sum, replicate
from .tensor import Array, Tensor

Operand = Union[Tensor, npt.ArrayLike]

_MODULE = "nn-core"


def _lift(value: Operand, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype), dtype=like.dtype)


def _unbroadcast(grad: Array, shape: Tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- element-wise -----------------------------------------------------------


def add(a: Tensor, b: Operand) -> Tensor:
    b = _lift(b, a)

    def backward(g: Array) -> Sequence[Optional[Array]]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Operand) -> Tensor:
    b = _lift(b, a)

    def backward(g: Array) -> Sequence[Optional[Array]]:
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Operand) -> Tensor:
    b = _lift(b, a)

    def backward(g: Array) -> Sequence[Optional[Array]]:
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(a.data * b.data, (a, b), backward, "mul")


def div(a: Tensor, b: Operand) -> Tensor:
    b = _lift(b, a)
    out = a.data / b.data

    def backward(g: Array) -> Sequence[Optional[Array]]:
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return Tensor.from_op(out, (a, b), backward, "div")


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at 0 is 0."""
    mask = x.data > 0

    def backward(g: Array) -> Sequence[Optional[Array]]:
        return (g * mask,)

    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), backward, "relu")


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)

    def backward(g: Array) -> Sequence[Optional[Array]]:
        return (g * sign,)

    return Tensor.from_op(np.abs(x.data), (x,), backward, "abs")


# -- reductions and reshaping -----------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    def backward(g: Array) -> Sequence[Optional[Array]]:
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return Tensor.from_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g: Array) -> Sequence[Optional[Array]]:
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return Tensor.from_op(np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward, "mean")


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    def backward(g: Array) -> Sequence[Optional[Array]]:
        return (g.reshape(x.shape),)

    return Tensor.from_op(x.data.reshape(shape), (x,), backward, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along `axis` (channels by default)."""
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g: Array) -> Sequence[Optional[Array]]:
        return tuple(np.split(g, bounds, axis=axis))

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(_MODULE, f"cannot concatenate shapes {[t.shape for t in tensors]}: {e}")
    return Tensor.from_op(data, tuple(tensors), backward, "concat")


# -- spatial pooling --------------------------------------------------------


def sum_pool2d(x: Tensor, scale: int) -> Tensor:
    """Sum over non-overlapping scale x scale blocks of the last two axes."""
    for axis, size in zip(("height", "width"), x.shape[-2:]):
        if size % scale:
            raise ShapeError(_MODULE, f"{axis} {size} not divisible by {scale}", axis=axis)

    def backward(g: Array) -> Sequence[Optional[Array]]:
        return (replicate(g, scale),)

    return Tensor.from_op(block_sum(x.data, scale), (x,), backward, "sum_pool2d")


def upsample_nearest2d(x: Tensor, scale: int) -> Tensor:
    def backward(g: Array) -> Sequence[Optional[Array]]:
        return (block_sum(g, scale),)

    return Tensor.from_op(replicate(x.data, scale), (x,), backward, "upsample_nearest2d")


def n2_normalize(x: Tensor, scale: int, eps: float) -> Tensor:
    """
    N^2-Normalization: x / (upsample(sum_pool(x)) + eps).

    Parameter-free; gradients flow through the block sums as well.
    """
    sums = upsample_nearest2d(sum_pool2d(x, scale), scale)
    return div(x, add(sums, eps))


# -- layers -----------------------------------------------------------------


def _pad_flat(x: Array, pad: int) -> Array:
    """Zero-pad (B, C, H, W) and lay it out as (C, B * Hp * Wp)."""
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return np.ascontiguousarray(padded.transpose(1, 0, 2, 3)).reshape(x.shape[1], -1)


def _tap_layout(shape: Tuple[int, ...], k: int, pad: int) -> Tuple[int, int, int, List[int]]:
    """Padded height and width, the flat span of valid outputs, and one flat offset per tap."""
    b, _, h, w = shape
    hp, wp = h + 2 * pad, w + 2 * pad
    span = (b - 1) * hp * wp + (h - 1) * wp + w
    return hp, wp, span, [dy * wp + dx for dy in range(k) for dx in range(k)]


def _unflatten(acc: Array, shape: Tuple[int, ...], hp: int, wp: int) -> Array:
    b, _, h, w = shape
    full = np.zeros((acc.shape[0], b * hp * wp), dtype=acc.dtype)
    full[:, : acc.shape[1]] = acc
    return full.reshape(-1, b, hp, wp)[:, :, :h, :w].transpose(1, 0, 2, 3)


def _correlate(x: Array, weight: Array, pad: int) -> Array:
    """
    Same-padded cross-correlation on the flat padded layout.

    Output (i, j) of image b sits at flat offset b*Hp*Wp + i*Wp + j and tap
    (dy, dx) reads the input shifted by dy*Wp + dx. With few input channels
    the shifted inputs are stacked and multiplied once; with few output
    channels every tap is multiplied at once and the results shifted back.
    Columns that fall in the padding are discarded.
    """
    out_ch, in_ch, k, _ = weight.shape
    hp, wp, span, offsets = _tap_layout(x.shape, k, pad)
    flat = _pad_flat(x, pad)
    if in_ch <= out_ch:
        cols = np.concatenate([flat[:, s : s + span] for s in offsets])
        acc = weight.transpose(0, 2, 3, 1).reshape(out_ch, -1) @ cols
    else:
        per_tap = weight.transpose(2, 3, 0, 1).reshape(-1, in_ch) @ flat
        acc = np.zeros((out_ch, span), dtype=per_tap.dtype)
        for t, s in enumerate(offsets):
            acc += per_tap[t * out_ch : (t + 1) * out_ch, s : s + span]
    return _unflatten(acc, x.shape, hp, wp)


def _correlate_weight(x: Array, g: Array, k: int, pad: int) -> Array:
    """Gradient of `_correlate` with respect to its (C_out, C, k, k) weight."""
    b, in_ch, h, w = x.shape
    out_ch = g.shape[1]
    hp, wp, span, offsets = _tap_layout(x.shape, k, pad)
    flat = _pad_flat(x, pad)
    gz = np.zeros((out_ch, b, hp, wp), dtype=np.result_type(g, x))
    gz[:, :, :h, :w] = g.transpose(1, 0, 2, 3)
    gz = gz.reshape(out_ch, -1)[:, :span]
    if in_ch <= out_ch:
        cols = np.concatenate([flat[:, s : s + span] for s in offsets])
        return (gz @ cols.T).reshape(out_ch, k, k, in_ch).transpose(0, 3, 1, 2)
    shifted = np.zeros((len(offsets) * out_ch, flat.shape[1]), dtype=gz.dtype)
    for t, s in enumerate(offsets):
        shifted[t * out_ch : (t + 1) * out_ch, s : s + span] = gz
    return (shifted @ flat.T).reshape(k, k, out_ch, in_ch).transpose(2, 3, 0, 1)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """
    Stride-1 cross-correlation with zero "same" padding.

    x: (B, C, H, W); weight: (C_out, C, k, k) with k odd; bias: (C_out,).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(_MODULE, f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    out_ch, in_ch, k, k2 = weight.shape
    if x.shape[1] != in_ch:
        raise ShapeError(
            _MODULE, f"conv2d input has {x.shape[1]} channels, weight expects {in_ch}", axis="channels"
        )
    if k != k2 or k % 2 == 0:
        raise ShapeError(_MODULE, f"conv2d kernel must be square and odd, got {k}x{k2}")
    pad = (k - 1) // 2

    out = _correlate(x.data, weight.data, pad)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def backward(g: Array) -> Sequence[Optional[Array]]:
        gx = gw = gb = None
        if x.requires_grad:
            gx = _correlate(g, weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3), pad)
        if weight.requires_grad:
            gw = _correlate_weight(x.data, g, k, pad)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor.from_op(out, parents, backward, "conv2d")


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Array,
    running_var: Array,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """
    Per-channel batch normalization over (batch, height, width).

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, as PyTorch does); in eval mode only
    the running buffers are used.
    """
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if training:
        if x.shape[0] < 2:
            raise DomainError(_MODULE, "batch_norm2d in train mode needs a batch of at least 2")
        n = x.data.size // x.shape[1]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        n = 0
        mu = running_mean
        var = running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
    out = (gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)).astype(x.dtype)

    def backward(g: Array) -> Sequence[Optional[Array]]:
        dxhat = g * gamma.data.reshape(shape)
        if training:
            gx = (inv.reshape(shape) / n) * (
                n * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = dxhat * inv.reshape(shape)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return Tensor.from_op(out, (x, gamma, beta), backward, "batch_norm2d")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """
    Depth-to-space: (B, C*r^2, H, W) -> (B, C, rH, rW) with
    out[b, c, r*h + dy, r*w + dx] = in[b, c*r^2 + dy*r + dx, h, w].
    """
    b, ch, h, w = x.shape
    if ch % (r * r):
        raise ShapeError(_MODULE, f"channels {ch} not divisible by r^2 = {r * r}", axis="channels")
    c = ch // (r * r)
    out = x.data.reshape(b, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(b, c, h * r, w * r)

    def backward(g: Array) -> Sequence[Optional[Array]]:
        return (pixel_unshuffle_array(g, r),)

    return Tensor.from_op(np.ascontiguousarray(out), (x,), backward, "pixel_shuffle")


def pixel_unshuffle_array(y: Array, r: int) -> Array:
    """Inverse of pixel_shuffle on raw arrays."""
    b, c, hr, wr = y.shape
    h, w = hr // r, wr // r
    out = y.reshape(b, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(b, c * r * r, h, w)
    return np.ascontiguousarray(out)


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map x @ weight.T + bias with weight (D_out, D_in)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(
            _MODULE, f"dense input {x.shape} does not match weight {weight.shape}", axis="features"
        )
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g: Array) -> Sequence[Optional[Array]]:
        gx = g @ weight.data
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor.from_op(out.astype(x.dtype), parents, backward, "dense")


def embedding(table: Tensor, indices: npt.ArrayLike, feature: str = "embedding") -> Tensor:
    """Row lookup; the backward pass only touches the rows looked up."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise DomainError(_MODULE, f"{feature}: indices must be integers, got {idx.dtype}")
    vocab = table.shape[0]
    if np.any(idx < 0) or np.any(idx >= vocab):
        bad = idx[(idx < 0) | (idx >= vocab)].ravel()[0]
        raise DomainError(_MODULE, f"{feature}: index {int(bad)} outside vocabulary [0, {vocab})")

    def backward(g: Array) -> Sequence[Optional[Array]]:
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return Tensor.from_op(table.data[idx], (table,), backward, "embedding")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Zero entries with probability `rate` and rescale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise DomainError(_MODULE, f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    mask = ((rng.random(x.shape) >= rate) / (1.0 - rate)).astype(x.dtype)

    def backward(g: Array) -> Sequence[Optional[Array]]:
        return (g * mask,)

    return Tensor.from_op(x.data * mask, (x,), backward, "dropout")


def mse_loss(pred: Tensor, target: Operand) -> Tensor:
    """Mean over batch and pixels of the squared difference."""
    target = _lift(target, pred)
    if pred.shape != target.shape:
        raise ShapeError("train", f"prediction {pred.shape} and target {target.shape} differ")
    diff = sub(pred, target)
    return mean(mul(diff, diff))
