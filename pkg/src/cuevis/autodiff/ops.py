"""Differentiable operations on :class:`~cuevis.autodiff.tensor.Tensor`.

Only the ops the field MLPs, feature planes, compositing and the pose
estimator need. Image-like tensors use NCHW layout.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

from cuevis.autodiff.tensor import Tensor, make_node


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _scatter_rows(index: np.ndarray, weights, g: np.ndarray, n_out: int) -> np.ndarray:
    """``out[index[n, k]] += weights[n, k] * g[n]`` for an (N, K) index.

    Done as a sparse (n_out, N) matrix times g; much faster than
    ``np.add.at`` and with a fixed summation order.
    """
    n, k = index.shape
    data = np.ones(n * k, dtype=g.dtype) if weights is None else np.asarray(weights, dtype=g.dtype).reshape(-1)
    mat = sp.csc_matrix((data, index.reshape(-1), np.arange(0, n * k + 1, k)), shape=(n_out, n))
    return np.asarray(mat @ g.reshape(n, -1)).reshape((n_out,) + g.shape[1:])


def _is_basic_index(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis for k in keys)


def _check_broadcast(a: Tensor, b: Tensor, name: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


# -- activations -------------------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, np.zeros((), dtype=x.dtype))
    return make_node(out, (x,), lambda g: (g * (out > 0),), "relu")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return make_node(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    out = np.logaddexp(np.zeros((), dtype=x.dtype), x.data)
    return make_node(out, (x,), lambda g: (g * _sigmoid(x.data),), "softplus")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return make_node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def arccos(x, eps: float = 1e-7) -> Tensor:
    """arccos with the input clipped to [-1, 1].

    The derivative is evaluated with ``1 - x**2`` floored at ``eps`` so the
    gradient stays finite at the clip boundary.
    """
    x = as_tensor(x)
    clipped = np.clip(x.data, -1.0, 1.0)
    out = np.arccos(clipped)

    def bw(g):
        return (-g / np.sqrt(np.maximum(1.0 - clipped * clipped, eps)),)

    return make_node(out, (x,), bw, "arccos")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# -- reductions and shape ops -----------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(np.asarray(out, dtype=x.dtype), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), np.asarray(1.0 / count, dtype=x.dtype))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return make_node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    dtype = np.result_type(*[t.dtype for t in tensors])
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise ValueError(f"concatenate: incompatible shapes {[t.shape for t in tensors]}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    out = np.concatenate([t.data.astype(dtype, copy=False) for t in tensors], axis=axis)
    return make_node(out, tuple(tensors), bw, "concatenate")


def getitem(x, key) -> Tensor:
    x = as_tensor(x)

    basic = _is_basic_index(key)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return make_node(np.array(x.data[key], copy=True), (x,), bw, "getitem")


def gather(x, index, axis: int = 0) -> Tensor:
    """``np.take(x, index, axis)``; repeated indices accumulate gradients."""
    x = as_tensor(x)
    index = np.asarray(index)
    if index.size and (index.min() < -x.shape[axis] or index.max() >= x.shape[axis]):
        raise IndexError(f"gather: index out of range for axis {axis} of shape {x.shape}")
    axis = axis % x.ndim

    def bw(g):
        flat_idx = index.reshape(-1, 1) % x.shape[axis]
        gm = np.moveaxis(g, axis, 0).reshape((flat_idx.size,) + np.moveaxis(x.data, axis, 0).shape[1:])
        full = _scatter_rows(flat_idx, None, gm, x.shape[axis])
        return (np.ascontiguousarray(np.moveaxis(full, 0, axis)),)

    return make_node(np.take(x.data, index, axis=axis), (x,), bw, "gather")


def cumsum(x, axis: int = -1, exclusive: bool = False) -> Tensor:
    x = as_tensor(x)
    axis = axis % x.ndim
    if exclusive:
        out = np.zeros_like(x.data)
        lead = [slice(None)] * x.ndim
        tail = [slice(None)] * x.ndim
        lead[axis] = slice(1, None)
        tail[axis] = slice(None, -1)
        out[tuple(lead)] = np.cumsum(x.data[tuple(tail)], axis=axis)
    else:
        out = np.cumsum(x.data, axis=axis)

    def bw(g):
        if not exclusive:
            return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)
        rev = np.zeros_like(g)
        rev[tuple(tail)] = np.flip(np.cumsum(np.flip(g[tuple(lead)], axis), axis=axis), axis)
        return (rev,)

    return make_node(out, (x,), bw, "cumsum")


def norm(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm; the subgradient at the origin is taken as zero."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1)
        return (np.where(n > 0, gk * x.data / safe, 0).astype(x.dtype),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return make_node(out, (x,), bw, "norm")


def normalize_l2(x, axis: int = -1, fallback=None, eps: float = 0.0) -> Tensor:
    """Scale vectors along ``axis`` to unit length.

    Vectors whose norm is ``<= eps`` are replaced by ``fallback`` (a constant
    with zero gradient); without a fallback they raise.
    """
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    degenerate = n <= eps
    if degenerate.any() and fallback is None:
        raise ValueError("normalize_l2: zero-norm vector and no fallback given")
    safe = np.where(degenerate, 1, n)
    unit = x.data / safe
    out = unit
    if degenerate.any():
        fb = np.broadcast_to(np.asarray(fallback, dtype=x.dtype), x.shape)
        out = np.where(degenerate, fb, unit)

    def bw(g):
        proj = (g * unit).sum(axis=axis, keepdims=True)
        return (np.where(degenerate, 0, (g - unit * proj) / safe).astype(x.dtype),)

    return make_node(out.astype(x.dtype), (x,), bw, "normalize_l2")


# -- spatial ops -------------------------------------------------------------

def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation with zero padding.

    x: (B, C, H, W); weight: (O, C, kh, kw); bias: (O,).
    """
    x = as_tensor(x)
    weight = as_tensor(weight, x)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    B, C, H, W = x.shape
    O, _, kh, kw = weight.shape
    s, p = stride, padding
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    if Ho <= 0 or Wo <= 0:
        raise ValueError(f"conv2d: kernel {weight.shape[2:]} larger than padded input {x.shape[2:]}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    # (B, C, Ho, Wo, kh, kw) -> rows ordered (b, ho, wo), cols ordered (c, ki, kj)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : s * (Ho - 1) + 1 : s, : s * (Wo - 1) + 1 : s]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(O, C * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        bias = as_tensor(bias, x)
        out += bias.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            # accumulate channel-major, so every tap adds one contiguous (B, Ho, Wo) block
            gT = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(O, -1)
            dcols = (wmat.T @ gT).reshape(C, kh, kw, B, Ho, Wo)
            gxp = np.zeros((C, B) + xp.shape[2:], dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s] += dcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gxp[:, :, p : p + H, p : p + W] if p else gxp)
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_node(np.ascontiguousarray(out), inputs, bw, "conv2d")


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    """Half-pixel-centre linear interpolation from n to 2n samples."""
    out = np.zeros((2 * n, n), dtype=dtype)
    src = (np.arange(2 * n) + 0.5) / 2 - 0.5
    src = np.clip(src, 0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    rows = np.arange(2 * n)
    np.add.at(out, (rows, i0), 1 - frac)
    np.add.at(out, (rows, i1), frac)
    return out


def bilinear_upsample_2x(x) -> Tensor:
    """Bilinear ×2 upsampling of the last two axes (half-pixel centres)."""
    x = as_tensor(x)
    H, W = x.shape[-2:]
    ah = _upsample_matrix(H, x.dtype)
    aw = _upsample_matrix(W, x.dtype)
    out = ah @ x.data @ aw.T

    def bw(g):
        return (ah.T @ g @ aw,)

    return make_node(out, (x,), bw, "bilinear_upsample_2x")


def bilinear_sample(plane, uv) -> Tensor:
    """Sample an (R1, R2, F) feature grid at normalised coordinates.

    ``uv`` is (N, 2) in [0, 1]; 0 and 1 land exactly on the first and last
    grid nodes. Coordinates outside are clamped. Returns (N, F).
    """
    plane = as_tensor(plane)
    uv = as_tensor(uv, plane)
    R1, R2, F = plane.shape
    if uv.ndim != 2 or uv.shape[1] != 2:
        raise ValueError(f"bilinear_sample: uv must be (N, 2), got {uv.shape}")
    gu = np.clip(uv.data[:, 0], 0, 1) * (R1 - 1)
    gv = np.clip(uv.data[:, 1], 0, 1) * (R2 - 1)
    # at the far edge i0 = R - 1 with zero fraction, so u = 1 hits the last node exactly
    i0 = np.minimum(np.floor(gu).astype(np.intp), R1 - 1)
    j0 = np.minimum(np.floor(gv).astype(np.intp), R2 - 1)
    i1 = np.minimum(i0 + 1, R1 - 1)
    j1 = np.minimum(j0 + 1, R2 - 1)
    fu = (gu - i0).astype(plane.dtype)[:, None]
    fv = (gv - j0).astype(plane.dtype)[:, None]
    flat = plane.data.reshape(R1 * R2, F)
    idx00, idx10, idx01, idx11 = i0 * R2 + j0, i1 * R2 + j0, i0 * R2 + j1, i1 * R2 + j1
    p00, p10, p01, p11 = flat[idx00], flat[idx10], flat[idx01], flat[idx11]
    w00, w10, w01, w11 = (1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv
    # nested lerps: exact on constant planes and at grid nodes
    a = p00 + fu * (p10 - p00)
    b = p01 + fu * (p11 - p01)
    out = a + fv * (b - a)
    inside_u = ((uv.data[:, 0] >= 0) & (uv.data[:, 0] <= 1))[:, None]
    inside_v = ((uv.data[:, 1] >= 0) & (uv.data[:, 1] <= 1))[:, None]

    def bw(g):
        gp = None
        if plane.requires_grad:
            idx = np.stack([idx00, idx10, idx01, idx11], axis=1)
            wts = np.concatenate([w00, w10, w01, w11], axis=1)
            gp = _scatter_rows(idx, wts, g, R1 * R2).reshape(plane.shape)
        guv = None
        if uv.requires_grad:
            du = ((1 - fv) * (p10 - p00) + fv * (p11 - p01)) * (R1 - 1)
            dv = ((1 - fu) * (p01 - p00) + fu * (p11 - p10)) * (R2 - 1)
            guv = np.stack(
                [(g * du * inside_u).sum(axis=1), (g * dv * inside_v).sum(axis=1)], axis=1
            ).astype(uv.dtype)
        return gp, guv

    return make_node(out, (plane, uv), bw, "bilinear_sample")
