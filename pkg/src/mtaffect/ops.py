"""Layer kernels: convolution, pooling, affine, GRU, dropout.

Each kernel is a single tape node with a hand-written backward pass.
Layouts are NHWC for images and time-major ``[T, N, D]`` for sequences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _sigmoid, default_dtype, parameter


def _same_padding(extent: int, k: int, stride: int) -> tuple[int, int]:
    out = math.ceil(extent / stride)
    total = max((out - 1) * stride + k - extent, 0)
    return total // 2, total - total // 2


def conv_output_extent(extent: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return math.ceil(extent / stride)
    if padding == "valid":
        return (extent - k) // stride + 1
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """Cross-correlate ``x[N,H,W,C]`` with ``kernel[kh,kw,C,F]``."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects x[N,H,W,C] and kernel[kh,kw,C,F], got {x.shape} and {kernel.shape}")
    n, h, w, c = x.shape
    kh, kw, kc, f = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d channel mismatch: input C={c}, kernel C={kc}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding == "same":
        (pt, pb), (pl, pr) = _same_padding(h, kh, stride), _same_padding(w, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    hp, wp = h + pt + pb, w + pl + pr
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")

    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x.data
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    kmat = kernel.data.reshape(kh * kw * c, f)
    out = cols @ kmat
    if bias is not None:
        if bias.shape != (f,):
            raise ShapeError(f"conv2d bias must have shape ({f},), got {bias.shape}")
        out = out + bias.data
    out = out.reshape(n, ho, wo, f)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        g2 = g.reshape(n * ho * wo, f)
        if kernel.requires_grad:
            kernel._accumulate((cols.T @ g2).reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad and stride == 1:
            # full correlation of the output gradient with the flipped kernel
            gp = np.pad(g, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
            gcols = sliding_window_view(gp, (kh, kw), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
            kflip = kernel.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * f, c)
            dxp = (gcols.reshape(n * hp * wp, kh * kw * f) @ kflip).reshape(n, hp, wp, c)
            x._accumulate(dxp[:, pt:pt + h, pl:pl + w, :])
        elif x.requires_grad:
            dcols = (g2 @ kmat.T).reshape(n, ho, wo, kh, kw, c)
            dxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
            x._accumulate(dxp[:, pt:pt + h, pl:pl + w, :])
    return Tensor._make(out, parents, bw)


def maxpool2d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    """Max over ``window x window`` patches; ties send gradient to the first in scan order."""
    stride = stride or window
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects x[N,H,W,C], got {x.shape}")
    n, h, w, c = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} larger than input {h}x{w}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    windows = sliding_window_view(x.data, (window, window), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    flat = windows.reshape(n, ho, wo, c, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        dx = np.zeros_like(x.data)
        for k in range(window * window):
            i, j = divmod(k, window)
            dx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += g * (arg == k)
        x._accumulate(dx)
    return Tensor._make(np.ascontiguousarray(out), (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Average ``[N,H,W,C]`` over space to ``[N,C]``."""
    return x.mean(axis=(1, 2))


def dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weights.ndim != 2:
        raise ShapeError(f"dense expects x[N,D] and weights[D,U], got {x.shape} and {weights.shape}")
    if x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense inner dimensions differ: input D={x.shape[1]}, weights D={weights.shape[0]}")
    out = x.data @ weights.data
    if bias is not None:
        if bias.shape != (weights.shape[1],):
            raise ShapeError(f"dense bias must have shape ({weights.shape[1]},), got {bias.shape}")
        out = out + bias.data
    parents = (x, weights) if bias is None else (x, weights, bias)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g @ weights.data.T)
        if weights.requires_grad:
            weights._accumulate(x.data.T @ g)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
    return Tensor._make(out, parents, bw)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability ``p``, scale survivors by ``1/(1-p)``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return Tensor._make(x.data * mask, (x,), lambda g: x._accumulate(g * mask))


@dataclass
class GRUParams:
    """Gate weights packed as ``[update | reset | candidate]`` along the last axis."""

    input_weights: Tensor      # [D, 3U]
    recurrent_weights: Tensor  # [U, 3U]
    bias: Tensor               # [3U]

    @property
    def units(self) -> int:
        return self.recurrent_weights.shape[0]

    @property
    def input_dim(self) -> int:
        return self.input_weights.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.input_weights, self.recurrent_weights, self.bias]


def gru_layer(x: Tensor, state0: Tensor | None, params: GRUParams) -> Tensor:
    """Run one GRU layer over ``x[T,N,D]`` and return every hidden state ``[T,N,U]``.

    z = sigmoid(x Wz + h Uz + bz)
    r = sigmoid(x Wr + h Ur + br)
    c = tanh(x Wc + (r * h) Uc + bc)
    h' = (1 - z) * h + z * c
    """
    if x.ndim != 3:
        raise ShapeError(f"gru_layer expects x[T,N,D], got {x.shape}")
    steps, n, d = x.shape
    u = params.units
    if steps < 1:
        raise ShapeError("gru_layer needs at least one time step")
    if d != params.input_dim:
        raise ShapeError(f"gru_layer input width {d} does not match parameters ({params.input_dim})")
    if state0 is None:
        state0 = Tensor(np.zeros((n, u), dtype=x.dtype))
    if state0.shape != (n, u):
        raise ShapeError(f"gru_layer initial state must be ({n}, {u}), got {state0.shape}")

    wx, uh, b = params.input_weights.data, params.recurrent_weights.data, params.bias.data
    xproj = (x.data.reshape(steps * n, d) @ wx + b).reshape(steps, n, 3 * u)
    hs = np.empty((steps + 1, n, u), dtype=x.dtype)
    zs = np.empty((steps, n, u), dtype=x.dtype)
    rs = np.empty_like(zs)
    cs = np.empty_like(zs)
    hs[0] = state0.data
    for t in range(steps):
        h = hs[t]
        rec = h @ uh[:, :2 * u]
        z = _sigmoid(xproj[t, :, :u] + rec[:, :u])
        r = _sigmoid(xproj[t, :, u:2 * u] + rec[:, u:])
        c = np.tanh(xproj[t, :, 2 * u:] + (r * h) @ uh[:, 2 * u:])
        zs[t], rs[t], cs[t] = z, r, c
        hs[t + 1] = (1.0 - z) * h + z * c

    def bw(g):
        dxproj = np.empty_like(xproj)
        duh = np.zeros_like(uh)
        dh_next = np.zeros((n, u), dtype=x.dtype)
        for t in reversed(range(steps)):
            h, z, r, c = hs[t], zs[t], rs[t], cs[t]
            dh = g[t] + dh_next
            da_c = dh * z * (1.0 - c * c)
            da_z = dh * (c - h) * z * (1.0 - z)
            drh = da_c @ uh[:, 2 * u:].T
            da_r = drh * h * r * (1.0 - r)
            da_zr = np.concatenate([da_z, da_r], axis=1)
            duh[:, :2 * u] += h.T @ da_zr
            duh[:, 2 * u:] += (r * h).T @ da_c
            dh_next = dh * (1.0 - z) + drh * r + da_zr @ uh[:, :2 * u].T
            dxproj[t, :, :u], dxproj[t, :, u:2 * u], dxproj[t, :, 2 * u:] = da_z, da_r, da_c
        flat = dxproj.reshape(steps * n, 3 * u)
        if params.input_weights.requires_grad:
            params.input_weights._accumulate(x.data.reshape(steps * n, d).T @ flat)
        if params.bias.requires_grad:
            params.bias._accumulate(flat.sum(axis=0))
        if params.recurrent_weights.requires_grad:
            params.recurrent_weights._accumulate(duh)
        if x.requires_grad:
            x._accumulate((flat @ wx.T).reshape(steps, n, d))
        if state0.requires_grad:
            state0._accumulate(dh_next)

    return Tensor._make(np.ascontiguousarray(hs[1:]), (x, state0, *params.tensors()), bw)


# -- initialisation ------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int,
                   name: str | None = None) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return parameter(rng.uniform(-limit, limit, size=shape).astype(default_dtype()), name=name)


def zeros_param(shape: tuple[int, ...], name: str | None = None) -> Tensor:
    return parameter(np.zeros(shape, dtype=default_dtype()), name=name)


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, name: str | None = None) -> Tensor:
    limit = math.sqrt(6.0 / fan_in)
    return parameter(rng.uniform(-limit, limit, size=shape).astype(default_dtype()), name=name)


def init_conv(rng: np.random.Generator, k: int, c_in: int, c_out: int, name: str) -> tuple[Tensor, Tensor]:
    """He-uniform kernel (every conv is followed by a ReLU), zero bias."""
    kernel = he_uniform(rng, (k, k, c_in, c_out), k * k * c_in, name=f"{name}/kernel")
    return kernel, zeros_param((c_out,), name=f"{name}/bias")


def init_dense(rng: np.random.Generator, d_in: int, d_out: int, name: str,
               relu: bool = False) -> tuple[Tensor, Tensor]:
    if relu:
        w = he_uniform(rng, (d_in, d_out), d_in, name=f"{name}/weights")
    else:
        w = glorot_uniform(rng, (d_in, d_out), d_in, d_out, name=f"{name}/weights")
    return w, zeros_param((d_out,), name=f"{name}/bias")


def init_gru(rng: np.random.Generator, d_in: int, units: int, name: str) -> GRUParams:
    wx = glorot_uniform(rng, (d_in, 3 * units), d_in, units, name=f"{name}/input_weights")
    scale = 1.0 / math.sqrt(units)
    wh = parameter(rng.uniform(-scale, scale, size=(units, 3 * units)).astype(default_dtype()),
                   name=f"{name}/recurrent_weights")
    return GRUParams(wx, wh, zeros_param((3 * units,), name=f"{name}/bias"))
