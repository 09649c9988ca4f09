"""Array operators used by the detector, each with an explicit adjoint."""

from __future__ import annotations

import numpy as np

from .autograd import DimensionError, Tensor, _softmax, matmul

__all__ = [
    "conv2d",
    "conv_output_size",
    "pool_channel",
    "pool_spatial",
    "linear",
    "attention",
    "layer_norm",
    "resize_bilinear",
    "bilinear_matrix",
    "attention_weights",
]


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2-D cross-correlation over a ``[b, c_in, h, w]`` batch.

    ``weight`` is ``[c_out, c_in, kh, kw]``. Implemented as im2col followed
    by a single matmul; the adjoint scatters the column gradient back.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape}, {weight.shape}")
    b, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c_in != c:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, kernel expects {c_in}")
    if dilation < 1 or stride < 1 or padding < 0:
        raise ValueError("conv2d requires dilation >= 1, stride >= 1, padding >= 0")
    span_h = dilation * (kh - 1) + 1
    span_w = dilation * (kw - 1) + 1
    if h + 2 * padding < span_h or w + 2 * padding < span_w:
        raise DimensionError("conv2d kernel extent exceeds padded input")
    oh = conv_output_size(h, kh, stride, padding, dilation)
    ow = conv_output_size(w, kw, stride, padding, dilation)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = np.empty((b, c, kh, kw, oh, ow))
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            cols[:, :, i, j] = xp[:, :, hi : hi + stride * (oh - 1) + 1 : stride, wj : wj + stride * (ow - 1) + 1 : stride]
    cols = cols.reshape(b, c * kh * kw, oh * ow)
    wmat = weight.data.reshape(c_out, -1)
    out = (wmat @ cols).reshape(b, c_out, oh, ow)
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        if bias.shape != (c_out,):
            raise DimensionError(f"conv2d bias must be ({c_out},), got {bias.shape}")
        out = out + bias.data[None, :, None, None]
        parents = (x, weight, bias)

    def backward(g):
        g2 = g.reshape(b, c_out, oh * ow)
        gw = np.einsum("bol,bkl->ok", g2, cols).reshape(weight.shape)
        gcols = (wmat.T @ g2).reshape(b, c, kh, kw, oh, ow)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            hi = i * dilation
            for j in range(kw):
                wj = j * dilation
                gxp[:, :, hi : hi + stride * (oh - 1) + 1 : stride, wj : wj + stride * (ow - 1) + 1 : stride] += gcols[:, :, i, j]
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._make(out, parents, backward, "conv2d")


def pool_channel(x: Tensor, mode: str = "avg") -> Tensor:
    """Mean or max over the channel axis of ``[b, c, h, w]`` -> ``[b, 1, h, w]``."""
    if x.ndim != 4:
        raise DimensionError(f"pool_channel expects [b, c, h, w], got {x.shape}")
    if mode == "avg":
        return x.mean(axis=1, keepdims=True)
    if mode == "max":
        return x.max(axis=1, keepdims=True)
    raise ValueError(f"unknown pooling mode {mode!r}")


def pool_spatial(x: Tensor, mode: str = "avg") -> Tensor:
    """Mean or max over the spatial axes of ``[b, c, h, w]`` -> ``[b, c, 1, 1]``."""
    if x.ndim != 4:
        raise DimensionError(f"pool_spatial expects [b, c, h, w], got {x.shape}")
    if mode == "avg":
        return x.mean(axis=(2, 3), keepdims=True)
    if mode == "max":
        return x.max(axis=(2, 3), keepdims=True)
    raise ValueError(f"unknown pooling mode {mode!r}")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map on the trailing axis; ``weight`` is ``[d_out, d_in]``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input trailing dim {x.shape[-1]} vs weight {weight.shape}")
    if x.ndim == 1:
        out = matmul(x.reshape(1, -1), weight.T).reshape(weight.shape[0])
    else:
        out = matmul(x, weight.T)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"linear bias must be ({weight.shape[0]},), got {bias.shape}")
        out = out + bias
    return out


def attention(queries: Tensor, keys: Tensor, values: Tensor, heads: int = 1) -> Tensor:
    """Multi-head scaled dot-product attention without projections.

    Shapes are ``[..., n, d]``, ``[..., m, d]``, ``[..., m, d]``; the feature
    axis is split into ``heads`` equal slices and re-concatenated.
    """
    q, k, v = queries.data, keys.data, values.data
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d:
        raise DimensionError("attention: query, key and value widths differ")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError("attention: key and value lengths differ")
    if heads < 1 or d % heads:
        raise DimensionError(f"attention: width {d} not divisible by {heads} heads")
    dh = d // heads
    n, m = q.shape[-2], k.shape[-2]

    def split(a, length):
        return np.swapaxes(a.reshape(a.shape[:-2] + (length, heads, dh)), -3, -2)

    qh, kh, vh = split(q, n), split(k, m), split(v, m)
    scale = 1.0 / np.sqrt(dh)
    probs = _softmax((qh @ np.swapaxes(kh, -1, -2)) * scale, axis=-1)
    ctx = probs @ vh
    out = np.swapaxes(ctx, -3, -2).reshape(ctx.shape[:-3] + (n, d))

    def backward(g):
        gh = split(g, n)
        gv = np.swapaxes(probs, -1, -2) @ gh
        gp = gh @ np.swapaxes(vh, -1, -2)
        gs = probs * (gp - (gp * probs).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ kh
        gk = np.swapaxes(gs, -1, -2) @ qh

        def merge(a, length, shape):
            full = np.swapaxes(a, -3, -2).reshape(a.shape[:-3] + (length, d))
            extra = full.ndim - len(shape)
            if extra:
                full = full.sum(axis=tuple(range(extra)))
            return full.reshape(shape)

        return merge(gq, n, queries.shape), merge(gk, m, keys.shape), merge(gv, m, values.shape)

    return Tensor._make(out, (queries, keys, values), backward, "attention")


def attention_weights(queries: np.ndarray, keys: np.ndarray, heads: int = 1) -> np.ndarray:
    """Softmax weights ``[..., heads, n, m]`` as used by :func:`attention`."""
    d = queries.shape[-1]
    dh = d // heads
    qh = np.swapaxes(queries.reshape(queries.shape[:-1] + (heads, dh)), -3, -2)
    kh = np.swapaxes(keys.reshape(keys.shape[:-1] + (heads, dh)), -3, -2)
    return _softmax((qh @ np.swapaxes(kh, -1, -2)) / np.sqrt(dh), axis=-1)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._make(out, (x, gamma, beta), backward, "layer_norm")


def bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """Row-stochastic ``[dst, src]`` interpolation matrix (half-pixel centres)."""
    mat = np.zeros((dst, src))
    ratio = src / dst
    for i in range(dst):
        pos = max((i + 0.5) * ratio - 0.5, 0.0)
        lo = min(int(np.floor(pos)), src - 1)
        hi = min(lo + 1, src - 1)
        frac = pos - lo
        mat[i, lo] += 1.0 - frac
        mat[i, hi] += frac
    return mat


def resize_bilinear(x: Tensor, height: int, width: int) -> Tensor:
    """Bilinear resize of the two trailing axes."""
    h, w = x.shape[-2:]
    if (h, w) == (height, width):
        return x
    ry = Tensor(bilinear_matrix(h, height))
    rx = Tensor(bilinear_matrix(w, width).T)
    return matmul(matmul(ry, x), rx)
