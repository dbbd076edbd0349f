"""Differentiable operations over :class:`~sacseg.tensor.Tensor`.

Convolution weights use the (out, in, K, K) layout. ``im2col`` stacks each
K x K neighbourhood along the channel axis in (c, i, j) lexicographic order:
output channel ``c * K * K + i * K + j`` at location (p, q) holds
``x[c, p + i - K // 2, q + j - K // 2]`` (zero outside the image).
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .tensor import ShapeError, Tensor, as_tensor, make_result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def square(x: Tensor) -> Tensor:
    return make_result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sigmoid(x: Tensor) -> Tensor:
    # clip so saturated values stay strictly inside (0, 1)
    fi = np.finfo(x.data.dtype)
    out = np.clip(expit(x.data), fi.tiny, 1.0 - fi.epsneg)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    return make_result(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        soft = np.exp(out)
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward, "log_softmax")


_POINTWISE = {
    "add": add,
    "mul": mul,
    "sigmoid": sigmoid,
    "relu_like_activation": leaky_relu,
    "log_softmax_over_channels": log_softmax,
}


def pointwise(kind: str, *operands, **kwargs) -> Tensor:
    """Dispatch by name; mirrors the op-kind vocabulary of the build contract."""
    try:
        fn = _POINTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown pointwise op {kind!r}; expected one of {sorted(_POINTWISE)}") from None
    return fn(*operands, **kwargs)


# -- shape and reduction ----------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def amax(x: Tensor, axis, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; ties share the gradient equally."""
    out_k = x.data.max(axis=axis, keepdims=True)
    mask = x.data == out_k
    share = mask / mask.sum(axis=axis, keepdims=True)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * share,)

    return make_result(out, (x,), backward, "amax")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat(xs, axis: int = 1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis)
                     for k in range(len(xs)))

    return make_result(out, tuple(xs), backward, "concat")


def tile_channels(x: Tensor, reps: int) -> Tensor:
    """Repeat the whole channel block ``reps`` times: (N, C, H, W) -> (N, reps*C, H, W)."""
    n, c, h, w = x.shape
    out = np.tile(x.data, (1, reps, 1, 1))

    def backward(g):
        return (g.reshape(n, reps, c, h, w).sum(axis=1),)

    return make_result(out, (x,), backward, "tile_channels")


def pad_zeros(x: Tensor, pad: int) -> Tensor:
    if pad == 0:
        return x
    out = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return make_result(out, (x,), lambda g: (g[:, :, pad:-pad, pad:-pad],), "pad")


# -- convolution ------------------------------------------------------------

def _check_kernel(k: int) -> None:
    if k <= 0 or k % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {k}")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _pad_array(a: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _conv_setup(x: Tensor, weight: Tensor, bias, stride: int, padding: int):
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"expected 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"input has {c} channels but weight expects {ci}")
    if kh != kw:
        raise ShapeError(f"square kernels only, got {kh}x{kw}")
    _check_kernel(kh)
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} does not match {o} output channels")
    ho, wo = conv_output_size(h, kh, stride, padding), conv_output_size(w, kh, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"padding {padding}/stride {stride} give empty output for {h}x{w} input")
    return n, c, h, w, o, kh, ho, wo


def conv2d_direct(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                  stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation summed tap by tap over the K x K kernel offsets.

    Each tap (i, j) contributes ``W[:, :, i, j] @ x_shifted``, so no unfolded
    buffer is materialised. Out-of-range reads are zero. This is the
    reference implementation; :func:`conv2d` is the faster GEMM form.
    """
    n, c, h, w, o, k, ho, wo = _conv_setup(x, weight, bias, stride, padding)
    xp = _pad_array(x.data, padding)
    wd = weight.data
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1

    def tap(i, j):
        return np.ascontiguousarray(xp[:, :, i:i + hspan:stride, j:j + wspan:stride]).reshape(n, c, ho * wo)

    out = np.zeros((n, o, ho * wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            out += np.matmul(wd[:, :, i, j], tap(i, j))
    out = out.reshape(n, o, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(n, o, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    contrib = np.matmul(wd[:, :, i, j].T, g2).reshape(n, c, ho, wo)
                    gxp[:, :, i:i + hspan:stride, j:j + wspan:stride] += contrib
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if weight.requires_grad:
            gw = np.empty_like(wd)
            for i in range(k):
                for j in range(k):
                    gw[:, :, i, j] = np.einsum("nop,ncp->oc", g2, tap(i, j), optimize=True)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result(out, parents, backward, "conv2d")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Convolution as one matrix product over gathered K x K patches."""
    n, c, h, w, o, k, ho, wo = _conv_setup(x, weight, bias, stride, padding)
    xp = _pad_array(x.data, padding)
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    ckk = c * k * k
    if k == 1 and stride == 1:
        cols = xp.reshape(n, c, ho * wo)
    else:
        cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = xp[:, :, i:i + hspan:stride, j:j + wspan:stride]
        cols = cols.reshape(n, ckk, ho * wo)
    w2 = weight.data.reshape(o, ckk)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data.reshape(1, o, 1)
    out = out.reshape(n, o, ho, wo)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(n, o, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(n, c, k, k, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + hspan:stride, j:j + wspan:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result(out, parents, backward, "conv2d")


def im2col(x: Tensor, k: int, padding: int | None = None) -> Tensor:
    """Unfold K x K neighbourhoods into channels: (N, C, H, W) -> (N, C*K*K, H, W)."""
    _check_kernel(k)
    if padding is None:
        padding = k // 2
    if padding != k // 2:
        raise ValueError(f"im2col keeps the spatial extent only with padding={k // 2}, got {padding}")
    n, c, h, w = x.shape
    xp = _pad_array(x.data, padding)
    cols = np.empty((n, c, k, k, h, w), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]

    def backward(g):
        g6 = g.reshape(n, c, k, k, h, w)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + h, j:j + w] += g6[:, :, i, j]
        return (gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp,)

    return make_result(cols.reshape(n, c * k * k, h, w), (x,), backward, "im2col")


def col_index(c: int, i: int, j: int, k: int) -> int:
    """Channel of the unfolded tensor holding input channel ``c`` at kernel tap (i, j)."""
    return c * k * k + i * k + j


def im2col_center(cols: np.ndarray, channels: int, k: int) -> np.ndarray:
    """Recover the un-shifted input from an unfolded array (inverse of the centre tap)."""
    idx = [col_index(c, k // 2, k // 2, k) for c in range(channels)]
    return cols[:, idx]


def conv2d_im2col(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padding stride-1 convolution as unfold + 1x1 convolution."""
    o, i, k, _ = weight.shape
    cols = im2col(x, k)
    return conv2d_direct(cols, reshape(weight, (o, i * k * k, 1, 1)), bias)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 2, padding: int = 1) -> Tensor:
    """Transposed convolution with weight layout (in, out, K, K)."""
    n, c, h, w = x.shape
    ci, o, k, k2 = weight.shape
    if ci != c or k != k2:
        raise ShapeError(f"weight {weight.shape} incompatible with input {x.shape}")
    hf, wf = (h - 1) * stride + k, (w - 1) * stride + k
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho <= 0 or wo <= 0:
        raise ShapeError("transposed convolution output would be empty")
    wd = weight.data
    x2 = x.data.reshape(n, c, h * w)
    hspan, wspan = stride * (h - 1) + 1, stride * (w - 1) + 1

    full = np.zeros((n, o, hf, wf), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            full[:, :, i:i + hspan:stride, j:j + wspan:stride] += \
                np.matmul(wd[:, :, i, j].T, x2).reshape(n, o, h, w)
    out = full[:, :, padding:padding + ho, padding:padding + wo]
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gfull = np.zeros((n, o, hf, wf), dtype=g.dtype)
        gfull[:, :, padding:padding + ho, padding:padding + wo] = g

        def tap(i, j):
            return np.ascontiguousarray(
                gfull[:, :, i:i + hspan:stride, j:j + wspan:stride]).reshape(n, o, h * w)

        gx = gw = gb = None
        if x.requires_grad:
            acc = np.zeros((n, c, h * w), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    acc += np.matmul(wd[:, :, i, j], tap(i, j))
            gx = acc.reshape(n, c, h, w)
        if weight.requires_grad:
            gw = np.empty_like(wd)
            for i in range(k):
                for j in range(k):
                    gw[:, :, i, j] = np.einsum("ncp,nop->co", x2, tap(i, j), optimize=True)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result(out, parents, backward, "conv_transpose2d")


# -- pooling ----------------------------------------------------------------

def max_pool(x: Tensor, k: int, padding: int | None = None) -> Tensor:
    """Stride-1 max pooling; padded cells never win (they read as -inf)."""
    _check_kernel(k)
    if padding is None:
        padding = k // 2
    n, c, h, w = x.shape
    ho, wo = h + 2 * padding - k + 1, w + 2 * padding - k + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"max pool {k}x{k} with padding {padding} does not fit {h}x{w}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf)
    windows = np.stack([xp[:, :, i:i + ho, j:j + wo] for i in range(k) for j in range(k)], axis=2)
    arg = windows.argmax(axis=2)
    out = np.take_along_axis(windows, arg[:, :, None], axis=2)[:, :, 0]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for t in range(k * k):
            i, j = divmod(t, k)
            gxp[:, :, i:i + ho, j:j + wo] += np.where(arg == t, g, 0.0)
        return (gxp[:, :, padding:padding + h, padding:padding + w],)

    return make_result(out, (x,), backward, "max_pool")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.shape[2] * x.shape[3] == 0:
        raise ShapeError("global average pool over an empty spatial extent")
    return mean(x, axis=(2, 3), keepdims=True)


def avg_pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h < 2 or w < 2 or h % 2 or w % 2:
        raise ShapeError(f"2x2 average downsampling needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        g = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return (g,)

    return make_result(out, (x,), backward, "avg_pool2")


def pool(x: Tensor, kind: str, k: int = 3) -> Tensor:
    if x.ndim != 4 or x.shape[2] == 0 or x.shape[3] == 0:
        raise ShapeError(f"pooling needs a non-empty (N, C, H, W) tensor, got {x.shape}")
    if kind == "max":
        return max_pool(x, k)
    if kind == "global_avg":
        return global_avg_pool(x)
    if kind == "avg_downsample_2x2":
        return avg_pool2(x)
    raise ValueError(f"unknown pooling kind {kind!r}")


# -- normalisation ----------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mean_: np.ndarray | None = None,
               var: np.ndarray | None = None, eps: float = 1e-5):
    """Per-channel normalisation over (N, H, W).

    With ``mean_``/``var`` given, those fixed statistics are used (inference).
    Otherwise batch statistics are used and returned alongside the output so
    the caller can update running averages.
    """
    c = x.shape[1]
    shape = (1, c, 1, 1)
    axes = (0, 2, 3)
    batch_stats = mean_ is None
    if batch_stats:
        mean_ = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean_.reshape(shape)) * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    m = x.data.size // c

    def backward(g):
        gg = gamma.data.reshape(shape)
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        if batch_stats:
            gx = (gg * inv.reshape(shape) / m) * (
                m * g - gbeta.reshape(shape) - xhat * ggamma.reshape(shape))
        else:
            gx = g * gg * inv.reshape(shape)
        return gx, ggamma, gbeta

    res = make_result(out, (x, gamma, beta), backward, "batch_norm")
    if batch_stats:
        return res, mean_, var
    return res
