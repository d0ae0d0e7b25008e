"""Differentiable operations.

Every function takes :class:`Tensor` (or array-like) inputs and returns a new
Tensor whose backward closure maps the output gradient to one gradient per
parent. Image tensors are laid out NCHW.
"""

from __future__ import annotations

import numpy as np

from .tensor import DTYPE, Tensor, as_tensor, make_result

DIV_EPS = 1e-300


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# elementwise arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    if np.any(np.abs(b.data) < DIV_EPS):
        raise ZeroDivisionError("div: denominator magnitude below epsilon")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return make_result(out, (a, b), backward, "div")


def square(x):
    x = as_tensor(x)
    return make_result(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def exp(x):
    x = as_tensor(x)
    with np.errstate(over="ignore"):  # overflow is reported by the finiteness check
        out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log: input must be strictly positive")
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x):
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(x.data)

    def backward(g):
        if np.any(out == 0):
            raise ZeroDivisionError("sqrt: gradient undefined at 0")
        return (g * 0.5 / out,)

    return make_result(out, (x,), backward, "sqrt")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(x):
    """log(1 + exp(x)), computed without overflow."""
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    sig = np.exp(x.data - out)
    return make_result(out, (x,), lambda g: (g * sig,), "softplus")


def softmax(x, axis=1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


def log_softmax(x, axis=1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward, "log_softmax")


# reductions and shape

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(x, shape):
    x = as_tensor(x)
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x):
    """Collapse all but the leading (batch) axis."""
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def index(x, idx):
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        if isinstance(idx, np.ndarray) and idx.dtype == bool:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_result(x.data[idx], (x,), backward, "index")


def transpose(x):
    x = as_tensor(x)
    return make_result(x.data.T, (x,), lambda g: (g.T,), "transpose")


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis),
                       tuple(tensors), backward, "concat")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return make_result(a.data @ b.data, (a, b), backward, "matmul")


def fully_connected(x, weight, bias=None):
    """y = x W^T + b with ``weight`` shaped (out_features, in_features)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"fully_connected: input {x.shape} vs weight {weight.shape}")
    parents = (x, weight) if bias is None else (x, weight, as_tensor(bias))
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + parents[2].data

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return make_result(out, parents, backward, "fully_connected")


def l2_normalize(x, axis=-1, eps=1e-12):
    """Scale vectors along ``axis`` to unit Euclidean norm; zero vectors are rejected."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm < eps):
        raise ValueError("l2_normalize: zero-norm vector")
    out = x.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return make_result(out, (x,), backward, "l2_normalize")


def detach(x):
    return Tensor(as_tensor(x).data)


# convolution and resampling

def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation, NCHW input, weight (C_out, C_in, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d: input {x.shape} vs weight {weight.shape}")
    if stride not in (1, 2):
        raise ValueError("conv2d: stride must be 1 or 2")
    n, c, h, w = x.shape
    c_out, _, kh, kw = weight.shape
    xp = _pad(x.data, padding)
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("conv2d: kernel larger than padded input")

    # cols: (n, ho, wo, c, kh, kw)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    out = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        dw = (gmat.T @ cols).reshape(weight.shape)
        dcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(gmat.sum(axis=0))
        return tuple(grads)

    return make_result(np.ascontiguousarray(out), parents, backward, "conv2d")


def upsample2x(x):
    """Nearest-neighbour upsampling by a factor of two in H and W."""
    x = as_tensor(x)
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        n, c, h, w = g.shape
        return (g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward, "upsample2x")


def logsumexp(x, axis=-1):
    """Stable log-sum-exp; the shift is the (non-differentiated) row maximum."""
    x = as_tensor(x)
    shift = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - shift)
    s = e.sum(axis=axis, keepdims=True)
    out = (shift + np.log(s)).squeeze(axis)
    soft = e / s

    def backward(g):
        return (np.expand_dims(g, axis) * soft,)

    return make_result(out, (x,), backward, "logsumexp")


__all__ = [
    "DTYPE", "Tensor", "add", "sub", "mul", "div", "square", "exp", "log", "sqrt",
    "relu", "sigmoid", "softplus", "softmax", "log_softmax", "sum", "mean", "reshape",
    "flatten", "index", "transpose", "concat", "matmul", "fully_connected", "l2_normalize", "detach",
    "conv2d", "upsample2x", "logsumexp",
]
