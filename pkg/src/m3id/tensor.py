"""Dense float64 tensors with reverse-mode differentiation.

Every operation records a closure that propagates the upstream gradient to
its inputs; ``backward`` replays the closures in reverse topological order.
The op set is exactly what the volumetric networks need: elementwise
arithmetic, matmul (2D and batched 3D), reshape/transpose/basic slicing,
reductions, conv3d, linear, relu/elu/sigmoid, axis softmax, global average
pooling, batch norm, and dropout.

Conventions:
  * all data is float64; inputs are coerced on construction
  * volumes are [B, C, X, Y, Z]
  * conv3d computes cross-correlation (no kernel flip) with output extent
    X' = floor((X + 2p - k) / s) + 1
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ContractViolation

__all__ = [
    "Tensor",
    "no_grad",
    "backward",
    "zero_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "clamp_min",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "getitem",
    "matmul",
    "relu",
    "elu",
    "sigmoid",
    "activation",
    "softmax_axis",
    "conv3d",
    "conv3d_output_extents",
    "linear",
    "global_avg_pool3d",
    "batch_norm",
    "dropout",
]

_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording (e.g. frozen-teacher passes)."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward_fn", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple = ()
        self._backward_fn = None
        self._backward_ran = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # sugar; all arithmetic goes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, backward_fn) -> Tensor:
    """Wrap an op result; record the closure only if a graph is wanted."""
    req = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    if req:
        out._prev = tuple(inputs)
        out._backward_fn = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor):
    """Propagate d(loss)/d(node) through the recorded graph.

    ``loss`` must be a scalar (size-1) tensor. Leaf gradients accumulate
    into ``.grad`` so repeated backward calls on fresh graphs implement
    gradient accumulation; replaying the same graph twice is an error.
    """
    if not isinstance(loss, Tensor):
        raise ContractViolation("backward expects a Tensor")
    if loss.data.size != 1:
        raise ContractViolation(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._backward_ran:
        raise ContractViolation("backward already ran on this graph; build a fresh graph")
    if not loss.requires_grad:
        raise ContractViolation("loss does not require grad; nothing to differentiate")

    # iterative post-order topological sort
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)
    loss._backward_ran = True


def zero_grad(params):
    """Clear gradients on an iterable (or name->Tensor mapping) of leaves."""
    if hasattr(params, "values"):
        params = params.values()
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting, summed back on the way down)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bw)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data

    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), bw)


def neg(a):
    a = _as_tensor(a)

    def bw(g):
        _accum(a, -g)

    return _make(-a.data, (a,), bw)


def exp(a):
    a = _as_tensor(a)
    data = np.exp(a.data)

    def bw(g):
        _accum(a, g * data)

    return _make(data, (a,), bw)


def log(a):
    a = _as_tensor(a)
    data = np.log(a.data)

    def bw(g):
        _accum(a, g / a.data)

    return _make(data, (a,), bw)


def sqrt(a):
    a = _as_tensor(a)
    data = np.sqrt(a.data)

    def bw(g):
        _accum(a, g * 0.5 / data)

    return _make(data, (a,), bw)


def clamp_min(a, floor: float):
    """max(a, floor); gradient passes only where a > floor."""
    a = _as_tensor(a)
    data = np.maximum(a.data, floor)
    mask = a.data > floor

    def bw(g):
        _accum(a, g * mask)

    return _make(data, (a,), bw)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy() if np.ndim(g) else np.full_like(a.data, g))
            return
        gg = g
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(ax % a.data.ndim for ax in axes):
                gg = np.expand_dims(gg, ax)
        _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(data, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = _as_tensor(a)
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(data, (a,), bw)


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.transpose(a.data, axes)

    def bw(g):
        _accum(a, np.transpose(g, inv))

    return _make(data, (a,), bw)


def getitem(a, idx):
    """Basic (slice/integer) indexing; gradient scatters into zeros."""
    a = _as_tensor(a)
    data = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _make(data, (a,), bw)


def matmul(a, b):
    """2D @ 2D or batched 3D @ 3D (leading batch dims must match exactly)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (2, 3) or b.ndim != a.ndim:
        raise ContractViolation(
            f"matmul supports 2D@2D or 3D@3D, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2] or (a.ndim == 3 and a.data.shape[0] != b.data.shape[0]):
        raise ContractViolation(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def bw(g):
        _accum(a, g @ np.swapaxes(b.data, -1, -2))
        _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(data, (a, b), bw)


# ---------------------------------------------------------------------------
# activations


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask)

    return _make(a.data * mask, (a,), bw)


def elu(a, alpha: float = 1.0):
    a = _as_tensor(a)
    neg_part = alpha * (np.exp(np.minimum(a.data, 0.0)) - 1.0)
    pos = a.data > 0
    data = np.where(pos, a.data, neg_part)

    def bw(g):
        _accum(a, g * np.where(pos, 1.0, neg_part + alpha))

    return _make(data, (a,), bw)


def sigmoid(a):
    a = _as_tensor(a)
    # stable in both tails
    data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                    np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def bw(g):
        _accum(a, g * data * (1.0 - data))

    return _make(data, (a,), bw)


_ACTIVATIONS = {"relu": relu, "elu": elu, "sigmoid": sigmoid}


def activation(kind: str, x):
    if kind not in _ACTIVATIONS:
        raise ContractViolation(f"unknown activation kind {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    return _ACTIVATIONS[kind](x)


def softmax_axis(x, axis: int):
    """Max-subtracted softmax along one axis."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        _accum(x, p * (g - dot))

    return _make(p, (x,), bw)


# ---------------------------------------------------------------------------
# network ops


def conv3d_output_extents(extents, kernel, stride: int, padding: int):
    """X' = floor((X + 2p - k) / s) + 1 per axis; errors if any extent empties."""
    if stride < 1:
        raise ContractViolation(f"conv3d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ContractViolation(f"conv3d padding must be >= 0, got {padding}")
    out = []
    for x, k in zip(extents, kernel):
        span = x + 2 * padding - k
        if span < 0:
            raise ContractViolation(
                f"conv3d kernel {kernel} does not fit input extents {tuple(extents)} with padding {padding}"
            )
        out.append(span // stride + 1)
    return tuple(out)


def _conv3d_view(xp: np.ndarray, out_ext, kernel, stride: int) -> np.ndarray:
    B, C = xp.shape[:2]
    kx, ky, kz = kernel
    sB, sC, sX, sY, sZ = xp.strides
    return as_strided(
        xp,
        shape=(B, C, out_ext[0], out_ext[1], out_ext[2], kx, ky, kz),
        strides=(sB, sC, sX * stride, sY * stride, sZ * stride, sX, sY, sZ),
        writeable=False,
    )


def conv3d(x, weight, bias, stride: int = 1, padding: int = 0):
    """Cross-correlation of [B,Cin,X,Y,Z] with [Cout,Cin,kx,ky,kz] kernels."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.ndim != 5:
        raise ContractViolation(f"conv3d input must be [B,C,X,Y,Z], got shape {x.data.shape}")
    if weight.ndim != 5:
        raise ContractViolation(f"conv3d weight must be [Cout,Cin,kx,ky,kz], got shape {weight.data.shape}")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ContractViolation(
            f"conv3d channel mismatch: input has {x.data.shape[1]}, weight expects {weight.data.shape[1]}"
        )
    cout = weight.data.shape[0]
    if bias.data.shape != (cout,):
        raise ContractViolation(f"conv3d bias must have shape ({cout},), got {bias.data.shape}")
    kernel = weight.data.shape[2:]
    out_ext = conv3d_output_extents(x.data.shape[2:], kernel, stride, padding)

    if padding:
        p = padding
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    else:
        xp = x.data
    view = _conv3d_view(xp, out_ext, kernel, stride)
    # [B,Xo,Yo,Zo,Cout] <- contract Cin and the kernel axes
    out = np.tensordot(view, weight.data, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.ascontiguousarray(np.moveaxis(out, 4, 1))
    out += bias.data.reshape(1, cout, 1, 1, 1)

    def bw(g):
        if bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3, 4)))
        if weight.requires_grad:
            gw = np.tensordot(g, view, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
            _accum(weight, gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            kx, ky, kz = kernel
            Xo, Yo, Zo = out_ext
            s = stride
            for i in range(kx):
                for j in range(ky):
                    for k in range(kz):
                        # [Cin,B,Xo,Yo,Zo] contribution of this kernel offset
                        contrib = np.tensordot(weight.data[:, :, i, j, k], g, axes=([0], [1]))
                        gxp[:, :, i:i + s * (Xo - 1) + 1:s,
                            j:j + s * (Yo - 1) + 1:s,
                            k:k + s * (Zo - 1) + 1:s] += contrib.transpose(1, 0, 2, 3, 4)
            if padding:
                p = padding
                gx = gxp[:, :, p:p + x.data.shape[2], p:p + x.data.shape[3], p:p + x.data.shape[4]]
            else:
                gx = gxp
            _accum(x, gx)

    return _make(out, (x, weight, bias), bw)


def linear(x, weight, bias):
    """x[B,F] @ weight[F,G] + bias[G]."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.data.shape[1] != weight.data.shape[0]:
        raise ContractViolation(
            f"linear shape mismatch: x {x.data.shape}, weight {weight.data.shape}"
        )
    if bias.data.shape != (weight.data.shape[1],):
        raise ContractViolation(
            f"linear bias must have shape ({weight.data.shape[1]},), got {bias.data.shape}"
        )
    data = x.data @ weight.data + bias.data

    def bw(g):
        _accum(x, g @ weight.data.T)
        _accum(weight, x.data.T @ g)
        _accum(bias, g.sum(axis=0))

    return _make(data, (x, weight, bias), bw)


def global_avg_pool3d(x):
    """[B,C,X,Y,Z] -> [B,C], mean over the spatial axes."""
    x = _as_tensor(x)
    if x.ndim != 5:
        raise ContractViolation(f"global_avg_pool3d expects [B,C,X,Y,Z], got shape {x.data.shape}")
    n = x.data.shape[2] * x.data.shape[3] * x.data.shape[4]
    data = x.data.mean(axis=(2, 3, 4))

    def bw(g):
        _accum(x, np.broadcast_to(g[:, :, None, None, None] / n, x.data.shape).copy())

    return _make(data, (x,), bw)


def batch_norm(x, gamma, beta, running_mean, running_var, mode: str,
               eps: float = 1e-5, momentum: float = 0.1):
    """Per-channel batch normalization over (batch, *spatial).

    ``running_mean``/``running_var`` are plain ndarrays mutated in place in
    train mode (biased variance, ``running = (1-m)*running + m*batch``);
    eval mode normalizes with them as constants.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if mode not in ("train", "eval"):
        raise ContractViolation(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    if eps <= 0:
        raise ContractViolation(f"batch_norm eps must be > 0, got {eps}")
    if x.ndim < 2:
        raise ContractViolation(f"batch_norm expects [B,C,...], got shape {x.data.shape}")
    C = x.data.shape[1]
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ContractViolation(f"batch_norm gamma/beta must have shape ({C},)")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    gdat = gamma.data.reshape(bshape)

    if mode == "train":
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)
        data = gdat * xhat + beta.data.reshape(bshape)
        m = x.data.size // C

        def bw(g):
            _accum(beta, g.sum(axis=axes))
            _accum(gamma, (g * xhat).sum(axis=axes))
            if x.requires_grad:
                gxhat = g * gdat
                sum_g = gxhat.sum(axis=axes, keepdims=True)
                sum_gx = (gxhat * xhat).sum(axis=axes, keepdims=True)
                invb = inv.reshape(bshape)
                _accum(x, invb * (gxhat - sum_g / m - xhat * sum_gx / m))

    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(bshape)) * inv.reshape(bshape)
        data = gdat * xhat + beta.data.reshape(bshape)

        def bw(g):
            _accum(beta, g.sum(axis=axes))
            _accum(gamma, (g * xhat).sum(axis=axes))
            if x.requires_grad:
                _accum(x, g * gdat * inv.reshape(bshape))

    return _make(data, (x, gamma, beta), bw)


def dropout(x, rate: float, mode: str, rng=None, mask=None):
    """Inverted dropout: train keeps with prob 1-rate and rescales by 1/(1-rate).

    Eval mode (or rate 0) is the identity and consumes no randomness. A
    precomputed keep-mask may be supplied so several forwards can share one
    realization; otherwise a seeded generator is required in train mode.
    """
    x = _as_tensor(x)
    if mode not in ("train", "eval"):
        raise ContractViolation(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if not 0.0 <= rate < 1.0:
        raise ContractViolation(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if mask is None:
        if rng is None:
            raise ContractViolation("dropout in train mode needs a seeded rng (or an explicit mask)")
        mask = rng.random(x.data.shape) >= rate
    else:
        mask = np.asarray(mask)
        if mask.shape != x.data.shape:
            raise ContractViolation(f"dropout mask shape {mask.shape} != input shape {x.data.shape}")
    scale = 1.0 / (1.0 - rate)
    keep = mask * scale

    def bw(g):
        _accum(x, g * keep)

    return _make(x.data * keep, (x,), bw)
