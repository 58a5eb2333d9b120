"""Dense tensors with reverse-mode automatic differentiation.

Everything the network needs is built from the primitives in this module:
each op records a closure that maps the output gradient to input gradients,
and ``Tensor.backward`` replays those closures in reverse topological order.
Arrays are numpy; float64 is the default so gradients can be validated
against finite differences, float32 is used for training.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "narrow",
    "broadcast_to",
    "tsum",
    "tmean",
    "relu",
    "leaky_relu",
    "sigmoid",
    "gelu",
    "log1p",
    "softmax",
    "log_softmax",
    "layer_norm",
    "conv2d",
    "upsample_nearest2x",
    "bce_with_logits",
    "bce_loss",
    "ce_loss",
    "hard_one_hot",
    "clamp_min",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class DomainError(ValueError):
    """Raised when values fall outside an op's mathematical domain."""


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode AD.

    ``requires_grad`` is meaningful on leaves; interior nodes inherit it from
    their parents. After ``backward()`` every reachable leaf with
    ``requires_grad`` holds its accumulated gradient in ``.grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @classmethod
    def _node(cls, data, parents, backward):
        """Interior graph node; drops the graph when no parent needs grads."""
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        if any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = tuple(parents)
            t._backward = backward
        else:
            t.requires_grad = False
            t._parents = ()
            t._backward = None
        return t

    # -- introspection -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff ----------------------------------------------------------

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``.grad`` on every reachable requires_grad leaf.

        Only scalar outputs can seed a backward pass.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward() requires a scalar output, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                node._backward(g, grads)
            elif node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _accumulate(grads: dict, t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    key = id(t)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


# -- elementwise binary ops --------------------------------------------------
#
# Broadcasting is deliberately restricted: operands must match exactly or one
# of them must be a single element. Anything else is a shape bug.


def _binary_shapes(a: Tensor, b: Tensor, opname: str):
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeError(
        f"{opname}: shapes {a.data.shape} and {b.data.shape} must match exactly "
        f"(only scalar broadcasting is supported)"
    )


def _reduce_like(g: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Sum a broadcast gradient back down to the shape of ``ref``."""
    if g.shape == ref.shape:
        return g
    return np.sum(g).reshape(ref.shape).astype(ref.dtype, copy=False)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _binary_shapes(a, b, "add")
    out = Tensor._node(a.data + b.data, (a, b), None)

    def _bw(g, grads):
        _accumulate(grads, a, _reduce_like(g, a.data))
        _accumulate(grads, b, _reduce_like(g, b.data))

    out._backward = _bw if out.requires_grad else None
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _binary_shapes(a, b, "sub")
    out = Tensor._node(a.data - b.data, (a, b), None)

    def _bw(g, grads):
        _accumulate(grads, a, _reduce_like(g, a.data))
        _accumulate(grads, b, _reduce_like(-g, b.data))

    out._backward = _bw if out.requires_grad else None
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _binary_shapes(a, b, "mul")
    out = Tensor._node(a.data * b.data, (a, b), None)

    def _bw(g, grads):
        _accumulate(grads, a, _reduce_like(g * b.data, a.data))
        _accumulate(grads, b, _reduce_like(g * a.data, b.data))

    out._backward = _bw if out.requires_grad else None
    return out


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _binary_shapes(a, b, "div")
    out = Tensor._node(a.data / b.data, (a, b), None)

    def _bw(g, grads):
        _accumulate(grads, a, _reduce_like(g / b.data, a.data))
        _accumulate(grads, b, _reduce_like(-g * a.data / (b.data * b.data), b.data))

    out._backward = _bw if out.requires_grad else None
    return out


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    out = Tensor._node(x.data * c, (x,), None)

    def _bw(g, grads):
        _accumulate(grads, x, g * c)

    out._backward = _bw if out.requires_grad else None
    return out


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product.

    Supported operand ranks: (2D, 2D), (ND, 2D) where the 2D right operand is
    shared across leading dims, and (ND, ND) with identical leading dims.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dimensions disagree for {a.shape} x {b.shape}")
    out = Tensor._node(a.data @ b.data, (a, b), None)

    def _bw(g, grads):
        if a.requires_grad:
            _accumulate(grads, a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                db = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                db = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(grads, b, db)

    out._backward = _bw if out.requires_grad else None
    return out


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    out = Tensor._node(x.data.reshape(shape), (x,), None)

    def _bw(g, grads):
        _accumulate(grads, x, g.reshape(x.data.shape))

    out._backward = _bw if out.requires_grad else None
    return out


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor._node(np.transpose(x.data, axes), (x,), None)

    def _bw(g, grads):
        _accumulate(grads, x, np.transpose(g, inverse))

    out._backward = _bw if out.requires_grad else None
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    out = Tensor._node(out_data, tuple(tensors), None)

    def _bw(g, grads):
        offset = 0
        for t, s in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + s)
            _accumulate(grads, t, g[tuple(idx)])
            offset += s

    out._backward = _bw if out.requires_grad else None
    return out


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    x = _as_tensor(x)
    if not (0 <= start and length >= 0 and start + length <= x.shape[axis]):
        raise ShapeError(
            f"narrow: [{start}:{start + length}) out of range for axis {axis} of {x.shape}"
        )
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor._node(x.data[idx].copy(), (x,), None)

    def _bw(g, grads):
        full = np.zeros_like(x.data)
        full[idx] = g
        _accumulate(grads, x, full)

    out._backward = _bw if out.requires_grad else None
    return out


def broadcast_to(x, shape) -> Tensor:
    """Explicit broadcast; the backward pass sums over the expanded axes."""
    x = _as_tensor(x)
    shape = tuple(shape)
    out_data = np.broadcast_to(x.data, shape)
    n_new = len(shape) - x.ndim
    if n_new < 0:
        raise ShapeError(f"broadcast_to: cannot shrink {x.shape} to {shape}")
    expanded_axes = tuple(range(n_new)) + tuple(
        n_new + i for i, d in enumerate(x.shape) if d == 1 and shape[n_new + i] != 1
    )
    out = Tensor._node(np.ascontiguousarray(out_data), (x,), None)

    def _bw(g, grads):
        gg = g.sum(axis=expanded_axes, keepdims=False) if expanded_axes else g
        _accumulate(grads, x, gg.reshape(x.data.shape))

    out._backward = _bw if out.requires_grad else None
    return out


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor._node(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), None)

    def _bw(g, grads):
        if axis is None:
            _accumulate(grads, x, np.broadcast_to(g, x.data.shape).copy())
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        _accumulate(grads, x, np.broadcast_to(gg, x.data.shape).copy())

    out._backward = _bw if out.requires_grad else None
    return out


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.data.shape[a] for a in axes]))
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# -- pointwise nonlinearities -------------------------------------------------


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor._node(np.maximum(x.data, 0.0), (x,), None)

    def _bw(g, grads):
        _accumulate(grads, x, g * (x.data > 0))

    out._backward = _bw if out.requires_grad else None
    return out


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = _as_tensor(x)
    out = Tensor._node(np.where(x.data > 0, x.data, slope * x.data), (x,), None)

    def _bw(g, grads):
        _accumulate(grads, x, g * np.where(x.data > 0, 1.0, slope))

    out._backward = _bw if out.requires_grad else None
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    y = _sigmoid(x.data)
    out = Tensor._node(y, (x,), None)

    def _bw(g, grads):
        _accumulate(grads, x, g * y * (1.0 - y))

    out._backward = _bw if out.requires_grad else None
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x) -> Tensor:
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor._node(x.data * cdf, (x,), None)

    def _bw(g, grads):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        _accumulate(grads, x, g * (cdf + x.data * pdf))

    out._backward = _bw if out.requires_grad else None
    return out


def log1p(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= -1.0):
        raise DomainError("log1p: input must be > -1 everywhere")
    out = Tensor._node(np.log1p(x.data), (x,), None)

    def _bw(g, grads):
        _accumulate(grads, x, g / (1.0 + x.data))

    out._backward = _bw if out.requires_grad else None
    return out


def clamp_min(x, floor: float) -> Tensor:
    """max(x, floor); gradient passes only where the input is above the floor."""
    x = _as_tensor(x)
    out = Tensor._node(np.maximum(x.data, floor), (x,), None)

    def _bw(g, grads):
        _accumulate(grads, x, g * (x.data > floor))

    out._backward = _bw if out.requires_grad else None
    return out


# -- softmax family -----------------------------------------------------------


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    axis = _check_axis(x, axis)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor._node(y, (x,), None)

    def _bw(g, grads):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        _accumulate(grads, x, y * (g - dot))

    out._backward = _bw if out.requires_grad else None
    return out


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    axis = _check_axis(x, axis)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor._node(y, (x,), None)

    def _bw(g, grads):
        sm = np.exp(y)
        _accumulate(grads, x, g - sm * np.sum(g, axis=axis, keepdims=True))

    out._backward = _bw if out.requires_grad else None
    return out


def hard_one_hot(y, axis: int = -1) -> Tensor:
    """One-hot of the argmax along ``axis``; straight-through gradient.

    Forward emits exact one-hot rows; backward passes the output gradient to
    the input unchanged, so a soft distribution upstream keeps training.
    """
    y = _as_tensor(y)
    axis = _check_axis(y, axis)
    idx = np.argmax(y.data, axis=axis, keepdims=True)
    hard = np.zeros_like(y.data)
    np.put_along_axis(hard, idx, 1.0, axis=axis)
    out = Tensor._node(hard, (y,), None)

    def _bw(g, grads):
        _accumulate(grads, y, g)

    out._backward = _bw if out.requires_grad else None
    return out


# -- normalization ------------------------------------------------------------


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance over the last axis, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({d},), got {gain.shape}/{bias.shape}"
        )
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor._node(xhat * gain.data + bias.data, (x, gain, bias), None)

    def _bw(g, grads):
        if gain.requires_grad:
            red = tuple(range(g.ndim - 1))
            _accumulate(grads, gain, np.sum(g * xhat, axis=red))
        if bias.requires_grad:
            red = tuple(range(g.ndim - 1))
            _accumulate(grads, bias, np.sum(g, axis=red))
        if x.requires_grad:
            gh = g * gain.data
            m1 = np.mean(gh, axis=-1, keepdims=True)
            m2 = np.mean(gh * xhat, axis=-1, keepdims=True)
            _accumulate(grads, x, inv * (gh - m1 - xhat * m2))

    out._backward = _bw if out.requires_grad else None
    return out


# -- convolution --------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(B, Cin, Hp, Wp) -> (B*ho*wo, Cin*kh*kw) patch matrix."""
    b, cin, hp, wp = xp.shape
    sb, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, cin, ho, wo, kh, kw),
        strides=(sb, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    return np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b * ho * wo, cin * kh * kw
    )


def _conv2d_raw(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Cross-correlation of (B, Cin, H, W) with (Cout, Cin, kh, kw)."""
    b, cin, h, wd = x.shape
    cout, cin_k, kh, kw = w.shape
    if cin != cin_k:
        raise ShapeError(f"conv2d: input channels {cin} != kernel channels {cin_k}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{wd + 2 * padding}"
        )
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    col = _im2col(xp, kh, kw, stride, ho, wo)
    out = col @ w.reshape(cout, -1).T
    return out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2), col


def _dilate(g: np.ndarray, stride: int) -> np.ndarray:
    if stride == 1:
        return g
    b, c, h, w = g.shape
    out = np.zeros((b, c, (h - 1) * stride + 1, (w - 1) * stride + 1), dtype=g.dtype)
    out[:, :, ::stride, ::stride] = g
    return out


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) with optional per-channel bias.

    Accepts (Cin, H, W) or batched (B, Cin, H, W) input; the output rank
    matches the input rank.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    single = x.ndim == 3
    if x.ndim not in (3, 4) or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 3/4-D input and 4-D kernel, got {x.shape}, {w.shape}")
    xb = x.data[None] if single else x.data
    out_data, col = _conv2d_raw(xb, w.data, stride, padding)
    parents = [x, w]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({w.shape[0]},)")
        out_data = out_data + bias.data[None, :, None, None]
        parents.append(bias)
    kh, kw = w.shape[2], w.shape[3]
    h_in, w_in = xb.shape[2], xb.shape[3]
    out = Tensor._node(out_data[0] if single else out_data, tuple(parents), None)

    def _bw(g, grads):
        gb = g[None] if single else g
        b_, cout, ho, wo = gb.shape
        if bias is not None and bias.requires_grad:
            _accumulate(grads, bias, gb.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            gmat = gb.transpose(0, 2, 3, 1).reshape(-1, cout)
            dw = (gmat.T @ col).reshape(w.data.shape)
            _accumulate(grads, w, dw)
        if x.requires_grad:
            # Input gradient as a stride-1 correlation of the dilated output
            # gradient with the channel-swapped, spatially flipped kernel.
            gd = _dilate(gb, stride)
            wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            dxp, _ = _conv2d_raw(gd, np.ascontiguousarray(wflip), 1, max(kh, kw) - 1)
            hp, wp = h_in + 2 * padding, w_in + 2 * padding
            full = np.zeros((b_, xb.shape[1], hp, wp), dtype=gb.dtype)
            full[:, :, : dxp.shape[2], : dxp.shape[3]] = dxp
            dx = full[:, :, padding : padding + h_in, padding : padding + w_in]
            _accumulate(grads, x, dx[0] if single else dx)

    out._backward = _bw if out.requires_grad else None
    return out


def upsample_nearest2x(x) -> Tensor:
    """Nearest-neighbor 2x upsampling of the two trailing spatial axes."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"upsample_nearest2x: need spatial dims, got {x.shape}")
    out_data = x.data.repeat(2, axis=-2).repeat(2, axis=-1)
    out = Tensor._node(out_data, (x,), None)

    def _bw(g, grads):
        s = g.shape
        gg = g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1))
        _accumulate(grads, x, gg)

    out._backward = _bw if out.requires_grad else None
    return out


# -- losses ---------------------------------------------------------------


def bce_with_logits(logits, target) -> Tensor:
    """Elementwise binary cross-entropy on logits; no reduction.

    The log-sum-exp form keeps saturated logits finite.
    """
    logits, target = _as_tensor(logits), _as_tensor(target)
    if logits.shape != target.shape:
        raise ShapeError(f"bce_with_logits: shapes differ {logits.shape} vs {target.shape}")
    if np.any(target.data < 0) or np.any(target.data > 1):
        raise DomainError("bce_with_logits: targets must lie in [0, 1]")
    z = logits.data
    out_data = np.maximum(z, 0.0) - z * target.data + np.log1p(np.exp(-np.abs(z)))
    out = Tensor._node(out_data, (logits, target), None)

    def _bw(g, grads):
        if logits.requires_grad:
            _accumulate(grads, logits, g * (_sigmoid(z) - target.data))
        if target.requires_grad:
            _accumulate(grads, target, g * (-z))

    out._backward = _bw if out.requires_grad else None
    return out


def bce_loss(pred, target, from_logits: bool = False) -> Tensor:
    """Mean binary cross-entropy over all elements.

    ``pred`` is either a probability tensor strictly inside (0, 1) or raw
    logits with ``from_logits=True`` (the numerically safe path).
    """
    pred, target = _as_tensor(pred), _as_tensor(target)
    if not from_logits:
        if np.any(pred.data <= 0) or np.any(pred.data >= 1):
            raise DomainError("bce_loss: probabilities must lie strictly inside (0, 1)")
        # Convert to logits so there is a single stable code path.
        pred = _prob_to_logit(pred)
    return tmean(bce_with_logits(pred, target))


def _prob_to_logit(p: Tensor) -> Tensor:
    out = Tensor._node(np.log(p.data) - np.log1p(-p.data), (p,), None)

    def _bw(g, grads):
        _accumulate(grads, p, g / (p.data * (1.0 - p.data)))

    out._backward = _bw if out.requires_grad else None
    return out


def ce_loss(logits, target_index: int) -> Tensor:
    """Negative log-softmax probability of the target class (1-D logits)."""
    logits = _as_tensor(logits)
    if logits.ndim != 1:
        raise ShapeError(f"ce_loss: expected 1-D logits, got {logits.shape}")
    c = logits.shape[0]
    if not 0 <= target_index < c:
        raise IndexError(f"ce_loss: target index {target_index} out of range [0, {c})")
    logp = log_softmax(logits, axis=0)
    return -narrow(logp, 0, target_index, 1).sum()
