"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive below records a node with a local gradient rule. The set is
closed: adding an op means adding its backward rule and a gradcheck case in
``tests/test_tensor.py``.
"""
from __future__ import annotations

import numpy as np
from scipy import sparse

from .errors import ContractViolation

__all__ = [
    "Tensor",
    "tensor",
    "as_tensor",
    "backward",
    "concat",
    "stack",
    "gather",
    "conv2d",
    "bilinear_gather",
    "softmax",
    "sigmoid",
    "relu",
    "where_const",
]


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array that may participate in an autodiff graph.

    Leaves are created directly; interior nodes are produced by primitive ops
    and carry their parents plus a closure mapping the output gradient to
    parent gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_grad_fn")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _grad_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = _parents
        self._grad_fn = _grad_fn

    # -- introspection -------------------------------------------------
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
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # -- graph construction helper ------------------------------------
    @staticmethod
    def _make(data, parents, grad_fn):
        if any(p.requires_grad for p in parents):
            return Tensor(data, True, None, tuple(parents), grad_fn)
        return Tensor(data)

    def backward(self):
        return backward(self)

    # -- elementwise arithmetic ------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def grad_fn(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._make(a.data + b.data, (a, b), grad_fn)

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def grad_fn(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._make(a.data - b.data, (a, b), grad_fn)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def grad_fn(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._make(a.data * b.data, (a, b), grad_fn)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other
        out = a.data / b.data

        def grad_fn(g):
            ga = g / b.data
            return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

        return Tensor._make(out, (a, b), grad_fn)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        p = float(exponent)
        x = self.data

        def grad_fn(g):
            return (g * p * x ** (p - 1.0),)

        return Tensor._make(x**p, (self,), grad_fn)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, index):
        x = self
        out = self.data[index]
        advanced = _is_advanced(index)

        def grad_fn(g):
            gx = np.zeros_like(x.data)
            if advanced:
                np.add.at(gx, index, g)
            else:
                gx[index] = g
            return (gx,)

        return Tensor._make(out, (self,), grad_fn)

    # -- unary maths -----------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self):
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def sin(self):
        c = np.cos(self.data)
        return Tensor._make(np.sin(self.data), (self,), lambda g: (g * c,))

    def cos(self):
        s = np.sin(self.data)
        return Tensor._make(np.cos(self.data), (self,), lambda g: (-g * s,))

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def abs(self):
        s = np.sign(self.data)
        return Tensor._make(np.abs(self.data), (self,), lambda g: (g * s,))

    def sqrt(self):
        return self**0.5

    def clip(self, lo=None, hi=None):
        """Clamp values; the gradient passes only where the input is inside the range."""
        x = self.data
        out = np.clip(x, lo, hi)
        mask = np.ones_like(x)
        if lo is not None:
            mask = mask * (x >= lo)
        if hi is not None:
            mask = mask * (x <= hi)
        return Tensor._make(out, (self,), lambda g: (g * mask,))

    # -- reductions and shape ops ------------------------------------------
    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), grad_fn)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    @property
    def T(self):
        return self.transpose()

    def softmax(self, axis=-1):
        return softmax(self, axis)


def _is_advanced(index):
    if isinstance(index, tuple):
        return any(isinstance(i, (list, np.ndarray)) for i in index)
    return isinstance(index, (list, np.ndarray))


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# -- n-ary primitives ------------------------------------------------------
def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation("matmul needs operands of rank >= 2")
    out = a.data @ b.data

    def grad_fn(g):
        if b.ndim == 2:
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._make(out, (a, b), grad_fn)


def sigmoid(x):
    x = as_tensor(x)
    # stable for large |x|
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)
    return Tensor._make(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softmax(x, axis=-1):
    """Max-subtracted softmax along ``axis``."""
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ContractViolation("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), grad_fn)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    return concat([t.reshape(_expand_shape(t.shape, axis)) for t in tensors], axis=axis)


def _expand_shape(shape, axis):
    axis = axis if axis >= 0 else len(shape) + 1 + axis
    return shape[:axis] + (1,) + shape[axis:]


def where_const(mask, x, fill=0.0):
    """``x`` where ``mask`` holds, a constant elsewhere; no gradient to the constant."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    return Tensor._make(np.where(mask, x.data, fill), (x,), lambda g: (_unbroadcast(g * mask, x.shape),))


def gather(x, index):
    """Row gather along axis 1: ``out[b, p] = x[b, index[b, p]]``.

    ``x`` is ``[B, N, C]`` and ``index`` an integer array ``[B, P]``. This is
    the primitive behind the four bilinear corners.
    """
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    B, N, C = x.shape
    flat = (index + N * np.arange(B)[:, None]).reshape(-1)
    out = x.data.reshape(B * N, C)[flat].reshape(index.shape + (C,))

    def grad_fn(g):
        # scatter-add as one bincount over (row, channel) cells; deterministic order
        cells = (flat[:, None] * C + np.arange(C)).reshape(-1)
        gx = np.bincount(cells, weights=g.reshape(-1), minlength=B * N * C)
        return (gx.reshape(B, N, C),)

    return Tensor._make(out, (x,), grad_fn)


def bilinear_gather(values, hw, points):
    """Zero-padded bilinear lookup, fused over the four corners.

    ``values`` ``[B, H*W, C]`` is a flattened map, ``points`` ``[B, P, 2]``
    holds (column, row) grid coordinates. Returns ``[B, P, C]``.
    Differentiable in both ``values`` and ``points``; on grid lines the
    point gradient is the one-sided derivative from the cell above/right.
    """
    values, points = as_tensor(values), as_tensor(points)
    H, W = hw
    B, N, C = values.shape
    if N != H * W:
        raise ContractViolation(f"flattened map has {N} rows, expected {H}x{W}")
    P = points.shape[1]
    px, py = points.data[..., 0].reshape(-1), points.data[..., 1].reshape(-1)
    x0, y0 = np.floor(px), np.floor(py)
    fx, fy = px - x0, py - y0
    base = np.repeat(N * np.arange(B), P)
    idx = np.empty((B * P, 4), dtype=np.intp)
    wts = np.empty((B * P, 4))
    dwx = np.empty((B * P, 4))
    dwy = np.empty((B * P, 4))
    k = 0
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        xi = x0 + dx
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            yi = y0 + dy
            valid = (xi >= 0) & (xi <= W - 1) & (yi >= 0) & (yi <= H - 1)
            idx[:, k] = (np.clip(yi, 0, H - 1) * W + np.clip(xi, 0, W - 1)).astype(np.intp) + base
            wts[:, k] = wx * wy * valid
            dwx[:, k] = (1.0 if dx else -1.0) * wy * valid
            dwy[:, k] = (1.0 if dy else -1.0) * wx * valid
            k += 1
    table = values.data.reshape(B * N, C)
    interp = sparse.csr_matrix((wts.reshape(-1), idx.reshape(-1), np.arange(0, 4 * B * P + 1, 4)), shape=(B * P, B * N))
    out = np.asarray(interp @ table).reshape(B, P, C)

    def grad_fn(g):
        g2 = g.reshape(B * P, C)
        gvals = np.asarray(interp.T @ g2).reshape(B, N, C)
        gpx = np.zeros(B * P)
        gpy = np.zeros(B * P)
        for k in range(4):
            dot = np.einsum("rc,rc->r", g2, table[idx[:, k]])
            gpx += dwx[:, k] * dot
            gpy += dwy[:, k] * dot
        return gvals, np.stack([gpx, gpy], axis=-1).reshape(points.shape)

    return Tensor._make(out, (values, points), grad_fn)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation, ``x`` ``[B, Cin, H, W]``, ``weight`` ``[Cout, Cin, kh, kw]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    B, Cin, H, W = x.shape
    Cout, Cin_w, kh, kw = weight.shape
    if Cin != Cin_w:
        raise ContractViolation(f"conv2d channel mismatch: input {Cin}, weight {Cin_w}")
    p, s = padding, stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
    # win: [B, Cin, Ho, Wo, kh, kw]
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents = parents + (bias,)

    def grad_fn(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(weight.data, g, axes=([0], [1]))  # [Cin, kh, kw, B, Ho, Wo]
        gxp = np.zeros((Cin, B) + xp.shape[2:])
        if s == kh == kw:
            patches = cols.transpose(0, 3, 4, 1, 5, 2).reshape(Cin, B, Ho * kh, Wo * kw)
            gxp[:, :, : Ho * kh, : Wo * kw] = patches
        else:
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + s * Ho : s, j : j + s * Wo : s] += cols[:, i, j]
        gxp = gxp.transpose(1, 0, 2, 3)
        gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    return Tensor._make(np.ascontiguousarray(out), parents, grad_fn)


# -- reverse sweep -----------------------------------------------------------
def _topological_order(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(loss, wrt=None):
    """Propagate d(loss)/d(node) to every leaf reachable from ``loss``.

    Leaf ``.grad`` buffers are overwritten, not accumulated, so repeating the
    sweep on the same graph gives identical gradients. Returns a dict from
    leaf ``id`` to gradient; tensors listed in ``wrt`` that do not influence
    the loss get an explicit zero gradient.
    """
    if loss.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {}
    leaves = {}
    if loss.requires_grad:
        order = _topological_order(loss)
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(order):
            g = grads.pop(id(node), None) if node._parents else grads.get(id(node))
            if g is None:
                continue
            if not node._parents:
                leaves[id(node)] = node
                continue
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.asarray(pg, dtype=np.float64)
    result = {}
    for key, leaf in leaves.items():
        leaf.grad = grads[key].reshape(leaf.shape)
        result[key] = leaf.grad
    for t in wrt or ():
        if id(t) not in result:
            t.grad = np.zeros_like(t.data)
            result[id(t)] = t.grad
    return result
