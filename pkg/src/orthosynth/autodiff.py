"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` wraps an ndarray plus an optional gradient and the
closure needed to push gradients to its parents.  Graphs are built
eagerly by the ops below and differentiated by :func:`backward`, which
traverses the graph in reverse topological order and accumulates
gradients additively (repeated calls without resetting keep adding).

Everything is double precision and deterministic: reductions route ties
to the first occurrence, and no op consults global state.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(ValueError):
    pass


class NonScalarLossError(AutodiffError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    # ---------------------------------------------------------- bookkeeping

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.requires_grad else 'no'})"

    def zero_grad(self):
        self.grad = None

    # -------------------------------------------------------------- helpers

    def detach(self) -> "Tensor":
        """Constant view of this tensor's value (cuts the graph)."""
        return Tensor(self.data)

    # ------------------------------------------------------------ operators

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __getitem__(self, index):
        return getitem(self, index)

    # --------------------------------------------------------- method sugar

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def min(self, axis=None, keepdims=False):
        return reduce_min(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum-reduce a gradient back down to the original operand shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# -------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(a.data / b.data, (a, b), bw)


def pow_scalar(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * p * a.data ** (p - 1.0))

    return _node(a.data ** p, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * out_data)

    return _node(out_data, (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g / a.data)

    return _node(np.log(a.data), (a,), bw)


def sqrt(a) -> Tensor:
    """Elementwise square root; the subgradient at exactly 0 is taken as 0
    so zero-variance pooling stays finite."""
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def bw(g):
        if a.requires_grad:
            safe = np.where(out_data > 0.0, out_data, 1.0)
            _accumulate(a, np.where(out_data > 0.0, 0.5 * g / safe, 0.0))

    return _node(out_data, (a,), bw)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * (a.data > 0.0))

    return _node(np.maximum(a.data, 0.0), (a,), bw)


def softplus(a) -> Tensor:
    """log(1 + exp(a)), computed overflow-free."""
    a = as_tensor(a)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g / (1.0 + np.exp(-a.data)))

    return _node(np.logaddexp(0.0, a.data), (a,), bw)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Gaussian error linear unit (tanh form)."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + th)

    def bw(g):
        if a.requires_grad:
            d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
            da = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner
            _accumulate(a, g * da)

    return _node(out_data, (a,), bw)


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); gradient is zero where the floor is active."""
    a = as_tensor(a)
    floor = float(floor)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * (a.data >= floor))

    return _node(np.maximum(a.data, floor), (a,), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    a1 = a.ndim == 1
    b1 = b.ndim == 1

    def bw(g):
        ad_ = a.data[None, :] if a1 else a.data
        bd_ = b.data[:, None] if b1 else b.data
        gg = g
        if a1:
            gg = np.expand_dims(gg, -2)
        if b1:
            gg = np.expand_dims(gg, -1)
        if a.requires_grad:
            ga = gg @ np.swapaxes(bd_, -1, -2)
            if a1:
                ga = ga[..., 0, :]
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(ad_, -1, -2) @ gg
            if b1:
                gb = gb[..., 0]
            _accumulate(b, _unbroadcast(gb, b.shape))

    return _node(a.data @ b.data, (a, b), bw)


# --------------------------------------------------------------- reductions


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)

    def bw(g):
        if a.requires_grad:
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axes)
            _accumulate(a, np.broadcast_to(gg, a.shape).copy())

    return _node(a.data.sum(axis=axes, keepdims=keepdims), (a,), bw)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))

    def bw(g):
        if a.requires_grad:
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axes)
            _accumulate(a, np.broadcast_to(gg / count, a.shape).copy())

    return _node(a.data.mean(axis=axes, keepdims=keepdims), (a,), bw)


def _extreme_reduce(a, axis, keepdims, minimum: bool) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        flat = reshape(a, (a.size,))
        out = _extreme_reduce(flat, 0, False, minimum)
        return reshape(out, ()) if not keepdims else reshape(out, (1,) * a.ndim)
    ax = axis % a.ndim
    arg = np.argmin(a.data, axis=ax) if minimum else np.argmax(a.data, axis=ax)
    out_data = np.take_along_axis(a.data, np.expand_dims(arg, ax), axis=ax)
    if not keepdims:
        out_data = np.squeeze(out_data, axis=ax)

    def bw(g):
        if a.requires_grad:
            gg = g if keepdims else np.expand_dims(g, ax)
            ga = np.zeros_like(a.data)
            np.put_along_axis(ga, np.expand_dims(arg, ax), gg, axis=ax)
            _accumulate(a, ga)

    return _node(out_data, (a,), bw)


def reduce_max(a, axis=None, keepdims=False) -> Tensor:
    """Max reduction; ties route the gradient to the first occurrence."""
    return _extreme_reduce(a, axis, keepdims, minimum=False)


def reduce_min(a, axis=None, keepdims=False) -> Tensor:
    return _extreme_reduce(a, axis, keepdims, minimum=True)


# ------------------------------------------------------------------ shapes


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(orig))

    return _node(a.data.reshape(shape), (a,), bw)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g.transpose(inverse))

    return _node(a.data.transpose(axes), (a,), bw)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))

    return _node(np.broadcast_to(a.data, shape).copy(), (a,), bw)


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, index, g)
            _accumulate(a, ga)

    return _node(a.data[index], (a,), bw)


# --------------------------------------------------------------- nonlinear


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            _accumulate(a, out_data * (g - dot))

    return _node(out_data, (a,), bw)


def straight_through(a, target) -> Tensor:
    """Forward the values of ``target`` while sending gradients to ``a``
    unchanged, as if the replacement were the identity map."""
    a = as_tensor(a)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != a.shape:
        raise AutodiffError(f"straight-through shape mismatch {target.shape} vs {a.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g)

    return _node(target.copy(), (a,), bw)


def scatter_max(values, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Per-segment elementwise maximum of ``values`` rows.

    ``values`` is (M, F), ``segment_ids`` an integer (M,) array.  Empty
    segments yield zero rows and receive no gradient; ties route the
    gradient to the lowest contributing row index.
    """
    values = as_tensor(values)
    seg = np.asarray(segment_ids, dtype=np.int64)
    m, f = values.shape
    maxed = np.full((num_segments, f), -np.inf)
    np.maximum.at(maxed, seg, values.data)
    counts = np.zeros(num_segments, dtype=np.int64)
    np.add.at(counts, seg, 1)
    out_data = np.where(counts[:, None] > 0, maxed, 0.0)

    def bw(g):
        if not values.requires_grad:
            return
        hit = values.data == maxed[seg]  # rows attaining their segment max
        winner = np.full((num_segments, f), m, dtype=np.int64)
        rows = np.broadcast_to(np.arange(m)[:, None], (m, f))
        np.minimum.at(winner, seg, np.where(hit, rows, m))
        gv = np.zeros_like(values.data)
        take = rows == winner[seg]
        gv[take] = (g[seg])[take]
        _accumulate(values, gv)

    return _node(out_data, (values,), bw)


def conv3d(x, w, b) -> Tensor:
    """3x3x3 'same' convolution with zero padding over a dense lattice.

    ``x`` is (B, D, H, W, Cin), ``w`` is (27, Cin, Cout), ``b`` is (Cout,).
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    bsz, d0, d1, d2, cin = x.shape
    cout = w.shape[2]
    pad = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(pad, (3, 3, 3), axis=(1, 2, 3))
    # win: (B, D, H, W, Cin, 3, 3, 3) -> (B*V, 27*Cin) column matrix
    cols = win.transpose(0, 1, 2, 3, 5, 6, 7, 4).reshape(-1, 27 * cin)
    wmat = w.data.reshape(27 * cin, cout)
    out_data = (cols @ wmat + b.data).reshape(bsz, d0, d1, d2, cout)

    def bw(g):
        gcols = g.reshape(-1, cout)
        if w.requires_grad:
            _accumulate(w, (cols.T @ gcols).reshape(27, cin, cout))
        if b.requires_grad:
            _accumulate(b, gcols.sum(axis=0))
        if x.requires_grad:
            gpatch = (gcols @ wmat.T).reshape(bsz, d0, d1, d2, 27, cin)
            gpad = np.zeros_like(pad)
            k = 0
            for dz in range(3):
                for dy in range(3):
                    for dx in range(3):
                        gpad[:, dz:dz + d0, dy:dy + d1, dx:dx + d2, :] += gpatch[..., k, :]
                        k += 1
            _accumulate(x, gpad[:, 1:-1, 1:-1, 1:-1, :])

    return _node(out_data, (x, w, b), bw)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor):
    """Accumulate gradients of a scalar loss on every reachable tensor."""
    if loss.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    topo = []
    visited = set()
    stack = [(loss, False)]
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

    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)
