"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation that touches a tensor with ``requires_grad`` records its
parents and a closure mapping the output gradient to parent gradients.
:func:`backward` orders the recorded operations topologically (the
:class:`Tape`) and replays them in reverse.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "tensor",
    "parameter",
    "matmul",
    "conv2d",
    "relu",
    "sigmoid",
    "softmax",
    "log_softmax",
    "batch_norm",
    "exp",
    "log",
    "sqrt",
    "huber",
    "concat",
    "stack",
    "take_rows",
    "cross",
    "row_dot",
    "row_norm",
    "backward",
    "grad_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return _add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _sub(self, _wrap(other))

    def __rsub__(self, other):
        return _sub(_wrap(other), self)

    def __neg__(self):
        return _unary(self, -self.data, lambda g: -g, "neg")

    def __mul__(self, other):
        return _mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _div(self, _wrap(other))

    def __rtruediv__(self, other):
        return _div(_wrap(other), self)

    def __pow__(self, exponent):
        exponent = float(exponent)
        x = self.data
        out = x ** exponent
        return _unary(self, out, lambda g: g * exponent * x ** (exponent - 1.0), "pow")

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, index):
        x = self.data
        out = x[index]

        def grad_fn(g):
            full = np.zeros_like(x)
            np.add.at(full, index, g)
            return full

        return _unary(self, np.array(out, dtype=np.float64), grad_fn, "getitem")

    # -- shape and reduction ------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.data.shape
        return _unary(self, self.data.reshape(shape), lambda g: g.reshape(src), "reshape")

    @property
    def T(self):
        return self.transpose()

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        inverse = np.argsort(axes)
        return _unary(self, self.data.transpose(axes), lambda g: g.transpose(inverse), "transpose")

    def sum(self, axis=None, keepdims=False):
        x = self.data
        out = x.sum(axis=axis, keepdims=keepdims)

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, x.shape).copy()

        return _unary(self, out, grad_fn, "sum")

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def _not_scalar(shape):
    raise ValueError(f"tensor of shape {shape} is not a scalar")


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def parameter(data):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _result(data, parents, grad_fns, op):
    """Build an output tensor; records parents only when a gradient can flow."""
    if len(parents) == 1:
        if parents[0].requires_grad:
            return Tensor(data, True, parents, grad_fns, op)
        return Tensor(data, op=op)
    live = [(p, fn) for p, fn in zip(parents, grad_fns) if p.requires_grad]
    if not live:
        return Tensor(data, op=op)
    return Tensor(
        data,
        requires_grad=True,
        _parents=tuple(p for p, _ in live),
        _backward=tuple(fn for _, fn in live),
        op=op,
    )


def _unary(x, out, grad_fn, op):
    return _result(out, (x,), (grad_fn,), op)


def _add(a, b):
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data,
        (a, b),
        (lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(g, sb)),
        "add",
    )


def _sub(a, b):
    sa, sb = a.shape, b.shape
    return _result(
        a.data - b.data,
        (a, b),
        (lambda g: _unbroadcast(g, sa), lambda g: -_unbroadcast(g, sb)),
        "sub",
    )


def _div(a, b):
    x, y = a.data, b.data
    out = x / y
    return _result(
        out,
        (a, b),
        (lambda g: _unbroadcast(g / y, x.shape), lambda g: _unbroadcast(-g * out / y, y.shape)),
        "div",
    )


def _mul(a, b):
    x, y = a.data, b.data
    return _result(
        x * y,
        (a, b),
        (lambda g: _unbroadcast(g * y, x.shape), lambda g: _unbroadcast(g * x, y.shape)),
        "mul",
    )


# -- primitives -------------------------------------------------------------


def matmul(a, b):
    """Matrix product of ``a`` [m x k] and ``b`` [k x n]."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    x, y = a.data, b.data
    return _result(x @ y, (a, b), (lambda g: g @ y.T, lambda g: x.T @ g), "matmul")


def _same_padding(z):
    total = z - 1
    return total // 2, total - total // 2


def conv2d(inp, kernel):
    """Stride-1 cross-correlation with "same" padding.

    ``inp`` is [C_in, H, W], ``kernel`` is [C_out, C_in, z, z]. Even kernels
    pad ``floor((z-1)/2)`` on the leading side and the remainder on the
    trailing side, so the output keeps the input's spatial size.
    """
    inp, kernel = _wrap(inp), _wrap(kernel)
    if inp.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects [C,H,W] and [O,C,z,z], got {inp.shape} and {kernel.shape}")
    c_in, h, w = inp.shape
    c_out, k_in, z, z2 = kernel.shape
    if k_in != c_in:
        raise DimensionError(f"conv2d channel mismatch: input {inp.shape}, kernel {kernel.shape}")
    if z != z2 or z < 1:
        raise DimensionError(f"conv2d needs a square kernel, got {kernel.shape}")
    lead, trail = _same_padding(z)
    padded = np.zeros((c_in, h + z - 1, w + z - 1))
    padded[:, lead : lead + h, lead : lead + w] = inp.data
    k = kernel.data
    out = np.zeros((c_out, h, w))
    for dy in range(z):
        for dx in range(z):
            out += np.einsum("oc,chw->ohw", k[:, :, dy, dx], padded[:, dy : dy + h, dx : dx + w])

    def grad_input(g):
        gp = np.zeros_like(padded)
        for dy in range(z):
            for dx in range(z):
                gp[:, dy : dy + h, dx : dx + w] += np.einsum("oc,ohw->chw", k[:, :, dy, dx], g)
        return gp[:, lead : lead + h, lead : lead + w]

    def grad_kernel(g):
        gk = np.zeros_like(k)
        for dy in range(z):
            for dx in range(z):
                gk[:, :, dy, dx] = np.einsum("ohw,chw->oc", g, padded[:, dy : dy + h, dx : dx + w])
        return gk

    return _result(out, (inp, kernel), (grad_input, grad_kernel), "conv2d")


def relu(x):
    x = _wrap(x)
    on = x.data > 0
    return _unary(x, np.where(on, x.data, 0.0), lambda g: g * on, "relu")


def sigmoid(x):
    x = _wrap(x)
    # exp(-log(1 + e^-x)) never overflows
    out = np.exp(-np.logaddexp(0.0, -x.data))
    return _unary(x, out, lambda g: g * out * (1.0 - out), "sigmoid")


def softmax(x):
    """Softmax over the last axis, max-shifted."""
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return out * (g - (g * out).sum(axis=-1, keepdims=True))

    return _unary(x, out, grad_fn, "softmax")


def log_softmax(x):
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)
    return _unary(x, out, lambda g: g - probs * g.sum(axis=-1, keepdims=True), "log_softmax")


def exp(x):
    x = _wrap(x)
    out = np.exp(np.minimum(x.data, 700.0))
    return _unary(x, out, lambda g: g * out, "exp")


def log(x):
    x = _wrap(x)
    v = x.data
    return _unary(x, np.log(v), lambda g: g / v, "log")


def sqrt(x):
    x = _wrap(x)
    out = np.sqrt(x.data)
    return _unary(x, out, lambda g: g * 0.5 / out, "sqrt")


def huber(x, delta=1.0):
    """Elementwise Huber penalty: quadratic inside ``delta``, linear beyond."""
    x = _wrap(x)
    v = x.data
    inside = np.abs(v) <= delta
    out = np.where(inside, 0.5 * v * v, delta * (np.abs(v) - 0.5 * delta))
    return _unary(x, out, lambda g: g * np.where(inside, v, delta * np.sign(v)), "huber")


def batch_norm(x, gamma, beta, eps=1e-5):
    """Normalize each column of ``x`` [rows x features] over rows, then scale and shift.

    Uses the biased (population) variance and always the statistics of the
    current input. With a single row the centered value is identically zero,
    so the output collapses to ``beta``.
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    v = x.data
    centered = v - v.mean(axis=0, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=0, keepdims=True) + eps)
    xhat = centered * inv_std
    g = gamma.data

    def grad_x(dy):
        dxhat = dy * g
        return inv_std * (dxhat - dxhat.mean(axis=0, keepdims=True) - xhat * (dxhat * xhat).mean(axis=0, keepdims=True))

    out = _result(
        xhat * g + beta.data,
        (x, gamma, beta),
        (
            grad_x,
            lambda dy: _unbroadcast(dy * xhat, gamma.shape),
            lambda dy: _unbroadcast(dy, beta.shape),
        ),
        "batch_norm",
    )
    return out


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def slicer(lo, hi):
        def grad_fn(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return grad_fn

    fns = [slicer(bounds[i], bounds[i + 1]) for i in range(len(tensors))]
    return _result(out, tensors, fns, "concat")


def stack(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    fns = [(lambda g, i=i: np.take(g, i, axis=axis)) for i in range(len(tensors))]
    return _result(out, tensors, fns, "stack")


def take_rows(x, index):
    """Gather rows ``x[index]``; repeated indices accumulate in the backward pass."""
    x = _wrap(x)
    index = np.asarray(index, dtype=np.intp)
    src = x.data

    def grad_fn(g):
        full = np.zeros_like(src)
        np.add.at(full, index, g)
        return full

    return _unary(x, src[index], grad_fn, "take_rows")


def cross(a, b):
    """Row-wise cross product of two [n x 3] tensors."""
    a, b = _wrap(a), _wrap(b)
    x, y = a.data, b.data
    return _result(_cross3(x, y), (a, b), (lambda g: _cross3(y, g), lambda g: _cross3(g, x)), "cross")


def row_dot(a, b):
    """Row-wise inner product of two [n x d] tensors, as an [n x 1] column."""
    a, b = _wrap(a), _wrap(b)
    x, y = a.data, b.data
    out = (x * y).sum(axis=1, keepdims=True)
    return _result(out, (a, b), (lambda g: g * y, lambda g: g * x), "row_dot")


def row_norm(a, eps=0.0):
    """Row-wise ``sqrt(|a_i|^2 + eps)`` as an [n x 1] column; ``eps > 0`` keeps it smooth at 0."""
    a = _wrap(a)
    x = a.data
    out = np.sqrt((x * x).sum(axis=1, keepdims=True) + eps)
    return _unary(a, out, lambda g: g * x / out, "row_norm")


def _cross3(x, y):
    out = np.empty(np.broadcast_shapes(x.shape, y.shape))
    out[:, 0] = x[:, 1] * y[:, 2] - x[:, 2] * y[:, 1]
    out[:, 1] = x[:, 2] * y[:, 0] - x[:, 0] * y[:, 2]
    out[:, 2] = x[:, 0] * y[:, 1] - x[:, 1] * y[:, 0]
    return out


# -- reverse pass -------------------------------------------------------------


class Tape:
    """Operations reachable from an output, in topological order.

    Inputs always precede the operations that consume them, so replaying
    ``reversed(tape.nodes)`` visits every operation exactly once after all of
    its consumers.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def record(cls, output):
        order, seen = [], set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable ``requires_grad`` tensor."""
    if loss.size != 1:
        raise ValueError(f"backward needs a single-element loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.record(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, fn in zip(node._parents, node._backward):
            pg = fn(g)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


Tensor.backward = backward


def grad_check(f, x, eps=1e-5, floor=1e-4):
    """Largest relative disagreement between tape and central-difference gradients.

    ``x`` is a tensor or a sequence of tensors; each is perturbed in place one
    coordinate at a time and restored. Relative error per coordinate is
    ``|tape - fd| / max(|tape|, |fd|, floor)``: below ``floor`` the comparison
    becomes absolute, since the difference quotient itself carries rounding
    noise of order ``1e-16 * |f| / eps``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    loss = f(x)
    backward(loss)
    for t in xs:
        t.requires_grad = False
    worst = 0.0
    for t in xs:
        tape_grad = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f(x).item()
            flat[i] = orig - eps
            down = f(x).item()
            flat[i] = orig
            fd = (up - down) / (2.0 * eps)
            a = tape_grad.reshape(-1)[i]
            err = abs(a - fd) / max(abs(a), abs(fd), floor)
            worst = max(worst, err)
    for t in xs:
        t.requires_grad = True
    return worst
