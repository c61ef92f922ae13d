"""Reverse-mode autodiff over numpy arrays.

Every differentiable operation records its inputs and a backward closure on
the output tensor; ``Tensor.backward`` replays the recorded tape (the DAG of
parent links) in reverse topological order, visiting each node exactly once.
Arrays are row-major and sequences are time-major (rows are timesteps).
Vectors are (1, k) rows, losses are 0-d scalars.

Only the broadcasting the model needs is supported: elementwise ops accept
equal shapes or a single-element operand, and row biases (1, k) broadcast
against (T, k).
"""

from __future__ import annotations

import contextlib

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf; the message names the op."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / decoding)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(data, op):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, grad={self.requires_grad})"

    def detach(self):
        out = Tensor(self.data)
        return out

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    def __rmul__(self, other):
        return mul(self, _lift(other, self.dtype))

    def __neg__(self):
        return mul(self, _lift(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- backward ----------------------------------------------------------
    def backward(self):
        """Reverse pass from a scalar loss; populates .grad on reachable nodes."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _lift(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _accumulate(tensor, grad):
    if not (tensor.requires_grad or tensor._parents):
        return
    if grad.shape != tensor.data.shape:
        # broadcast reduction: sum over the broadcast dimensions
        if tensor.data.size == 1:
            grad = grad.sum().reshape(tensor.data.shape)
        elif tensor.data.ndim == grad.ndim and tensor.data.shape[0] == 1:
            grad = grad.sum(axis=0, keepdims=True)
        else:
            raise ValueError(f"gradient shape {grad.shape} vs tensor {tensor.data.shape}")
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += grad


def _make(data, parents, op, backward):
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _broadcastable(a, b):
    return a.shape == b.shape or a.data.size == 1 or b.data.size == 1 or (
        a.data.ndim == b.data.ndim == 2 and a.shape[1] == b.shape[1] and 1 in (a.shape[0], b.shape[0])
    )


# -- elementwise -----------------------------------------------------------

def add(a, b):
    if not _broadcastable(a, b):
        raise ValueError(f"add: shapes {a.shape} and {b.shape} do not match")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), "add", backward)


def sub(a, b):
    if not _broadcastable(a, b):
        raise ValueError(f"sub: shapes {a.shape} and {b.shape} do not match")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(a.data - b.data, (a, b), "sub", backward)


def mul(a, b):
    if not _broadcastable(a, b):
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} do not match")

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), "mul", backward)


def elementwise(op, a, b):
    """Spec surface for the binary elementwise ops."""
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- linear algebra ---------------------------------------------------------

def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), "matmul", backward)


def transpose(a):
    def backward(g):
        _accumulate(a, g.T)

    return _make(a.data.T, (a,), "transpose", backward)


def concat(tensors, axis):
    shapes = [t.shape for t in tensors]
    ref = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ValueError(f"concat: inconsistent shapes {shapes} on axis {axis}")
    sizes = [s[axis] for s in shapes]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accumulate(t, np.take(g, range(lo, hi), axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat", backward)


def reshape(a, shape):
    old = a.data.shape

    def backward(g):
        _accumulate(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), "reshape", backward)


def squeeze(a):
    """Collapse a tensor with leading singleton axes into a (1, n) row."""
    return reshape(a, (1, a.data.size))


def rows(a, i, j=None):
    """Select rows [i, j) of a 2-D tensor (j=None keeps a single row)."""
    j = i + 1 if j is None else j
    if not (0 <= i < j <= a.shape[0]):
        raise IndexError(f"rows [{i}, {j}) out of range for shape {a.shape}")

    def backward(g):
        full = np.zeros_like(a.data)
        full[i:j] = g
        _accumulate(a, full)

    return _make(a.data[i:j], (a,), "rows", backward)


def cols(a, i, j):
    """Select columns [i, j) of a 2-D tensor."""
    if not (0 <= i < j <= a.shape[1]):
        raise IndexError(f"cols [{i}, {j}) out of range for shape {a.shape}")

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, i:j] = g
        _accumulate(a, full)

    return _make(a.data[:, i:j], (a,), "cols", backward)


def mode_product(t3, m, mode):
    """Mode-i product of a 3-tensor with a matrix, i in {1, 2}.

    The matrix contracts against the tensor's mode-i axis: its column count
    must equal the tensor's size along that mode.
    """
    if t3.data.ndim != 3 or m.data.ndim != 2:
        raise ValueError("mode_product expects a 3-tensor and a matrix")
    axis = mode - 1
    if mode not in (1, 2) or m.shape[1] != t3.shape[axis]:
        raise ValueError(
            f"mode_product: matrix {m.shape} does not contract mode {mode} of {t3.shape}"
        )
    if mode == 1:
        out = np.einsum("ja,abc->jbc", m.data, t3.data)

        def backward(g):
            _accumulate(t3, np.einsum("ja,jbc->abc", m.data, g))
            _accumulate(m, np.einsum("jbc,abc->ja", g, t3.data))

    else:
        out = np.einsum("jb,abc->ajc", m.data, t3.data)

        def backward(g):
            _accumulate(t3, np.einsum("jb,ajc->abc", m.data, g))
            _accumulate(m, np.einsum("ajc,abc->jb", g, t3.data))

    return _make(out, (t3, m), "mode_product", backward)


# -- activations -------------------------------------------------------------

def sigmoid(a):
    out = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                   np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    out = out.astype(a.dtype)

    def backward(g):
        _accumulate(a, g * out * (1.0 - out))

    return _make(out, (a,), "sigmoid", backward)


def tanh(a):
    out = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - out * out))

    return _make(out, (a,), "tanh", backward)


def softmax(a, axis):
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ValueError(f"softmax: axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(a, out * (g - inner))

    return _make(out, (a,), "softmax", backward)


def activation(op, a, axis=None):
    """Spec surface for the unary activations."""
    if op == "sigmoid":
        return sigmoid(a)
    if op == "tanh":
        return tanh(a)
    if op == "softmax":
        return softmax(a, axis if axis is not None else -1)
    raise ValueError(f"unknown activation {op!r}")


def clamp(a, lo, hi):
    """Clip values to [lo, hi]; gradient passes only where values were kept."""
    mask = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        _accumulate(a, g * mask.astype(a.dtype))

    return _make(np.clip(a.data, lo, hi), (a,), "clamp", backward)


# -- reductions and losses ----------------------------------------------------

def sum_all(a):
    def backward(g):
        _accumulate(a, np.full_like(a.data, float(g)))

    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), "sum", backward)


def reciprocal(a):
    if np.any(a.data == 0):
        raise ZeroDivisionError("reciprocal of zero")
    out = 1.0 / a.data

    def backward(g):
        _accumulate(a, -g * out * out)

    return _make(out.astype(a.dtype), (a,), "reciprocal", backward)


def cross_entropy(logits, target):
    """-log softmax(logits)[target] for a (1, V) or (V,) logit vector."""
    flat = logits.data.reshape(-1)
    if not 0 <= target < flat.size:
        raise IndexError(f"cross_entropy target {target} out of range {flat.size}")
    m = flat.max()
    lse = m + np.log(np.exp(flat - m).sum())

    def backward(g):
        p = np.exp(flat - lse)
        p[target] -= 1.0
        _accumulate(logits, (float(g) * p).reshape(logits.data.shape))

    return _make(np.asarray(lse - flat[target], dtype=logits.dtype), (logits,), "cross_entropy", backward)


def cross_entropy_rows(logits, targets):
    """Mean cross-entropy of (T, V) logits against T integer targets."""
    targets = np.asarray(targets, dtype=np.int64)
    t = logits.shape[0]
    if targets.shape != (t,):
        raise ValueError(f"targets shape {targets.shape} vs {t} logit rows")
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise IndexError("cross_entropy_rows: target id out of range")
    m = logits.data.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits.data - m).sum(axis=1))
    picked = logits.data[np.arange(t), targets]

    def backward(g):
        p = np.exp(logits.data - lse[:, None])
        p[np.arange(t), targets] -= 1.0
        _accumulate(logits, (float(g) / t) * p)

    return _make(np.asarray((lse - picked).mean(), dtype=logits.dtype), (logits,), "cross_entropy_rows", backward)


def l2(a, b):
    """Sum of squared differences."""
    if a.shape != b.shape:
        raise ValueError(f"l2: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data

    def backward(g):
        _accumulate(a, 2.0 * float(g) * diff)
        _accumulate(b, -2.0 * float(g) * diff)

    return _make(np.asarray((diff * diff).sum(), dtype=a.dtype), (a, b), "l2", backward)


def loss(op, *args):
    """Spec surface for the two losses."""
    if op == "cross_entropy":
        return cross_entropy(*args)
    if op == "l2":
        return l2(*args)
    raise ValueError(f"unknown loss {op!r}")


def embed(table, ids):
    """Row lookup into an embedding table; gradients scatter-add back."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.shape[0]):
        raise IndexError("embedding id out of range")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        _accumulate(table, full)

    return _make(table.data[ids], (table,), "embed", backward)


# -- fused GRU scan -----------------------------------------------------------

def gru_scan(x, wz, wr, wh, uz, ur, uh, bz, br, bh, h0=None):
    """Run a GRU over a (T, d) input, returning all (T, k) hidden states.

    One tape node for the whole scan; the backward closure is explicit
    backprop-through-time. Cell:
        z = sigmoid(x Wz + h Uz + bz)
        r = sigmoid(x Wr + h Ur + br)
        hc = tanh(x Wh + (r*h) Uh + bh)
        h' = (1 - z)*h + z*hc
    """
    t_len, d_in = x.shape
    if t_len < 1:
        raise ValueError("gru_scan: empty sequence")
    k = wz.shape[1]
    xz = x.data @ wz.data + bz.data
    xr = x.data @ wr.data + br.data
    xh = x.data @ wh.data + bh.data
    h = np.zeros((1, k), dtype=x.dtype) if h0 is None else h0.data
    zs = np.empty((t_len, k), dtype=x.dtype)
    rs = np.empty((t_len, k), dtype=x.dtype)
    hcs = np.empty((t_len, k), dtype=x.dtype)
    prev = np.empty((t_len, k), dtype=x.dtype)
    outs = np.empty((t_len, k), dtype=x.dtype)
    for t in range(t_len):
        prev[t] = h
        z = 1.0 / (1.0 + np.exp(-(xz[t] + h @ uz.data)))
        r = 1.0 / (1.0 + np.exp(-(xr[t] + h @ ur.data)))
        hc = np.tanh(xh[t] + (r * h) @ uh.data)
        h = (1.0 - z) * h + z * hc
        zs[t], rs[t], hcs[t], outs[t] = z, r, hc, h

    parents = [x, wz, wr, wh, uz, ur, uh, bz, br, bh]
    if h0 is not None:
        parents.append(h0)

    def backward(g):
        # per-step pre-activation grads are stacked so the U/W/b gradients
        # reduce to whole-sequence matmuls after the loop
        dxz = np.empty_like(xz)
        dxr = np.empty_like(xr)
        dxh = np.empty_like(xh)
        dh = np.zeros((1, k), dtype=x.dtype)
        for t in range(t_len - 1, -1, -1):
            dh = dh + g[t]
            z, r, hc, hp = zs[t], rs[t], hcs[t], prev[t : t + 1]
            dhc = dh * z
            dhp = dh * (1.0 - z)
            dah = dhc * (1.0 - hc * hc)
            dxh[t] = dah
            drh = dah @ uh.data.T
            dhp = dhp + drh * r
            dar = drh * hp * r * (1.0 - r)
            dxr[t] = dar
            dhp = dhp + dar @ ur.data.T
            daz = dh * (hc - hp) * z * (1.0 - z)
            dxz[t] = daz
            dh = dhp + daz @ uz.data.T
        _accumulate(x, dxz @ wz.data.T + dxr @ wr.data.T + dxh @ wh.data.T)
        _accumulate(wz, x.data.T @ dxz)
        _accumulate(wr, x.data.T @ dxr)
        _accumulate(wh, x.data.T @ dxh)
        _accumulate(uz, prev.T @ dxz)
        _accumulate(ur, prev.T @ dxr)
        _accumulate(uh, (rs * prev).T @ dxh)
        _accumulate(bz, dxz.sum(axis=0, keepdims=True))
        _accumulate(br, dxr.sum(axis=0, keepdims=True))
        _accumulate(bh, dxh.sum(axis=0, keepdims=True))
        if h0 is not None:
            _accumulate(h0, dh)

    return _make(outs, tuple(parents), "gru_scan", backward)
