"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation records its inputs and a local-gradient closure on the
output tensor; ``backward`` replays the records in reverse topological
order. Gradients accumulate additively across uses of a tensor and are
cleared explicitly (see ``clear_grads``).

All math is float64. Ops treat the last axis as the feature axis and
broadcast over any leading batch axes.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, NumericError, ShapeError, UsageError

LAYER_NORM_EPS = 1e-5
FD_STEP = 1e-5


class Tensor:
    """Dense float64 array plus optional gradient buffer.

    ``requires_grad`` marks tensors that should receive gradients; it is
    propagated to results of operations so backward only walks paths that
    end in trainable leaves.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        # C-contiguous storage keeps BLAS kernel choices, and therefore
        # bitwise results, independent of where the data came from
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _swap(x):
    return np.swapaxes(x, -1, -2)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes broadcast like ``np.matmul``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def back(out=None):
        g = out.grad
        _accum(a, _unbroadcast(g @ _swap(b.data), a.data.shape))
        _accum(b, _unbroadcast(_swap(a.data) @ g, b.data.shape))

    out = _result(out_data, (a, b), None)
    if out.requires_grad:
        out._backward = lambda: back(out)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def back(out=None):
        g = out.grad
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    out = _result(out_data, (a, b), None)
    if out.requires_grad:
        out._backward = lambda: back(out)
    return out


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _result(-a.data, (a,), None)
    if out.requires_grad:
        out._backward = lambda: _accum(a, -out.grad)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    out = _result(a.data * s, (a,), None)
    if out.requires_grad:
        out._backward = lambda: _accum(a, out.grad * s)
    return out


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Entrywise product of same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"hadamard shapes differ: {a.data.shape} vs {b.data.shape}")
    out_data = a.data * b.data

    def back(out=None):
        g = out.grad
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    out = _result(out_data, (a, b), None)
    if out.requires_grad:
        out._backward = lambda: back(out)
    return out


def concat(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def back(out=None):
        g = out.grad
        offsets = np.cumsum(sizes)[:-1]
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            _accum(t, piece)

    out = _result(out_data, tuple(tensors), None)
    if out.requires_grad:
        out._backward = lambda: back(out)
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    a = _as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out_data = a.data[idx].copy()

    def back(out=None):
        g = np.zeros_like(a.data)
        g[idx] = out.grad
        _accum(a, g)

    out = _result(out_data, (a,), None)
    if out.requires_grad:
        out._backward = lambda: back(out)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    out = _result(a.data.reshape(shape).copy(), (a,), None)
    if out.requires_grad:
        out._backward = lambda: _accum(a, out.grad.reshape(a.data.shape))
    return out


def swap_last_axes(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _result(_swap(a.data).copy(), (a,), None)
    if out.requires_grad:
        out._backward = lambda: _accum(a, _swap(out.grad))
    return out


def expand_batch(a: Tensor, batch: int) -> Tensor:
    """Replicate a tensor along a new leading batch axis."""
    a = _as_tensor(a)
    out_data = np.broadcast_to(a.data, (batch,) + a.data.shape).copy()
    out = _result(out_data, (a,), None)
    if out.requires_grad:
        out._backward = lambda: _accum(a, out.grad.sum(axis=0))
    return out


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(out=None):
        g = out.grad
        inner = (g * y).sum(axis=-1, keepdims=True)
        _accum(a, (g - inner) * y)

    out = _result(y, (a,), None)
    if out.requires_grad:
        out._backward = lambda: back(out)
    return out


_NONLINEARITIES = ("relu", "gelu", "sigmoid")


def nonlinearity(a: Tensor, kind: str) -> Tensor:
    """Entrywise relu / gelu (tanh form) / sigmoid with analytic backward."""
    a = _as_tensor(a)
    x = a.data
    if kind == "relu":
        y = np.maximum(x, 0.0)
        deriv = (x > 0).astype(np.float64)
    elif kind == "sigmoid":
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        deriv = y * (1.0 - y)
    elif kind == "gelu":
        c = np.sqrt(2.0 / np.pi)
        u = c * (x + 0.044715 * x**3)
        t = np.tanh(u)
        y = 0.5 * x * (1.0 + t)
        du = c * (1.0 + 3 * 0.044715 * x**2)
        deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du
    else:
        raise ConfigError(f"unknown nonlinearity kind: {kind!r} (expected one of {_NONLINEARITIES})")

    out = _result(y, (a,), None)
    if out.requires_grad:
        out._backward = lambda: _accum(a, out.grad * deriv)
    return out


def relu(a):
    return nonlinearity(a, "relu")


def gelu(a):
    return nonlinearity(a, "gelu")


def sigmoid(a):
    return nonlinearity(a, "sigmoid")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Standardize each last-axis row, then apply the affine (gain, bias).

    ``eps`` is added to the population variance so constant rows map to
    zero instead of dividing by zero.
    """
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} do not match feature dim {d}")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def back(out=None):
        g = out.grad
        lead = tuple(range(g.ndim - 1))
        _accum(bias, g.sum(axis=lead))
        _accum(gain, (g * xhat).sum(axis=lead))
        dxhat = g * gain.data
        term = dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(a, term * inv)

    out = _result(out_data, (a, gain, bias), None)
    if out.requires_grad:
        out._backward = lambda: back(out)
    return out


def mean_axis(a: Tensor, axis: int) -> Tensor:
    a = _as_tensor(a)
    n = a.data.shape[axis]
    out = _result(a.data.mean(axis=axis), (a,), None)
    if out.requires_grad:
        out._backward = lambda: _accum(a, np.broadcast_to(np.expand_dims(out.grad / n, axis), a.data.shape))
    return out


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _result(a.data.sum(), (a,), None)
    if out.requires_grad:
        out._backward = lambda: _accum(a, np.full_like(a.data, float(out.grad)))
    return out


def mean_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _result(a.data.mean(), (a,), None)
    if out.requires_grad:
        out._backward = lambda: _accum(a, np.full_like(a.data, float(out.grad) / a.data.size))
    return out


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; backward scatter-adds into the table."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    out_data = table.data[ids]

    def back(out=None):
        g = np.zeros_like(table.data)
        np.add.at(g, ids, out.grad)
        _accum(table, g)

    out = _result(out_data, (table,), None)
    if out.requires_grad:
        out._backward = lambda: back(out)
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ShapeError(f"cross_entropy expects (batch, classes) logits and (batch,) labels, got {logits.data.shape} and {labels.shape}")
    n = logits.data.shape[0]
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out_data = -logp[np.arange(n), labels].mean()

    def back(out=None):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        _accum(logits, p * (float(out.grad) / n))

    out = _result(out_data, (logits,), None)
    if out.requires_grad:
        out._backward = lambda: back(out)
    return out


# ---------------------------------------------------------------------------
# backward pass


class GradTape:
    """Reverse-topological record of the operations reaching a root tensor.

    Built by walking parent links; the construction order guarantees every
    node's inputs precede it, and ``run`` visits each node exactly once.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "GradTape":
        order = []
        visited = {id(root)}
        stack = [(root, iter(root._parents))]
        while stack:
            node, it = stack[-1]
            pushed = False
            for parent in it:
                if id(parent) not in visited:
                    visited.add(id(parent))
                    stack.append((parent, iter(parent._parents)))
                    pushed = True
                    break
            if not pushed:
                order.append(node)
                stack.pop()
        return cls(order)

    def run(self):
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward()


def backward(loss: Tensor):
    """Populate gradients of every requires_grad tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise UsageError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.data)
    GradTape.trace(loss).run()


def clear_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# masked weights


class MaskedWeight:
    """A dense weight paired with a fixed binary mask.

    The effective weight is the entrywise product weight * mask, so
    gradients vanish exactly where the mask is zero and those entries are
    never moved by an optimizer step.
    """

    def __init__(self, weight: Tensor, mask):
        mask_arr = np.asarray(mask, dtype=np.float64)
        if mask_arr.shape != weight.data.shape:
            raise ShapeError(f"mask shape {mask_arr.shape} does not match weight shape {weight.data.shape}")
        if not np.all((mask_arr == 0.0) | (mask_arr == 1.0)):
            raise ConfigError("mask entries must be exactly 0 or 1")
        self.weight = weight
        self.mask = Tensor(mask_arr)

    @property
    def trainable_count(self) -> int:
        return int(self.mask.data.sum())

    def effective(self) -> Tensor:
        return hadamard(self.weight, self.mask)


# ---------------------------------------------------------------------------
# gradient checking


class GradCheckReport:
    """Per-tensor comparison of analytic gradients against central differences."""

    def __init__(self, per_tensor, tol):
        self.per_tensor = per_tensor  # label -> max relative error
        self.tol = tol

    @property
    def max_rel_err(self) -> float:
        return max(self.per_tensor.values()) if self.per_tensor else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def __repr__(self):
        status = "pass" if self.passed else "FAIL"
        return f"GradCheckReport({status}, max_rel_err={self.max_rel_err:.3e}, tol={self.tol:.1e})"


def grad_check(f, inputs, step: float = FD_STEP, tol: float = 1e-5,
               max_coords: int = 64, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of ``f(*inputs)`` to central differences.

    ``f`` must be deterministic (verified by evaluating twice) and return a
    scalar Tensor. For tensors larger than ``max_coords`` a seeded random
    subset of coordinates is probed. Relative error uses the denominator
    max(|analytic|, |numeric|, 1e-6) so near-zero gradients are judged on
    an absolute scale.
    """
    if step <= 0:
        raise UsageError("finite-difference step must be positive")
    inputs = list(inputs)
    first = f(*inputs).data.copy()
    second = f(*inputs).data.copy()
    if not np.array_equal(first, second):
        raise NumericError("grad_check target is non-deterministic: repeated evaluation differs")

    clear_grads(inputs)
    out = f(*inputs)
    if out.data.size != 1:
        raise UsageError("grad_check target must return a scalar")
    backward(out)

    rng = np.random.default_rng(seed)
    per_tensor = {}
    for idx, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, size=max_coords, replace=False))
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            f_plus = float(f(*inputs).data)
            flat[c] = orig - step
            f_minus = float(f(*inputs).data)
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic.reshape(-1)[c])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
        label = t.name if t.name else f"input{idx}"
        per_tensor[label] = worst
    return GradCheckReport(per_tensor, tol)
