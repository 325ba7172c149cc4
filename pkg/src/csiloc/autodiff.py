"""Small reverse-mode differentiation engine over dense numpy arrays.

Ops work on the trailing two axes ("rows" x "columns") and broadcast over any
leading batch axes, which is all the localization networks need.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf", parents=(), dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = tuple(parents)
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _node(data: np.ndarray, op: str, parents, backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from {op}")
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), op=op, parents=parents)
    if out.requires_grad:
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad = t.grad + g


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _node(out_data, "matmul", (a, b), backward)


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out_data = a.data + b.data
    except ValueError as exc:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}") from exc

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(out_data, "add", (a, b), backward)


def add_bias(x, bias) -> Tensor:
    x, bias = _as_tensor(x), _as_tensor(bias)
    if bias.data.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise ValueError(f"bias shape {bias.shape} does not match last axis of {x.shape}")
    out = add(x, bias)
    out.op = "add_bias"
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}")
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _node(out_data, "mul", (a, b), backward)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0).astype(x.data.dtype)

    def backward(g):
        _accumulate(x, g * mask)

    return _node(out_data, "relu", (x,), backward)


def softmax_rows(x) -> Tensor:
    """Softmax along the last axis, max-subtracted before exponentiation."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        # J^T g for J = diag(p) - p p^T, one row at a time
        _accumulate(x, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _node(p, "softmax_rows", (x,), backward)


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = _as_tensor(x)
    if x.data.ndim < 2:
        raise ValueError("transpose needs at least 2 axes")

    def backward(g):
        _accumulate(x, np.swapaxes(g, -1, -2))

    return _node(np.swapaxes(x.data, -1, -2).copy(), "transpose", (x,), backward)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    out_data = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _node(out_data, "reshape", (x,), backward)


def mean_rows(x) -> Tensor:
    """Average over the second-to-last axis: (..., T, d) -> (..., d)."""
    x = _as_tensor(x)
    if x.data.ndim < 2:
        raise ValueError("mean_rows needs at least 2 axes")
    T = x.shape[-2]

    def backward(g):
        _accumulate(x, np.broadcast_to(np.expand_dims(g, -2), x.shape) / T)

    return _node(x.data.mean(axis=-2), "mean_rows", (x,), backward)


def scale(x, alpha: float) -> Tensor:
    x = _as_tensor(x)
    alpha = x.data.dtype.type(alpha)

    def backward(g):
        _accumulate(x, g * alpha)

    return _node(x.data * alpha, "scale", (x,), backward)


def sum_all(x) -> Tensor:
    x = _as_tensor(x)

    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _node(np.asarray(x.data.sum(), dtype=x.data.dtype), "sum", (x,), backward)


def mse(pred, target) -> Tensor:
    """Mean of squared entrywise differences."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        _accumulate(pred, g * 2.0 * diff / n)
        _accumulate(target, -g * 2.0 * diff / n)

    return _node(np.asarray(np.mean(diff * diff), dtype=diff.dtype), "mse", (pred, target), backward)


def topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad=None) -> None:
    """Populate ``.grad`` on every differentiable node feeding ``loss``.

    Gradients are reset, not accumulated across calls. ``grad`` seeds the pass
    and defaults to 1 for a scalar loss.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=loss.data.dtype)
        if grad.shape != loss.shape:
            raise ValueError(f"upstream gradient shape {grad.shape} != output shape {loss.shape}")
    order = topological_order(loss)
    for node in order:
        node.grad = None
    if not loss.requires_grad:
        return
    loss.grad = grad
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_check(f, xs, eps: float = 1e-5) -> float:
    """Max relative error between backward's gradient and central differences.

    ``f`` maps a list of Tensors to a scalar Tensor; ``xs`` are the float64
    arrays at which to check. Relative error uses max(|a|, |b|, 1e-8).
    """
    xs = [np.array(x, dtype=np.float64) for x in xs]
    params = [parameter(x) for x in xs]
    out = f(params)
    backward(out)
    analytic = [np.zeros_like(x) if p.grad is None else p.grad for x, p in zip(xs, params)]

    worst = 0.0
    for i, x in enumerate(xs):
        flat = x.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = float(f([constant(v) for v in xs]).data)
            flat[j] = orig - eps
            down = float(f([constant(v) for v in xs]).data)
            flat[j] = orig
            numeric = (up - down) / (2 * eps)
            a = float(analytic[i].reshape(-1)[j])
            if not (np.isfinite(numeric) and np.isfinite(a)):
                raise FloatingPointError("non-finite value in gradient check")
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamState) -> AdamState:
    """In-place Adam update with bias correction. Missing gradients count as zero."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("parameter, gradient and state lists differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch for parameter {p.shape}: grad {g.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype)
    return state
