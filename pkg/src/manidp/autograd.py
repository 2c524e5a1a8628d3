"""Dense tensors with reverse-mode automatic differentiation.

Everything downstream (gated convolutions, saliency controllers, the
manifold losses) is composed from the primitives in this module. Tensors
carry float32 data by default; wrap code in ``default_dtype(np.float64)``
to run the high-precision mode used for gradient verification.

Conventions:
  * image tensors are NCHW, weights are [out, in, k, k]
  * convolution is cross-correlation (no kernel flip)
  * any division guards its denominator with ``EPS`` so documented
    operations never produce NaN/Inf from finite inputs
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

EPS = 1e-8

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the offending axis."""


def current_dtype():
    """The dtype handed to new leaf tensors built from non-float data."""
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype given to newly created leaf tensors."""
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference mode)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """A dense n-dimensional array with an optional gradient slot.

    ``data`` is immutable by convention once the tensor has been consumed
    by an operation; ``grad`` is written only by :func:`backward` and by
    the optimizer's zeroing step.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, like=self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, like=self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, like=self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other, like=self))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, like=self))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None) -> "Tensor":
        return tensor_mean(self, axis=axis)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


def _as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(value), dtype=dtype)


def apply_op(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Record one primitive operation.

    ``vjp`` maps the output gradient to a tuple of per-parent gradient
    contributions (``None`` for parents that need no gradient). This is the
    extension point other modules use to define new primitives (the gate).
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._vjp = None
    out.requires_grad = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


# -- backward pass -----------------------------------------------------------


def _topological_order(root: Tensor) -> list:
    """Execution-ordered list of recorded operations reachable from root.

    Iterative postorder: every node appears after all of its parents, so the
    reversed list replays adjoints in valid order and each tensor's gradient
    is read exactly once per consuming operation.
    """
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from root.

    Repeated calls without zeroing accumulate. The root must be scalar.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    order = _topological_order(root)
    flowing: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        grad = flowing.pop(id(node), None)
        if grad is None:
            continue
        if node.requires_grad:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
        if node._vjp is None:
            continue
        for parent, contribution in zip(node._parents, node._vjp(grad)):
            if contribution is None or not parent.requires_grad:
                continue
            held = flowing.get(id(parent))
            flowing[id(parent)] = contribution if held is None else held + contribution


# -- broadcasting helpers ------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeezed = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if squeezed:
        grad = grad.sum(axis=squeezed, keepdims=True)
    return grad


def _guard_denominator(values: np.ndarray) -> np.ndarray:
    # Adds EPS to the denominator's magnitude, preserving sign.
    return np.where(values >= 0, values + EPS, values - EPS)


# -- elementwise and reduction primitives -------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    denom = _guard_denominator(b.data)
    out = a.data / denom

    def vjp(g):
        return (
            _unbroadcast(g / denom, a.shape),
            _unbroadcast(-g * a.data / (denom * denom), b.shape),
        )

    return apply_op(out, (a, b), vjp)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    # Adjoint denominator is guarded so the Frobenius root at zero stays finite.
    return apply_op(out, (x,), lambda g: (g * (0.5 / (out + EPS)),))


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=False),)

    return apply_op(np.asarray(out, dtype=x.data.dtype), (x,), vjp)


def tensor_mean(x: Tensor, axis=None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    scale = np.asarray(1.0 / count, dtype=x.data.dtype)
    out = x.data.mean(axis=axis)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * scale, x.shape).astype(x.data.dtype, copy=False),)

    return apply_op(np.asarray(out, dtype=x.data.dtype), (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return apply_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-D tensor, got shape {x.shape}")
    return apply_op(np.ascontiguousarray(x.data.T), (x,), lambda g: (g.T,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: inner axes disagree, a has {a.shape[1]} columns (axis 1) "
            f"but b has {b.shape[0]} rows (axis 0)"
        )
    return apply_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# -- nonlinearities ------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    # Subgradient at exactly 0 is 0.
    out = np.maximum(x.data, 0)
    positive = x.data > 0
    return apply_op(out, (x,), lambda g: (g * positive,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)
    return apply_op(out, (x,), lambda g: (g * out * (1.0 - out),))


# -- network primitives --------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """out[i, j] = sum_k x[i, k] * weight[j, k] + bias[j]."""
    if x.data.ndim != 2:
        raise ShapeError(f"linear: input must be 2-D [batch, features], got {x.shape}")
    if weight.data.ndim != 2:
        raise ShapeError(f"linear: weight must be 2-D [out, in], got {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear: feature axis disagrees, input has {x.shape[1]} features (axis 1) "
            f"but weight expects {weight.shape[1]}"
        )
    if bias.data.ndim != 1 or bias.shape[0] != weight.shape[0]:
        raise ShapeError(
            f"linear: bias shape {bias.shape} does not match weight output axis "
            f"({weight.shape[0]})"
        )
    out = x.data @ weight.data.T + bias.data

    def vjp(g):
        return (g @ weight.data, g.T @ x.data, g.sum(axis=0))

    return apply_op(out, (x, weight, bias), vjp)


def _conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _conv_windows(padded: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # View of shape [B, C, oh, ow, k, k]; no copy.
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(2, 3))
    return win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Batched 2-D cross-correlation, NCHW input and [out, in, k, k] weight."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D [B, C, H, W], got {x.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D [out, in, k, k], got {weight.shape}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    b, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if kh != kw:
        raise ShapeError(f"conv2d: only square kernels supported, got {kh}x{kw}")
    k = kh
    if cin != cin_w:
        raise ShapeError(
            f"conv2d: input channel axis (axis 1) has size {cin} but weight expects {cin_w}"
        )
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel {k} exceeds padded spatial extent "
            f"({h + 2 * padding}x{w + 2 * padding})"
        )
    oh = _conv_output_size(h, k, stride, padding)
    ow = _conv_output_size(w, k, stride, padding)

    if padding > 0:
        padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        padded = x.data
    windows = _conv_windows(padded, k, stride, oh, ow)
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def vjp(g):
        d_weight = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        d_padded = np.zeros_like(padded)
        for i in range(k):
            row = slice(i, i + (oh - 1) * stride + 1, stride)
            for j in range(k):
                col = slice(j, j + (ow - 1) * stride + 1, stride)
                contrib = np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0]))
                d_padded[:, :, row, col] += contrib.transpose(0, 3, 1, 2)
        if padding > 0:
            d_x = d_padded[:, :, padding : padding + h, padding : padding + w]
        else:
            d_x = d_padded
        return (d_x, d_weight)

    return apply_op(out, (x, weight), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, C] spatial mean."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: input must be 4-D, got {x.shape}")
    b, c, h, w = x.shape
    scale = np.asarray(1.0 / (h * w), dtype=x.data.dtype)
    out = x.data.mean(axis=(2, 3))

    def vjp(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], x.shape).astype(x.data.dtype, copy=False),)

    return apply_op(out, (x,), vjp)


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each channel of [B, C, H, W] by the matching entry of [B, C]."""
    if x.data.ndim != 4:
        raise ShapeError(f"channel_scale: input must be 4-D, got {x.shape}")
    if s.data.ndim != 2:
        raise ShapeError(f"channel_scale: scale must be 2-D [B, C], got {s.shape}")
    if x.shape[0] != s.shape[0]:
        raise ShapeError(
            f"channel_scale: batch axis (axis 0) disagrees, {x.shape[0]} vs {s.shape[0]}"
        )
    if x.shape[1] != s.shape[1]:
        raise ShapeError(
            f"channel_scale: channel axis (axis 1) disagrees, {x.shape[1]} vs {s.shape[1]}"
        )
    scale = s.data[:, :, None, None]
    out = x.data * scale

    def vjp(g):
        return (g * scale, (g * x.data).sum(axis=(2, 3)))

    return apply_op(out, (x, s), vjp)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-instance -log softmax(logits)[label], max-subtracted for stability."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-D [B, K], got {logits.shape}")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"softmax_cross_entropy: labels shape {labels.shape} does not match "
            f"batch axis ({logits.shape[0]})"
        )
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = int(np.argmax((labels < 0) | (labels >= k)))
        raise ValueError(
            f"softmax_cross_entropy: label {int(labels[bad])} at index {bad} "
            f"is outside [0, {k})"
        )
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    sum_exp = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(sum_exp)
    rows = np.arange(labels.shape[0])
    losses = -log_probs[rows, labels]

    def vjp(g):
        d = exp / sum_exp
        d[rows, labels] -= 1.0
        return (d * g[:, None],)

    return apply_op(losses, (logits,), vjp)


# -- verification helper -------------------------------------------------------


def numeric_gradient(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient of a scalar-valued ``fn`` w.r.t. ``tensor``.

    Evaluates ``fn`` only through its forward pass, so it stays independent
    of the adjoints it is used to verify.
    """
    flat = tensor.data.reshape(-1)
    grad = np.zeros_like(flat, dtype=np.float64)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        f_plus = float(fn().data)
        flat[i] = original - h
        f_minus = float(fn().data)
        flat[i] = original
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(tensor.shape)
