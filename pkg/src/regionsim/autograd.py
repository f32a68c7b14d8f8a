"""Dense float64 tensors with reverse-mode gradients.

Implements exactly the closed set of operations the retrieval model needs
(convolution, ReLU, matmul, softmax, L2 normalization, dot products,
soft cross-entropy, softplus) plus the shape plumbing to connect them.
Backward accumulation follows the graph construction order, so repeated
runs are bitwise deterministic.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateInputError, EvaluationError, ParameterError, ShapeError

LOG_FLOOR = 1e-30
NORM_FLOOR = 1e-12
SMOOTH_EPS = 1e-3


class Tensor:
    """A numpy array node in a dynamically built computation graph.

    ``grad`` is allocated lazily during backward; leaf parameters created
    through :func:`parameter` carry a zero gradient buffer from the start so
    frozen parameters always read as exactly zero.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse-mode gradient accumulation from a scalar output."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # Arithmetic sugar used by the model code; all shapes broadcast.
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64))


def parameter(data) -> Tensor:
    """A trainable leaf with a preallocated zero gradient buffer."""
    t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
    t.grad = np.zeros_like(t.data)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(g * c)

    return Tensor(a.data * c, _parents=(a,), _backward=backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D @ 2-D or 2-D @ 1-D product."""
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise ShapeError(f"matmul expects (2d, 1d|2d), got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if b.ndim == 1:
            if a.requires_grad:
                a._accumulate(np.outer(g, b.data))
            if b.requires_grad:
                b._accumulate(a.data.T @ g)
        else:
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose expects a matrix")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.T)

    return Tensor(a.data.T, _parents=(a,), _backward=backward)


def reshape(a: Tensor, shape) -> Tensor:
    in_shape = a.data.shape
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(in_shape))

    return Tensor(out_data, _parents=(a,), _backward=backward)


def slice_view(a: Tensor, key) -> Tensor:
    """Basic slicing; backward scatters into the sliced range."""
    out_data = a.data[key]

    def backward(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[key] += g

    return Tensor(out_data, _parents=(a,), _backward=backward)


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    out_data = a.data.sum(axis=axis)

    def backward(g):
        if a.requires_grad:
            if axis is None:
                a._accumulate(np.full_like(a.data, float(g)))
            else:
                a._accumulate(np.expand_dims(g, axis=axis) * np.ones_like(a.data))

    return Tensor(out_data, _parents=(a,), _backward=backward)


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-length vectors into a matrix; row i backprops to input i."""
    if not tensors:
        raise ShapeError("stack_rows needs at least one vector")
    out_data = np.stack([t.data for t in tensors], axis=0)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(g[i])

    return Tensor(out_data, _parents=tuple(tensors), _backward=backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return Tensor(a.data * mask, _parents=(a,), _backward=backward)


def softplus(a: Tensor) -> Tensor:
    out_data = np.logaddexp(0.0, a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / (1.0 + np.exp(-a.data)))

    return Tensor(out_data, _parents=(a,), _backward=backward)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot expects equal-length vectors, got {a.shape}, {b.shape}")
    out_data = np.dot(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along one axis."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * p).sum(axis=axis, keepdims=True)
            a._accumulate(p * (g - inner))

    return Tensor(p, _parents=(a,), _backward=backward)


def softmax_temp(v: Tensor | np.ndarray, tau: float) -> Tensor:
    """Temperature-scaled softmax over a vector of scores.

    Low tau sharpens the distribution; the output always sums to one and
    keeps the argmax of the input.
    """
    v = as_tensor(v)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"softmax_temp expects a non-empty vector, got shape {v.shape}")
    if not np.all(np.isfinite(v.data)):
        raise EvaluationError("softmax_temp input contains non-finite entries")
    if not (isinstance(tau, (int, float)) and tau > 0):
        raise ParameterError(f"temperature must be positive, got {tau!r}")
    return softmax(scale(v, 1.0 / float(tau)), axis=0)


def soft_cross_entropy(y: Tensor | np.ndarray, y_hat: np.ndarray) -> Tensor:
    """Cross-entropy of distribution ``y`` against a constant target ``y_hat``.

    Returns -sum(y_hat * log(y)) with the log floored at 1e-30 so sharply
    peaked predictions cannot produce -inf.
    """
    y = as_tensor(y)
    target = np.asarray(y_hat, dtype=np.float64)
    if y.ndim != 1 or target.ndim != 1 or y.shape != target.shape:
        raise ShapeError(f"distribution lengths differ: {y.shape} vs {target.shape}")
    if abs(target.sum() - 1.0) > 1e-6:
        raise ParameterError("target weights must sum to 1")
    clipped = np.maximum(y.data, LOG_FLOOR)
    out_data = -(target * np.log(clipped)).sum()

    def backward(g):
        if y.requires_grad:
            grad = np.where(y.data > LOG_FLOOR, -target / clipped, 0.0)
            y._accumulate(g * grad)

    out = Tensor(out_data, _parents=(y,), _backward=backward)
    if not np.isfinite(out.data):
        raise EvaluationError("cross-entropy evaluated to a non-finite value")
    return out


def l2_normalize(v: Tensor | np.ndarray) -> Tensor:
    """Normalize a vector to exactly unit Euclidean norm; rejects near-zero input."""
    v = as_tensor(v)
    if v.ndim != 1:
        raise ShapeError("l2_normalize expects a vector")
    norm = float(np.sqrt((v.data * v.data).sum()))
    if norm <= NORM_FLOOR:
        raise DegenerateInputError(f"cannot normalize vector with norm {norm:.3e}")
    out_data = v.data / norm

    def backward(g):
        if not v.requires_grad:
            return
        inner = (g * v.data).sum()
        v._accumulate(g / norm - v.data * (inner / norm**3))

    return Tensor(out_data, _parents=(v,), _backward=backward)


def l2_normalize_smooth(a: Tensor, axis=None, eps: float = SMOOTH_EPS) -> Tensor:
    """L2 normalization against sqrt(norm^2 + eps^2); zero rows stay zero.

    ``axis=None`` treats the tensor as one flat vector, ``axis=1`` normalizes
    each row independently. Rows with norm well above ``eps`` come out unit
    length; near-zero rows shrink to zero instead of being scaled by an
    unbounded 1/norm. Every derivative stays bounded by 1/eps, so the op is
    finite-difference checkable even when a row is effectively empty.
    """
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    if axis is None:
        s = np.sqrt((a.data * a.data).sum() + eps * eps)
        out_data = a.data / s

        def backward(g):
            if not a.requires_grad:
                return
            inner = (g * a.data).sum()
            a._accumulate(g / s - a.data * (inner / s**3))

    elif axis == 1:
        s = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True) + eps * eps)
        out_data = a.data / s

        def backward(g):
            if not a.requires_grad:
                return
            inner = (g * a.data).sum(axis=1, keepdims=True)
            a._accumulate(g / s - a.data * (inner / s**3))

    else:
        raise ShapeError("l2_normalize_smooth supports axis None or 1")
    return Tensor(out_data, _parents=(a,), _backward=backward)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, pad: int):
    """Pure-array convolution forward shared by the graph op and fast paths.

    Returns (output, padded_input); the fixed kernel-offset summation order
    makes repeated evaluations bitwise identical.
    """
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (wd + 2 * pad - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"input {h}x{wd} too small for kernel {kh}x{kw} stride {stride}")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    acc = np.repeat(b[:, None], h_out * w_out, axis=1)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride]
            acc = acc + w[:, :, i, j] @ patch.reshape(cin, -1)
    return acc.reshape(cout, h_out, w_out), xp


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution of a (Cin, H, W) map with (Cout, Cin, kh, kw) kernels."""
    if x.ndim != 3 or w.ndim != 4 or b.ndim != 1:
        raise ShapeError("conv2d expects x(Cin,H,W), w(Cout,Cin,kh,kw), b(Cout,)")
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w or b.shape[0] != cout:
        raise ShapeError(f"conv2d channel mismatch: x has {cin}, w expects {cin_w}")
    out_data, xp = conv2d_forward(x.data, w.data, b.data, stride, pad)
    _, h_out, w_out = out_data.shape

    def backward(g):
        gm = g.reshape(cout, -1)
        if b.requires_grad:
            b._accumulate(gm.sum(axis=1))
        need_x = x.requires_grad
        gxp = np.zeros_like(xp) if need_x else None
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride]
                if w.requires_grad:
                    if w.grad is None:
                        w.grad = np.zeros_like(w.data)
                    w.grad[:, :, i, j] += gm @ patch.reshape(cin, -1).T
                if need_x:
                    gxp[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += (
                        w.data[:, :, i, j].T @ gm
                    ).reshape(cin, h_out, w_out)
        if need_x:
            x._accumulate(gxp[:, pad : pad + h, pad : pad + wd] if pad else gxp)

    return Tensor(out_data, _parents=(x, w, b), _backward=backward)


def grad_check(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must rebuild its graph from ``params`` on every call and return a
    scalar. The error is |analytic - numeric| / max(1, |numeric|), maximized
    over every coordinate of every parameter.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ParameterError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    params = list(params)
    out = fn()
    if not np.all(np.isfinite(out.data)):
        raise EvaluationError("function output is not finite")
    for p in params:
        p.grad = np.zeros_like(p.data)
    out.backward()
    analytic = [p.grad.copy() for p in params]

    max_err = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            f_plus = fn().item()
            flat[idx] = orig - eps
            f_minus = fn().item()
            flat[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise EvaluationError("function output is not finite during differencing")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(gflat[idx] - numeric) / max(1.0, abs(numeric))
            max_err = max(max_err, err)
    return max_err
