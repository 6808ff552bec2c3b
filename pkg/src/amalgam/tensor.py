"""Minimal reverse-mode autodiff over float64 numpy storage.

Everything the nets need lives here: a Tensor wrapper, a gradient Tape that
records operations as they execute, the operations themselves (conv2d, linear,
elementwise, reductions, softmax, cross-entropy), SGD with momentum, and a
central-finite-difference reference gradient.

Recording model: operations append a node to the innermost active Tape when at
least one input requires grad. With no tape open (teacher inference, eval) the
same calls run grad-free. ``backward(loss, tape)`` replays the recorded nodes
in reverse, visiting each exactly once; gradients accumulate into ``.grad``
until the optimizer consumes and zeroes them.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ArityError,
    AxisError,
    GeometryError,
    OptimizerStateError,
    ShapeError,
    SpecError,
    TapeError,
)

Array = np.ndarray


class Tensor:
    """A float64 array plus an optional gradient of the same shape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Array | None = np.zeros_like(self.data) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ArityError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # arithmetic sugar; the module-level functions do the real work
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def relu(self) -> "Tensor":
        return relu(self)

    def sum(self, axes=None) -> "Tensor":
        return reduce("sum", self, axes)

    def mean(self, axes=None) -> "Tensor":
        return reduce("mean", self, axes)

    def __repr__(self) -> str:
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data)


class _Node:
    __slots__ = ("output", "backward_fn")

    def __init__(self, output: Tensor, backward_fn: Callable[[Array], None]):
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations; execution order is topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _finish(out_data: Array, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.grad = np.zeros_like(out.data)
        tape.nodes.append(_Node(out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(x) into .grad for every participating tensor.

    The loss must be a scalar produced by an operation recorded on ``tape``.
    Parameters that did not participate keep their (zero) gradients.
    """
    if loss.data.size != 1:
        raise ArityError(f"loss must be scalar, got shape {loss.shape}")
    if not any(node.output is loss for node in tape.nodes):
        raise TapeError("loss was not produced by any operation on this tape")
    assert loss.grad is not None
    loss.grad[...] += 1.0
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is not None:
            node.backward_fn(g)


# ---------------------------------------------------------------------------
# operations


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input against [C_out, C_in, k, k] kernels.

    Output size (H + 2*padding - k)/stride + 1 must be an exact positive
    integer; there is no implicit flooring.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    if w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d kernel must be square, got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, kernel expects {w.shape[1]}")
    if not (isinstance(stride, int) and stride >= 1):
        raise SpecError(f"stride must be a positive int, got {stride!r}")
    if not (isinstance(padding, int) and padding >= 0):
        raise SpecError(f"padding must be a non-negative int, got {padding!r}")

    n, _, h, width = x.shape
    k = w.shape[2]
    hp, wp = h + 2 * padding, width + 2 * padding
    if k > hp or k > wp:
        raise GeometryError(f"kernel {k} larger than padded input {hp}x{wp}")
    if (hp - k) % stride or (wp - k) % stride:
        raise GeometryError(
            f"non-integer output size: ({h}+2*{padding}-{k})/{stride}+1 is not integral"
        )
    h_out = (hp - k) // stride + 1
    w_out = (wp - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise GeometryError("empty conv output")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    # windows: [N, C_in, H_out, W_out, k, k]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride, :, :]
    out = np.einsum("nchwij,ocij->nohw", win, w.data, optimize=True)

    def bwd(g: Array) -> None:
        if w.requires_grad:
            w.grad += np.einsum("nohw,nchwij->ocij", g, win, optimize=True)
        if x.requires_grad:
            cols = np.einsum("nohw,ocij->nchwij", g, w.data, optimize=True)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += cols[
                        :, :, :, :, i, j
                    ]
            if padding:
                x.grad += gxp[:, :, padding : padding + h, padding : padding + width]
            else:
                x.grad += gxp

    return _finish(out, (x, w), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with bias broadcast over rows (the only broadcast we allow)."""
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ShapeError(f"linear expects 2-d x, 2-d w, 1-d b; got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"linear dims disagree: {x.shape} @ {w.shape} + {b.shape}")
    out = x.data @ w.data + b.data

    def bwd(g: Array) -> None:
        if x.requires_grad:
            x.grad += g @ w.data.T
        if w.requires_grad:
            w.grad += x.data.T @ g
        if b.requires_grad:
            b.grad += g.sum(axis=0)

    return _finish(out, (x, w, b), bwd)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} needs matching shapes, got {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def bwd(g: Array) -> None:
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad += g

    return _finish(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def bwd(g: Array) -> None:
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad -= g

    return _finish(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def bwd(g: Array) -> None:
        if a.requires_grad:
            a.grad += g * b.data
        if b.requires_grad:
            b.grad += g * a.data

    return _finish(a.data * b.data, (a, b), bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bwd(g: Array) -> None:
        if a.requires_grad:
            a.grad += g * (a.data > 0.0)

    return _finish(out, (a,), bwd)


def scale(a: Tensor, s) -> Tensor:
    """Multiply by a python float or by a trainable single-element tensor."""
    if isinstance(s, Tensor):
        if s.size != 1:
            raise ShapeError(f"scale factor tensor must have one element, got shape {s.shape}")
        sval = float(s.data.reshape(()))

        def bwd(g: Array) -> None:
            if a.requires_grad:
                a.grad += g * sval
            if s.requires_grad:
                s.grad += np.sum(g * a.data)

        return _finish(a.data * sval, (a, s), bwd)

    sval = float(s)

    def bwd_const(g: Array) -> None:
        if a.requires_grad:
            a.grad += g * sval

    return _finish(a.data * sval, (a,), bwd_const)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add | sub | mul | relu | scale_by_scalar."""
    if kind == "relu":
        if b is not None:
            raise ArityError("relu takes one operand")
        return relu(a)
    if kind == "scale_by_scalar":
        if b is None:
            raise ArityError("scale_by_scalar needs a factor")
        return scale(a, b)
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise SpecError(f"unknown elementwise kind {kind!r}") from None
    if not isinstance(b, Tensor):
        raise ArityError(f"{kind} needs a second tensor operand")
    return fn(a, b)


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    norm = []
    for ax in axes:
        if not isinstance(ax, int) or not (-ndim <= ax < ndim):
            raise AxisError(f"axis {ax!r} out of range for ndim {ndim}")
        norm.append(ax % ndim)
    if len(set(norm)) != len(norm):
        raise AxisError(f"repeated reduction axis in {axes!r}")
    return tuple(sorted(norm))


def reduce(kind: str, t: Tensor, axes=None) -> Tensor:
    """Sum or mean over the given axes (all axes when None)."""
    if kind not in ("sum", "mean"):
        raise SpecError(f"unknown reduce kind {kind!r}")
    norm = _normalize_axes(axes, t.ndim)
    count = 1
    for ax in norm:
        count *= t.shape[ax]
    out = np.sum(t.data, axis=norm if norm else None)
    if kind == "mean":
        if count == 0:
            raise AxisError("mean over zero elements")
        out = out / count

    def bwd(g: Array) -> None:
        if t.requires_grad:
            expanded = g
            for ax in norm:
                expanded = np.expand_dims(expanded, ax)
            full = np.broadcast_to(expanded, t.shape)
            t.grad += full / count if kind == "mean" else full

    return _finish(np.asarray(out), (t,), bwd)


def softmax(t: Tensor) -> Tensor:
    """Row-stable softmax over the last axis."""
    if t.ndim < 1 or t.shape[-1] < 2:
        raise ArityError(f"softmax needs at least 2 classes on the last axis, got {t.shape}")
    shifted = t.data - np.max(t.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def bwd(g: Array) -> None:
        if t.requires_grad:
            dot = np.sum(g * out, axis=-1, keepdims=True)
            t.grad += out * (g - dot)

    return _finish(out, (t,), bwd)


def gather(t: Tensor, indices) -> Tensor:
    """Select rows along axis 0; backward scatter-adds into the source."""
    idx = np.asarray(indices)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("gather indices must be a 1-d integer array")
    if idx.size and (idx.min() < 0 or idx.max() >= t.shape[0]):
        raise ShapeError(f"gather index out of range for axis of length {t.shape[0]}")
    out = t.data[idx]

    def bwd(g: Array) -> None:
        if t.requires_grad:
            np.add.at(t.grad, idx, g)

    return _finish(out, (t,), bwd)


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = t.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {t.shape} to {shape}: {exc}") from None

    def bwd(g: Array) -> None:
        if t.requires_grad:
            t.grad += g.reshape(t.shape)

    return _finish(out, (t,), bwd)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    y = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, C] logits, got {logits.shape}")
    n, c = logits.shape
    if y.shape != (n,) or not np.issubdtype(y.dtype, np.integer):
        raise ShapeError(f"labels must be {n} integers, got shape {y.shape}")
    if n == 0:
        raise ArityError("cross_entropy over an empty batch")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ShapeError(f"label out of range for {c} classes")
    shifted = logits.data - np.max(logits.data, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    out = np.mean(lse - shifted[np.arange(n), y])

    def bwd(g: Array) -> None:
        if logits.requires_grad:
            p = np.exp(shifted)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(n), y] -= 1.0
            logits.grad += float(g) * p / n

    return _finish(np.asarray(out), (logits,), bwd)


# ---------------------------------------------------------------------------
# optimizer and reference gradient


class SGD:
    """Plain SGD with momentum; velocities persist across steps.

    Update per parameter: v <- momentum*v + grad; p <- p - lr*v.
    Gradients are zeroed after each step.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9):
        if not params:
            raise SpecError("optimizer needs at least one parameter")
        if lr < 0:
            raise SpecError(f"lr must be non-negative, got {lr}")
        if not 0 <= momentum < 1:
            raise SpecError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise OptimizerStateError(f"parameter {name!r} has no gradient")
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v
            p.grad[...] = 0.0


def sgd_step(params: dict[str, Tensor], opt: SGD) -> None:
    """Functional alias kept for symmetry with the op surface; state lives in ``opt``."""
    if opt.params.keys() != params.keys():
        raise OptimizerStateError("parameter set does not match the optimizer's")
    opt.step()


def finite_diff_grad(
    f: Callable[[], float], params: dict[str, Tensor], eps: float = 1e-5
) -> dict[str, Array]:
    """Central finite differences (f(p+eps) - f(p-eps)) / (2 eps), per coordinate.

    ``f`` must re-evaluate the objective from the live parameter tensors; they
    are perturbed in place and restored exactly.
    """
    if not eps > 0:
        raise SpecError(f"eps must be positive, got {eps}")
    grads: dict[str, Array] = {}
    for name, p in params.items():
        g = np.zeros_like(p.data)
        for idx in np.ndindex(p.data.shape):
            orig = p.data[idx]
            p.data[idx] = orig + eps
            f_plus = float(f())
            p.data[idx] = orig - eps
            f_minus = float(f())
            p.data[idx] = orig
            g[idx] = (f_plus - f_minus) / (2.0 * eps)
        grads[name] = g
    return grads
