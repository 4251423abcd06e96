"""Tensor wrapper and the reverse-mode tape.

A Tensor wraps one numpy array.  Ops that should be differentiated build a
TapeNode linking the output to its inputs together with a closure that maps
the output gradient to input gradients.  backward() walks the recorded graph
once, in reverse topological order, and accumulates gradients into the
``grad`` field of every leaf that requires them.

Two module-level switches change behavior globally: gradient recording
(``no_grad``) and debug finiteness checks (``set_debug_checks``).  Neither is
thread-local; the package is single-threaded by design.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from ditlab.errors import ShapeError

_GRAD_ENABLED = True
_DEBUG_CHECKS = False


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_debug_checks(enabled: bool) -> None:
    """Toggle finiteness assertions on every forward value and gradient."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


@contextmanager
def debug_checks() -> Iterator[None]:
    global _DEBUG_CHECKS
    prev = _DEBUG_CHECKS
    _DEBUG_CHECKS = True
    try:
        yield
    finally:
        _DEBUG_CHECKS = prev


def _assert_finite(arr: np.ndarray, context: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {context}")


class TapeNode:
    """One recorded op: the inputs it read and how to push gradients back.

    ``vjp`` receives the gradient of the loss with respect to this node's
    output and returns one gradient per input, aligned with ``inputs``
    (None for inputs that need no gradient).
    """

    __slots__ = ("op", "inputs", "vjp")

    def __init__(
        self,
        op: str,
        inputs: Sequence["Tensor"],
        vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    ) -> None:
        self.op = op
        self.inputs = tuple(inputs)
        self.vjp = vjp

    def __repr__(self) -> str:
        return f"TapeNode(op={self.op!r}, inputs={len(self.inputs)})"


class Tensor:
    """A numpy array plus optional gradient bookkeeping.

    ``grad`` is populated (as a plain ndarray) only on leaves, i.e. tensors
    created directly with requires_grad=True.  Repeated backward() calls
    accumulate into it; call zero_grad() between optimization steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        # own a C-contiguous buffer: BLAS kernel selection depends on strides,
        # and the bitwise-determinism contract needs one fixed layout
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float16:
            arr = arr.astype(np.float32)
        if requires_grad and not np.issubdtype(arr.dtype, np.floating):
            raise TypeError(f"requires_grad needs a float tensor, got {arr.dtype}")
        self.data: np.ndarray = arr
        self.requires_grad: bool = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[TapeNode] = None

    # introspection -----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def numpy(self) -> np.ndarray:
        """The underlying array (a view, not a copy)."""
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # gradient handling -------------------------------------------------

    def detach(self) -> "Tensor":
        """Same data, cut off from the tape."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # arithmetic (delegates to ops; lazy import avoids a cycle) ----------

    def _ops(self):
        from ditlab.diffcore import ops

        return ops

    def __add__(self, other):
        return self._ops().add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self._ops().sub(self, other)

    def __rsub__(self, other):
        return self._ops().sub(other, self)

    def __mul__(self, other):
        return self._ops().mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self._ops().scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a recorded primitive")
        return self._ops().scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return self._ops().matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self._ops().reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return self._ops().transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return self._ops().sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return self._ops().mean(self, axis=axis, keepdims=keepdims)


def make_result(
    data: np.ndarray,
    op: str,
    inputs: Sequence[Tensor],
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Wrap an op result, attaching a tape node when recording is on."""
    if _DEBUG_CHECKS:
        _assert_finite(data, f"forward of {op}")
    out = Tensor(data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, inputs, vjp)
    return out


def _toposort(root: Tensor) -> list:
    """Tensors reachable from root through tape nodes, outputs last."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every requires_grad leaf.

    The root must be scalar.  Intermediate tensors do not keep gradients;
    leaves accumulate (so two backward calls double the gradient).
    """
    if root.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward root does not require grad")

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for t in reversed(_toposort(root)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g if t.grad is None else t.grad + g
            continue
        input_grads = t.node.vjp(g)
        for parent, pg in zip(t.node.inputs, input_grads):
            if pg is None or not parent.requires_grad:
                continue
            if _DEBUG_CHECKS:
                _assert_finite(pg, f"gradient of {t.node.op}")
            if pg.shape != parent.shape:
                raise ShapeError(
                    f"vjp of {t.node.op} produced shape {pg.shape} "
                    f"for input of shape {parent.shape}"
                )
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
