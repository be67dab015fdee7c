"""Reverse-mode autodiff over dense NCHW float arrays.

A Tensor wraps a numpy array plus an optional tape node recording how it
was produced. Calling backward() on a scalar output walks the tape in
exact reverse topological order of the forward pass and accumulates
gradients into every tensor that asked for them.

The model path runs in float32; every op preserves the input dtype, so
gradient checking can run the same graph in float64.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import DimensionError

_GRAD_ENABLED = True


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Run forwards without recording the tape (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@dataclass
class TapeNode:
    """One recorded op: its name, input tensors, and the backward closure.

    backward maps the upstream gradient to one gradient per parent
    (None for parents that do not need one). Saved activations live in
    the closure.
    """

    op: str
    parents: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, node: TapeNode | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        op = self.node.op if self.node else "leaf"
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={op})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self, seed: np.ndarray | None = None):
        """Accumulate gradients of this tensor w.r.t. every reachable input.

        Without a seed the tensor must be scalar (gradient 1.0).
        """
        if seed is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise DimensionError("seed shape must match the output shape")

        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): seed}
        for t in order:
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g
            if t.node is None:
                continue
            parent_grads = t.node.backward(g)
            for parent, pg in zip(t.node.parents, parent_grads):
                if pg is None:
                    continue
                if pg.shape != parent.data.shape:
                    raise DimensionError(
                        f"backward of {t.node.op} produced gradient of shape "
                        f"{pg.shape} for parent of shape {parent.data.shape}"
                    )
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _toposort(root: Tensor) -> list[Tensor]:
    """Tensors in reverse topological order (root first), iteratively."""
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
            for p in t.node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x, dtype=np.float32) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)
