"""Dense float64 tensors with paired gradient buffers.

Everything in the network stack runs on 64-bit floats so that central
finite differences can validate every backward pass to tight tolerances.
"""
from __future__ import annotations

import numpy as np

from ..exceptions import ShapeMismatchError


class Tensor:
    """A dense, row-major float64 array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def accumulate_grad(self, delta):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        if delta.shape != self.data.shape:
            raise ShapeMismatchError(
                f"gradient shape {delta.shape} does not match parameter shape {self.data.shape}"
            )
        self.grad += delta

    def copy(self) -> "Tensor":
        out = Tensor(self.data.copy(), requires_grad=self.grad is not None)
        if self.grad is not None:
            out.grad = self.grad.copy()
        return out

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={'yes' if self.grad is not None else 'no'})"


def flatten_tensors(tensors) -> np.ndarray:
    """Concatenate tensor values into one flat float64 vector."""
    if not tensors:
        return np.zeros(0, dtype=np.float64)
    return np.concatenate([t.data.reshape(-1) for t in tensors])


def load_flat(tensors, flat: np.ndarray):
    """Inverse of :func:`flatten_tensors`; writes values back in order, losslessly."""
    total = sum(t.size for t in tensors)
    if flat.size != total:
        raise ShapeMismatchError(f"flat vector length {flat.size} does not match parameter count {total}")
    offset = 0
    for t in tensors:
        n = t.size
        t.data[...] = flat[offset:offset + n].reshape(t.data.shape)
        offset += n
