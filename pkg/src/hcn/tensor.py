"""Dense N-D tensors, the gradient tape, and the named-parameter registry.

Everything downstream (layers, losses, the optimizer) works in terms of
:class:`Tensor` values.  Differentiable operations live in :mod:`hcn.ops`;
each one optionally records a backward closure on a :class:`GradTape`,
which replays the closures in exact reverse order of the forward pass.
"""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from .errors import NonFiniteError, ShapeError

FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense array of real numbers plus a gradient accumulator.

    The wrapped data is treated as immutable once constructed (the optimizer
    replaces ``data`` wholesale rather than mutating it in place).  Finite
    values are enforced on construction, so a NaN or Inf produced anywhere in
    a computation fails loudly at the op that produced it.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.size and not np.all(np.isfinite(arr)):
            raise NonFiniteError(
                f"tensor of shape {arr.shape} contains NaN or Inf"
            )
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        self.grad = g if self.grad is None else self.grad + g

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class GradTape:
    """Op recorder for reverse-mode differentiation.

    Ops append one closure per forward call; :meth:`backward` seeds the
    output gradients and runs the closures in reverse recording order.
    Closures are written to no-op when their output never received a
    gradient, so a tape may hold several heads and be run from any subset.
    """

    def __init__(self):
        self._entries: list[Callable[[], None]] = []

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, backward_fn: Callable[[], None]) -> None:
        self._entries.append(backward_fn)

    def backward(self, seeds) -> None:
        """Run the tape. ``seeds`` is a (tensor, grad) pair or a list of them."""
        if isinstance(seeds, tuple) and len(seeds) == 2 and isinstance(seeds[0], Tensor):
            seeds = [seeds]
        for tensor, grad in seeds:
            g = np.asarray(grad, dtype=tensor.data.dtype)
            if g.shape != tensor.data.shape:
                raise ShapeError(
                    f"seed gradient shape {g.shape} does not match output shape {tensor.data.shape}"
                )
            tensor.accumulate_grad(g)
        for fn in reversed(self._entries):
            fn()


class ParameterStore:
    """Ordered registry of named trainable tensors.

    Insertion order is the optimizer's iteration order, so model construction
    must register parameters deterministically.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def register(self, name: str, value: np.ndarray | Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} registered twice")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def total_size(self) -> int:
        return sum(t.size for t in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Snapshot of the raw arrays, for checkpoints and best-model tracking."""
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ShapeError(
                f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}"
            )
        for name, t in self._params.items():
            arr = np.asarray(arrays[name], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ShapeError(
                    f"parameter {name!r}: stored shape {arr.shape} != model shape {t.data.shape}"
                )
            t.data = arr.copy()
