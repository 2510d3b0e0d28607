"""Dense float64 tensors with a reverse-mode gradient tape.

The engine is deliberately small: tensors are thin wrappers around
C-contiguous float64 ndarrays, and a :class:`Tape` is an ordered record of
executed operations. Backward replays the record in exact reverse
execution order, accumulating gradients additively into every tensor on
the path from the loss to the parameters.

A tape is confined to one thread while the graph is built and replayed;
operations executed with no tape active run as pure forward computations
(evaluation mode).
"""

import threading

import numpy as np


class Tensor:
    """A dense float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        # asarray first: ascontiguousarray would promote 0-d scalars to 1-d
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def accumulate_grad(self, g, own=False):
        # copy by default: aliasing an upstream gradient buffer would let a
        # later in-place accumulation corrupt it. own=True transfers
        # ownership of a freshly allocated array and skips the copy.
        if self.grad is None:
            if own:
                self.grad = np.asarray(g, dtype=np.float64)
            else:
                self.grad = np.array(g, dtype=np.float64, order="C", copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class Parameter(Tensor):
    """A named trainable tensor with a persistent gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, name, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def value(self):
        return self.data

    @property
    def gradient(self):
        return self.grad

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


_local = threading.local()


def _stack():
    stack = getattr(_local, "tape_stack", None)
    if stack is None:
        stack = _local.tape_stack = []
    return stack


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Entry order is execution order; :meth:`backward` visits entries in
    exact reverse order. Parameter gradients accumulate across repeated
    backward calls until ``zero_grad``; intermediate gradients are reset
    at the start of each backward pass so every pass contributes exactly
    one dL/dx per tensor.
    """

    def __init__(self):
        self._entries = []  # (output_tensor, backward_fn)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _stack().pop()
        assert popped is self
        return False

    def record(self, out, backward_fn):
        self._entries.append((out, backward_fn))

    def __len__(self):
        return len(self._entries)

    def backward(self, loss):
        if loss.data.shape != ():
            raise ValueError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        for out, _ in self._entries:
            out.grad = None
        loss.grad = np.ones((), dtype=np.float64)
        for out, fn in reversed(self._entries):
            if out.grad is not None:
                fn()


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)
