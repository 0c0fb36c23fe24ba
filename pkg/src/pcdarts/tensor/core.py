"""Tensor, tape and reverse-mode sweep."""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

_DTYPES = {"float32": np.float32, "float64": np.float64}
_state = threading.local()


class NumericalError(FloatingPointError):
    """A primitive produced NaN or Inf."""

    def __init__(self, primitive: str, record_id: int):
        super().__init__(f"non-finite output from primitive {primitive!r} (record #{record_id})")
        self.primitive = primitive
        self.record_id = record_id


class ShapeError(ValueError):
    pass


def set_default_dtype(name: str) -> None:
    if name not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}, got {name!r}")
    _local().dtype = _DTYPES[name]


def default_dtype():
    return _local().dtype


@contextlib.contextmanager
def default_dtype_as(name: str):
    prev = _local().dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _local().dtype = prev


class Tensor:
    """Dense array that can take part in the tape.

    ``grad`` is a plain ndarray, allocated on the first backward that reaches
    the tensor; it is only ever populated for leaves.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "is_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype or default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self.is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar, routed through the primitives
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import functional as F
        if isinstance(other, (int, float)):
            return F.scale(self, other)
        return F.mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def __neg__(self):
        from . import functional as F
        return F.scale(self, -1.0)


@dataclass
class Record:
    rid: int
    kind: str
    inputs: tuple
    out: Tensor
    backward: Callable


@dataclass
class Tape:
    records: list = field(default_factory=list)
    scopes: list = field(default_factory=list)
    live: dict = field(default_factory=dict)
    peak: dict = field(default_factory=dict)
    next_id: int = 0
    enabled: bool = True

    def append(self, kind, inputs, out, backward):
        rec = Record(self.next_id, kind, inputs, out, backward)
        self.next_id += 1
        self.records.append(rec)
        if not self.scopes or not out.data.flags.owndata:
            return rec
        for label in set(self.scopes):
            n = self.live.get(label, 0) + out.data.size
            self.live[label] = n
            if n > self.peak.get(label, 0):
                self.peak[label] = n
        return rec

    def clear(self):
        self.records.clear()
        self.live.clear()


def _local():
    if not hasattr(_state, "tape"):
        _state.tape = Tape()
        _state.dtype = np.float32
    return _state


def tape() -> Tape:
    return _local().tape


def grad_enabled() -> bool:
    return _local().tape.enabled


@contextlib.contextmanager
def no_grad():
    t = tape()
    prev = t.enabled
    t.enabled = False
    try:
        yield
    finally:
        t.enabled = prev


@contextlib.contextmanager
def scope(label: str):
    """Attribute the elements of every tensor recorded inside to ``label``."""
    t = tape()
    t.scopes.append(label)
    try:
        yield
    finally:
        t.scopes.pop()


def activation_peak(label: str) -> int:
    """Peak number of tape-held activation elements allocated under ``label``.

    Outputs that are views of their input (slices, reshapes) hold no new
    storage and are not counted.
    """
    return tape().peak.get(label, 0)


def reset_activation_peak() -> None:
    t = tape()
    t.peak.clear()
    t.live.clear()


def clear_tape() -> None:
    tape().clear()


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; leaf gradients accumulate additively.

    The tape is consumed: afterwards it is empty, whether or not every record
    was reached from ``loss``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    t = tape()
    if not t.records or loss.is_leaf:
        raise RuntimeError("backward called with an empty tape or on a leaf tensor")
    pending = {id(loss): np.ones_like(loss.data)}
    try:
        for rec in reversed(t.records):
            g = pending.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    prev = pending.get(key)
                    pending[key] = gi if prev is None else prev + gi
    finally:
        t.clear()


def zero_grads(params) -> None:
    for p in params:
        p.grad = None
