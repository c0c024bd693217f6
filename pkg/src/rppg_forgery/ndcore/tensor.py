"""Tensor values and the reverse-mode tape.

A :class:`Tensor` is an immutable float64 array. Operations executed while a
:class:`Tape` is active record themselves on the tape whenever one of their
inputs is tracked (a parameter, or the output of another recorded op).
:func:`backward` walks the tape in reverse and returns gradients for every
parameter that took part in the computation.
"""
from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ContractError


class DimensionError(ContractError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a tensor would contain NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "_tape", "_node", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in tensor of shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self._tape: Optional[Tape] = None
        self._node: Optional[int] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal fast path: arr is a freshly computed float64 array owned by the op
        if not isinstance(arr, np.ndarray):  # 0-d arithmetic yields numpy scalars
            arr = np.asarray(arr, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in tensor of shape {arr.shape}")
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t._tape = None
        t._node = None
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of primitive operations for one differentiation pass.

    Usage::

        with Tape() as tape:
            loss = model_loss(params, batch)
        grads = backward(loss)
    """

    def __init__(self):
        # per node: (parent node ids or None, vjp, leaf tensor or None)
        self.parents: List[Tuple[Optional[int], ...]] = []
        self.vjps: List[Optional[VJP]] = []
        self.leaves: Dict[int, Tensor] = {}
        self._leaf_ids: Dict[int, int] = {}
        self._prev: Optional[Tape] = None

    def __enter__(self) -> "Tape":
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.parents)

    def node_of(self, t: Tensor) -> Optional[int]:
        if t._tape is self:
            return t._node
        if t.requires_grad:
            key = id(t)
            idx = self._leaf_ids.get(key)
            if idx is None:
                idx = len(self.parents)
                self.parents.append(())
                self.vjps.append(None)
                self._leaf_ids[key] = idx
                self.leaves[idx] = t
            return idx
        return None

    def record(self, parents: Tuple[Optional[int], ...], vjp: VJP) -> int:
        idx = len(self.parents)
        self.parents.append(parents)
        self.vjps.append(vjp)
        return idx

    def free(self) -> None:
        self.parents.clear()
        self.vjps.clear()
        self.leaves.clear()
        self._leaf_ids.clear()


_ACTIVE: Optional[Tape] = None


def active_tape() -> Optional[Tape]:
    return _ACTIVE


def track(*inputs: Tensor):
    """Return ``(tape, parent_ids, needs)`` for an op on ``inputs``.

    ``tape`` is None when nothing needs recording; ``needs[i]`` says whether
    the gradient for input ``i`` is wanted.
    """
    tape = _ACTIVE
    if tape is None:
        return None, None, None
    ids = tuple(tape.node_of(x) for x in inputs)
    if all(i is None for i in ids):
        return None, None, None
    return tape, ids, tuple(i is not None for i in ids)


def attach(tape: Optional[Tape], ids, arr: np.ndarray, vjp: Optional[VJP]) -> Tensor:
    out = Tensor._wrap(arr)
    if tape is not None:
        out._tape = tape
        out._node = tape.record(ids, vjp)
    return out


def backward(loss: Tensor, free: bool = True) -> Dict[Tensor, np.ndarray]:
    """Gradients of scalar ``loss`` for every parameter recorded on its tape.

    The returned dict is keyed by the parameter tensors themselves. The
    tape's graph is released afterwards unless ``free`` is False.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ContractError("loss was not computed on an active tape")
    n = loss._node + 1
    grads: List[Optional[np.ndarray]] = [None] * n
    grads[loss._node] = np.ones_like(loss.data)
    for idx in range(n - 1, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        vjp = tape.vjps[idx]
        if vjp is None:
            continue
        parent_grads = vjp(g)
        for pid, pg in zip(tape.parents[idx], parent_grads):
            if pid is None or pg is None:
                continue
            cur = grads[pid]
            grads[pid] = pg if cur is None else cur + pg
        grads[idx] = None
    out: Dict[Tensor, np.ndarray] = {}
    for idx, leaf in tape.leaves.items():
        g = grads[idx] if idx < n else None
        out[leaf] = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
    if free:
        tape.free()
    return out
