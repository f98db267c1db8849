"""Dense tensors with a reverse-mode differentiation tape.

Operations executed while a :class:`Tape` is active and that touch at least
one tensor with ``requires_grad`` are appended to that tape together with a
closure mapping the output gradient to input gradients.  :func:`backward`
replays the tape in reverse.

>>> w = Tensor(np.ones(3), requires_grad=True)
>>> with Tape() as tape:
...     loss = tsum(w)
>>> backward(tape, loss, [w])[w]
array([1., 1., 1.])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ContractError",
    "Tensor",
    "Tape",
    "backward",
    "record",
    "relu",
    "sigmoid",
    "tsum",
    "tmean",
    "concat_channels",
]


class ContractError(ValueError):
    """An operation was called outside its documented contract."""


class Tensor:
    """A numpy array that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_active_tapes: list["Tape"] = []


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nested tapes record only into the innermost.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def is_topological(self) -> bool:
        """True when every recorded input is a leaf or an earlier output."""
        produced = {id(n.out) for n in self.nodes}
        seen: set[int] = set()
        for node in self.nodes:
            for t in node.inputs:
                if id(t) in produced and id(t) not in seen:
                    return False
            seen.add(id(node.out))
        return True


def record(out_data: np.ndarray, inputs: Iterable[Tensor], grad_fn) -> Tensor:
    """Wrap ``out_data`` and log the operation on the active tape if needed."""
    inputs = tuple(inputs)
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad)
    if needs_grad and _active_tapes:
        _active_tapes[-1].nodes.append(_Node(out, inputs, grad_fn))
    return out


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict:
    """Gradients of a scalar ``loss`` with respect to leaf tensors.

    Parameters
    ----------
    tape : Tape
        The tape ``loss`` was computed under.
    loss : Tensor
        Must hold exactly one element.
    params : iterable of Tensor, optional
        When given, the result has one entry per parameter, with zeros for
        parameters the loss does not depend on.  Otherwise every leaf that
        requires grad and was reached is returned.

    Returns
    -------
    dict
        ``{tensor: gradient array}`` keyed by tensor identity.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(n.out) for n in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.grad_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if id(t) not in produced:
                leaves[id(t)] = t
            prev = grads.get(id(t))
            grads[id(t)] = gi if prev is None else prev + gi
    if params is None:
        if loss.requires_grad and id(loss) not in produced:
            leaves[id(loss)] = loss
        return {t: grads[id(t)] for t in leaves.values()}
    return {p: grads.get(id(p), np.zeros_like(p.data)) for p in params}


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    return record(np.where(positive, x.data, 0).astype(x.dtype, copy=False), [x], lambda g: (g * positive,))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clipped to ``[eps, 1 - eps]`` so it never saturates to 0 or 1."""
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    eps = np.finfo(d.dtype if np.issubdtype(d.dtype, np.floating) else np.float64).eps
    y = np.clip(y, eps, 1.0 - eps).astype(d.dtype, copy=False)
    return record(y, [x], lambda g: (g * y * (1.0 - y),))


def tsum(x: Tensor) -> Tensor:
    total = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return record(total, [x], lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    avg = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype)
    return record(avg, [x], lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 1, keeping input order."""
    xs = list(xs)
    if not xs:
        raise ContractError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ContractError(f"cannot concatenate shapes {ref} and {t.shape} along channels")
    if len(xs) == 1:
        return xs[0]
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]
    out = np.concatenate([t.data for t in xs], axis=1)
    return record(out, xs, lambda g: tuple(np.split(g, splits, axis=1)))
