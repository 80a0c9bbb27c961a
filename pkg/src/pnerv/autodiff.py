"""Reverse-mode automatic differentiation on a flat tape.

Values are plain float64 numpy arrays. A :class:`Var` wraps one array and
remembers the :class:`Tape` that produced it; every differentiable op in
:mod:`pnerv.ops` appends a :class:`Node` to that tape when any of its inputs
is a ``Var``. Calling :func:`backward` walks the tape in reverse and
accumulates gradients additively across fan-out.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

__all__ = ["Var", "Node", "Tape", "backward", "grad_check", "GradCheckReport"]


class Var:
    __slots__ = ("value", "id", "tape", "name")

    def __init__(self, value: np.ndarray, vid: int, tape: "Tape", name: str | None = None):
        self.value = value
        self.id = vid
        self.tape = tape
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var#{self.id}{label}{tuple(self.shape)}"


@dataclass
class Node:
    out: int
    kind: str
    inputs: tuple[int, ...]
    saved: tuple[Any, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of operations; ``gradients`` is filled by :func:`backward`."""

    nodes: list[Node] = field(default_factory=list)
    gradients: dict[int, np.ndarray] = field(default_factory=dict)
    _next_id: int = 0
    _shapes: dict[int, tuple[int, ...]] = field(default_factory=dict)

    def _new_id(self, shape) -> int:
        vid = self._next_id
        self._next_id += 1
        self._shapes[vid] = tuple(shape)
        return vid

    def var(self, value, name: str | None = None) -> Var:
        """Register a leaf (parameter or input). Float64 arrays are not copied."""
        arr = np.asarray(value, dtype=np.float64)
        return Var(arr, self._new_id(arr.shape), self, name)

    def record(self, kind: str, inputs: Sequence[Var | None], value: np.ndarray,
               vjp: Callable, saved: tuple = ()) -> Var:
        in_ids = tuple(-1 if v is None else v.id for v in inputs)
        out = Var(value, self._new_id(value.shape), self)
        self.nodes.append(Node(out.id, kind, in_ids, saved, vjp))
        return out

    def grad(self, v: Var) -> np.ndarray:
        """Gradient of the last backward root w.r.t. ``v`` (zeros if unreached)."""
        g = self.gradients.get(v.id)
        return np.zeros(v.shape) if g is None else g


def backward(tape: Tape, root: Var) -> dict[int, np.ndarray]:
    if root.tape is not tape or root.id not in tape._shapes:
        raise ValueError(f"{root!r} is not on this tape")
    if root.value.size != 1:
        raise ValueError("backward root must be scalar-valued")
    grads: dict[int, np.ndarray] = {root.id: np.ones(root.shape)}
    for node in reversed(tape.nodes):
        if node.out > root.id:
            continue
        g = grads.get(node.out)
        if g is None:
            continue
        for vid, gi in zip(node.inputs, node.vjp(g)):
            if vid < 0 or gi is None:
                continue
            prev = grads.get(vid)
            grads[vid] = gi if prev is None else prev + gi
    tape.gradients = grads
    return grads


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def grad_check(f: Callable[[Mapping[str, Var]], Var], params: Mapping[str, np.ndarray],
               tol: float = 1e-4, step: float = 1e-5, max_entries: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` against central differences.

    ``f`` receives a mapping of leaf Vars (one per entry in ``params``, all on
    a fresh tape) and must return a scalar Var. The error for a parameter is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-12)``,
    i.e. relative to the tensor's gradient scale. With ``max_entries`` set,
    only that many randomly chosen entries per parameter are probed.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    tape = Tape()
    leaves = {k: tape.var(v, name=k) for k, v in base.items()}
    backward(tape, f(leaves))
    analytic = {k: tape.grad(v) for k, v in leaves.items()}

    def value_at(name, flat_idx, delta):
        probe = dict(base)
        arr = base[name].copy()
        arr.flat[flat_idx] += delta
        probe[name] = arr
        t = Tape()
        return float(f({k: t.var(v, name=k) for k, v in probe.items()}).value.sum())

    rng = np.random.default_rng(seed)
    errors = {}
    for name, arr in base.items():
        idx = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            idx = np.sort(rng.choice(arr.size, size=max_entries, replace=False))
        a = analytic[name].reshape(-1)[idx]
        n = np.array([(value_at(name, i, step) - value_at(name, i, -step)) / (2 * step) for i in idx])
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
        errors[name] = float(np.abs(a - n).max(initial=0.0) / scale)
    return GradCheckReport(errors, tol)
