"""Real-valued functions on P(C^d), evaluated on stacks of canonical vectors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import ProjectiveState, canonicalize, rowwise_distance, state_keys


@dataclass(frozen=True)
class Observable:
    """Vectorized observable ``g: P(C^d) -> R``.

    ``func`` maps an ``(N, d)`` array of canonical vectors to ``(N,)`` reals.
    ``matrix`` is set when ``g(x) = <x, O x>`` for a hermitian ``O``; such
    observables have an exact invariant mean ``tr(O rho_inv)``.
    """

    name: str
    func: Callable[[np.ndarray], np.ndarray]
    holder_exponent: float = 1.0
    holder_constant: float = 1.0
    matrix: np.ndarray | None = field(default=None, repr=False)
    continuous: bool = True

    def __call__(self, x):
        if isinstance(x, ProjectiveState):
            return float(self.func(x.vector[None, :])[0])
        arr = np.asarray(x, dtype=np.complex128)
        if arr.ndim == 1:
            return float(self.func(canonicalize(arr)[None, :])[0])
        return np.asarray(self.func(arr), dtype=np.float64)

    @property
    def sup_norm_bound(self) -> float | None:
        if self.matrix is not None:
            return float(np.max(np.abs(np.linalg.eigvalsh(self.matrix))))
        return None


def quadratic(obs: np.ndarray, name: str = "quadratic") -> Observable:
    o = np.asarray(obs, dtype=np.complex128)
    o = (o + o.conj().T) / 2
    # |<x,Ox> - <y,Oy>| = |tr(O (pi_x - pi_y))| <= ||O|| * ||pi_x - pi_y||_1 = 2 ||O|| d(x,y)
    lip = 2 * float(np.max(np.abs(np.linalg.eigvalsh(o))))

    def f(x):
        return np.einsum("ni,ij,nj->n", x.conj(), o, x).real

    return Observable(name, f, 1.0, lip, o)


def population(index: int, d: int) -> Observable:
    """``x -> |<e_index, x>|^2``."""
    o = np.zeros((d, d), dtype=np.complex128)
    o[index, index] = 1.0
    ob = quadratic(o, f"population:{index}")
    return Observable(ob.name, lambda x: np.abs(x[:, index]) ** 2, 1.0, 2.0, o)


def constant(c: float, d: int) -> Observable:
    c = float(c)
    return Observable(f"constant:{c!r}", lambda x: np.full(x.shape[0], c), 1.0, 0.0, c * np.eye(d))


def amplitude(index: int) -> Observable:
    """``x -> |<e_index, x>|``; only 1/2-Hölder."""
    return Observable(f"amplitude:{index}", lambda x: np.abs(x[:, index]), 0.5, np.sqrt(2.0))


def distance_to(target: ProjectiveState, name: str | None = None) -> Observable:
    v = target.vector

    def f(x):
        return rowwise_distance(np.broadcast_to(v, x.shape), x)

    return Observable(name or "distance", f, 1.0, 1.0)


def indicator_of(states: list[ProjectiveState], name: str = "indicator") -> Observable:
    """Indicator of a finite set of states (discontinuous)."""
    keys = {tuple(s.key) for s in states}

    def f(x):
        k = state_keys(canonicalize(x))
        return np.array([1.0 if tuple(row) in keys else 0.0 for row in k])

    return Observable(name, f, 1.0, np.inf, None, continuous=False)


def parse_observable(spec: str, d: int) -> Observable:
    """Build a named observable: ``population:i``, ``amplitude:i``, ``distance:i``,
    ``constant:c`` or ``indicator_basis`` (indicator of the basis states)."""
    name, _, arg = spec.partition(":")
    if name == "population":
        return population(int(arg or 0), d)
    if name == "amplitude":
        return amplitude(int(arg or 0))
    if name == "distance":
        return distance_to(ProjectiveState.basis(d, int(arg or 0)), spec)
    if name == "constant":
        return constant(float(arg or 1.0), d)
    if name == "indicator_basis":
        return indicator_of([ProjectiveState.basis(d, i) for i in range(d)], spec)
    raise ValueError(f"unknown observable {spec!r}")
