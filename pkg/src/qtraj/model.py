"""Kraus families, pure states on projective space, density matrices.

States are stored as phase-canonical unit vectors: the entry of largest
modulus is made real and non-negative (ties go to the lowest index).  Two
vectors that differ by a global phase therefore share one representative,
which lets the rest of the package hash and compare states directly.

Words are tuples of 1-based operator indices ``(i_1, ..., i_n)``; ``i_1`` is
applied first, so the word product is ``A_{i_n} ... A_{i_1}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionMismatch, ZeroBranch

ZERO_BRANCH_FLOOR = 1e-300
KEY_DECIMALS = 12

Word = tuple[int, ...]


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def canonicalize(vectors: np.ndarray) -> np.ndarray:
    """Normalize and phase-fix a vector or a stack of vectors (last axis).

    Returns a new complex array; zero vectors are left as zeros.
    """
    v = np.array(vectors, dtype=np.complex128, copy=True)
    single = v.ndim == 1
    v = np.atleast_2d(v)
    norms = np.linalg.norm(v, axis=1)
    nz = norms > 0
    v[nz] /= norms[nz, None]
    idx = np.argmax(np.abs(v), axis=1)
    rows = np.arange(v.shape[0])
    lead = v[rows, idx]
    mod = np.abs(lead)
    phase = np.ones_like(lead)
    phase[mod > 0] = lead[mod > 0] / mod[mod > 0]
    v *= np.conj(phase)[:, None]
    v[rows, idx] = mod
    return v[0] if single else v


def state_keys(vectors: np.ndarray, decimals: int = KEY_DECIMALS) -> np.ndarray:
    """Rounded real view of canonical vectors, usable with ``np.unique(axis=0)``."""
    v = np.atleast_2d(vectors)
    out = np.empty((v.shape[0], 2 * v.shape[1]))
    out[:, 0::2] = np.round(v.real, decimals)
    out[:, 1::2] = np.round(v.imag, decimals)
    out += 0.0  # fold -0.0 into 0.0
    return out


def pairwise_distance(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Matrix of projective distances ``sqrt(1 - |<x,y>|^2)`` between two stacks.

    Uses the orthogonal-component form, which stays accurate for nearby states.
    """
    xs = np.atleast_2d(xs)
    ys = np.atleast_2d(ys)
    overlap = xs.conj() @ ys.T  # <x_i, y_j>
    # ||y - <x,y> x||^2 = 1 - |<x,y>|^2 for unit vectors
    resid = ys[None, :, :] - overlap[:, :, None] * xs[:, None, :]
    return np.sqrt(np.sum(np.abs(resid) ** 2, axis=2))


def rowwise_distance(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Projective distance between matching rows of two stacks."""
    xs = np.atleast_2d(xs)
    ys = np.atleast_2d(ys)
    overlap = np.sum(xs.conj() * ys, axis=1)
    resid = ys - overlap[:, None] * xs
    return np.sqrt(np.sum(np.abs(resid) ** 2, axis=1))


class ProjectiveState:
    """A point of P(C^d), held as its canonical unit representative."""

    __slots__ = ("_vec", "_key")

    def __init__(self, vector: Sequence[complex] | np.ndarray):
        v = np.asarray(vector, dtype=np.complex128)
        if v.ndim != 1 or v.size < 1:
            raise DimensionMismatch(f"state must be a 1-d vector, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or np.linalg.norm(v) == 0:
            raise ValueError("state vector must be finite and non-zero")
        self._vec = _readonly(canonicalize(v))
        self._key = tuple(state_keys(self._vec)[0])

    @classmethod
    def basis(cls, d: int, i: int) -> "ProjectiveState":
        e = np.zeros(d, dtype=np.complex128)
        e[i] = 1.0
        return cls(e)

    @property
    def vector(self) -> np.ndarray:
        return self._vec

    @property
    def dim(self) -> int:
        return self._vec.shape[0]

    @property
    def key(self) -> tuple:
        return self._key

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ProjectiveState) and self._key == other._key

    def __hash__(self) -> int:
        return hash(self._key)

    def __repr__(self) -> str:
        return f"ProjectiveState({np.array2string(self._vec, precision=6)})"


def metric_distance(x: ProjectiveState, y: ProjectiveState) -> float:
    """``d(x, y) = sqrt(1 - |<x, y>|^2)``; equals ``||pi_x - pi_y||_inf``."""
    if x.dim != y.dim:
        raise DimensionMismatch(f"dims differ: {x.dim} vs {y.dim}")
    return float(rowwise_distance(x.vector, y.vector)[0])


@dataclass(frozen=True)
class DensityMatrix:
    matrix: np.ndarray
    check: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.complex128)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionMismatch(f"density matrix must be square, got {m.shape}")
        if self.check:
            if np.max(np.abs(m - m.conj().T)) > 1e-10:
                raise ValueError("density matrix is not hermitian")
            ev = np.linalg.eigvalsh((m + m.conj().T) / 2)
            if ev.min() < -1e-10:
                raise ValueError(f"density matrix has negative eigenvalue {ev.min():.3e}")
            if abs(np.trace(m).real - 1) > 1e-10:
                raise ValueError(f"density matrix trace {np.trace(m).real!r} != 1")
        object.__setattr__(self, "matrix", _readonly(m))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def maximally_mixed(cls, d: int) -> "DensityMatrix":
        return cls(np.eye(d) / d)

    def trace_distance_norm(self, other: "DensityMatrix") -> float:
        """Trace norm ``||rho - sigma||_1``."""
        return float(np.sum(np.abs(np.linalg.eigvalsh(self.matrix - other.matrix))))


def projector_of(x: ProjectiveState) -> DensityMatrix:
    """Rank-one orthogonal projector onto ``C x``."""
    v = x.vector
    return DensityMatrix(np.outer(v, v.conj()))


@dataclass(frozen=True)
class KrausFamily:
    """Finitely supported measure ``mu = sum_i delta_{A_i}`` on ``M_d(C)``."""

    operators: np.ndarray
    tolerance: float = 1e-10

    def __post_init__(self):
        ops = np.array(self.operators, dtype=np.complex128)
        if ops.ndim == 2:
            ops = ops[None]
        if ops.ndim != 3 or ops.shape[1] != ops.shape[2]:
            raise DimensionMismatch(f"operators must be a stack of square matrices, got {ops.shape}")
        if ops.shape[0] < 1:
            raise ValueError("a Kraus family needs at least one operator")
        if not np.all(np.isfinite(ops)):
            raise ValueError("operators must have finite entries")
        if self.tolerance < 0:
            raise ValueError("tolerance must be non-negative")
        object.__setattr__(self, "operators", _readonly(ops))

    @classmethod
    def from_matrices(cls, mats: Iterable, tolerance: float = 1e-10) -> "KrausFamily":
        mats = [np.asarray(m, dtype=np.complex128) for m in mats]
        shapes = {m.shape for m in mats}
        if len(shapes) != 1:
            raise DimensionMismatch(f"operators have differing shapes {sorted(shapes)}")
        return cls(np.stack(mats), tolerance)

    @property
    def dim(self) -> int:
        return self.operators.shape[1]

    @property
    def size(self) -> int:
        return self.operators.shape[0]

    def __len__(self) -> int:
        return self.size

    # JSON: {"dim": d, "operators": [[[re, im], ...], ...]} with row-major rows
    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "operators": [
                [[[float(z.real), float(z.imag)] for z in row] for row in op]
                for op in self.operators
            ],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, data: dict, tolerance: float = 1e-10) -> "KrausFamily":
        try:
            d = int(data["dim"])
            raw = data["operators"]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"family JSON needs 'dim' and 'operators': {exc}") from None
        mats = []
        for k, op in enumerate(raw):
            a = np.asarray(op, dtype=np.float64)
            if a.shape != (d, d, 2):
                raise DimensionMismatch(f"operator {k} has shape {a.shape[:2]}, expected ({d}, {d})")
            mats.append(a[..., 0] + 1j * a[..., 1])
        if not mats:
            raise ValueError("family JSON has no operators")
        return cls(np.stack(mats), tolerance)

    @classmethod
    def from_json(cls, text: str, tolerance: float = 1e-10) -> "KrausFamily":
        return cls.from_dict(json.loads(text), tolerance)


@dataclass(frozen=True)
class StochasticityReport:
    residual: float
    tolerance: float
    passed: bool

    def to_dict(self) -> dict:
        return {"residual": self.residual, "tolerance": self.tolerance, "passed": self.passed}


def validate_stochasticity(family: KrausFamily) -> StochasticityReport:
    """Sup-entry norm of ``sum_i A_i^* A_i - Id`` against the family tolerance."""
    ops = family.operators
    s = np.einsum("kji,kjl->il", ops.conj(), ops)
    residual = float(np.max(np.abs(s - np.eye(family.dim))))
    return StochasticityReport(residual, family.tolerance, residual <= family.tolerance)


def apply_kraus(v: np.ndarray, x: ProjectiveState) -> tuple[ProjectiveState, float]:
    """Return ``(v . x, ||v x||^2)``; raise :class:`ZeroBranch` if ``v x`` vanishes."""
    v = np.asarray(v, dtype=np.complex128)
    if v.shape != (x.dim, x.dim):
        raise DimensionMismatch(f"operator shape {v.shape} does not act on C^{x.dim}")
    y = v @ x.vector
    w = float(np.vdot(y, y).real)
    if w < ZERO_BRANCH_FLOOR:
        raise ZeroBranch(f"||v x||^2 = {w:.3e} below floor")
    return ProjectiveState(y), w


def branch_weights(family: KrausFamily, x: ProjectiveState) -> np.ndarray:
    """Vector of transition weights ``||A_i x||^2``."""
    y = family.operators @ x.vector
    return np.sum(np.abs(y) ** 2, axis=1)


def _check_word(family: KrausFamily, word: Sequence[int]) -> Word:
    w = tuple(int(i) for i in word)
    for i in w:
        if not 1 <= i <= family.size:
            raise ValueError(f"word index {i} outside 1..{family.size}")
    return w


def word_product(family: KrausFamily, word: Sequence[int]) -> tuple[np.ndarray, float]:
    """``W = A_{i_n} ... A_{i_1}`` as ``(W / s, log s)`` with ``max|W/s| = 1``."""
    w = _check_word(family, word)
    d = family.dim
    mat = np.eye(d, dtype=np.complex128)
    log_scale = 0.0
    for i in w:
        mat = family.operators[i - 1] @ mat
        s = np.max(np.abs(mat))
        if s == 0:
            return mat, -np.inf
        mat /= s
        log_scale += np.log(s)
    return mat, log_scale


def channel_apply(family: KrausFamily, rho: DensityMatrix) -> DensityMatrix:
    """``phi(rho) = sum_i A_i rho A_i^*``."""
    if rho.dim != family.dim:
        raise DimensionMismatch(f"rho is {rho.dim}x{rho.dim}, family acts on C^{family.dim}")
    ops = family.operators
    out = np.einsum("kij,jl,kml->im", ops, rho.matrix, ops.conj())
    return DensityMatrix(out, check=False)


def channel_matrix(family: KrausFamily) -> np.ndarray:
    """Matrix of ``phi`` acting on row-major vectorized d x d matrices."""
    ops = family.operators
    return np.einsum("kij,klm->iljm", ops, ops.conj()).reshape(family.dim**2, family.dim**2)


def dual_channel_apply(family: KrausFamily, obs: np.ndarray) -> np.ndarray:
    """Heisenberg-picture action ``phi^*(O) = sum_i A_i^* O A_i``."""
    ops = family.operators
    return np.einsum("kji,jl,klm->im", ops.conj(), obs, ops)
