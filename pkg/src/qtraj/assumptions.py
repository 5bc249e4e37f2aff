"""Checks of the purification and ergodicity conditions on a Kraus family.

Ergodicity is read off the spectrum of the vectorized channel: a unique fixed
density matrix is the same thing as a one-dimensional eigenvalue-1 eigenspace
(the channel preserves hermiticity, so the complex and hermitian fixed spaces
have equal dimension).

Purification asks whether some projector of rank >= 2 sees every word
operator ``W^* W`` compressed to a multiple of itself.  Only the linear span
``V`` of ``{W_w^* W_w}`` matters, and it can be grown without enumerating
words: the span for length n+1 is spanned by ``A_i^* X A_i`` over a basis X of
the length-n span.  A rank >= 2 projector works iff some rank-2 sub-projector
does, so the search is over 2-planes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.optimize import minimize

from .errors import NonUniqueFixedPoint, PreconditionError
from .model import DensityMatrix, KrausFamily, Word, channel_matrix

SPECTRAL_TOL = 1e-8
RANK_TOL = 1e-8

PurStatus = Literal["yes", "no", "unknown"]


@dataclass(frozen=True)
class ChannelSpectrum:
    eigenvalues: np.ndarray
    fixed_space_dim: int
    peripheral_count: int

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(self.eigenvalues)))


def channel_spectrum(family: KrausFamily, tol: float = SPECTRAL_TOL) -> ChannelSpectrum:
    phi = channel_matrix(family)
    ev = np.linalg.eigvals(phi)
    sv = np.linalg.svd(phi - np.eye(phi.shape[0]), compute_uv=False)
    fixed = int(np.sum(sv <= tol))
    peripheral = int(np.sum(np.abs(ev) >= 1 - tol))
    order = np.argsort(-np.abs(ev), kind="stable")
    return ChannelSpectrum(ev[order], fixed, peripheral)


def _fixed_space(family: KrausFamily, tol: float) -> np.ndarray:
    phi = channel_matrix(family)
    _, s, vh = np.linalg.svd(phi - np.eye(phi.shape[0]))
    null = vh[s <= tol].conj()
    if null.shape[0] == 0:
        # numerically every channel has a fixed point; take the closest direction
        null = vh[-1:].conj()
    return null


def compute_rho_inv(family: KrausFamily, tol: float = SPECTRAL_TOL) -> DensityMatrix:
    """Unique fixed density matrix of the channel.

    Raises :class:`NonUniqueFixedPoint` when the eigenvalue-1 space has
    dimension above one.
    """
    null = _fixed_space(family, tol)
    if null.shape[0] > 1:
        raise NonUniqueFixedPoint(f"channel fixed space has dimension {null.shape[0]}")
    d = family.dim
    x = null[0].reshape(d, d)
    tr = np.trace(x)
    x = x / tr if abs(tr) > 1e-14 else x
    x = (x + x.conj().T) / 2
    w, v = np.linalg.eigh(x)
    if w.sum() < 0:
        w = -w
    w = np.where(w < 1e-10, 0.0, w)
    rho = (v * w) @ v.conj().T
    rho /= np.trace(rho).real
    return DensityMatrix((rho + rho.conj().T) / 2)


def check_erg(family: KrausFamily, tol: float = SPECTRAL_TOL) -> tuple[bool, int | None]:
    """``(erg_holds, dim E)``; ``dim E`` is ``None`` when ergodicity fails."""
    null = _fixed_space(family, tol)
    if null.shape[0] != 1:
        return False, None
    rho = compute_rho_inv(family, tol)
    return True, int(np.sum(np.linalg.eigvalsh(rho.matrix) > RANK_TOL))


def estimate_period(family: KrausFamily, tol: float = SPECTRAL_TOL) -> int:
    """Number of peripheral channel eigenvalues (``|lambda| >= 1 - tol``)."""
    erg, _ = check_erg(family, tol)
    if not erg:
        raise PreconditionError("period is only defined once ergodicity holds")
    return channel_spectrum(family, tol).peripheral_count


# -- purification -----------------------------------------------------------


def _herm_vec(m: np.ndarray) -> np.ndarray:
    """Real coordinates of a hermitian matrix (d^2 reals)."""
    return np.concatenate([m.real.ravel(), m.imag.ravel()])


@dataclass
class _SpanBuilder:
    tol: float
    basis: list = field(default_factory=list)  # orthonormal real coordinate vectors
    mats: list = field(default_factory=list)
    words: list = field(default_factory=list)

    def offer(self, m: np.ndarray, word: Word) -> bool:
        v = _herm_vec(m)
        for b in self.basis:
            v = v - (b @ v) * b
        nv = np.linalg.norm(v)
        if nv <= self.tol * max(1.0, np.linalg.norm(_herm_vec(m))):
            return False
        self.basis.append(v / nv)
        self.mats.append(m)
        self.words.append(word)
        return True


def word_gram_span(family: KrausFamily, max_word_len: int, tol: float = 1e-9):
    """Basis of ``span{W_w^* W_w : |w| <= L}`` with the word realizing each element.

    Returns ``(mats, words, stabilized)`` where ``stabilized`` says the span
    stopped growing before ``max_word_len`` was exhausted.  The identity is
    offered first (as the empty word) since it always lies in the span.
    """
    ops = family.operators
    sb = _SpanBuilder(tol)
    sb.offer(np.eye(family.dim, dtype=np.complex128), ())
    frontier = [(np.eye(family.dim, dtype=np.complex128), ())]
    stabilized = False
    for _length in range(1, max_word_len + 1):
        grown = []
        for x, w in frontier:
            for i in range(family.size):
                # prepending i: W_{(i, w)} = W_w A_i  ->  A_i^* (W_w^* W_w) A_i
                m = ops[i].conj().T @ x @ ops[i]
                m = (m + m.conj().T) / 2
                wi = (i + 1,) + w
                if sb.offer(m, wi):
                    grown.append((m, wi))
        if not grown:
            stabilized = True
            break
        # the span for length n+1 is the image of a basis of the length-n span
        frontier = [(m, w) for m, w in zip(sb.mats, sb.words)]
    return sb.mats, sb.words, stabilized


def _scalar_defect(mats: list, frame: np.ndarray) -> float:
    total = 0.0
    for m in mats:
        c = frame.conj().T @ m @ frame
        k = frame.shape[1]
        dev = c - np.trace(c) / k * np.eye(k)
        total += float(np.sum(np.abs(dev) ** 2))
    return total


def _eigenspace_candidates(mats: list, d: int, rng: np.random.Generator):
    coeffs = rng.standard_normal(len(mats))
    r = sum(c * m for c, m in zip(coeffs, mats))
    w, v = np.linalg.eigh((r + r.conj().T) / 2)
    groups, start = [], 0
    for j in range(1, d + 1):
        if j == d or abs(w[j] - w[start]) > 1e-8 * max(1.0, abs(w[start])):
            if j - start >= 2:
                groups.append(v[:, start:j])
            start = j
    return groups


def _search_two_plane(mats: list, d: int, rng: np.random.Generator, restarts: int):
    def unpack(z):
        a = (z[: 2 * d] + 1j * z[2 * d :]).reshape(d, 2)
        q, _ = np.linalg.qr(a)
        return q

    best = (np.inf, None)
    for _ in range(restarts):
        z0 = rng.standard_normal(4 * d)
        res = minimize(lambda z: _scalar_defect(mats, unpack(z)), z0, method="BFGS",
                       options={"gtol": 1e-14, "maxiter": 2000})
        if res.fun < best[0]:
            best = (res.fun, unpack(res.x))
        if best[0] < 1e-20:
            break
    return best


@dataclass(frozen=True)
class PurResult:
    status: PurStatus
    witness: Word | None = None
    projector: np.ndarray | None = None
    span_dim: int = 0
    basis_words: tuple = ()
    stabilized: bool = False


def check_pur(family: KrausFamily, max_word_len: int | None = None, *,
              seed: int = 0, restarts: int = 12) -> PurResult:
    """Decide the purification condition at word length ``max_word_len`` (default d^2).

    ``yes`` carries the shortest word whose ``W^* W`` is not a multiple of the
    identity; ``no`` carries a rank >= 2 projector on which every word acts
    as a scalar.  In dimension 2 the answer is exact.  In higher dimension the
    answer is exact when the span is trivial or all hermitian matrices;
    otherwise a numerical 2-plane search may find a counter-projector, and
    ``unknown`` is returned when it does not.
    """
    d = family.dim
    L = d * d if max_word_len is None else int(max_word_len)
    if L < 1:
        raise ValueError("max_word_len must be >= 1")
    mats, words, stabilized = word_gram_span(family, L)
    span_dim = len(mats)
    witness = words[1] if span_dim > 1 else None
    common = dict(span_dim=span_dim, basis_words=tuple(words), stabilized=stabilized)

    if span_dim == 1:
        status: PurStatus = "no" if stabilized else "unknown"
        return PurResult(status, projector=np.eye(d), **common)
    if d == 2 or span_dim == d * d:
        return PurResult("yes", witness=witness, **common)

    rng = np.random.default_rng(seed)
    traceless = [m - np.trace(m).real / d * np.eye(d) for m in mats[1:]]
    for frame in _eigenspace_candidates(traceless, d, rng):
        if _scalar_defect(traceless, frame) < 1e-18:
            proj = frame @ frame.conj().T
            return PurResult("no" if stabilized else "unknown", projector=proj, **common)
    defect, frame = _search_two_plane(traceless, d, rng, restarts)
    if defect < 1e-18 and stabilized:
        return PurResult("no", projector=frame @ frame.conj().T, **common)
    return PurResult("unknown", witness=witness, **common)


@dataclass(frozen=True)
class AssumptionReport:
    pur_holds: PurStatus
    pur_witness: Word | None
    pur_projector: np.ndarray | None
    erg_holds: bool
    rho_inv: DensityMatrix | None
    E_dim: int | None
    period_m: int | None
    spectrum: ChannelSpectrum

    @property
    def ok(self) -> bool:
        return self.erg_holds and self.pur_holds == "yes"

    def to_dict(self) -> dict:
        def cmat(a):
            return None if a is None else [[[float(z.real), float(z.imag)] for z in row] for row in a]

        return {
            "pur_holds": self.pur_holds,
            "pur_witness": None if self.pur_witness is None else list(self.pur_witness),
            "pur_projector": cmat(self.pur_projector),
            "erg_holds": self.erg_holds,
            "rho_inv": None if self.rho_inv is None else cmat(self.rho_inv.matrix),
            "E_dim": self.E_dim,
            "period_m": self.period_m,
            "channel_eigenvalues": [[float(z.real), float(z.imag)] for z in self.spectrum.eigenvalues],
            "fixed_space_dim": self.spectrum.fixed_space_dim,
            "peripheral_count": self.spectrum.peripheral_count,
        }


def check_assumptions(family: KrausFamily, max_word_len: int | None = None) -> AssumptionReport:
    spec = channel_spectrum(family)
    erg, e_dim = check_erg(family)
    rho = compute_rho_inv(family) if erg else None
    period = spec.peripheral_count if erg else None
    pur = check_pur(family, max_word_len)
    return AssumptionReport(pur.status, pur.witness, pur.projector, erg, rho, e_dim, period, spec)
