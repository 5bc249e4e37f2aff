"""Closed-form reference models: Keep-Switch, degenerate controls, random families."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .engine import replica_stream
from .errors import PreconditionError
from .model import KrausFamily, ProjectiveState, metric_distance, validate_stochasticity
from .observables import Observable


@dataclass(frozen=True)
class KeepSwitchModel:
    """Two-level model: ``A_1 = diag(sqrt p, sqrt q)`` keeps, ``A_2`` swaps the basis states."""

    p: float

    def __post_init__(self):
        if not (0.0 < self.p < 0.5):
            raise PreconditionError(f"Keep-Switch requires 0 < p < 1/2, got {self.p!r}")

    @property
    def q(self) -> float:
        return 1.0 - self.p

    @property
    def family(self) -> KrausFamily:
        sp, sq = np.sqrt(self.p), np.sqrt(self.q)
        return KrausFamily.from_matrices([np.diag([sp, sq]), np.array([[0.0, sp], [sq, 0.0]])])

    @property
    def e_a(self) -> ProjectiveState:
        return ProjectiveState.basis(2, 0)

    @property
    def e_b(self) -> ProjectiveState:
        return ProjectiveState.basis(2, 1)

    @property
    def e_plus(self) -> ProjectiveState:
        return ProjectiveState(np.array([1.0, 1.0]) / np.sqrt(2.0))

    @property
    def invariant_atoms(self) -> tuple[np.ndarray, np.ndarray]:
        return np.stack([self.e_a.vector, self.e_b.vector]), np.array([self.p, self.q])


def build_keep_switch(p: float = 0.3) -> KrausFamily:
    return KeepSwitchModel(p).family


@dataclass(frozen=True)
class KeepSwitchOracles:
    atoms: np.ndarray
    weights: np.ndarray
    mean: float
    gamma_sq: float
    g_tilde_atoms: tuple[float, float]

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "mean": self.mean, "gamma_sq": self.gamma_sq,
                "g_tilde_atoms": list(self.g_tilde_atoms)}


def keep_switch_oracles(model: KeepSwitchModel, g: Observable) -> KeepSwitchOracles:
    """Exact invariant quantities.

    On the atoms the chain is i.i.d. (``e_a`` w.p. p, ``e_b`` w.p. q from
    either atom), so ``Pi g`` is the constant ``nu_inv(g)`` there, ``g~`` on the
    atoms is ``g - nu_inv(g)`` and ``gamma^2`` is the variance of ``g`` under
    ``nu_inv``.
    """
    atoms, w = model.invariant_atoms
    ga, gb = (float(v) for v in g.func(atoms))
    p, q = model.p, model.q
    mean = p * ga + q * gb
    gamma = p * ga**2 + q * gb**2 - mean**2
    return KeepSwitchOracles(atoms, w, mean, max(gamma, 0.0), (ga - mean, gb - mean))


def non_contraction_ratio(model: KeepSwitchModel) -> float:
    """``E[d(V e_a, V e_b)] / d(e_a, e_b)``: either branch maps the pair to a pair at distance 1."""
    fam = model.family
    ea, eb = model.e_a.vector, model.e_b.vector
    num = 0.0
    for a in fam.operators:
        ya, yb = a @ ea, a @ eb
        w = float(np.vdot(ya, ya).real)  # = ||A e_a||^2, the branch probability from e_a
        num += w * metric_distance(ProjectiveState(ya), ProjectiveState(yb))
    return num / metric_distance(model.e_a, model.e_b)


def non_contraction_ratio_exact(p: Fraction) -> Fraction:
    """Same ratio in rational arithmetic.

    Only Gram entries are needed: ``||A e_a||^2 = (A^*A)_aa`` and
    ``d(A e_a, A e_b)^2 = 1 - |(A^*A)_ab|^2 / ((A^*A)_aa (A^*A)_bb)``, all
    rational for rational p (``A_1^*A_1 = diag(p, q)``, ``A_2^*A_2 = diag(q, p)``).
    """
    p = Fraction(p)
    q = 1 - p
    grams = [((p, Fraction(0)), (Fraction(0), q)), ((q, Fraction(0)), (Fraction(0), p))]
    total = Fraction(0)
    for (gaa, gab), (_, gbb) in grams:
        d_sq = 1 - gab * gab / (gaa * gbb)
        d = _rational_sqrt(d_sq)
        total += gaa * d
    return total  # d(e_a, e_b) = 1


def _rational_sqrt(x: Fraction) -> Fraction:
    from math import isqrt

    n, m = isqrt(x.numerator), isqrt(x.denominator)
    if n * n != x.numerator or m * m != x.denominator:
        raise ValueError(f"{x} is not a rational square")
    return Fraction(n, m)


@dataclass(frozen=True)
class LatticePath:
    """Exact Keep-Switch path from ``e_+`` in log-ratio coordinates.

    ``log(|x_a|^2 / |x_b|^2) = k_n * log(p/q)`` with integer ``k_n``.  The
    state is a basis atom only if the log-ratio is infinite, which an integer
    ``k_n`` never reaches.
    """

    k: np.ndarray
    word: np.ndarray

    @property
    def is_atom(self) -> np.ndarray:
        return np.zeros(self.k.shape, dtype=bool)

    def log_ratio(self, p: float) -> np.ndarray:
        return self.k * np.log(p / (1 - p))


def keep_switch_lattice_path(model: KeepSwitchModel, n_steps: int, seed: int, replica: int = 0) -> LatticePath:
    """Sample a Keep-Switch path from ``e_+`` with exact integer branch arithmetic.

    From ``x`` with ``|x_a|^2 = a``: branch 1 has weight ``p a + q (1-a)``
    and multiplies the ratio ``a/(1-a)`` by ``p/q``; branch 2 has weight
    ``p (1-a) + q a`` and maps the ratio ``r`` to ``(q/p)/r``.  With
    ``r = (p/q)^k`` this is ``k -> k+1`` and ``k -> 1-k``.  Weights are
    evaluated from ``k`` through ``sigma(k c)`` with ``c = log(p/q)``.

    Uses the same replica stream and branch rule as the floating-point
    sampler, so both follow the same word until the latter underflows.
    """
    p, q = model.p, model.q
    c = np.log(p / q)
    rng = replica_stream(seed, replica)
    rng.random()  # initial-atom draw, unused for a point mass
    u = rng.random(n_steps)
    k = np.empty(n_steps + 1, dtype=np.int64)
    word = np.empty(n_steps, dtype=np.int64)
    k[0] = 0
    for t in range(n_steps):
        kt = int(k[t])
        a = 0.5 * (1.0 + np.tanh(kt * c / 2.0))  # |x_a|^2 = r/(1+r)
        w1 = p * a + q * (1.0 - a)
        if u[t] * (w1 + p * (1.0 - a) + q * a) < w1:
            k[t + 1] = kt + 1
            word[t] = 1
        else:
            k[t + 1] = 1 - kt
            word[t] = 2
    return LatticePath(k, word)


def negative_controls() -> list[tuple[str, KrausFamily, dict]]:
    """Families that break the assumptions, with the expected checker outcomes."""
    ident = KrausFamily.from_matrices([np.eye(2)])
    unitary = KrausFamily.from_matrices([np.diag([1.0, 1j])])
    # two invariant blocks, each a valid 1-dim family: A_i = diag(b_i, c_i)
    b = np.sqrt([0.5, 0.5])
    c = np.sqrt([0.2, 0.8])
    blocks = KrausFamily.from_matrices([np.diag([b[0], c[0]]), np.diag([b[1], c[1]])])
    cycle = KrausFamily.from_matrices([np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([[0.0, 1.0], [0.0, 0.0]])])
    return [
        ("identity", ident, {"pur_holds": "no", "erg_holds": False}),
        ("unitary", unitary, {"pur_holds": "no", "erg_holds": False}),
        ("block_diagonal", blocks, {"pur_holds": "yes", "erg_holds": False}),
        ("two_cycle", cycle, {"erg_holds": True, "period_m": 2}),
    ]


def random_valid_family(d: int, K: int, seed: int, *, max_retries: int = 20) -> KrausFamily:
    """``A_i = B_i S^{-1/2}`` with Gaussian ``B_i`` and ``S = sum B_i^* B_i``."""
    if d < 2 or K < 2:
        raise PreconditionError("random families need d >= 2 and K >= 2")
    rng = np.random.default_rng(seed)
    for _ in range(max_retries):
        b = rng.standard_normal((K, d, d)) + 1j * rng.standard_normal((K, d, d))
        s = np.einsum("kji,kjl->il", b.conj(), b)
        w, v = np.linalg.eigh((s + s.conj().T) / 2)
        if w.min() < 1e-12:
            continue
        s_inv_half = (v / np.sqrt(w)) @ v.conj().T
        fam = KrausFamily.from_matrices(b @ s_inv_half)
        if validate_stochasticity(fam).passed:
            return fam
    raise PreconditionError(f"could not draw a well-conditioned family in {max_retries} tries")


def keep_switch_exact_cumulant(model: KeepSwitchModel, g: Observable, n: int, beta: float, z: float) -> float:
    """Exact ``(n/a^2) log E exp((a/n) z S_n(g_bar))`` started from ``nu_inv``.

    Started on the atoms the chain is i.i.d. with law ``nu_inv``, so the
    log-moment generating function of ``S_n`` is ``n`` times that of one draw.
    """
    orc = keep_switch_oracles(model, g)
    a = float(n) ** beta
    theta = (a / n) * z
    gbar = np.array(orc.g_tilde_atoms)
    one = float(np.log(np.dot(orc.weights, np.exp(theta * gbar))))
    return n / a**2 * n * one
