"""Markov-operator calculus: Pi on functions, the Poisson solution, h and gamma^2.

``Pi^k f(x)`` is computed by pushing the point mass at ``x`` forward level by
level through the Kraus branches.  Children that land on the same canonical
state (rounded to ``merge_decimals``) are merged, which turns the ``K^k``
tree into a lattice for models such as Keep-Switch; children whose
accumulated mass drops below ``prune_eps`` are dropped and their mass is
reported so the truncation error stays bounded by ``sup|f| * pruned``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .assumptions import compute_rho_inv
from .engine import TrajectoryConfig, TrajectoryPath, sample_trajectory
from .errors import NoConvergence
from .model import ZERO_BRANCH_FLOOR, KrausFamily, ProjectiveState, canonicalize, dual_channel_apply, state_keys
from .observables import Observable

log = logging.getLogger(__name__)

DEFAULT_PRUNE_EPS = 1e-12
DEFAULT_MERGE_DECIMALS = 12
MAX_NODES = 4_000_000

StateFn = Callable[[np.ndarray], np.ndarray]


def _as_fn(g) -> StateFn:
    if isinstance(g, Observable):
        return g.func
    return g


def _as_states(x) -> np.ndarray:
    if isinstance(x, ProjectiveState):
        return x.vector[None, :]
    return canonicalize(np.atleast_2d(np.asarray(x, dtype=np.complex128)))


def _children(ops: np.ndarray, states: np.ndarray):
    y = np.einsum("kij,mj->mki", ops, states)
    w = np.sum(np.abs(y) ** 2, axis=2)
    return y, w


def pi_apply(family: KrausFamily, g, x) -> np.ndarray | float:
    """``Pi g(x) = sum_i ||A_i x||^2 g(A_i . x)``, skipping branches below 1e-300."""
    fn = _as_fn(g)
    states = _as_states(x)
    y, w = _children(family.operators, states)
    keep = w >= ZERO_BRANCH_FLOOR
    vals = np.zeros_like(w)
    if np.any(keep):
        kids = canonicalize(y[keep] / np.sqrt(w[keep])[:, None])
        vals[keep] = fn(kids)
    out = np.sum(w * vals, axis=1)
    return float(out[0]) if isinstance(x, ProjectiveState) else out


apply_Pi = pi_apply


def pi_levels(family: KrausFamily, fn: StateFn, roots: np.ndarray, *,
              prune_eps: float = DEFAULT_PRUNE_EPS,
              merge_decimals: int | None = DEFAULT_MERGE_DECIMALS,
              max_nodes: int = MAX_NODES) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(Pi^k f(roots), pruned_mass_k)`` for k = 0, 1, 2, ...

    ``pruned_mass_k`` is the cumulative mass abandoned up to level k, per root.
    """
    ops = family.operators
    K = family.size
    roots = np.atleast_2d(roots)
    R = roots.shape[0]
    rid = np.arange(R)
    states = roots
    mass = np.ones(R)
    pruned = np.zeros(R)
    yield np.asarray(fn(states), dtype=np.float64), pruned.copy()
    while True:
        y, w = _children(ops, states)
        cm = (mass[:, None] * w).ravel()
        w = w.ravel()
        kid_rid = np.repeat(rid, K)
        keep = w >= ZERO_BRANCH_FLOOR
        if prune_eps > 0:
            drop = keep & (cm < prune_eps)
            if np.any(drop):
                pruned += np.bincount(kid_rid[drop], weights=cm[drop], minlength=R)
            keep &= ~drop
        y = y.reshape(-1, family.dim)[keep]
        states = canonicalize(y / np.sqrt(w[keep])[:, None])
        mass = cm[keep]
        rid = kid_rid[keep]
        if merge_decimals is not None and states.shape[0] > 1:
            keys = np.column_stack([rid, state_keys(states, merge_decimals)])
            _, first, inv = np.unique(keys, axis=0, return_index=True, return_inverse=True)
            inv = inv.ravel()
            mass = np.bincount(inv, weights=mass)
            states = states[first]
            rid = rid[first]
        if states.shape[0] > max_nodes:
            raise NoConvergence(f"propagation tree exceeds {max_nodes} nodes; raise prune_eps")
        vals = np.bincount(rid, weights=mass * fn(states), minlength=R) if states.shape[0] else np.zeros(R)
        yield vals, pruned.copy()


def iterate_Pi(family: KrausFamily, g, x: ProjectiveState, k: int,
               prune_eps: float = DEFAULT_PRUNE_EPS,
               merge_decimals: int | None = DEFAULT_MERGE_DECIMALS) -> tuple[float, float]:
    """``(Pi^k g(x), pruned_mass)``; exact up to ``sup|g| * pruned_mass``."""
    if k < 0:
        raise ValueError("k must be >= 0")
    it = pi_levels(family, _as_fn(g), x.vector[None, :], prune_eps=prune_eps, merge_decimals=merge_decimals)
    for j, (vals, pruned) in enumerate(it):
        if j == k:
            return float(vals[0]), float(pruned[0])
    raise AssertionError("unreachable")


def haar_states(d: int, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, d)) + 1j * rng.standard_normal((n, d))
    return canonicalize(z)


def _cesaro_coeffs(n_blocks: int, m: int) -> np.ndarray:
    """Weights ``c_k`` with ``(1/m) sum_r sum_{k < N m + r} = sum_k c_k``."""
    top = n_blocks * m + m - 1
    k = np.arange(top)
    r = np.arange(m)
    return (k[:, None] < n_blocks * m + r[None, :]).sum(axis=1) / m


@dataclass(frozen=True)
class MeanEstimate:
    value: float
    source: str  # exact | trace | ergodic
    stderr: float = 0.0


def invariant_mean(family: KrausFamily, g: Observable, *, n: int = 200_000, seed: int = 0,
                   burn_in: int = 1000) -> MeanEstimate:
    """``E_{nu_inv}(g)``: exact trace formula for quadratic observables, else ergodic average."""
    if g.matrix is not None:
        rho = compute_rho_inv(family)
        return MeanEstimate(float(np.trace(g.matrix @ rho.matrix).real), "trace")
    start = ProjectiveState(np.ones(family.dim))
    path = sample_trajectory(TrajectoryConfig(family, start, n + burn_in, seed, 0))
    vals = g.func(path.states[burn_in + 1 :])
    return MeanEstimate(float(vals.mean()), "ergodic", batch_means_stderr(vals))


def batch_means_stderr(vals: np.ndarray, n_batches: int = 50) -> float:
    vals = np.asarray(vals, dtype=np.float64)
    if vals.size < 2 * n_batches:
        return float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
    usable = vals[: vals.size - vals.size % n_batches].reshape(n_batches, -1).mean(axis=1)
    return float(usable.std(ddof=1) / np.sqrt(n_batches))


@dataclass
class PoissonSolution:
    """Truncated Cesàro solution of ``(Id - Pi) g~ = g - E_{nu_inv}(g)``.

    ``g~`` is evaluated lazily at any state with a fixed truncation depth, so
    ``(Id - Pi) g~ - g_bar = -(1/m) sum_r Pi^{Nm+r} g_bar`` everywhere.  The
    gauge is the natural one of the Cesàro sum: ``E_{nu_inv}(g~) = 0``.

    With the ``quadratic`` backend ``g~(x) = <x, G x>`` for an explicit
    hermitian ``G`` and the residual bound holds on all of P(C^d); with the
    ``tree`` backend it is measured at the probe states.
    """

    family: KrausFamily
    observable: Observable
    mean: MeanEstimate
    period: int
    n_blocks: int
    prune_eps: float
    merge_decimals: int | None
    block_sups: list
    ratio: float
    residual_bound: float
    probe_residual: float
    pruned_mass: float
    probes: np.ndarray = field(repr=False)
    backend: str = "tree"
    matrix: np.ndarray | None = field(default=None, repr=False)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def depth(self) -> int:
        return self.n_blocks * self.period + self.period - 2

    def centered(self, states: np.ndarray) -> np.ndarray:
        return self.observable.func(states) - self.mean.value

    def _compute(self, states: np.ndarray) -> np.ndarray:
        if self.matrix is not None:
            return np.einsum("ni,ij,nj->n", states.conj(), self.matrix, states).real
        coeffs = _cesaro_coeffs(self.n_blocks, self.period)
        out = np.zeros(states.shape[0])
        if coeffs.size == 0:
            return out
        it = pi_levels(self.family, self.centered, states, prune_eps=self.prune_eps,
                       merge_decimals=self.merge_decimals)
        for c, (vals, _) in zip(coeffs, it):
            out += c * vals
        return out

    def values(self, x) -> np.ndarray:
        """``g~`` at a stack of states (memoized on canonical keys)."""
        states = _as_states(x)
        if states.shape[0] == 0:
            return np.zeros(0)
        if self.matrix is not None:
            return self._compute(states)
        keys = state_keys(states)
        uniq, first, inv = np.unique(keys, axis=0, return_index=True, return_inverse=True)
        inv = inv.ravel()
        ukeys = [row.tobytes() for row in uniq]
        vals = np.empty(len(ukeys))
        missing = []
        for j, kb in enumerate(ukeys):
            v = self._cache.get(kb)
            if v is None:
                missing.append(j)
            else:
                vals[j] = v
        chunk = 4096
        for s in range(0, len(missing), chunk):
            idx = np.array(missing[s : s + chunk])
            got = self._compute(states[first[idx]])
            vals[idx] = got
            for j, v in zip(idx, got):
                self._cache[ukeys[j]] = float(v)
        return vals[inv]

    def __call__(self, x):
        v = self.values(x)
        return float(v[0]) if isinstance(x, ProjectiveState) else v

    def pi_moments(self, x) -> tuple[np.ndarray, np.ndarray]:
        """``(Pi g~, Pi g~^2)`` at a stack of states."""
        states = _as_states(x)
        y, w = _children(self.family.operators, states)
        keep = w >= ZERO_BRANCH_FLOOR
        gv = np.zeros_like(w)
        if np.any(keep):
            kids = canonicalize(y[keep] / np.sqrt(w[keep])[:, None])
            gv[keep] = self.values(kids)
        return np.sum(w * gv, axis=1), np.sum(w * gv**2, axis=1)

    def pi_values(self, x) -> np.ndarray:
        return self.pi_moments(x)[0]

    def h(self, x) -> np.ndarray:
        """Conditional variance ``Pi g~^2 - (Pi g~)^2`` (clipped at 0)."""
        m1, m2 = self.pi_moments(x)
        return np.maximum(m2 - m1**2, 0.0)

    def residual(self, x) -> np.ndarray:
        """``(Id - Pi) g~ - g_bar`` at a stack of states."""
        states = _as_states(x)
        return self.values(states) - self.pi_values(states) - self.centered(states)

    def oscillation(self, n_probe: int = 1000, seed: int = 12345) -> float:
        """``max - min`` of ``g~`` over ``n_probe`` states: the basis states plus Haar-random ones."""
        return osc_probe(self, n_probe, seed)

    def diagnostics(self) -> dict:
        return {
            "observable": self.observable.name,
            "mean": self.mean.value,
            "mean_source": self.mean.source,
            "mean_stderr": self.mean.stderr,
            "period": self.period,
            "n_blocks": self.n_blocks,
            "depth": self.depth,
            "prune_eps": self.prune_eps,
            "block_sups": [float(b) for b in self.block_sups],
            "ratio": self.ratio,
            "probe_residual": self.probe_residual,
            "residual_bound": self.residual_bound,
            "pruned_mass": self.pruned_mass,
            "n_probes": int(self.probes.shape[0]),
            "backend": self.backend,
        }


def _tail_ratio(sups: list) -> float:
    tail = [b for b in sups[-4:]]
    ratios = [b1 / b0 for b0, b1 in zip(tail, tail[1:]) if b0 > 0]
    if not ratios:
        return 0.0 if sups and sups[-1] == 0 else 1.0
    return max(ratios)


def solve_poisson(family: KrausFamily, g: Observable, m: int = 1, tol: float = 1e-4, *,
                  mean: float | MeanEstimate | None = None,
                  probes: np.ndarray | None = None, n_probes: int = 16, probe_seed: int = 0,
                  prune_eps: float = DEFAULT_PRUNE_EPS,
                  merge_decimals: int | None = DEFAULT_MERGE_DECIMALS,
                  max_blocks: int = 200, backend: str = "auto") -> PoissonSolution:
    """Adaptive truncated Cesàro sum ``(1/m) sum_{r<m} sum_{k<Nm+r} Pi^k g_bar``.

    Blocks are added until the last block increment and its geometric-tail
    extrapolation are each below ``tol / 2``.

    ``backend="quadratic"`` (the default when ``g(x) = <x, O x>``) uses
    ``Pi^k g(x) = <x, phi*^k(O) x>`` and takes sups over all states as
    spectral norms.  ``backend="tree"`` pushes probe states through the
    branch tree, pruning subtrees lighter than ``prune_eps``; its cost grows
    like ``K^depth`` unless branches merge.
    """
    if m < 1:
        raise ValueError("period m must be >= 1")
    if backend not in ("auto", "quadratic", "tree"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "quadratic" and g.matrix is None:
        raise ValueError("the quadratic backend needs an observable with a matrix")
    if mean is None:
        mean_est = invariant_mean(family, g)
    elif isinstance(mean, MeanEstimate):
        mean_est = mean
    else:
        mean_est = MeanEstimate(float(mean), "exact")
    d = family.dim
    if probes is None:
        probes = probe_states(d, n_probes + d, probe_seed)
    probes = canonicalize(np.atleast_2d(probes))

    if backend == "quadratic" or (backend == "auto" and g.matrix is not None):
        return _solve_quadratic(family, g, m, tol, mean_est, probes, max_blocks)

    def gbar(s):
        return g.func(s) - mean_est.value

    terms: list[np.ndarray] = []
    it = pi_levels(family, gbar, probes, prune_eps=prune_eps, merge_decimals=merge_decimals)
    sups: list[float] = []
    pruned = 0.0

    def need(k):
        nonlocal pruned
        while len(terms) <= k:
            vals, pm = next(it)
            terms.append(vals)
            pruned = float(pm.max())

    def partial(n_blocks):
        c = _cesaro_coeffs(n_blocks, m)
        if c.size == 0:
            return np.zeros(probes.shape[0])
        need(c.size - 1)
        return np.sum(c[:, None] * np.array(terms[: c.size]), axis=0)

    prev = partial(0)
    n_blocks = None
    for n in range(max_blocks):
        cur = partial(n + 1)
        sups.append(float(np.max(np.abs(cur - prev))))
        prev = cur
        rho = _tail_ratio(sups)
        tail = 0.0 if sups[-1] == 0 else (sups[-1] * rho / (1 - rho) if rho < 1 else np.inf)
        if n >= 1 and sups[-1] < tol / 2 and tail < tol / 2:
            n_blocks = n + 1
            break
    if n_blocks is None:
        raise NoConvergence(f"Poisson increments not below {tol / 2} after {max_blocks} blocks (last {sups[-1]:.3e})")
    # exact residual at the probes: -(1/m) sum_r Pi^{Nm+r} g_bar
    need(n_blocks * m + m - 1)
    resid = np.mean([terms[n_blocks * m + r] for r in range(m)], axis=0)
    probe_resid = float(np.max(np.abs(resid)))
    sup_g = g.sup_norm_bound or float(np.max(np.abs(g.func(probes)))) + abs(mean_est.value)
    bound = probe_resid + tail + sup_g * pruned
    log.debug("poisson: %d blocks, sups=%s, resid=%.3e", n_blocks, sups, probe_resid)
    return PoissonSolution(family, g, mean_est, m, n_blocks, prune_eps, merge_decimals, sups,
                           float(rho), float(bound), probe_resid, pruned, probes)


def _spectral_sup(mat: np.ndarray) -> float:
    """``sup_x |<x, M x>|`` over unit x, for hermitian M."""
    return float(np.max(np.abs(np.linalg.eigvalsh((mat + mat.conj().T) / 2))))


def _solve_quadratic(family, g, m, tol, mean_est, probes, max_blocks) -> PoissonSolution:
    d = family.dim
    terms = [np.asarray(g.matrix, dtype=np.complex128) - mean_est.value * np.eye(d)]

    def need(k):
        while len(terms) <= k:
            terms.append(dual_channel_apply(family, terms[-1]))

    def partial(n_blocks):
        c = _cesaro_coeffs(n_blocks, m)
        if c.size == 0:
            return np.zeros((d, d), dtype=np.complex128)
        need(c.size - 1)
        return np.tensordot(c, np.array(terms[: c.size]), axes=1)

    prev = partial(0)
    sups: list[float] = []
    n_blocks = None
    tail = np.inf
    rho = 1.0
    for n in range(max_blocks):
        cur = partial(n + 1)
        sups.append(_spectral_sup(cur - prev))
        prev = cur
        rho = _tail_ratio(sups)
        tail = 0.0 if sups[-1] == 0 else (sups[-1] * rho / (1 - rho) if rho < 1 else np.inf)
        if n >= 1 and sups[-1] < tol / 2 and tail < tol / 2:
            n_blocks = n + 1
            break
    if n_blocks is None:
        raise NoConvergence(f"Poisson increments not below {tol / 2} after {max_blocks} blocks (last {sups[-1]:.3e})")
    need(n_blocks * m + m - 1)
    resid = sum(terms[n_blocks * m + r] for r in range(m)) / m
    resid_sup = _spectral_sup(resid)
    gmat = (prev + prev.conj().T) / 2
    return PoissonSolution(family, g, mean_est, m, n_blocks, 0.0, None, sups, float(rho), resid_sup,
                           resid_sup, 0.0, probes, "quadratic", gmat)


@dataclass(frozen=True)
class VarianceEstimate:
    gamma_sq: float
    method: str  # ergodic_h | atoms_exact
    n_samples: int
    stderr: float

    def to_dict(self) -> dict:
        return {"gamma_sq": self.gamma_sq, "method": self.method, "n_samples": self.n_samples,
                "stderr": self.stderr}


def estimate_gamma_sq(sol: PoissonSolution, path: TrajectoryPath | None = None, *,
                      atoms: np.ndarray | None = None, weights: np.ndarray | None = None,
                      burn_in: int = 0) -> VarianceEstimate:
    """``gamma^2 = E_{nu_inv}(h)``, from exact invariant atoms or a long path."""
    if atoms is not None:
        w = np.asarray(weights, dtype=np.float64)
        hv = sol.h(np.atleast_2d(atoms))
        val = float(np.dot(w, hv))
        return VarianceEstimate(max(val, 0.0) if val > -1e-9 else val, "atoms_exact", len(w), 0.0)
    if path is None:
        raise ValueError("need either a path or exact atoms")
    hv = sol.h(path.states[burn_in:-1])
    return VarianceEstimate(float(max(hv.mean(), 0.0)), "ergodic_h", int(hv.size), batch_means_stderr(hv))


def variance_h(sol: PoissonSolution, x):
    """``h = Pi g~^2 - (Pi g~)^2`` at a state or a stack of states."""
    v = sol.h(x)
    return float(v[0]) if isinstance(x, ProjectiveState) else v


def probe_states(d: int, n_probe: int, seed: int) -> np.ndarray:
    basis = canonicalize(np.eye(d, dtype=np.complex128))
    return np.vstack([basis, haar_states(d, max(n_probe - d, 0), seed)])[:n_probe]


def osc_probe(sol: PoissonSolution, n_probe: int = 1000, seed: int = 12345) -> float:
    v = sol.values(probe_states(sol.family.dim, n_probe, seed))
    return float(v.max() - v.min())


@dataclass(frozen=True)
class MartingaleDecomposition:
    M: np.ndarray  # M_n, n = 0..N
    S: np.ndarray  # S_n(g_bar) = sum_{k<n} g_bar(x_k)
    residual: np.ndarray  # S_n - M_n - (g~(x_0) - g~(x_n))
    g_tilde: np.ndarray
    pi_g_tilde: np.ndarray


def martingale_path(sol: PoissonSolution, path: TrajectoryPath) -> MartingaleDecomposition:
    """``M_n = sum_{k=1}^n [g~(x_k) - Pi g~(x_{k-1})]`` with the telescoping residual."""
    st = path.states
    gt = sol.values(st)
    pgt = sol.pi_values(st)
    gbar = sol.centered(st)
    M = np.concatenate([[0.0], np.cumsum(gt[1:] - pgt[:-1])])
    S = np.concatenate([[0.0], np.cumsum(gbar[:-1])])
    resid = S - M - (gt[0] - gt)
    return MartingaleDecomposition(M, S, resid, gt, pgt)
