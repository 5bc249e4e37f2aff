"""Monte Carlo checks of the limit theorems for ``S_n(g) = sum_{k<n} g(x_k)``.

Replicas are simulated one at a time (possibly on a thread pool) and reduced
to the few numbers each test needs, so memory stays at one path.  All
reductions happen in replica order, which keeps reports reproducible.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special, stats
from scipy.special import logsumexp

from .engine import TrajectoryConfig, map_replicas, sample_trajectory
from .errors import DegenerateVariance, PreconditionError
from .kernel import batch_means_stderr, estimate_gamma_sq, invariant_mean, solve_poisson
from .model import KrausFamily
from .observables import Observable

KOLMOGOROV_TERMS = 100
GAMMA_FLOOR = 1e-12


def _mean_of(family, g, mean):
    return invariant_mean(family, g).value if mean is None else float(mean)


def default_gamma_sq(family: KrausFamily, g: Observable, nu, *, n: int = 100_000, seed: int = 0,
                     m: int = 1) -> float:
    """``ergodic_h`` estimate used when no closed form is supplied."""
    sol = solve_poisson(family, g, m)
    path = sample_trajectory(TrajectoryConfig(family, nu, n, seed, 0))
    return estimate_gamma_sq(sol, path).gamma_sq


def partial_sums(family: KrausFamily, g: Observable, nu, n: int, seed: int, replica: int,
                 mean: float = 0.0) -> np.ndarray:
    """``S_k(g - mean)`` for k = 0..n along replica ``replica``."""
    path = sample_trajectory(TrajectoryConfig(family, nu, n, seed, replica))
    vals = g.func(path.states[:-1]) - mean
    return np.concatenate([[0.0], np.cumsum(vals)])


# -- LLN -------------------------------------------------------------------


@dataclass(frozen=True)
class LLNReport:
    n: int
    mean: float
    target: float
    tolerance: float
    gamma_eff_sq: float
    passed: bool

    def to_dict(self) -> dict:
        return asdict(self)


def lln_check(family: KrausFamily, g: Observable, nu, n: int, seed: int = 0, *,
              target: float | None = None, n_batches: int = 50) -> LLNReport:
    """``S_n(g)/n`` against ``E_{nu_inv}(g)`` with tolerance ``4 sqrt(gamma_eff^2 / n)``.

    ``gamma_eff^2`` is the batch-means variance, which absorbs the
    autocorrelation of the chain.
    """
    path = sample_trajectory(TrajectoryConfig(family, nu, n, seed, 0))
    vals = g.func(path.states[:-1])
    target = _mean_of(family, g, target)
    mean = float(vals.mean())
    se = batch_means_stderr(vals, n_batches)
    tol = 4.0 * se
    return LLNReport(n, mean, target, tol, n * se**2, abs(mean - target) <= tol)


# -- Kolmogorov-Smirnov ------------------------------------------------------


def kolmogorov_sf(lam: float, terms: int = KOLMOGOROV_TERMS) -> float:
    """``P(sup|B^0| > lam)`` for the Brownian bridge, by series.

    For ``lam >= 1`` the alternating series ``2 sum (-1)^(k-1) exp(-2 k^2 lam^2)``
    converges fast; below that the Jacobi-theta form of the CDF is used.
    """
    if lam <= 0:
        return 1.0
    k = np.arange(1, terms + 1)
    if lam >= 1.0:
        val = 2.0 * np.sum((-1.0) ** (k - 1) * np.exp(-2.0 * k**2 * lam**2))
    else:
        cdf = math.sqrt(2 * math.pi) / lam * np.sum(np.exp(-((2 * k - 1) ** 2) * math.pi**2 / (8 * lam**2)))
        val = 1.0 - cdf
    return float(min(max(val, 0.0), 1.0))


def ks_statistic(sample: np.ndarray, cdf=special.ndtr) -> float:
    x = np.sort(np.asarray(sample, dtype=np.float64))
    n = x.size
    f = cdf(x)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - f), np.max(f - (i - 1) / n)))


def ks_normal_test(sample: np.ndarray) -> tuple[float, float]:
    """One-sample KS against N(0,1): ``(D, asymptotic p-value)``."""
    d = ks_statistic(sample)
    return d, kolmogorov_sf(math.sqrt(len(sample)) * d)


# -- CLT / FCLT ---------------------------------------------------------------


@dataclass(frozen=True)
class CLTReport:
    R: int
    n: int
    gamma_sq: float
    mean: float
    values: np.ndarray = field(repr=False)
    ks_distance: float = 0.0
    p_value: float = 0.0

    def to_dict(self) -> dict:
        return {"R": self.R, "n": self.n, "gamma_sq": self.gamma_sq, "mean": self.mean,
                "ks_distance": self.ks_distance, "p_value": self.p_value,
                "sample_mean": float(np.mean(self.values)), "sample_var": float(np.var(self.values, ddof=1))}


def _check_gamma(gamma_sq: float) -> None:
    if not gamma_sq > GAMMA_FLOOR:
        raise DegenerateVariance(f"gamma^2 = {gamma_sq!r}; use the degenerate-variance bound instead")


def _resolve(family, g, nu, mean, gamma_sq, seed):
    mean = _mean_of(family, g, mean)
    if gamma_sq is None:
        if g.matrix is not None and np.allclose(g.matrix, g.matrix[0, 0] * np.eye(family.dim)):
            gamma_sq = 0.0
        else:
            gamma_sq = default_gamma_sq(family, g, nu, seed=seed + 7_919)
    return mean, float(gamma_sq)


def clt_test(family: KrausFamily, g: Observable, nu, n: int, R: int, seed: int = 0, *,
             mean: float | None = None, gamma_sq: float | None = None, threads: int | None = None) -> CLTReport:
    """KS test of ``S_n(g_bar)/sqrt(n gamma^2)`` over R replicas against N(0,1)."""
    mean, gamma_sq = _resolve(family, g, nu, mean, gamma_sq, seed)
    _check_gamma(gamma_sq)
    ends = map_replicas(lambda r: partial_sums(family, g, nu, n, seed, r, mean)[-1], range(R), threads)
    vals = np.asarray(ends) / math.sqrt(n * gamma_sq)
    d, pv = ks_normal_test(vals)
    return CLTReport(R, n, gamma_sq, mean, vals, d, pv)


def interpolate_path(S: np.ndarray, t) -> np.ndarray:
    """``s_n(t) = S_floor(nt) + (nt - floor(nt)) (S_floor(nt)+1 - S_floor(nt))``."""
    n = S.shape[0] - 1
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    nt = n * t
    k = np.minimum(np.floor(nt).astype(np.int64), n)
    nxt = np.minimum(k + 1, n)
    return S[k] + (nt - k) * (S[nxt] - S[k])


@dataclass(frozen=True)
class FCLTPath:
    t: np.ndarray
    s: np.ndarray


def fclt_path(family: KrausFamily, g: Observable, nu, n: int, t_grid, seed: int = 0, replica: int = 0, *,
              mean: float | None = None) -> FCLTPath:
    S = partial_sums(family, g, nu, n, seed, replica, _mean_of(family, g, mean))
    t = np.asarray(t_grid, dtype=np.float64)
    return FCLTPath(t, interpolate_path(S, t))


@dataclass(frozen=True)
class FCLTReport:
    R: int
    n: int
    gamma_sq: float
    t_grid: np.ndarray
    covariance: np.ndarray  # cov(s_n(s), s_n(t)) / (n gamma^2)

    def cov(self, s: float, t: float) -> float:
        i = int(np.argmin(np.abs(self.t_grid - s)))
        j = int(np.argmin(np.abs(self.t_grid - t)))
        return float(self.covariance[i, j])

    def to_dict(self) -> dict:
        return {"R": self.R, "n": self.n, "gamma_sq": self.gamma_sq, "t_grid": self.t_grid.tolist(),
                "covariance": self.covariance.tolist(),
                "brownian_target": np.minimum.outer(self.t_grid, self.t_grid).tolist()}


def fclt_covariance(family: KrausFamily, g: Observable, nu, n: int, R: int, t_grid=(0.0, 0.25, 0.5, 0.75, 1.0),
                    seed: int = 0, *, mean: float | None = None, gamma_sq: float | None = None,
                    threads: int | None = None) -> FCLTReport:
    """Empirical covariance matrix of ``s_n(t)/sqrt(n gamma^2)`` on ``t_grid``; target ``min(s, t)``."""
    mean, gamma_sq = _resolve(family, g, nu, mean, gamma_sq, seed)
    _check_gamma(gamma_sq)
    t = np.asarray(t_grid, dtype=np.float64)
    rows = map_replicas(lambda r: interpolate_path(partial_sums(family, g, nu, n, seed, r, mean), t),
                        range(R), threads)
    x = np.asarray(rows) / math.sqrt(n * gamma_sq)
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    return FCLTReport(R, n, gamma_sq, t, cov)


# -- LIL ----------------------------------------------------------------------


@dataclass(frozen=True)
class LILReport:
    N: int
    n_min: int
    gamma_sq: float
    plus_max: np.ndarray  # per replica: max_n S_n / sqrt(2 n gamma^2 loglog n)
    minus_max: np.ndarray  # per replica: max_n -S_n / ...
    checkpoints: np.ndarray = field(repr=False)
    envelopes: np.ndarray = field(repr=False)  # (R, len(checkpoints)) running max of |ratio|

    @property
    def abs_max(self) -> np.ndarray:
        return np.maximum(self.plus_max, self.minus_max)

    @property
    def pooled_max(self) -> float:
        """Mean over replicas of the per-replica max of ``|S_n| / sqrt(2 n gamma^2 loglog n)``."""
        return float(np.mean(self.abs_max))

    @property
    def overall_max(self) -> float:
        return float(np.max(self.abs_max))

    @property
    def sign_symmetry_pvalue(self) -> float:
        return float(stats.ks_2samp(self.plus_max, self.minus_max).pvalue)

    def to_dict(self) -> dict:
        return {"N": self.N, "n_min": self.n_min, "gamma_sq": self.gamma_sq,
                "plus_max": self.plus_max.tolist(), "minus_max": self.minus_max.tolist(),
                "pooled_max": self.pooled_max, "overall_max": self.overall_max,
                "sign_symmetry_pvalue": self.sign_symmetry_pvalue,
                "note": "finite-n heuristic probe of an almost-sure limsup; the acceptance band is an engineering choice"}


def lil_scan(family: KrausFamily, g: Observable, nu, N: int, R: int = 20, seed: int = 0, *, n_min: int = 1000,
             mean: float | None = None, gamma_sq: float | None = None, n_checkpoints: int = 200,
             threads: int | None = None) -> LILReport:
    """Envelope of ``+-S_n(g_bar) / sqrt(2 n gamma^2 loglog n)`` over ``n in [n_min, N]``."""
    if N < 10_000:
        raise PreconditionError("lil_scan needs N >= 10^4")
    mean, gamma_sq = _resolve(family, g, nu, mean, gamma_sq, seed)
    if gamma_sq <= GAMMA_FLOOR:
        z = np.zeros(R)
        cps = np.unique(np.geomspace(n_min, N, n_checkpoints).astype(np.int64))
        return LILReport(N, n_min, 0.0, z, z.copy(), cps, np.zeros((R, cps.size)))
    idx = np.arange(n_min, N + 1)
    scale = np.sqrt(2.0 * idx * gamma_sq * np.log(np.log(idx)))
    cps = np.unique(np.geomspace(n_min, N, n_checkpoints).astype(np.int64))

    def one(r):
        S = partial_sums(family, g, nu, N, seed, r, mean)
        ratio = S[n_min:] / scale
        env = np.maximum.accumulate(np.abs(ratio))[cps - n_min]
        return float(ratio.max()), float((-ratio).max()), env

    out = map_replicas(one, range(R), threads)
    return LILReport(N, n_min, gamma_sq, np.array([o[0] for o in out]), np.array([o[1] for o in out]),
                     cps, np.stack([o[2] for o in out]))


# -- MDP ----------------------------------------------------------------------


@dataclass(frozen=True)
class MDPReport:
    n: int
    R: int
    beta: float
    a: float
    gamma_sq: float
    z: np.ndarray
    cumulant: np.ndarray
    stderr: np.ndarray
    target: np.ndarray
    rate: np.ndarray  # J at y = z * gamma^2 (the tilted mean)
    overflow: np.ndarray

    def relative_error(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.target > 0, np.abs(self.cumulant - self.target) / self.target, np.abs(self.cumulant))

    def to_dict(self) -> dict:
        return {"n": self.n, "R": self.R, "beta": self.beta, "a": self.a, "gamma_sq": self.gamma_sq,
                "z": self.z.tolist(), "cumulant": self.cumulant.tolist(), "stderr": self.stderr.tolist(),
                "target": self.target.tolist(), "rate_function": self.rate.tolist(),
                "overflow": self.overflow.tolist()}


def cumulant_estimate(sums: np.ndarray, n: int, a: float, z: float) -> tuple[float, float, bool]:
    """``(n/a^2) log mean exp((a/n) z S)`` with its jackknife standard error."""
    sums = np.asarray(sums, dtype=np.float64)
    R = sums.size
    if z == 0:
        return 0.0, 0.0, False
    x = (a / n) * z * sums
    scale = n / a**2
    full = logsumexp(x) - math.log(R)
    if not np.isfinite(full):
        return float("nan"), float("nan"), True
    # leave-one-out: log(sum_{j != i} e^{x_j}) = full_lse + log(1 - e^{x_i - full_lse})
    lse = logsumexp(x)
    with np.errstate(divide="ignore"):
        loo = lse + np.log1p(-np.exp(np.minimum(x - lse, 0.0))) - math.log(R - 1)
    loo = np.where(np.isfinite(loo), loo, np.nan)
    jk = scale * loo
    se = math.sqrt((R - 1) / R * np.nansum((jk - np.nanmean(jk)) ** 2))
    return float(scale * full), float(se), False


def rate_function(gamma_sq: float, y: float) -> float:
    """``J(y) = y^2 / (2 gamma^2)``; for ``gamma^2 = 0`` it is 0 at y = 0 and +inf elsewhere."""
    if gamma_sq < 0:
        raise ValueError("gamma^2 must be >= 0")
    if gamma_sq == 0:
        return 0.0 if y == 0 else math.inf
    return y * y / (2.0 * gamma_sq)


def mdp_cumulant(family: KrausFamily, g: Observable, nu, n: int, R: int, beta: float = 0.75,
                 z_grid=(-1.0, -0.5, 0.0, 0.5, 1.0), seed: int = 0, *, mean: float | None = None,
                 gamma_sq: float | None = None, threads: int | None = None) -> MDPReport:
    """Scaled cumulant ``Lambda_hat(z)`` with ``a(n) = n^beta``, compared with ``z^2 gamma^2 / 2``."""
    if not 0.5 < beta < 1.0:
        raise PreconditionError("beta must lie in (1/2, 1)")
    mean, gamma_sq = _resolve(family, g, nu, mean, gamma_sq, seed)
    a = float(n) ** beta
    sums = np.asarray(map_replicas(lambda r: partial_sums(family, g, nu, n, seed, r, mean)[-1], range(R), threads))
    z = np.asarray(z_grid, dtype=np.float64)
    res = [cumulant_estimate(sums, n, a, float(zz)) for zz in z]
    target = z**2 * gamma_sq / 2
    rate = np.array([rate_function(gamma_sq, float(zz) * gamma_sq) for zz in z])
    return MDPReport(n, R, beta, a, gamma_sq, z, np.array([r[0] for r in res]), np.array([r[1] for r in res]),
                     target, rate, np.array([r[2] for r in res]))
