"""Discrete measures on P(C^d), exact Wasserstein-1 and convergence-rate fits."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.optimize import linprog

from .engine import TrajectoryConfig, TrajectoryPath, initial_atoms, map_replicas, sample_trajectory
from .errors import InsufficientPoints, SizeLimit
from .model import KrausFamily, ProjectiveState, canonicalize, pairwise_distance, state_keys

MERGE_DECIMALS = 9
MAX_ATOMS = 2000


@dataclass(frozen=True)
class DiscreteMeasure:
    """Finitely supported probability measure; atoms are canonical and distinct."""

    states: np.ndarray  # (n, d)
    weights: np.ndarray  # (n,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.shape[0] != self.states.shape[0]:
            raise ValueError("one weight per atom required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must be non-negative and sum to 1 (sum={w.sum()!r})")

    @classmethod
    def from_atoms(cls, atoms, weights=None, decimals: int | None = MERGE_DECIMALS) -> "DiscreteMeasure":
        vecs = np.stack([a.vector if isinstance(a, ProjectiveState) else np.asarray(a, dtype=np.complex128)
                         for a in atoms])
        vecs = canonicalize(vecs)
        w = np.full(len(vecs), 1.0 / len(vecs)) if weights is None else np.asarray(weights, dtype=np.float64)
        return merge_atoms(vecs, w, decimals)

    @classmethod
    def dirac(cls, x: ProjectiveState) -> "DiscreteMeasure":
        return cls(x.vector[None, :].copy(), np.ones(1))

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def mass_near(self, x: ProjectiveState, radius: float) -> float:
        dist = pairwise_distance(x.vector[None, :], self.states)[0]
        return float(self.weights[dist < radius].sum())

    def expect(self, fn) -> float:
        return float(np.dot(self.weights, fn(self.states)))

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "atoms": [
                {"state": [[float(z.real), float(z.imag)] for z in s], "weight": float(w)}
                for s, w in zip(self.states, self.weights)
            ],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, data: dict) -> "DiscreteMeasure":
        vecs = np.array([[complex(re, im) for re, im in a["state"]] for a in data["atoms"]])
        return cls(canonicalize(vecs), np.array([a["weight"] for a in data["atoms"]], dtype=np.float64))


def merge_atoms(states: np.ndarray, weights: np.ndarray, decimals: int | None = MERGE_DECIMALS) -> DiscreteMeasure:
    """Sum the weights of states that agree after rounding to ``decimals`` places."""
    states = canonicalize(np.atleast_2d(states))
    weights = np.asarray(weights, dtype=np.float64)
    if decimals is None or states.shape[0] <= 1:
        return DiscreteMeasure(states, weights / weights.sum())
    _, first, inv = np.unique(state_keys(states, decimals), axis=0, return_index=True, return_inverse=True)
    w = np.bincount(inv.ravel(), weights=weights)
    order = np.argsort(first, kind="stable")
    return DiscreteMeasure(states[first[order]], w[order] / w.sum())


def empirical_measure(path: TrajectoryPath, burn_in: int = 0, decimals: int | None = MERGE_DECIMALS) -> DiscreteMeasure:
    """Uniform weights on ``x_{burn_in}, ..., x_n``; coincident states are merged."""
    if not 0 <= burn_in < path.states.shape[0]:
        raise ValueError("burn_in must be smaller than the path length")
    st = path.states[burn_in:]
    return merge_atoms(st, np.full(st.shape[0], 1.0 / st.shape[0]), decimals)


def wasserstein1(mu: DiscreteMeasure, nu: DiscreteMeasure, max_atoms: int = MAX_ATOMS) -> float:
    """Exact optimal transport cost with ground metric ``d(x, y)``.

    Solved as the transportation linear program with the HiGHS solver.
    """
    if mu.dim != nu.dim:
        raise ValueError("measures live in different dimensions")
    n, m = mu.size, nu.size
    if max(n, m) > max_atoms:
        raise SizeLimit(f"{max(n, m)} atoms exceeds the solver limit {max_atoms}")
    cost = pairwise_distance(mu.states, nu.states)
    if n == 1 or m == 1:
        return float(np.sum(cost * (mu.weights[:, None] * nu.weights[None, :])))
    # equality constraints: row sums = mu, column sums = nu (one is redundant)
    rows = np.repeat(np.arange(n), m)
    cols = np.tile(np.arange(m), n)
    from scipy.sparse import coo_matrix

    idx = np.arange(n * m)
    a = coo_matrix(
        (np.ones(2 * n * m), (np.concatenate([rows, n + cols]), np.concatenate([idx, idx]))),
        shape=(n + m, n * m),
    ).tocsr()
    b = np.concatenate([mu.weights, nu.weights])
    b[n:] *= mu.weights.sum() / nu.weights.sum()
    res = linprog(cost.ravel(), A_eq=a[:-1], b_eq=b[:-1], bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(max(res.fun, 0.0))


def _enumerate_pushforward(family: KrausFamily, states: np.ndarray, weights: np.ndarray, n: int):
    from .kernel import _children

    for _ in range(n):
        y, w = _children(family.operators, states)
        cw = (weights[:, None] * w).ravel()
        keep = cw > 0
        kids = y.reshape(-1, family.dim)[keep] / np.sqrt(w.ravel()[keep])[:, None]
        states, weights = canonicalize(kids), cw[keep]
        m = merge_atoms(states, weights, 12)
        states, weights = m.states, m.weights
    return states, weights


def exact_pushforward(family: KrausFamily, nu: DiscreteMeasure, n: int) -> DiscreteMeasure:
    """``nu Pi^n`` by enumerating all words of length n (merging equal states)."""
    st, w = _enumerate_pushforward(family, nu.states, nu.weights, n)
    return DiscreteMeasure(st, w / w.sum())


def _replica_endpoints(family: KrausFamily, nu, m: int, lengths: list[int], R: int, seed: int,
                       threads: int | None) -> np.ndarray:
    """``(R, len(lengths), d)`` states of replica r at each requested time."""
    top = max(lengths)
    idx = np.asarray(lengths)

    def run(r):
        path = sample_trajectory(TrajectoryConfig(family, nu, top, seed, r))
        return path.states[idx]

    return np.stack(map_replicas(run, range(R), threads))


def _as_initial(nu):
    if isinstance(nu, DiscreteMeasure):
        return nu
    vecs, w = initial_atoms(nu)
    return DiscreteMeasure(vecs, w)


def cesaro_pushforward(family: KrausFamily, nu, m: int, n: int, R: int, seed: int = 0, *,
                       threads: int | None = None, decimals: int | None = MERGE_DECIMALS) -> DiscreteMeasure:
    """Monte Carlo ``(1/m) sum_{r<m} nu Pi^{mn+r}`` pooled from R replicas."""
    if m < 1:
        raise ValueError("m must be >= 1")
    nu = _as_initial(nu)
    lengths = [m * n + r for r in range(m)]
    ends = _replica_endpoints(family, nu, m, lengths, R, seed, threads).reshape(-1, family.dim)
    return merge_atoms(ends, np.full(ends.shape[0], 1.0 / ends.shape[0]), decimals)


@dataclass(frozen=True)
class LambdaFit:
    lambda_hat: float
    slope: float
    slope_ci: tuple[float, float]
    lambda_upper: float
    n_used: list
    grid: list
    w1: list
    w1_stderr: list
    floor: float

    @property
    def decays(self) -> bool:
        return self.slope_ci[1] < 0

    def to_dict(self) -> dict:
        return {
            "lambda_hat": self.lambda_hat,
            "slope": self.slope,
            "slope_ci": list(self.slope_ci),
            "lambda_upper": self.lambda_upper,
            "n_used": self.n_used,
            "grid": self.grid,
            "w1": self.w1,
            "w1_stderr": self.w1_stderr,
            "floor": self.floor,
        }

    def write_csv(self, filename: str | os.PathLike) -> None:
        with open(filename, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["n", "W1", "stderr"])
            for n, w, s in zip(self.grid, self.w1, self.w1_stderr):
                wr.writerow([n, repr(float(w)), repr(float(s))])


def fit_lambda(family: KrausFamily, nu, m: int, n_grid, R: int, seed: int = 0, *,
               target: DiscreteMeasure | None = None, target_n: int | None = None,
               n_batches: int = 10, threads: int | None = None, confidence: float = 0.95,
               decimals: int | None = MERGE_DECIMALS) -> LambdaFit:
    """Fit ``log W_1(Cesaro pushforward at n, target) ~ n log(lambda)``.

    ``target`` defaults to a long-time Monte Carlo pushforward (at
    ``target_n``, default ``10 * max(n_grid) + 50``) using an independent seed.
    One set of R replicas serves every grid point.  Distances below
    ``2/sqrt(R)`` are dropped as Monte Carlo noise.  The error bars come from
    ``n_batches`` disjoint replica batches.
    """
    grid = sorted(int(n) for n in n_grid)
    if len(grid) < 2:
        raise InsufficientPoints("need at least two grid points")
    nu = _as_initial(nu)
    if target is None:
        tn = target_n if target_n is not None else 10 * grid[-1] + 50
        target = cesaro_pushforward(family, nu, m, tn, R, seed + 1_000_003, threads=threads, decimals=decimals)
    lengths = sorted({m * n + r for n in grid for r in range(m)})
    pos = {L: j for j, L in enumerate(lengths)}
    ends = _replica_endpoints(family, nu, m, lengths, R, seed, threads)  # (R, L, d)
    w1, se = [], []
    batches = np.array_split(np.arange(R), n_batches)
    for n in grid:
        cols = [pos[m * n + r] for r in range(m)]
        pts = ends[:, cols, :].reshape(-1, family.dim)
        mu = merge_atoms(pts, np.full(pts.shape[0], 1.0 / pts.shape[0]), decimals)
        w1.append(wasserstein1(mu, target))
        bvals = []
        for b in batches:
            bp = ends[b][:, cols, :].reshape(-1, family.dim)
            bvals.append(wasserstein1(merge_atoms(bp, np.full(bp.shape[0], 1.0 / bp.shape[0]), decimals), target))
        se.append(float(np.std(bvals, ddof=1) / np.sqrt(n_batches)))
    floor = 2.0 / np.sqrt(R)
    keep = [i for i, w in enumerate(w1) if w > floor]
    if len(keep) < 2:
        raise InsufficientPoints(f"only {len(keep)} distances above the Monte Carlo floor {floor:.3g}")
    x = np.array([grid[i] for i in keep], dtype=np.float64)
    y = np.log([w1[i] for i in keep])
    lr = stats.linregress(x, y)
    if len(keep) > 2:
        tq = stats.t.ppf(0.5 + confidence / 2, len(keep) - 2)
        half = tq * lr.stderr
    else:
        half = np.inf
    ci = (float(lr.slope - half), float(lr.slope + half))
    return LambdaFit(float(np.exp(lr.slope)), float(lr.slope), ci, float(np.exp(ci[1])),
                     [grid[i] for i in keep], grid, [float(v) for v in w1], se, float(floor))
