"""Trajectory sampling, outcome-word probabilities and state estimators.

Every replica owns an independent counter-based stream (Philox keyed by
``(master_seed, replica_index)`` through ``SeedSequence``), so a replica's
path depends only on its own index: results are bit-identical whatever the
execution order or thread count.  Stream layout per replica: one uniform for
the initial atom, then one uniform per step.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Literal, Sequence, TypeVar

import numpy as np

from . import _kernels
from .errors import ZeroBranch
from .model import (
    ZERO_BRANCH_FLOOR,
    DensityMatrix,
    KrausFamily,
    ProjectiveState,
    canonicalize,
    rowwise_distance,
    word_product,
)

T = TypeVar("T")


def replica_stream(master_seed: int, replica_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(master_seed) & (2**64 - 1), spawn_key=(int(replica_index),))
    return np.random.Generator(np.random.Philox(ss))


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        threads = int(os.environ.get("QTRAJ_THREADS", "1") or 1)
    return max(1, int(threads))


def map_replicas(fn: Callable[[int], T], indices: Iterable[int], threads: int | None = None) -> list[T]:
    """Apply ``fn`` to each replica index; output order follows ``indices``."""
    indices = list(indices)
    n = resolve_threads(threads)
    if n == 1 or len(indices) <= 1:
        return [fn(i) for i in indices]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, indices))


def initial_atoms(initial) -> tuple[np.ndarray, np.ndarray]:
    """Normalize an initial condition to ``(vectors, weights)``.

    Accepts a :class:`ProjectiveState`, anything with ``states``/``weights``
    attributes, or a sequence of ``(state, weight)`` pairs.
    """
    if isinstance(initial, ProjectiveState):
        return initial.vector[None, :].copy(), np.ones(1)
    if hasattr(initial, "states") and hasattr(initial, "weights"):
        vecs = np.asarray(initial.states, dtype=np.complex128)
        wts = np.asarray(initial.weights, dtype=np.float64)
    else:
        pairs = list(initial)
        vecs = np.stack([s.vector if isinstance(s, ProjectiveState) else canonicalize(s) for s, _ in pairs])
        wts = np.array([float(w) for _, w in pairs])
    if np.any(wts < 0) or abs(wts.sum() - 1) > 1e-12:
        raise ValueError(f"initial weights must be non-negative and sum to 1 (sum={wts.sum()!r})")
    return canonicalize(vecs), wts


@dataclass(frozen=True)
class TrajectoryConfig:
    family: KrausFamily
    initial: object
    n_steps: int
    master_seed: int = 0
    replica_index: int = 0
    on_zero_branch: Literal["abort", "resample"] = "abort"

    def __post_init__(self):
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        initial_atoms(self.initial)  # validates weights


@dataclass(frozen=True)
class TrajectoryPath:
    states: np.ndarray  # (n+1, d) canonical vectors
    word: np.ndarray  # (n,) 1-based branch indices
    step_weights: np.ndarray  # (n,) ||V_k x_{k-1}||^2
    log_norm_sq: np.ndarray  # (n+1,) log ||W_k x_0||^2, running

    @property
    def n_steps(self) -> int:
        return self.word.shape[0]

    def state(self, k: int) -> ProjectiveState:
        return ProjectiveState(self.states[k])


def _draw_initial(vecs: np.ndarray, wts: np.ndarray, u0: float) -> np.ndarray:
    if len(wts) == 1:
        return vecs[0]
    idx = int(np.searchsorted(np.cumsum(wts), u0 * wts.sum(), side="right"))
    return vecs[min(idx, len(wts) - 1)]


def _run(family: KrausFamily, x0: np.ndarray, u: np.ndarray, on_zero: str) -> TrajectoryPath:
    states, word0, weights, fail = _kernels.run_chain(
        family.operators, np.array(x0, dtype=np.complex128), u, ZERO_BRANCH_FLOOR, on_zero == "resample"
    )
    if fail != _kernels.OK:
        raise ZeroBranch(f"zero-weight branch selected at step {fail}")
    logs = np.concatenate([[0.0], np.cumsum(np.log(weights))])
    return TrajectoryPath(states, word0 + 1, weights, logs)


def sample_trajectory(cfg: TrajectoryConfig) -> TrajectoryPath:
    """Sample ``x_0 ~ nu`` then ``n_steps`` Kraus updates from the replica stream."""
    vecs, wts = initial_atoms(cfg.initial)
    rng = replica_stream(cfg.master_seed, cfg.replica_index)
    u0 = rng.random()
    u = rng.random(cfg.n_steps)
    return _run(cfg.family, _draw_initial(vecs, wts, u0), u, cfg.on_zero_branch)


def sample_replicas(cfg: TrajectoryConfig, R: int, threads: int | None = None) -> list[TrajectoryPath]:
    """Replica ``r`` uses ``replica_index = r``; the template's own index is ignored."""
    if R < 1:
        raise ValueError("R must be >= 1")
    return map_replicas(lambda r: sample_trajectory(replace(cfg, replica_index=r)), range(R), threads)


def word_probability(rho: DensityMatrix, word: Sequence[int], family: KrausFamily) -> float:
    """``P^rho(w) = tr(W_w rho W_w^*)``."""
    w, log_scale = word_product(family, word)
    if not np.isfinite(log_scale):
        return 0.0
    val = np.trace(w @ rho.matrix @ w.conj().T).real
    return float(val * np.exp(2 * log_scale))


def word_probabilities(rho: DensityMatrix, family: KrausFamily, n: int) -> tuple[np.ndarray, np.ndarray]:
    """All ``K^n`` words of length n (lexicographic, 1-based) with their probabilities.

    Computed by a breadth-first sweep of ``W rho W^*``, so the cost is
    ``O(K^n d^3)`` rather than one product per word.
    """
    ops = family.operators
    K = family.size
    blocks = rho.matrix[None, :, :].astype(np.complex128)
    for _ in range(n):
        blocks = np.einsum("kij,mjl,kpl->mkip", ops, blocks, ops.conj()).reshape(-1, family.dim, family.dim)
    probs = np.einsum("mii->m", blocks).real
    words = np.array(np.unravel_index(np.arange(K**n), (K,) * n)).T + 1 if n else np.zeros((1, 0), int)
    return words, probs


def _top_singular_vectors(mats: np.ndarray, gap_tol: float = 1e-10) -> np.ndarray:
    _, s, vh = np.linalg.svd(mats)
    z = vh[:, 0, :].conj()
    d = mats.shape[-1]
    if d > 1:
        degenerate = np.nonzero(s[:, 0] - s[:, 1] < gap_tol)[0]
        for k in degenerate:
            top = vh[k][s[k] >= s[k, 0] - gap_tol].conj()  # rows span the top space
            proj = top.conj() @ np.eye(d)  # coordinates of each e_j in the top space
            norms = np.linalg.norm(proj, axis=0)
            j = int(np.argmax(norms > 1e-6))
            z[k] = top.T @ proj[:, j]
    return canonicalize(z)


def mle_initial_estimator(w: np.ndarray) -> ProjectiveState:
    """``argmax_x ||W x||^2``: the top right-singular vector, deterministic on ties."""
    w = np.asarray(w, dtype=np.complex128)
    if not np.any(w):
        raise ValueError("W must be non-zero")
    return ProjectiveState(_top_singular_vectors(w[None])[0])


def evolved_estimator(path: TrajectoryPath, family: KrausFamily) -> np.ndarray:
    """``y_n = W_n . z_n`` for every prefix of the path, as canonical vectors."""
    mats, _ = _kernels.prefix_products(family.operators, np.ascontiguousarray(path.word - 1))
    z = _top_singular_vectors(mats)
    y = np.einsum("nij,nj->ni", mats, z)
    if np.any(np.linalg.norm(y, axis=1) == 0):
        raise ZeroBranch("W_n z_n vanished")
    return canonicalize(y)


def estimator_distances(path: TrajectoryPath, family: KrausFamily) -> np.ndarray:
    """``d(x_n, y_n)`` along the path."""
    return rowwise_distance(path.states, evolved_estimator(path, family))


TRAJECTORY_COLUMNS_DOC = "step, branch_index (0 at step 0), weight (1 at step 0), re_0, im_0, ..., distance_to_estimator"


def trajectory_rows(path: TrajectoryPath, family: KrausFamily) -> Iterable[list]:
    d = path.states.shape[1]
    yield ["step", "branch_index", "weight"] + [f"{p}_{j}" for j in range(d) for p in ("re", "im")] + [
        "distance_to_estimator"
    ]
    dist = estimator_distances(path, family)
    for k in range(path.n_steps + 1):
        branch = int(path.word[k - 1]) if k else 0
        weight = float(path.step_weights[k - 1]) if k else 1.0
        comps = []
        for z in path.states[k]:
            comps += [repr(float(z.real)), repr(float(z.imag))]
        yield [k, branch, repr(weight)] + comps + [repr(float(dist[k]))]


def write_trajectory_csv(path: TrajectoryPath, family: KrausFamily, filename: str | os.PathLike) -> None:
    with open(filename, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(trajectory_rows(path, family))
