"""Compiled inner loops for trajectory sampling."""

import numba as nb
import numpy as np

OK = -1


@nb.njit(cache=True, nogil=True)
def _canonicalize_inplace(x):
    d = x.shape[0]
    best = 0
    bmod = -1.0
    for a in range(d):
        m = abs(x[a])
        if m > bmod:
            bmod = m
            best = a
    if bmod > 0.0:
        ph = np.conj(x[best]) / bmod
        for a in range(d):
            x[a] = x[a] * ph
        x[best] = bmod + 0j


@nb.njit(cache=True, nogil=True)
def run_chain(ops, x0, u, floor, resample):
    """Sample one path of the chain driven by uniforms ``u``.

    Returns ``(states, word0, weights, fail_step)``; ``word0`` is 0-based and
    ``fail_step`` is -1 unless a zero branch was selected.
    """
    K = ops.shape[0]
    d = ops.shape[1]
    n = u.shape[0]
    states = np.empty((n + 1, d), np.complex128)
    word = np.empty(n, np.int64)
    weights = np.empty(n, np.float64)
    x = x0.copy()
    _canonicalize_inplace(x)
    states[0] = x
    y = np.empty((K, d), np.complex128)
    w = np.empty(K, np.float64)
    for t in range(n):
        total = 0.0
        for i in range(K):
            s = 0.0
            for a in range(d):
                acc = 0j
                for b in range(d):
                    acc += ops[i, a, b] * x[b]
                y[i, a] = acc
                s += acc.real * acc.real + acc.imag * acc.imag
            w[i] = s
            if s >= floor or not resample:
                total += s
        target = u[t] * total
        cum = 0.0
        chosen = -1
        last = -1
        for i in range(K):
            if resample and w[i] < floor:
                continue
            last = i
            cum += w[i]
            if target < cum:
                chosen = i
                break
        if chosen < 0:
            chosen = last
        if chosen < 0 or w[chosen] < floor:
            return states[: t + 1], word[:t], weights[:t], t
        scale = 1.0 / np.sqrt(w[chosen])
        for a in range(d):
            x[a] = y[chosen, a] * scale
        _canonicalize_inplace(x)
        states[t + 1] = x
        word[t] = chosen
        weights[t] = w[chosen]
    return states, word, weights, OK


@nb.njit(cache=True, nogil=True)
def prefix_products(ops, word0):
    """Rescaled prefix products ``W_k`` (unit max-entry) and their log scales."""
    d = ops.shape[1]
    n = word0.shape[0]
    out = np.empty((n + 1, d, d), np.complex128)
    logs = np.empty(n + 1, np.float64)
    cur = np.eye(d).astype(np.complex128)
    out[0] = cur
    logs[0] = 0.0
    acc = 0.0
    for t in range(n):
        a = ops[word0[t]]
        nxt = a @ cur
        s = 0.0
        for i in range(d):
            for j in range(d):
                m = abs(nxt[i, j])
                if m > s:
                    s = m
        if s > 0.0:
            nxt = nxt / s
            acc += np.log(s)
        else:
            acc = -np.inf
        cur = nxt
        out[t + 1] = cur
        logs[t + 1] = acc
    return out, logs
