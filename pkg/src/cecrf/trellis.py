"""Exact inference on a linear chain in the log domain.

Position 0 carries only its unary scores; every later position adds the
transition score from its left neighbor. ``-inf`` entries are allowed and
mark forbidden states or transitions; NaN and ``+inf`` are rejected.
"""

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, DimensionError, NumericError

MAX_ENUMERATION = 10**6


@dataclass
class ScoreTable:
    unary: np.ndarray
    transition: np.ndarray

    def __post_init__(self):
        self.unary = np.asarray(self.unary, dtype=np.float64)
        self.transition = np.asarray(self.transition, dtype=np.float64)
        if self.unary.ndim != 2 or self.unary.shape[0] < 1:
            raise DimensionError("unary must be an n x m matrix with n >= 1")
        m = self.unary.shape[1]
        if self.transition.shape != (m, m):
            raise DimensionError(f"transition must be {m} x {m}, got {self.transition.shape}")
        for name in ("unary", "transition"):
            a = getattr(self, name)
            if np.isnan(a).any() or np.isposinf(a).any():
                raise NumericError(f"{name} scores contain NaN or +inf")

    @property
    def n(self):
        return self.unary.shape[0]

    @property
    def m(self):
        return self.unary.shape[1]


@dataclass
class Trellis:
    log_alpha: np.ndarray
    log_beta: np.ndarray
    log_z: float


def log_sum_exp(v, axis=None):
    """Overflow-safe ``log(sum(exp(v)))``; all ``-inf`` input gives ``-inf``."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty array")
    vmax = np.max(v, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(vmax), vmax, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(v - shift), axis=axis, keepdims=True)) + shift
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def forward_backward(st):
    n, m = st.n, st.m
    T = st.transition
    log_alpha = np.empty((n, m))
    log_beta = np.empty((n, m))
    log_alpha[0] = st.unary[0]
    for t in range(1, n):
        log_alpha[t] = st.unary[t] + log_sum_exp(log_alpha[t - 1][:, None] + T, axis=0)
    log_beta[n - 1] = 0.0
    for t in range(n - 2, -1, -1):
        log_beta[t] = log_sum_exp(T + (st.unary[t + 1] + log_beta[t + 1])[None, :], axis=1)
    log_z = log_sum_exp(log_alpha[n - 1])
    if not np.isfinite(log_z):
        raise NumericError(f"log partition function is {log_z}")
    return Trellis(log_alpha, log_beta, log_z)


def sequence_score(st, labels):
    """Unnormalized log score of one labeling, summed left to right."""
    labels = _check_labels(st, labels)
    score = st.unary[0, labels[0]]
    for t in range(1, st.n):
        score += st.transition[labels[t - 1], labels[t]] + st.unary[t, labels[t]]
    return float(score)


def _check_labels(st, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (st.n,):
        raise ValueError(f"expected {st.n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= st.m:
        raise ValueError(f"labels must lie in [0, {st.m})")
    return labels


def sequence_log_likelihood(st, trellis, labels):
    return sequence_score(st, labels) - trellis.log_z


def node_marginals(trellis):
    return np.exp(trellis.log_alpha + trellis.log_beta - trellis.log_z)


def pair_marginals(st, trellis):
    """(n-1) x m x m tensor of p(y_t = i, y_{t+1} = j)."""
    if st.n < 2:
        raise ValueError("pair marginals need a sequence of length >= 2")
    right = st.unary[1:] + trellis.log_beta[1:]
    logp = (trellis.log_alpha[:-1, :, None] + st.transition[None, :, :]
            + right[:, None, :] - trellis.log_z)
    return np.exp(logp)


def viterbi(st):
    """Highest-scoring labeling and its score.

    Ties go to the lowest class index both when choosing the final label and
    at every backpointer.
    """
    n, m = st.n, st.m
    delta = st.unary[0].copy()
    back = np.zeros((n, m), dtype=np.int64)
    for t in range(1, n):
        cand = delta[:, None] + st.transition
        back[t] = np.argmax(cand, axis=0)
        delta = cand[back[t], np.arange(m)] + st.unary[t]
    labels = np.empty(n, dtype=np.int64)
    labels[-1] = int(np.argmax(delta))
    for t in range(n - 1, 0, -1):
        labels[t - 1] = back[t, labels[t]]
    return labels, sequence_score(st, labels)


def viterbi_batch(tables, threads=1):
    """Decode many score tables; output order follows input order."""
    if threads <= 1:
        return [viterbi(st) for st in tables]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(viterbi, tables))


@dataclass
class OracleResult:
    log_z: float
    best_labels: np.ndarray
    best_score: float
    node_marginals: np.ndarray
    pair_marginals: np.ndarray | None
    scores: np.ndarray
    sequences: np.ndarray


def brute_force_oracle(st):
    """Every quantity of the chain by explicit enumeration of all m**n labelings."""
    n, m = st.n, st.m
    if m**n > MAX_ENUMERATION:
        raise CapacityError(f"{m}**{n} labelings exceed the enumeration limit")
    seqs = np.array(list(itertools.product(range(m), repeat=n)), dtype=np.int64)
    scores = st.unary[np.arange(n), seqs].sum(axis=1)
    if n > 1:
        scores = scores + st.transition[seqs[:, :-1], seqs[:, 1:]].sum(axis=1)
    log_z = log_sum_exp(scores)
    weights = np.exp(scores - log_z)

    # Same tie-break as viterbi: among maximal labelings, the smallest when
    # compared from the last position backwards.
    best = scores.max()
    tied = seqs[scores == best]
    best_labels = tied[np.lexsort(tied.T)[0]]

    nodes = np.zeros((n, m))
    for t in range(n):
        np.add.at(nodes[t], seqs[:, t], weights)
    pairs = None
    if n > 1:
        pairs = np.zeros((n - 1, m, m))
        for t in range(n - 1):
            np.add.at(pairs[t], (seqs[:, t], seqs[:, t + 1]), weights)
    return OracleResult(log_z, best_labels, sequence_score(st, best_labels), nodes, pairs,
                        scores, seqs)
