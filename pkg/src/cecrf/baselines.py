"""Comparison systems: a context-free softmax classifier, a CRF whose pairwise
potentials are smoothed transition frequencies, and an EM mixture of Markov
chains that picks one transition table per sequence.
"""

from dataclasses import dataclass

import numpy as np

from .model import (KIND_MIXTURE, KIND_STATS, KIND_UNARY, open_payload, read_feature_stats,
                    write_container)
from .errors import ShapeError
from .training import Sgd, TrainConfig, make_pair_samples
from .trellis import ScoreTable, forward_backward, log_sum_exp, node_marginals, viterbi

DEFAULT_WEIGHT_GRID = (0.0, 0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass
class UnaryModel:
    U: np.ndarray
    b: np.ndarray
    feature_stats: object = None

    @property
    def m(self):
        return self.U.shape[1]

    def log_probs(self, features):
        z = np.asarray(features, dtype=np.float64) @ self.U + self.b
        return z - log_sum_exp(z, axis=-1)[..., None]

    def save(self, path):
        s, m = self.U.shape
        write_container(path, KIND_UNARY, (s, m, 0), 0, [self.U, self.b], self.feature_stats)


def train_unary(dataset, config=None):
    """Softmax regression on individual objects with SGD and L2 on U."""
    config = config or TrainConfig()
    samples = make_pair_samples(dataset, with_context=False)
    rng = np.random.default_rng(config.seed)
    s, m = dataset.s, dataset.m
    U = rng.uniform(-config.init_scale, config.init_scale, size=(s, m))
    b = np.zeros(m)
    opt = Sgd([U, b], config.lr, config.momentum)
    shuffle_rng = np.random.default_rng([config.seed, 0x5EED])
    eye = np.eye(m)
    for _ in range(config.epochs):
        order = shuffle_rng.permutation(len(samples))
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            H, y = samples.features[idx], samples.labels[idx]
            z = H @ U + b
            p = np.exp(z - log_sum_exp(z, axis=1)[:, None])
            G = (p - eye[y]) / len(idx)
            opt.step([H.T @ G + config.l2 * U, G.sum(axis=0)])
    return UnaryModel(U, b, dataset.feature_stats)


# -- pairwise statistics ------------------------------------------------------

@dataclass
class TransitionStats:
    log_p: np.ndarray
    alpha: float

    @property
    def m(self):
        return self.log_p.shape[0]


def _normalize_rows(counts, alpha):
    m = counts.shape[-1]
    num = counts + alpha
    den = counts.sum(axis=-1, keepdims=True) + alpha * m
    empty = den == 0
    return np.where(empty, 1.0 / m, num / np.where(empty, 1.0, den))


def _log(p):
    with np.errstate(divide="ignore"):
        return np.log(p)


def transition_counts(label_sequences, m):
    counts = np.zeros((m, m))
    for y in label_sequences:
        y = np.asarray(y)
        np.add.at(counts, (y[:-1], y[1:]), 1.0)
    return counts


def transition_stats(label_sequences, m, alpha=1.0):
    """Row-normalized transition frequencies with ``alpha`` pseudo-counts per cell."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return TransitionStats(_log(_normalize_rows(transition_counts(label_sequences, m), alpha)),
                           float(alpha))


def stats_score_table(unary_logp, stats, weight):
    if weight < 0:
        raise ValueError("weight must be non-negative")
    transition = np.zeros_like(stats.log_p) if weight == 0 else weight * stats.log_p
    return ScoreTable(unary_logp, transition)


def stats_crf_decode(unary_logp, stats, weight):
    """Viterbi labels under unary log-probabilities plus ``weight * log p(j | i)``."""
    return viterbi(stats_score_table(unary_logp, stats, weight))[0]


def stats_crf_marginals(unary_logp, stats, weight):
    return node_marginals(forward_backward(stats_score_table(unary_logp, stats, weight)))


def _object_error(pred_gold):
    wrong = sum(int(np.sum(p != g)) for p, g in pred_gold)
    total = sum(len(g) for _, g in pred_gold)
    return wrong / total


def validation_errors(decode, validation, grid):
    """Object error fraction for each weight; ``decode(logp, w) -> labels``."""
    out = {}
    for w in grid:
        out[w] = _object_error([(decode(lp, w), y) for lp, y in validation])
    return out


def pick_weight(errors):
    """Lowest error; ties go to the smaller weight."""
    best = None
    for w in sorted(errors):
        if best is None or errors[w] < errors[best]:
            best = w
    return best


def cross_validate_weight(unary, train, validation, grid=DEFAULT_WEIGHT_GRID, alpha=1.0):
    """Choose the unary/pairwise weight on a held-out split.

    Transition statistics come from ``train``; ``unary`` should have been fit
    on ``train`` as well.
    """
    if len(grid) == 0:
        raise ValueError("empty weight grid")
    stats = transition_stats(train.label_sequences(), train.m, alpha)
    held = [(unary.log_probs(seq.features), seq.labels) for seq in validation.sequences]
    errors = validation_errors(lambda lp, w: stats_crf_decode(lp, stats, w), held, grid)
    return pick_weight(errors)


@dataclass
class StatsCrf:
    unary: UnaryModel
    stats: TransitionStats
    weight: float

    @property
    def feature_stats(self):
        return self.unary.feature_stats

    def save(self, path):
        s, m = self.unary.U.shape
        write_container(path, KIND_STATS, (s, m, 0), 0,
                        [self.unary.U, self.unary.b, self.stats.log_p,
                         np.array([self.stats.alpha, self.weight])],
                        self.unary.feature_stats)


# -- mixture of Markov chains -------------------------------------------------

@dataclass
class MixtureModel:
    priors: np.ndarray        # k
    initial: np.ndarray       # k x m
    transitions: np.ndarray   # k x m x m, rows p(next | current)
    smoothing: float

    @property
    def k(self):
        return len(self.priors)

    @property
    def m(self):
        return self.initial.shape[1]

    def component_stats(self, c):
        return TransitionStats(_log(self.transitions[c]), self.smoothing)

    def component_log_likelihood(self, label_sequences):
        """N x k matrix of log p(sequence | component)."""
        return _component_ll(_Encoded(label_sequences, self.m), self)

    def responsibilities(self, label_sequences):
        ll = self.component_log_likelihood(label_sequences) + _log(self.priors)
        return np.exp(ll - log_sum_exp(ll, axis=1)[:, None])

    def select_component(self, labels):
        ll = self.component_log_likelihood([labels])[0] + _log(self.priors)
        return int(np.argmax(ll))


class _Encoded:
    """Label sequences flattened into first labels and transition cell indices."""

    def __init__(self, label_sequences, m):
        seqs = [np.asarray(y, dtype=np.int64) for y in label_sequences]
        self.n = len(seqs)
        self.m = m
        self.first = np.array([y[0] for y in seqs], dtype=np.int64)
        self.cells = np.concatenate([y[:-1] * m + y[1:] for y in seqs] + [np.zeros(0, np.int64)])
        self.owner = np.concatenate([np.full(len(y) - 1, i) for i, y in enumerate(seqs)]
                                    + [np.zeros(0, np.int64)]).astype(np.int64)


def _component_ll(enc, mix):
    k, m = mix.k, enc.m
    log_init = _log(mix.initial)
    log_T = _log(mix.transitions).reshape(k, m * m)
    ll = np.empty((enc.n, k))
    for c in range(k):
        ll[:, c] = log_init[c, enc.first] + np.bincount(enc.owner, weights=log_T[c, enc.cells],
                                                        minlength=enc.n)
    return ll


def _m_step(enc, resp, smoothing):
    k, m = resp.shape[1], enc.m
    priors = resp.sum(axis=0) / enc.n
    init_counts = np.stack([np.bincount(enc.first, weights=resp[:, c], minlength=m)
                            for c in range(k)])
    trans_counts = np.stack([np.bincount(enc.cells, weights=resp[enc.owner, c], minlength=m * m)
                             for c in range(k)]).reshape(k, m, m)
    return MixtureModel(priors, _normalize_rows(init_counts, smoothing),
                        _normalize_rows(trans_counts, smoothing), smoothing)


def _objective(enc, mix):
    """Log-likelihood plus the log Dirichlet prior implied by the pseudo-counts."""
    joint = _component_ll(enc, mix) + _log(mix.priors)
    value = float(log_sum_exp(joint, axis=1).sum())
    if mix.smoothing > 0:
        value += mix.smoothing * float(_log(mix.initial).sum() + _log(mix.transitions).sum())
    return value, joint


def em_mixture_markov(label_sequences, m, k, iterations=50, seed=0, smoothing=1.0):
    """Cluster label sequences into ``k`` first-order Markov chains.

    Starts from Dirichlet-random responsibilities. The returned trace holds the
    smoothed log-likelihood (log-likelihood plus the pseudo-count prior, which
    is the quantity EM with additive smoothing never decreases) before each
    iteration and once more at the end.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(label_sequences):
        raise ValueError(f"k={k} exceeds the number of sequences ({len(label_sequences)})")
    enc = _Encoded(label_sequences, m)
    rng = np.random.default_rng(seed)
    mix = _m_step(enc, rng.dirichlet(np.ones(k), size=enc.n), smoothing)
    trace = []
    for _ in range(iterations):
        value, joint = _objective(enc, mix)
        trace.append(value)
        resp = np.exp(joint - log_sum_exp(joint, axis=1)[:, None])
        mix = _m_step(enc, resp, smoothing)
    trace.append(_objective(enc, mix)[0])
    return mix, trace


def mixture_component(mixture, unary_logp):
    """Component that best explains the unary-argmax labeling."""
    return mixture.select_component(np.argmax(unary_logp, axis=1))


def mixture_decode(mixture, unary_logp, weight, component=None):
    if component is None:
        component = mixture_component(mixture, unary_logp)
    return stats_crf_decode(unary_logp, mixture.component_stats(component), weight)


@dataclass
class MixtureCrf:
    unary: UnaryModel
    mixture: MixtureModel
    weight: float

    @property
    def feature_stats(self):
        return self.unary.feature_stats

    def save(self, path):
        s, m = self.unary.U.shape
        mix = self.mixture
        write_container(path, KIND_MIXTURE, (s, m, mix.k), 0,
                        [self.unary.U, self.unary.b, mix.priors, mix.initial, mix.transitions,
                         np.array([mix.smoothing, self.weight])],
                        self.unary.feature_stats)


def load_baseline(blob, dims3, kind, flags):
    s, m, k = dims3
    if kind == KIND_UNARY:
        sizes = [(s, m), (m,)]
    elif kind == KIND_STATS:
        sizes = [(s, m), (m,), (m, m), (2,)]
    elif kind == KIND_MIXTURE:
        sizes = [(s, m), (m,), (k,), (k, m), (k, m, m), (2,)]
    else:
        raise ShapeError(f"unknown model kind {kind}")
    reader = open_payload(blob, s, flags, sizes)
    arrays = [reader.take(*z) for z in sizes]
    fstats = read_feature_stats(reader, s, flags)
    unary = UnaryModel(arrays[0], arrays[1], fstats)
    if kind == KIND_UNARY:
        return unary
    if kind == KIND_STATS:
        alpha, weight = arrays[3]
        return StatsCrf(unary, TransitionStats(arrays[2], float(alpha)), float(weight))
    smoothing, weight = arrays[5]
    return MixtureCrf(unary, MixtureModel(arrays[2], arrays[3], arrays[4], float(smoothing)),
                      float(weight))
