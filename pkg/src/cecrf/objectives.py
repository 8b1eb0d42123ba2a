"""Training objectives with hand-derived gradients.

Every objective takes a :class:`CrfParams` and returns ``(loss, GradientSet)``
where the loss is a negative log-likelihood (or approximation of one).
Sequence-level objectives sum over sequences; the local MEMM objective
averages over pair samples.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .batchnorm import bn_backward, bn_forward_infer, bn_forward_train
from .errors import BnStatisticsError, DimensionError
from .model import left_factor
from .trellis import (ScoreTable, forward_backward, log_sum_exp, node_marginals,
                      pair_marginals, sequence_log_likelihood)

NONE = -1
BN_MODES = ("train", "infer", "off")


@dataclass
class GradientSet:
    dR: np.ndarray
    dQ: np.ndarray
    dU: np.ndarray
    db: np.ndarray
    dgamma: np.ndarray
    dbeta: np.ndarray

    FIELDS = ("dR", "dQ", "dU", "db", "dgamma", "dbeta")

    @classmethod
    def zeros(cls, dims):
        s, m, d = dims.s, dims.m, dims.d
        return cls(np.zeros((d, m)), np.zeros((d, m)), np.zeros((s, m)), np.zeros(m),
                   np.zeros(d), np.zeros(d))

    def __add__(self, other):
        return GradientSet(*(getattr(self, f) + getattr(other, f) for f in self.FIELDS))

    def scale(self, c):
        return GradientSet(*(getattr(self, f) * c for f in self.FIELDS))

    def items(self):
        return [(f, getattr(self, f)) for f in self.FIELDS]


@dataclass
class PairSample:
    prev_label: int | None
    h: np.ndarray
    label: int


@dataclass
class PairSamples:
    """Struct-of-arrays batch of (left label, features, label); ``prev == -1`` is NONE."""

    prev: np.ndarray
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.prev = np.asarray(self.prev, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        B = len(self.labels)
        if self.prev.shape != (B,) or self.features.ndim != 2 or self.features.shape[0] != B:
            raise DimensionError("prev, features and labels must agree on batch size")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            p = int(self.prev[idx])
            return PairSample(None if p == NONE else p, self.features[idx], int(self.labels[idx]))
        return PairSamples(self.prev[idx], self.features[idx], self.labels[idx])

    @classmethod
    def from_samples(cls, samples):
        return cls([NONE if p.prev_label is None else p.prev_label for p in samples],
                   np.stack([p.h for p in samples]), [p.label for p in samples])


def _log_softmax(z, axis=-1):
    return z - log_sum_exp(z, axis=axis)[..., None] if z.ndim > 1 else z - log_sum_exp(z)


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _onehot(labels, m):
    out = np.zeros((len(labels), m))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _check_sequences(params, sequences):
    if len(sequences) == 0:
        raise ValueError("empty batch of sequences")
    for seq in sequences:
        if seq.features.shape[1] != params.dims.s:
            raise DimensionError(f"feature length {seq.features.shape[1]} != s={params.dims.s}")
        if seq.labels.min() < 0 or seq.labels.max() >= params.dims.m:
            raise ValueError(f"labels must lie in [0, {params.dims.m})")


def chain_pairwise(params, dP, use_bn):
    """Push dLoss/dP through ``P = L^T Q`` (L = R, or BN-standardized R)."""
    grads = GradientSet.zeros(params.dims)
    L = left_factor(params) if use_bn else params.R
    grads.dQ = L @ dP
    dL = params.Q @ dP.T
    if use_bn:
        bn = params.bn
        inv_std = 1.0 / np.sqrt(bn.running_var + bn.eps)
        xhat = (params.R - bn.running_mean[:, None]) * inv_std[:, None]
        grads.dR = dL * (bn.gamma * inv_std)[:, None]
        grads.dgamma = (dL * xhat).sum(axis=1)
        grads.dbeta = dL.sum(axis=1)
    else:
        grads.dR = dL
    return grads


def _reduce(parts, dims, use_bn, params):
    """Fixed-order sum of per-sequence (loss, dU, db, dP) tuples."""
    loss = 0.0
    dU = np.zeros((dims.s, dims.m))
    db = np.zeros(dims.m)
    dP = np.zeros((dims.m, dims.m))
    for l, u, b, p in parts:
        loss += l
        dU += u
        db += b
        dP += p
    grads = chain_pairwise(params, dP, use_bn)
    grads.dU = dU
    grads.db = db
    return loss, grads


def _map(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _observed_pairs(labels, m):
    out = np.zeros((m, m))
    np.add.at(out, (labels[:-1], labels[1:]), 1.0)
    return out


# -- global likelihood --------------------------------------------------------

def global_nll(params, sequences, use_bn_fold=False, threads=1):
    """Negative conditional log-likelihood of whole sequences under the CRF."""
    _check_sequences(params, sequences)
    if use_bn_fold and params.bn is None:
        raise ValueError("use_bn_fold needs BN parameters")
    m = params.dims.m
    L = left_factor(params) if use_bn_fold else params.R
    P = L.T @ params.Q

    def one(seq):
        H, y = seq.features, seq.labels
        st = ScoreTable(H @ params.U + params.b, P)
        tr = forward_backward(st)
        loss = -sequence_log_likelihood(st, tr, y)
        G = node_marginals(tr) - _onehot(y, m)
        dP = np.zeros((m, m))
        if len(y) > 1:
            dP = pair_marginals(st, tr).sum(axis=0) - _observed_pairs(y, m)
        return loss, H.T @ G, G.sum(axis=0), dP

    return _reduce(_map(one, sequences, threads), params.dims, use_bn_fold, params)


# -- local (MEMM) likelihood --------------------------------------------------

def memm_nll(params, batch, bn_mode="train"):
    """Mean negative log p(y_t | h_t, y_{t-1}) over a batch of pair samples.

    Samples without a left neighbor skip the context term entirely and do not
    enter the batch statistics. Returns ``(loss, grads, running_stats)`` where
    ``running_stats`` is the post-batch ``(mean, var)`` in train mode and
    None otherwise.
    """
    if bn_mode not in BN_MODES:
        raise ValueError(f"bn_mode must be one of {BN_MODES}")
    B = len(batch)
    if B == 0:
        raise ValueError("empty batch")
    if batch.features.shape[1] != params.dims.s:
        raise DimensionError(f"feature length {batch.features.shape[1]} != s={params.dims.s}")
    if bn_mode != "off" and params.bn is None:
        raise ValueError(f"bn_mode={bn_mode!r} needs BN parameters")
    m = params.dims.m
    mask = batch.prev != NONE
    prev = batch.prev[mask]
    k = len(prev)
    if bn_mode == "train" and k == 1:
        raise BnStatisticsError("only one sample with a left neighbor; need >= 2 for BN")

    logits = batch.features @ params.U + params.b
    E = params.R[:, prev].T
    cache = stats = None
    if k == 0:
        C = E
    elif bn_mode == "train":
        C, cache, stats = bn_forward_train(E, params.bn)
    elif bn_mode == "infer":
        C = bn_forward_infer(E, params.bn)
    else:
        C = E
    logits[mask] += C @ params.Q

    logp = _log_softmax(logits)
    loss = -logp[np.arange(B), batch.labels].mean()
    G = (np.exp(logp) - _onehot(batch.labels, m)) / B

    grads = GradientSet.zeros(params.dims)
    grads.dU = batch.features.T @ G
    grads.db = G.sum(axis=0)
    if k:
        Gm = G[mask]
        grads.dQ = C.T @ Gm
        dC = Gm @ params.Q.T
        if bn_mode == "train":
            dE, grads.dgamma, grads.dbeta = bn_backward(cache, dC, params.bn)
        elif bn_mode == "infer":
            bn = params.bn
            inv_std = 1.0 / np.sqrt(bn.running_var + bn.eps)
            dE = dC * bn.gamma * inv_std
            grads.dgamma = (dC * (E - bn.running_mean) * inv_std).sum(axis=0)
            grads.dbeta = dC.sum(axis=0)
        else:
            dE = dC
        dRT = np.zeros((m, params.dims.d))
        np.add.at(dRT, prev, dE)
        grads.dR = dRT.T
    return float(loss), grads, stats


# -- Markov-blanket and node-split approximations (raw P = R^T Q) -------------

def _raw_P(params):
    return params.R.T @ params.Q


def pseudolikelihood_nll(params, sequences, threads=1):
    """-sum_t log p(y_t | y_{t-1}, y_{t+1}, h_t)."""
    _check_sequences(params, sequences)
    m = params.dims.m
    P = _raw_P(params)

    def one(seq):
        H, y = seq.features, seq.labels
        n = len(y)
        scores = H @ params.U + params.b
        scores[1:] += P[y[:-1], :]
        scores[:-1] += P[:, y[1:]].T
        logp = _log_softmax(scores)
        loss = -logp[np.arange(n), y].sum()
        G = np.exp(logp) - _onehot(y, m)
        dP = np.zeros((m, m))
        np.add.at(dP, y[:-1], G[1:])
        np.add.at(dP.T, y[1:], G[:-1])
        return loss, H.T @ G, G.sum(axis=0), dP

    return _reduce(_map(one, sequences, threads), params.dims, False, params)


def piecewise_nll(params, sequences, threads=1):
    """Each factor normalized on its own over all (current, left) label pairs."""
    _check_sequences(params, sequences)
    m = params.dims.m
    P = _raw_P(params)
    col_lse = log_sum_exp(P, axis=0)

    def one(seq):
        H, y = seq.features, seq.labels
        n = len(y)
        u = H @ params.U + params.b
        G = np.zeros((n, m))
        dP = np.zeros((m, m))
        lp0 = _log_softmax(u[0])
        loss = -lp0[y[0]]
        G[0] = np.exp(lp0)
        G[0, y[0]] -= 1.0
        if n > 1:
            z = log_sum_exp(u[1:] + col_lse, axis=1)
            loss -= (P[y[:-1], y[1:]] + u[np.arange(1, n), y[1:]] - z).sum()
            # joint[t, b, a] = p(left = b, current = a) within piece t
            joint = np.exp(P[None, :, :] + u[1:, None, :] - z[:, None, None])
            G[1:] = joint.sum(axis=1)
            G[np.arange(1, n), y[1:]] -= 1.0
            dP = joint.sum(axis=0) - _observed_pairs(y, m)
        return loss, H.T @ G, G.sum(axis=0), dP

    return _reduce(_map(one, sequences, threads), params.dims, False, params)


def pwpl_terms(params, seq):
    """Per-position forward (MEMM) and backward log-probabilities of one sequence.

    ``backward[0]`` is 0: the first position has no left neighbor.
    """
    P = _raw_P(params)
    y = seq.labels
    u = seq.features @ params.U + params.b
    u[1:] += P[y[:-1], :]
    forward = _log_softmax(u)[np.arange(len(y)), y]
    backward = np.zeros(len(y))
    if len(y) > 1:
        backward[1:] = P[y[:-1], y[1:]] - log_sum_exp(P, axis=0)[y[1:]]
    return forward, backward


def pwpl_nll(params, sequences, threads=1):
    """Forward MEMM term plus the input-independent backward term per position."""
    _check_sequences(params, sequences)
    m = params.dims.m
    P = _raw_P(params)
    back_prob = _softmax(P.T).T  # column a: p(left = b | current = a)

    def one(seq):
        H, y = seq.features, seq.labels
        n = len(y)
        scores = H @ params.U + params.b
        scores[1:] += P[y[:-1], :]
        logp = _log_softmax(scores)
        loss = -logp[np.arange(n), y].sum()
        G = np.exp(logp) - _onehot(y, m)
        dP = np.zeros((m, m))
        np.add.at(dP, y[:-1], G[1:])
        if n > 1:
            loss -= (np.log(back_prob[y[:-1], y[1:]])).sum()
            # d/dP[:, a] of -log p(b | a) = p(. | a) - onehot(b)
            colsum = np.zeros((m, m))
            np.add.at(colsum.T, y[1:], back_prob[:, y[1:]].T)
            dP += colsum - _observed_pairs(y, m)
        return loss, H.T @ G, G.sum(axis=0), dP

    return _reduce(_map(one, sequences, threads), params.dims, False, params)


# -- regularization -----------------------------------------------------------

def l2_penalty(params, lam):
    """(lam / 2) * squared norm of R, Q and U; bias and BN parameters excluded."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    loss = 0.5 * lam * (np.sum(params.R**2) + np.sum(params.Q**2) + np.sum(params.U**2))
    grads = GradientSet.zeros(params.dims)
    grads.dR = lam * params.R
    grads.dQ = lam * params.Q
    grads.dU = lam * params.U
    return float(loss), grads


# -- gradient verification ----------------------------------------------------

OBJECTIVES = {
    "global": lambda p, data: global_nll(p, data),
    "global_folded": lambda p, data: global_nll(p, data, use_bn_fold=True),
    "memm_bn": lambda p, data: memm_nll(p, data, "train")[:2],
    "memm_bn_infer": lambda p, data: memm_nll(p, data, "infer")[:2],
    "memm": lambda p, data: memm_nll(p, data, "off")[:2],
    "pseudolikelihood": lambda p, data: pseudolikelihood_nll(p, data),
    "piecewise": lambda p, data: piecewise_nll(p, data),
    "pwpl": lambda p, data: pwpl_nll(p, data),
    "l2": lambda p, lam: l2_penalty(p, lam),
}

_PARAM_FOR = {"dR": "R", "dQ": "Q", "dU": "U", "db": "b", "dgamma": "gamma", "dbeta": "beta"}


def _param_array(params, name):
    if name in ("gamma", "beta"):
        return getattr(params.bn, name)
    return getattr(params, name)


def relative_error(analytic, numeric):
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def finite_diff_check(objective, params, data, step=1e-5):
    """Largest relative error between analytic and central-difference gradients.

    ``objective`` is a name from ``OBJECTIVES`` or a callable
    ``(params, data) -> (loss, GradientSet)``. Every entry of R, Q, U, b (and
    gamma, beta when BN is present) is perturbed by ``+-step``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    fn = OBJECTIVES[objective] if isinstance(objective, str) else objective
    work = params.copy()
    _, grads = fn(work, data)
    worst = 0.0
    for gname, analytic in grads.items():
        pname = _PARAM_FOR[gname]
        if pname in ("gamma", "beta") and work.bn is None:
            continue
        arr = _param_array(work, pname)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            up = fn(work, data)[0]
            arr[idx] = orig - step
            down = fn(work, data)[0]
            arr[idx] = orig
            numeric = (up - down) / (2 * step)
            worst = max(worst, float(relative_error(analytic[idx], numeric)))
    return worst


GRADCHECK_DIMS = (3, 4, 2)


def gradcheck_instance(objective, seed, dims=GRADCHECK_DIMS):
    """Random parameters and data of the shape ``objective`` expects.

    Parameters are drawn at unit scale with non-trivial BN affine terms and
    running statistics; sequences have lengths 1..4 so that boundary cases
    are exercised.
    """
    from .data import LabeledSequence
    from .model import ModelDims, init_params

    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}; choose from {sorted(OBJECTIVES)}")
    rng = np.random.default_rng(seed)
    s, m, d = dims
    use_bn = objective in ("memm_bn", "memm_bn_infer", "global_folded")
    params = init_params(ModelDims(s, m, d), int(rng.integers(2**31)), scale=1.0, use_bn=use_bn)
    params.b = rng.normal(size=m)
    if use_bn:
        params.bn.gamma = rng.uniform(0.5, 1.5, size=d)
        params.bn.beta = rng.normal(scale=0.5, size=d)
        params.bn.running_mean = rng.normal(scale=0.5, size=d)
        params.bn.running_var = rng.uniform(0.5, 2.0, size=d)
    if objective == "l2":
        return params, float(rng.uniform(0.01, 1.0))
    if objective.startswith("memm"):
        B = 8
        prev = rng.integers(m, size=B)
        prev[rng.random(B) < 0.25] = NONE
        prev[:2] = rng.integers(m, size=2)
        return params, PairSamples(prev, rng.normal(size=(B, s)), rng.integers(m, size=B))
    seqs = [LabeledSequence(rng.normal(size=(n, s)), rng.integers(m, size=n))
            for n in (1, 2, 3, 4)]
    return params, seqs
