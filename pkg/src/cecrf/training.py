"""Feature standardization, pair-sample construction and the SGD loop."""

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, FeatureStats, LabeledSequence
from .errors import TrainingError
from .model import ModelDims, fold_bn, init_params
from .objectives import (NONE, PairSamples, global_nll, l2_penalty, memm_nll,
                         piecewise_nll, pseudolikelihood_nll, pwpl_nll)

SIGMA_FLOOR = 1e-6

SEQUENCE_OBJECTIVES = ("global", "global_folded", "pseudolikelihood", "piecewise", "pwpl")
LOCAL_OBJECTIVES = ("memm_bn", "memm")
OBJECTIVE_NAMES = SEQUENCE_OBJECTIVES[:2] + LOCAL_OBJECTIVES + SEQUENCE_OBJECTIVES[2:]
BN_OBJECTIVES = ("memm_bn", "global_folded")


@dataclass
class TrainConfig:
    objective: str = "memm_bn"
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 128
    l2: float = 5e-4
    embed_dim: int = 32
    epochs: int = 30
    seed: int = 0
    init_scale: float = 0.1
    # Log-linear CRF: d = m with R pinned to the identity, so Q is P itself.
    loglinear: bool = False

    def validate(self):
        if self.objective not in OBJECTIVE_NAMES:
            raise ValueError(f"unknown objective {self.objective!r}; choose from {OBJECTIVE_NAMES}")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or (self.objective == "memm_bn" and self.batch_size < 2):
            raise ValueError("batch_size must be >= 1 (>= 2 for memm_bn)")
        if self.l2 < 0 or self.epochs < 0 or self.embed_dim < 1 or self.init_scale < 0:
            raise ValueError("l2, epochs, init_scale must be non-negative and embed_dim >= 1")
        if self.loglinear and self.objective in BN_OBJECTIVES:
            raise ValueError("the log-linear CRF has no embedding to normalize")

    @property
    def uses_bn(self):
        return self.objective in BN_OBJECTIVES

    def as_dict(self):
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    seconds: float


@dataclass
class TrainResult:
    params: object
    folded: object
    history: list = field(default_factory=list)

    @property
    def losses(self):
        return [r.loss for r in self.history]


def standardize_features(dataset):
    """Per-feature z-scoring with statistics pooled over every training object."""
    if len(dataset) == 0:
        raise ValueError("cannot standardize an empty dataset")
    stacked = np.concatenate([seq.features for seq in dataset.sequences])
    stats = FeatureStats(stacked.mean(axis=0), np.maximum(stacked.std(axis=0), SIGMA_FLOOR))
    return stats, apply_feature_stats(dataset, stats)


def apply_feature_stats(dataset, stats):
    seqs = [LabeledSequence(stats.apply(seq.features), seq.labels) for seq in dataset.sequences]
    return Dataset(seqs, dataset.m, dataset.s, stats)


def make_pair_samples(dataset, with_context=True):
    """One sample per object: (left label or NONE, features, label)."""
    prev, feats, labels = [], [], []
    for seq in dataset.sequences:
        left = np.empty(len(seq), dtype=np.int64)
        left[0] = NONE
        left[1:] = seq.labels[:-1]
        if not with_context:
            left[:] = NONE
        prev.append(left)
        feats.append(seq.features)
        labels.append(seq.labels)
    return PairSamples(np.concatenate(prev), np.concatenate(feats), np.concatenate(labels))


class Sgd:
    """Plain SGD with heavy-ball momentum over a fixed list of arrays."""

    def __init__(self, arrays, lr, momentum):
        self.arrays = arrays
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(a) for a in arrays]

    def step(self, grads):
        for a, v, g in zip(self.arrays, self.velocity, grads):
            v *= self.momentum
            v -= self.lr * g
            a += v


def sequence_batches(dataset, order, min_objects):
    """Consecutive whole sequences until each batch holds >= min_objects objects."""
    batch, count = [], 0
    for i in order:
        seq = dataset.sequences[i]
        batch.append(seq)
        count += len(seq)
        if count >= min_objects:
            yield batch
            batch, count = [], 0
    if batch:
        yield batch


def _sequence_step(cfg, params, batch, threads):
    name = cfg.objective
    if name in ("global", "global_folded"):
        loss, grads = global_nll(params, batch, use_bn_fold=(name == "global_folded"),
                                 threads=threads)
    elif name == "pseudolikelihood":
        loss, grads = pseudolikelihood_nll(params, batch, threads=threads)
    elif name == "piecewise":
        loss, grads = piecewise_nll(params, batch, threads=threads)
    else:
        loss, grads = pwpl_nll(params, batch, threads=threads)
    objects = sum(len(seq) for seq in batch)
    return loss / objects, grads.scale(1.0 / objects)


def _local_step(cfg, params, batch):
    mode = "off"
    if cfg.objective == "memm_bn":
        # a lone neighbored sample has no batch variance; use running stats
        mode = "infer" if np.count_nonzero(batch.prev != NONE) == 1 else "train"
    loss, grads, stats = memm_nll(params, batch, mode)
    if stats is not None:
        params.bn.running_mean, params.bn.running_var = stats
    return loss, grads


def initial_params(cfg, dataset):
    m = dataset.m
    d = m if cfg.loglinear else cfg.embed_dim
    if d > m:
        raise ValueError(f"embed_dim {d} exceeds the number of classes {m}")
    params = init_params(ModelDims(dataset.s, m, d), cfg.seed, cfg.init_scale, use_bn=cfg.uses_bn)
    if cfg.loglinear:
        params.R = np.eye(m)
    params.feature_stats = dataset.feature_stats
    return params


def sgd_train(cfg, dataset, threads=1, log=None):
    """Fit CRF parameters to a standardized dataset.

    Local objectives shuffle pair samples; sequence objectives shuffle whole
    sequences. The returned ``folded`` model has BN (if any) merged into P.
    """
    cfg.validate()
    params = initial_params(cfg, dataset)
    arrays = ([] if cfg.loglinear else [params.R]) + [params.Q, params.U, params.b]
    names = ([] if cfg.loglinear else ["dR"]) + ["dQ", "dU", "db"]
    if params.bn is not None:
        arrays += [params.bn.gamma, params.bn.beta]
        names += ["dgamma", "dbeta"]
    opt = Sgd(arrays, cfg.lr, cfg.momentum)
    shuffle_rng = np.random.default_rng([cfg.seed, 0x5EED])
    local = cfg.objective in LOCAL_OBJECTIVES
    samples = make_pair_samples(dataset) if local else None

    history = []
    start = time.perf_counter()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        if local:
            order = shuffle_rng.permutation(len(samples))
            batches = (samples[order[i:i + cfg.batch_size]]
                       for i in range(0, len(order), cfg.batch_size))
        else:
            order = shuffle_rng.permutation(len(dataset))
            batches = sequence_batches(dataset, order, cfg.batch_size)
        for batch in batches:
            step += 1
            if local:
                loss, grads = _local_step(cfg, params, batch)
            else:
                loss, grads = _sequence_step(cfg, params, batch, threads)
            penalty, pgrads = l2_penalty(params, cfg.l2)
            loss += penalty
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            total = grads + pgrads
            opt.step([getattr(total, n) for n in names])
            losses.append(loss)
        record = EpochRecord(epoch, float(np.mean(losses)), time.perf_counter() - start)
        history.append(record)
        if log is not None:
            log(record)
    return TrainResult(params, fold_bn(params), history)


def write_history(history, path):
    with open(path, "w") as fh:
        fh.write("epoch\tobjective\twall_seconds\n")
        for r in history:
            fh.write(f"{r.epoch}\t{r.loss!r}\t{r.seconds:.3f}\n")
