"""Labeled sequences, the dataset file format and a synthetic shelf generator."""

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DatasetParseError, DatasetShapeError, DimensionError

FORMAT_VERSION = "v1"
HEADER_PREFIX = "CECRF-DATA"


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.shape != self.sigma.shape or self.mu.ndim != 1:
            raise DimensionError("mu and sigma must be vectors of equal length")
        if np.any(self.sigma <= 0):
            raise ValueError("sigma entries must be positive")

    def apply(self, features):
        return (np.asarray(features, dtype=np.float64) - self.mu) / self.sigma


@dataclass
class LabeledSequence:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise DimensionError("features must be n x s and labels length n")
        if len(self.labels) < 1 or self.features.shape[0] != len(self.labels):
            raise DimensionError(f"{self.features.shape[0]} feature rows for "
                                 f"{len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)


@dataclass
class Dataset:
    sequences: list
    m: int
    s: int
    feature_stats: FeatureStats | None = None

    def __post_init__(self):
        for i, seq in enumerate(self.sequences):
            if seq.features.shape[1] != self.s:
                raise DimensionError(f"sequence {i} has {seq.features.shape[1]} features, s={self.s}")
            if seq.labels.min() < 0 or seq.labels.max() >= self.m:
                raise DimensionError(f"sequence {i} has labels outside [0, {self.m})")

    def __len__(self):
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    @property
    def num_objects(self):
        return sum(len(seq) for seq in self.sequences)

    def label_sequences(self):
        return [seq.labels for seq in self.sequences]

    def subset(self, indices):
        return Dataset([self.sequences[i] for i in indices], self.m, self.s, self.feature_stats)


# -- synthetic generator ------------------------------------------------------

@dataclass
class SynthConfig:
    m: int = 50
    group_size: int = 5
    s: int = 16
    p_repeat: float = 0.5
    p_group: float = 0.3
    delta_within: float = 1.0
    delta_between: float = 6.0
    noise_sigma: float = 1.0
    length_min: int = 2
    length_max: int = 32
    num_sequences: int = 2500
    seed: int = 0

    def validate(self):
        if self.m < 2 or self.s < 1:
            raise ValueError("need m >= 2 and s >= 1")
        if self.group_size < 1 or self.m % self.group_size:
            raise ValueError(f"group_size {self.group_size} must divide m={self.m}")
        if min(self.p_repeat, self.p_group) < 0 or self.p_repeat + self.p_group > 1 + 1e-12:
            raise ValueError("p_repeat and p_group must be non-negative with sum <= 1")
        if self.length_min < 2 or self.length_max < self.length_min:
            raise ValueError("need 2 <= length_min <= length_max")
        if self.num_sequences < 1:
            raise ValueError("num_sequences must be positive")
        if min(self.delta_within, self.delta_between, self.noise_sigma) < 0:
            raise ValueError("separations and noise must be non-negative")

    @property
    def groups(self):
        return self.m // self.group_size


def group_of(label, group_size):
    return label // group_size


def synthetic_transition_matrix(cfg):
    """Exact p(next | current) of the label chain the generator samples."""
    m, g = cfg.m, cfg.group_size
    p_rest = 1.0 - cfg.p_repeat - cfg.p_group
    T = np.full((m, m), p_rest / m)
    for k in range(cfg.groups):
        blk = slice(k * g, (k + 1) * g)
        T[blk, blk] += cfg.p_group / g
    T[np.diag_indices(m)] += cfg.p_repeat
    return T


def _unit_vectors(rng, count, dim):
    v = rng.standard_normal((count, dim))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return v / norms


def class_means(cfg, rng):
    centroids = cfg.delta_between * _unit_vectors(rng, cfg.groups, cfg.s)
    offsets = cfg.delta_within * _unit_vectors(rng, cfg.m, cfg.s)
    return np.repeat(centroids, cfg.group_size, axis=0) + offsets


def generate_synthetic(cfg):
    """Sample a dataset whose labels follow the grouped Markov chain of ``cfg``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    means = class_means(cfg, rng)
    g = cfg.group_size
    sequences = []
    for _ in range(cfg.num_sequences):
        n = int(rng.integers(cfg.length_min, cfg.length_max + 1))
        labels = np.empty(n, dtype=np.int64)
        labels[0] = rng.integers(cfg.m)
        draws = rng.random(n)
        for t in range(1, n):
            prev = labels[t - 1]
            u = draws[t]
            if u < cfg.p_repeat:
                labels[t] = prev
            elif u < cfg.p_repeat + cfg.p_group:
                labels[t] = (prev // g) * g + rng.integers(g)
            else:
                labels[t] = rng.integers(cfg.m)
        features = means[labels] + cfg.noise_sigma * rng.standard_normal((n, cfg.s))
        sequences.append(LabeledSequence(features, labels))
    return Dataset(sequences, cfg.m, cfg.s)


# -- file format --------------------------------------------------------------

def save_dataset(dataset, path):
    """One JSON object per line after a ``CECRF-DATA v1 m=.. s=..`` header."""
    with open(path, "w") as fh:
        fh.write(f"{HEADER_PREFIX} {FORMAT_VERSION} m={dataset.m} s={dataset.s}\n")
        for seq in dataset.sequences:
            record = {"labels": seq.labels.tolist(), "features": seq.features.tolist()}
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def _parse_header(line):
    parts = line.split()
    if len(parts) != 4 or parts[0] != HEADER_PREFIX:
        raise DatasetParseError("expected header 'CECRF-DATA v1 m=<int> s=<int>'", 1)
    if parts[1] != FORMAT_VERSION:
        raise DatasetParseError(f"unsupported dataset version {parts[1]!r}", 1)
    values = {}
    for item in parts[2:]:
        key, _, val = item.partition("=")
        try:
            values[key] = int(val)
        except ValueError:
            raise DatasetParseError(f"bad header field {item!r}", 1) from None
    if set(values) != {"m", "s"}:
        raise DatasetParseError("header must declare m and s", 1)
    return values["m"], values["s"]


def load_dataset(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetParseError("empty file", 1)
    m, s = _parse_header(lines[0])
    sequences = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            labels = record["labels"]
            features = record["features"]
        except (json.JSONDecodeError, TypeError, KeyError) as exc:
            raise DatasetParseError(f"malformed record ({exc})", lineno) from None
        if not isinstance(labels, list) or not isinstance(features, list) or not labels:
            raise DatasetParseError("labels and features must be non-empty lists", lineno)
        if len(labels) != len(features):
            raise DatasetParseError(f"{len(labels)} labels but {len(features)} feature rows",
                                    lineno)
        if any(not isinstance(row, list) or len(row) != s for row in features):
            raise DatasetShapeError(f"feature rows must have length s={s}", lineno)
        if any(not isinstance(y, int) or not 0 <= y < m for y in labels):
            raise DatasetShapeError(f"labels must be integers in [0, {m})", lineno)
        try:
            sequences.append(LabeledSequence(np.array(features, dtype=np.float64), labels))
        except (ValueError, TypeError) as exc:
            raise DatasetParseError(str(exc), lineno) from None
    return Dataset(sequences, m, s)


def split(dataset, train_fraction, seed):
    """Seeded split of whole sequences; the train side gets ``floor(frac * N)``."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    N = len(dataset)
    if N < 2:
        raise ValueError("need at least 2 sequences to split")
    n_train = min(max(math.floor(train_fraction * N), 1), N - 1)
    order = np.random.default_rng(seed).permutation(N)
    train_idx = np.sort(order[:n_train])
    test_idx = np.sort(order[n_train:])
    return dataset.subset(train_idx), dataset.subset(test_idx)
