"""Learnable parameters of the class-embedding CRF and their on-disk form.

The pairwise potential between a left neighbor of class ``i`` and a current
object of class ``j`` is ``P[i, j] = R[:, i] . Q[:, j]``; with batch
normalization the left factor is first standardized feature-wise. The unary
term is ``h . U[:, j] + b[j]``.
"""

import struct
from dataclasses import dataclass, replace

import numpy as np

from .batchnorm import BnParams, bn_forward_infer
from .data import FeatureStats
from .errors import DimensionError, ModelFormatError, ShapeError, VersionError

__all__ = [
    "BnParams", "CrfParams", "FoldedCrf", "ModelDims",
    "fold_bn", "init_params", "load_model", "save_model", "unary_scores",
]


@dataclass(frozen=True)
class ModelDims:
    s: int
    m: int
    d: int

    def __post_init__(self):
        if self.s < 1 or self.m < 2 or not 1 <= self.d <= self.m:
            raise DimensionError(f"invalid dims s={self.s}, m={self.m}, d={self.d}: "
                                 "need s >= 1, m >= 2, 1 <= d <= m")


def _as_matrix(a, shape, name):
    a = np.asarray(a, dtype=np.float64)
    if a.shape != shape:
        raise DimensionError(f"{name} has shape {a.shape}, expected {shape}")
    if not np.all(np.isfinite(a)):
        raise DimensionError(f"{name} has non-finite entries")
    return a


@dataclass
class CrfParams:
    R: np.ndarray
    Q: np.ndarray
    U: np.ndarray
    b: np.ndarray
    bn: BnParams | None
    dims: ModelDims
    feature_stats: FeatureStats | None = None

    def __post_init__(self):
        s, m, d = self.dims.s, self.dims.m, self.dims.d
        self.R = _as_matrix(self.R, (d, m), "R")
        self.Q = _as_matrix(self.Q, (d, m), "Q")
        self.U = _as_matrix(self.U, (s, m), "U")
        self.b = _as_matrix(self.b, (m,), "b")
        if self.bn is not None and self.bn.dim != d:
            raise DimensionError(f"BN width {self.bn.dim} does not match d={d}")

    def copy(self):
        return replace(self, R=self.R.copy(), Q=self.Q.copy(), U=self.U.copy(),
                       b=self.b.copy(), bn=None if self.bn is None else self.bn.copy())


@dataclass
class FoldedCrf:
    """Inference-ready CRF: a plain pairwise matrix plus the unary terms."""

    P: np.ndarray
    U: np.ndarray
    b: np.ndarray
    dims: ModelDims
    feature_stats: FeatureStats | None = None

    def __post_init__(self):
        s, m = self.dims.s, self.dims.m
        self.P = _as_matrix(self.P, (m, m), "P")
        self.U = _as_matrix(self.U, (s, m), "U")
        self.b = _as_matrix(self.b, (m,), "b")


def init_params(dims, seed, scale=0.1, use_bn=True):
    """Draw R, Q, U uniformly from [-scale, scale]; zero bias, identity BN."""
    if not isinstance(dims, ModelDims):
        dims = ModelDims(*dims)
    if scale < 0:
        raise ValueError("scale must be non-negative")
    rng = np.random.default_rng(seed)
    s, m, d = dims.s, dims.m, dims.d
    R = rng.uniform(-scale, scale, size=(d, m))
    Q = rng.uniform(-scale, scale, size=(d, m))
    U = rng.uniform(-scale, scale, size=(s, m))
    bn = BnParams.identity(d) if use_bn else None
    return CrfParams(R, Q, U, np.zeros(m), bn, dims)


def unary_scores(model, h):
    """``h @ U + b`` for one feature vector (length s) or a stack of them (n x s)."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != model.dims.s:
        raise DimensionError(f"feature length {h.shape[-1]} does not match s={model.dims.s}")
    return h @ model.U + model.b


def left_factor(params):
    """The d x m left embedding after BN inference (R itself without BN)."""
    if params.bn is None:
        return params.R
    return bn_forward_infer(params.R.T, params.bn).T


def fold_bn(params):
    """Collapse R, Q and the BN running statistics into one pairwise matrix."""
    P = left_factor(params).T @ params.Q
    return FoldedCrf(P, params.U.copy(), params.b.copy(), params.dims, params.feature_stats)


# -- binary container ---------------------------------------------------------
#
# magic "CECRF" + version byte "1", dims (s, m, d) as little-endian int64, one
# flag byte, optional BN scalars (eps, momentum), then float64 arrays in
# row-major order, then optional feature statistics (mu, sigma).

MAGIC = b"CECRF"
VERSION = b"1"

FLAG_FOLDED = 0x01
FLAG_BN = 0x02
FLAG_FEATURE_STATS = 0x04

KIND_CRF = 0
KIND_UNARY = 1
KIND_STATS = 2
KIND_MIXTURE = 3

_HEADER = struct.Struct("<6sqqqB")


def write_container(path, kind, dims3, flags, arrays, feature_stats=None):
    """Write a container; ``arrays`` is an ordered list of float arrays."""
    if feature_stats is not None:
        flags |= FLAG_FEATURE_STATS
    flag_byte = (kind << 4) | flags
    parts = [_HEADER.pack(MAGIC + VERSION, *(int(v) for v in dims3), flag_byte)]
    for a in arrays:
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    if feature_stats is not None:
        parts.append(np.ascontiguousarray(feature_stats.mu, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(feature_stats.sigma, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_header(blob):
    if len(blob) < _HEADER.size:
        raise ModelFormatError("file too short for a model header")
    magic, s, m, d, flag_byte = _HEADER.unpack_from(blob)
    if magic[:5] != MAGIC:
        raise ModelFormatError("not a model file (bad magic bytes)")
    if magic[5:] != VERSION:
        raise VersionError(f"unsupported format version {magic[5:]!r}")
    if min(s, m, d) < 0:
        raise ShapeError("negative dimension in header")
    return (s, m, d), flag_byte >> 4, flag_byte & 0x0F


class _Reader:
    def __init__(self, blob, offset, expected_values):
        self.values = len(blob) - offset
        if self.values % 8:
            raise ModelFormatError("payload is not a whole number of float64 values")
        self.values //= 8
        if self.values != expected_values:
            raise ShapeError(f"payload holds {self.values} values but the header implies "
                             f"{expected_values}")
        self.data = np.frombuffer(blob, dtype="<f8", offset=offset).astype(np.float64)
        self.pos = 0

    def take(self, *shape):
        n = int(np.prod(shape)) if shape else 1
        out = self.data[self.pos:self.pos + n].reshape(shape)
        self.pos += n
        return out


def _crf_layout(s, m, d, flags):
    if flags & FLAG_FOLDED:
        sizes = [(m, m), (s, m), (m,)]
    else:
        sizes = [(d, m), (d, m), (s, m), (m,)]
        if flags & FLAG_BN:
            sizes = [(2,)] + sizes + [(d,)] * 4
    return sizes


def save_model(model, path):
    """Serialize a CrfParams, FoldedCrf or baseline model."""
    if isinstance(model, FoldedCrf):
        dims = model.dims
        write_container(path, KIND_CRF, (dims.s, dims.m, dims.d), FLAG_FOLDED,
                        [model.P, model.U, model.b], model.feature_stats)
    elif isinstance(model, CrfParams):
        dims = model.dims
        arrays = [model.R, model.Q, model.U, model.b]
        flags = 0
        if model.bn is not None:
            bn = model.bn
            flags |= FLAG_BN
            arrays = ([np.array([bn.eps, bn.momentum])] + arrays
                      + [bn.gamma, bn.beta, bn.running_mean, bn.running_var])
        write_container(path, KIND_CRF, (dims.s, dims.m, dims.d), flags, arrays,
                        model.feature_stats)
    elif hasattr(model, "save"):
        model.save(path)
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")


def load_model(path):
    """Inverse of :func:`save_model`; raises ModelFormatError subclasses."""
    with open(path, "rb") as fh:
        blob = fh.read()
    (s, m, d), kind, flags = read_header(blob)
    if kind != KIND_CRF:
        from . import baselines
        return baselines.load_baseline(blob, (s, m, d), kind, flags)

    try:
        dims = ModelDims(s, m, d)
    except DimensionError as exc:
        raise ShapeError(str(exc)) from None
    sizes = _crf_layout(s, m, d, flags)
    reader = _Reader(blob, _HEADER.size, sum(int(np.prod(z)) for z in sizes) + _stats_len(s, flags))
    if flags & FLAG_FOLDED:
        P, U, b = (reader.take(*z) for z in sizes)
        model = FoldedCrf(P, U, b, dims)
    else:
        bn = None
        if flags & FLAG_BN:
            eps, momentum = reader.take(2)
        R, Q, U, b = (reader.take(d, m), reader.take(d, m), reader.take(s, m), reader.take(m))
        if flags & FLAG_BN:
            gamma, beta, rm, rv = (reader.take(d) for _ in range(4))
            bn = BnParams(gamma, beta, rm, rv, float(eps), float(momentum))
        model = CrfParams(R, Q, U, b, bn, dims)
    model.feature_stats = read_feature_stats(reader, s, flags)
    return model


def _stats_len(s, flags):
    return 2 * s if flags & FLAG_FEATURE_STATS else 0


def read_feature_stats(reader, s, flags):
    if not flags & FLAG_FEATURE_STATS:
        return None
    return FeatureStats(reader.take(s), reader.take(s))


def open_payload(blob, s, flags, sizes):
    """Reader positioned after the header, validated against ``sizes``."""
    total = sum(int(np.prod(z)) for z in sizes) + _stats_len(s, flags)
    return _Reader(blob, _HEADER.size, total)
