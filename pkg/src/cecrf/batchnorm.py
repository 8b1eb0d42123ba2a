"""Batch normalization over embedding outputs.

Train mode normalizes each feature by the mini-batch mean and the biased
(population) variance; infer mode uses the stored running statistics.
Running statistics are returned rather than written in place, so the caller
decides when to commit them.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BnStatisticsError, DimensionError

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1


@dataclass
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = DEFAULT_EPS
    momentum: float = DEFAULT_MOMENTUM

    def __post_init__(self):
        for name in ("gamma", "beta", "running_mean", "running_var"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        d = self.gamma.shape
        if len(d) != 1 or any(getattr(self, n).shape != d
                              for n in ("beta", "running_mean", "running_var")):
            raise DimensionError("BN parameter vectors must share one length")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")

    @classmethod
    def identity(cls, d, eps=DEFAULT_EPS, momentum=DEFAULT_MOMENTUM):
        return cls(np.ones(d), np.zeros(d), np.zeros(d), np.ones(d), eps, momentum)

    @property
    def dim(self):
        return self.gamma.shape[0]

    def copy(self):
        return replace(self, gamma=self.gamma.copy(), beta=self.beta.copy(),
                       running_mean=self.running_mean.copy(),
                       running_var=self.running_var.copy())


@dataclass
class BnCache:
    batch_mean: np.ndarray
    batch_var: np.ndarray
    normalized: np.ndarray
    inputs: np.ndarray
    inv_std: np.ndarray = field(repr=False)


def _check_width(x, bn):
    if x.shape[-1] != bn.dim:
        raise DimensionError(f"expected {bn.dim} features, got {x.shape[-1]}")


def bn_forward_train(x, bn):
    """Normalize a B x d batch with its own statistics.

    Returns ``(y, cache, (running_mean, running_var))`` where the running
    statistics are the exponential moving averages after this batch.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("train-mode input must be a B x d matrix")
    _check_width(x, bn)
    if x.shape[0] < 2:
        raise BnStatisticsError(f"need at least 2 samples for batch statistics, got {x.shape[0]}")
    mean = x.mean(axis=0)
    centered = x - mean
    var = (centered * centered).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    xhat = centered * inv_std
    y = bn.gamma * xhat + bn.beta
    running_mean = (1.0 - bn.momentum) * bn.running_mean + bn.momentum * mean
    running_var = (1.0 - bn.momentum) * bn.running_var + bn.momentum * var
    cache = BnCache(mean, var, xhat, x, inv_std)
    return y, cache, (running_mean, running_var)


def bn_forward_infer(x, bn):
    """Apply the fixed affine map defined by the running statistics."""
    x = np.asarray(x, dtype=np.float64)
    _check_width(x, bn)
    return (x - bn.running_mean) / np.sqrt(bn.running_var + bn.eps) * bn.gamma + bn.beta


def bn_backward(cache, grad_out, bn):
    """Gradients of the train-mode map w.r.t. its inputs, gamma and beta."""
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != cache.inputs.shape:
        raise DimensionError(f"grad_out shape {g.shape} does not match cache {cache.inputs.shape}")
    xhat = cache.normalized
    dbeta = g.sum(axis=0)
    dgamma = (g * xhat).sum(axis=0)
    dxhat = g * bn.gamma
    B = g.shape[0]
    grad_in = cache.inv_std / B * (B * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return grad_in, dgamma, dbeta
