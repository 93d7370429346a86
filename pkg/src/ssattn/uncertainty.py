"""Laplace uncertainty objective and the rankings derived from an uncertainty map.

The ranking constructs are piecewise constant in the uncertainty values, so
they are returned as plain constant tensors (no gradient path).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DomainError, ShapeError
from .tensor import Tensor


@dataclass
class UncertaintyMap:
    """Per-pixel Laplace scale, stored through its logarithm."""

    log_sigma: Tensor

    @property
    def sigma(self) -> Tensor:
        return T.exp(self.log_sigma)

    @classmethod
    def neutral(cls, shape) -> "UncertaintyMap":
        return cls(Tensor(np.zeros(shape)))


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def rank_count(fraction: float, n: int) -> int:
    """``ceil(fraction * n)``, robust to float noise like ``(1 - 0.8) * 5``."""
    return min(n, max(1, math.ceil(fraction * n - 1e-9)))


def udl_loss(pred, gt, log_sigma) -> Tensor:
    """Negative Laplace log-likelihood with a learned per-pixel scale.

    mean over pixels of ``|pred - gt|_1 / sigma + log sigma`` where the L1 norm
    sums absolute residuals over colour channels and ``sigma = exp(log_sigma)``.
    ``log_sigma`` has a single channel that broadcasts over colours.
    """
    pred, gt, log_sigma = T.as_tensor(pred), T.as_tensor(gt), T.as_tensor(log_sigma)
    for t in (pred, gt, log_sigma):
        if not np.all(np.isfinite(t.data)):
            raise DomainError("udl_loss inputs must be finite")
    if pred.shape != gt.shape or pred.shape[-2:] != log_sigma.shape[-2:]:
        raise ShapeError(f"udl_loss shapes disagree: {pred.shape}, {gt.shape}, {log_sigma.shape}")
    resid = T.sum(T.absolute(pred - gt), axis=-3, keepdims=True)
    return T.mean(resid * T.exp(-log_sigma) + log_sigma)


def constraint_matrix(u, gamma: float = 0.8, beta: float = 0.6) -> Tensor:
    """Per-channel {beta, 1} gate keeping the top ``1 - gamma`` fraction of ``u``.

    Entries at or above the ``ceil((1 - gamma) * H * W)``-th largest value of
    their channel become 1 (ties at the threshold included); the rest beta.
    Works on [..., C, H, W].
    """
    if not 0.0 <= gamma < 1.0:
        raise ConfigError(f"gamma must lie in [0, 1), got {gamma}")
    if not 0.0 < beta <= 1.0:
        raise ConfigError(f"beta must lie in (0, 1], got {beta}")
    u = _data(u.sigma if isinstance(u, UncertaintyMap) else u)
    h, w = u.shape[-2:]
    flat = u.reshape(*u.shape[:-2], h * w)
    k = rank_count(1.0 - gamma, h * w)
    thresh = np.partition(flat, h * w - k, axis=-1)[..., h * w - k: h * w - k + 1]
    gate = np.where(flat >= thresh, 1.0, beta)
    return Tensor(gate.reshape(u.shape))


def correlation_map(u_patch) -> Tensor:
    """Token affinity ``A @ A^T`` with A the [N = w*w, C] token matrix of a patch.

    Accepts [..., C, w, w] and returns [..., N, N].
    """
    u = _data(u_patch)
    c, h, w = u.shape[-3:]
    a = np.swapaxes(u.reshape(*u.shape[:-3], c, h * w), -1, -2)
    return Tensor(a @ np.swapaxes(a, -1, -2))


def topk_row_mask(cr, k_fraction: float = 0.8) -> Tensor:
    """1 on the ``ceil(k * N)`` largest entries of each row (ties admitted), else 0."""
    if not 0.0 < k_fraction <= 1.0:
        raise ConfigError(f"k_fraction must lie in (0, 1], got {k_fraction}")
    cr = _data(cr)
    n = cr.shape[-1]
    k = rank_count(k_fraction, n)
    thresh = np.partition(cr, n - k, axis=-1)[..., n - k: n - k + 1]
    return Tensor((cr >= thresh).astype(np.float64))


def modulation_matrix(mask, alpha: float = 0.2) -> Tensor:
    """``-alpha * mask + (1 + alpha)``: 1 on high-correlation pairs, 1 + alpha elsewhere."""
    if alpha < 0:
        raise ConfigError(f"alpha must be non-negative, got {alpha}")
    m = _data(mask)
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ConfigError("mask entries must be 0 or 1")
    # exact two-point values; -alpha*1 + (1+alpha) can round away from 1
    return Tensor(np.where(m == 1.0, 1.0, 1.0 + alpha))
