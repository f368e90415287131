"""Training losses: sequence cross entropy and the doubly stochastic attention penalty."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ShapeError, Tensor

LOG_CLAMP = 1e-12


@dataclass
class LossBatch:
    probs: Tensor  # N x T x K
    targets: np.ndarray  # N x T ids (-1 = no target) or N x T x K one-hot
    alphas: Tensor | list[Tensor] | None = None  # per scale: N x T x L
    lam: float = 1.0
    task: str = "recognition"


def one_hot_targets(targets: np.ndarray, k: int) -> np.ndarray:
    t = np.asarray(targets)
    if t.ndim >= 1 and t.shape[-1] == k and t.dtype.kind == "f":
        return t.astype(np.float64)
    t = t.astype(np.int64)
    if t.size and t.max() >= k:
        raise ShapeError(f"target id {t.max()} outside {k} classes")
    out = np.zeros(t.shape + (k,))
    valid = t >= 0
    idx = np.nonzero(valid)
    out[idx + (t[valid],)] = 1.0
    return out


def sequence_xent(batch: LossBatch) -> Tensor:
    """``-(1/(N*T)) sum y log p`` with ``p`` clamped below at 1e-12.

    Steps whose target id is -1 contribute nothing but still count in ``T``.
    """
    probs = ad._as_tensor(batch.probs)
    if probs.ndim != 3:
        raise ShapeError(f"probs must be N x T x K, got {probs.shape}")
    n, t, k = probs.shape
    y = one_hot_targets(batch.targets, k)
    if y.shape != probs.shape:
        raise ShapeError(f"targets {np.shape(batch.targets)} do not match probs {probs.shape}")
    logp = ad.log(probs, clamp=LOG_CLAMP)
    return ad.reduce(ad.mul(logp, y), "sum") * (-1.0 / (n * t))


def double_stochastic(alphas, lam: float = 1.0, mask: np.ndarray | None = None) -> Tensor:
    """``lam * sum_i (1 - sum_t alpha[t, i])^2`` for ``T x L`` maps.

    With a leading batch axis the per-sample penalties are averaged;
    ``mask`` (``N x T``) drops padded steps from the time sum.
    """
    a = ad._as_tensor(alphas)
    if a.ndim not in (2, 3):
        raise ShapeError(f"alphas must be [N x] T x L, got {a.shape}")
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        if m.shape != a.shape[:-1]:
            raise ShapeError(f"mask {m.shape} does not match alphas {a.shape}")
        a = ad.mul(a, m[..., None])
    coverage = ad.reduce(a, "sum", axis=-2)
    gap = ad.sub(1.0, coverage)
    per_sample = ad.reduce(ad.mul(gap, gap), "sum", axis=-1)
    total = ad.reduce(per_sample, "mean") if a.ndim == 3 else per_sample
    return ad.mul(total, float(lam))


def total_loss(batch: LossBatch, mask: np.ndarray | None = None) -> Tensor:
    j = sequence_xent(batch)
    if batch.task == "recognition":
        return j
    if batch.alphas is None:
        raise ContractError("caption loss needs attention weights")
    alphas = batch.alphas if isinstance(batch.alphas, (list, tuple)) else [batch.alphas]
    for a in alphas:
        j = ad.add(j, double_stochastic(a, batch.lam, mask))
    return j
