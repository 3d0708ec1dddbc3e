"""Contrastive objectives over unit-norm graph representations.

All three losses share one form, ``-sum_ij W_ij * chi_ij``, where ``chi`` is
the log-softmax agreement of each anchor with every other batch member and
``W`` picks out (and weights) the positives of each anchor:

* SimCLR: ``W[i, partner(i)] = 1``
* SupCon: ``W[i, s] = 1/|P(i)|`` for same-family ``s != i``
* spectral CL: ``W[i, s] = softmax_s(-sigma(i, s) / tau_alpha)`` over ``P(i)``
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

TAU = 0.1
TAU_ALPHA = 0.05


def agreement_matrix(z, tau: float = TAU) -> Tensor:
    """``chi[i, j] = log softmax_{r != i}(z_i . z_r / tau)[j]``; the diagonal is 0."""
    z = ad.as_tensor(z)
    n = z.shape[0]
    sim = ad.scale(z @ ad.transpose(z), 1.0 / tau)
    return ad.log_softmax(sim, mask=~np.eye(n, dtype=bool))


def agreement(z, i: int, j: int, tau: float = TAU) -> float:
    """Agreement of anchor ``i`` with member ``j`` of the batch ``z``."""
    if i == j:
        raise ValueError("agreement is defined between distinct batch members")
    return float(agreement_matrix(z, tau).data[i, j])


def weighted_loss(z, weights: np.ndarray, tau: float = TAU) -> Tensor:
    return ad.scale(ad.sum(ad.mul(agreement_matrix(z, tau), weights)), -1.0)


def alpha_weights(distances: Sequence[float], tau_alpha: float = TAU_ALPHA) -> np.ndarray:
    """Convex weights over an anchor's positives: closer graphs weigh strictly more."""
    d = np.asarray(distances, dtype=float)
    if d.size == 0:
        return d
    logits = -d / tau_alpha
    e = np.exp(logits - logits.max())
    return e / e.sum()


def positive_mask(families: Sequence) -> np.ndarray:
    fam = np.asarray(families, dtype=object)
    mask = fam[:, None] == fam[None, :]
    np.fill_diagonal(mask, False)
    return mask


@dataclass
class LossStats:
    skipped_anchors: int = 0


def simclr_weights(partner: Sequence[int]) -> np.ndarray:
    n = len(partner)
    w = np.zeros((n, n))
    for i, j in enumerate(partner):
        if j == i:
            raise ValueError(f"anchor {i} is its own partner")
        w[i, j] = 1.0
    return w


def supcon_weights(families: Sequence, stats: Optional[LossStats] = None) -> np.ndarray:
    mask = positive_mask(families)
    counts = mask.sum(axis=1, keepdims=True)
    if stats is not None:
        stats.skipped_anchors += int(np.sum(counts == 0))
    return np.divide(mask, counts, out=np.zeros(mask.shape), where=counts > 0)


def cl_weights(families: Sequence, sigma: np.ndarray, tau_alpha: float = TAU_ALPHA,
               stats: Optional[LossStats] = None) -> np.ndarray:
    mask = positive_mask(families)
    w = np.zeros(mask.shape)
    for i in range(len(mask)):
        pos = np.flatnonzero(mask[i])
        if pos.size == 0:
            if stats is not None:
                stats.skipped_anchors += 1
            continue
        w[i, pos] = alpha_weights(sigma[i, pos], tau_alpha)
    return w


def simclr_loss(z, partner: Sequence[int], tau: float = TAU) -> Tensor:
    return weighted_loss(z, simclr_weights(partner), tau)


def supcon_loss(z, families: Sequence, tau: float = TAU,
                stats: Optional[LossStats] = None) -> Tensor:
    return weighted_loss(z, supcon_weights(families, stats), tau)


def cl_loss(z, families: Sequence, sigma: np.ndarray, tau: float = TAU,
            tau_alpha: float = TAU_ALPHA, stats: Optional[LossStats] = None) -> Tensor:
    """Spectrally weighted contrastive loss.

    ``sigma`` holds pairwise spectral distances among batch members.  Anchors
    with no same-family partner contribute nothing and are counted in ``stats``.
    """
    return weighted_loss(z, cl_weights(families, sigma, tau_alpha, stats), tau)


# ---------------------------------------------------------- positive selection

def neighbor_pools(dist: np.ndarray, pool_size: int = 5) -> np.ndarray:
    """Per row, the ``pool_size`` nearest other rows (stable order, self excluded)."""
    n = len(dist)
    if n < 2:
        raise ValueError("need at least two graphs to form positive pairs")
    k = min(pool_size, n - 1)
    d = np.array(dist, dtype=float)
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")
    return order[:, :k]


def select_positive(anchor: int, pools: np.ndarray, rng: np.random.Generator) -> int:
    """Uniform draw among the anchor's nearest same-family neighbours."""
    pool = pools[anchor]
    return int(pool[rng.integers(len(pool))])


@dataclass
class CLBatch:
    """Anchors plus their drawn positives, with family tags and spectral distances."""
    indices: np.ndarray
    families: list
    partner: np.ndarray
    sigma: np.ndarray = field(repr=False)

    def __post_init__(self):
        if len(self.indices) < 4:
            raise ValueError("a contrastive batch needs at least 4 members")


# ------------------------------------------------------------------------ SRCC

def srcc(predictions: Sequence[float], truths: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties (0 if either input is constant)."""
    a = rankdata(np.asarray(predictions, dtype=float), method="average")
    b = rankdata(np.asarray(truths, dtype=float), method="average")
    if len(a) != len(b):
        raise ValueError("srcc inputs differ in length")
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0:
        return 0.0
    return float(np.clip((a * b).sum() / denom, -1.0, 1.0))
