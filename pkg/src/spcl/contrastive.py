"""Contrastive losses over augmented batches with meta-labels.

A batch of N original images becomes 2N augmented samples with unit-norm
embeddings z_i, a fixed-point-free pairing involution j(i) linking the two
views of each original, and K integer meta-label vectors. For an anchor i
and candidate j, the per-pair loss is

    l_ij = log sum_{a != i} exp(z_i . z_a / tau)  -  z_i . z_j / tau

computed with a max-shifted log-sum-exp (exponents reach +-2/tau, which
overflows naively for small temperatures). The unsupervised loss averages
l over the view pairs only; the meta-label loss averages l over each
anchor's positive set

    P^k(i) = { j | y^k_j = y^k_i, j != i }  union  { j(i) }.

Both reduce through the same masked-mean code path, so the meta loss with
one class per original image equals the unsupervised loss bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, _as_tensor, masked_logsumexp_rows, tsum
from .errors import InvalidConfig


@dataclass(frozen=True)
class AugmentedBatch:
    """2N embedded samples: unit-row embeddings, pairing map, K meta-label vectors.

    embeddings: (2N, d) Tensor (or array, wrapped), rows unit-norm within 1e-10.
    pair_of:    (2N,) int array, an involution with no fixed point.
    meta_labels:(K, 2N) int array; the two views of an original share labels.
    """

    embeddings: Tensor
    pair_of: np.ndarray
    meta_labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "embeddings", _as_tensor(self.embeddings))
        object.__setattr__(self, "pair_of", np.asarray(self.pair_of, dtype=np.int64))
        labels = np.atleast_2d(np.asarray(self.meta_labels, dtype=np.int64))
        object.__setattr__(self, "meta_labels", labels)
        z, pair = self.embeddings, self.pair_of
        if z.ndim != 2:
            raise InvalidConfig(f"embeddings must be 2-D, got shape {z.shape}")
        n2 = z.shape[0]
        if n2 < 2 or n2 % 2:
            raise InvalidConfig(f"batch must hold 2N >= 2 samples, got {n2}")
        if pair.shape != (n2,):
            raise InvalidConfig("pair_of length must match the number of samples")
        idx = np.arange(n2)
        if np.any(pair == idx) or np.any(pair[pair] != idx):
            raise InvalidConfig("pair_of must be a fixed-point-free involution")
        if labels.shape[1] != n2:
            raise InvalidConfig("each meta-label vector must cover all 2N samples")
        if np.any(labels != labels[:, pair]):
            raise InvalidConfig("paired views must carry identical meta-labels")
        norms = np.linalg.norm(z.data, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-10):
            raise InvalidConfig(f"embedding rows must be unit norm, worst |1-||z||| = {np.abs(norms - 1.0).max():.2e}")

    @property
    def num_samples(self) -> int:
        """2N, the augmented-set size."""
        return self.embeddings.shape[0]

    @property
    def num_originals(self) -> int:
        return self.num_samples // 2

    @property
    def num_meta_labels(self) -> int:
        return self.meta_labels.shape[0]


@dataclass(frozen=True)
class PairLossMatrix:
    """Dense l_ij values with the positive-set mask that selects real entries."""

    values: np.ndarray  # (2N, 2N); meaningful where mask is True
    mask: np.ndarray    # (2N, 2N) bool, True for j in P^k(i)
    tau: float

    def entries(self) -> np.ndarray:
        """The l_ij values inside the positive mask, flattened row-major."""
        return self.values[self.mask]


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if tau <= 0.0:
        raise InvalidConfig(f"temperature must be positive, got {tau}")
    return tau


def positive_set(batch: AugmentedBatch, k: int, i: int) -> set[int]:
    """Indices sharing anchor i's k-th meta-label, plus its paired view, minus i."""
    labels = batch.meta_labels[k]
    same = np.flatnonzero(labels == labels[i])
    out = set(int(j) for j in same)
    out.discard(int(i))
    out.add(int(batch.pair_of[i]))
    return out


def positive_mask(batch: AugmentedBatch, k: int) -> np.ndarray:
    """Boolean (2N, 2N) mask with row i True exactly on P^k(i)."""
    labels = batch.meta_labels[k]
    mask = labels[:, None] == labels[None, :]
    idx = np.arange(batch.num_samples)
    mask[idx, batch.pair_of] = True
    mask[idx, idx] = False
    return mask


def pair_mask(batch: AugmentedBatch) -> np.ndarray:
    """Boolean (2N, 2N) mask selecting only each anchor's paired view."""
    n2 = batch.num_samples
    mask = np.zeros((n2, n2), dtype=bool)
    mask[np.arange(n2), batch.pair_of] = True
    return mask


def pair_loss_values(batch: AugmentedBatch, tau: float) -> Tensor:
    """All l_ij as a (2N, 2N) Tensor (diagonal entries are meaningless).

    l_ij = logsumexp_{a != i}(z_i . z_a / tau) - z_i . z_j / tau, with the
    row max as a constant shift so no exponent exceeds zero.
    """
    tau = _check_tau(tau)
    z = batch.embeddings
    n2 = batch.num_samples
    scores = (z @ z.T) * (1.0 / tau)
    offdiag = 1.0 - np.eye(n2)
    lse = masked_logsumexp_rows(scores, offdiag)  # (2N, 1)
    return lse - scores


def pair_loss(batch: AugmentedBatch, i: int, j: int, tau: float) -> float:
    """Single l_ij for anchor i and positive candidate j (i != j)."""
    if i == j:
        raise InvalidConfig("pair loss is undefined for i == j")
    return float(pair_loss_values(batch, tau).data[i, j])


def _masked_mean_loss(values: Tensor, mask: np.ndarray) -> Tensor:
    """(1/2N) sum_i (1/|row_i|) sum_{j in row_i} values_ij, as one masked sum.

    Every mask row must be non-empty. The per-row normalizers fold into one
    constant coefficient matrix so a single reduction covers the double sum.
    """
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise InvalidConfig("every anchor needs at least one positive")
    coef = mask.astype(np.float64) / counts[:, None]
    return tsum(Tensor(coef) * values) * (1.0 / mask.shape[0])


def unsup_contrastive_loss(batch: AugmentedBatch, tau: float) -> Tensor:
    """Average l over the view pairs only: (1/2N) sum_i l_{i, j(i)}."""
    return _masked_mean_loss(pair_loss_values(batch, tau), pair_mask(batch))


def meta_contrastive_loss(batch: AugmentedBatch, k: int, tau: float) -> tuple[Tensor, PairLossMatrix]:
    """Average l over each anchor's positive set for meta-label k.

    Returns the scalar loss and the dense PairLossMatrix so downstream
    self-paced weighting can reuse the l_ij without recomputing them.
    """
    if not (0 <= k < batch.num_meta_labels):
        raise InvalidConfig(f"meta-label index {k} out of range [0, {batch.num_meta_labels})")
    values = pair_loss_values(batch, tau)
    mask = positive_mask(batch, k)
    loss = _masked_mean_loss(values, mask)
    return loss, PairLossMatrix(values=np.array(values.data), mask=mask, tau=float(tau))
