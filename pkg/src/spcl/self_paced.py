"""Self-paced weighting for contrastive pairs: closed-form weights, pace schedule.

Each positive pair (i, j) gets an importance weight w_ij in [0, 1] chosen by
minimizing  w * l + R_gamma(w)  over [0, 1], where the regularizer is either

    hard:   R_gamma(w) = -gamma * w          ->  w* = 1 if l <= gamma else 0
    linear: R_gamma(w) = gamma (w^2/2 - w)   ->  w* = clip(1 - l/gamma, 0, 1)

The pace gamma grows over training as

    gamma(e) = gamma_start + (gamma_end - gamma_start) * (e / max_epoch)^p

and the per-pair losses live in the exact band

    log(1 + 2(N-1) e^{-2/tau})  <=  l_ij  <=  log(1 + 2(N-1) e^{2/tau}),

so scheduling gamma between those bounds moves from "no pair selected" to
"every pair selected". Weights are recomputed in closed form every batch and
held constant while the encoder takes its gradient step.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Tensor, tsum
from .contrastive import AugmentedBatch, PairLossMatrix, pair_loss_values, positive_mask
from .errors import InvalidConfig

HARD = "hard"
LINEAR = "linear"
_REGULARIZERS = (HARD, LINEAR)


@dataclass(frozen=True)
class SelfPacedConfig:
    """Regularizer kind, temperature, pace endpoints/exponent, and meta-label weights.

    gamma_start/gamma_end may be left None and filled from the exact loss
    bounds for a given batch size via ``with_default_pace``.
    """

    regularizer: str = LINEAR
    tau: float = 0.1
    gamma_start: float | None = None
    gamma_end: float | None = None
    p: float = 0.5
    lambdas: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if self.regularizer not in _REGULARIZERS:
            raise InvalidConfig(f"regularizer must be one of {_REGULARIZERS}, got {self.regularizer!r}")
        if self.tau <= 0.0:
            raise InvalidConfig(f"tau must be positive, got {self.tau}")
        if self.p <= 0.0:
            raise InvalidConfig(f"schedule exponent p must be positive, got {self.p}")
        if self.gamma_start is not None and self.gamma_end is not None:
            if self.gamma_start > self.gamma_end:
                raise InvalidConfig("gamma_start must not exceed gamma_end")
        lam = tuple(float(v) for v in self.lambdas)
        if not lam or any(v < 0.0 for v in lam) or not any(v > 0.0 for v in lam):
            raise InvalidConfig("lambdas must be non-negative with at least one positive entry")
        object.__setattr__(self, "lambdas", lam)

    def with_default_pace(self, batch_originals: int) -> "SelfPacedConfig":
        """Fill missing pace endpoints with the exact loss bounds for N originals.

        gamma_end at the upper bound guarantees every pair is used by the end;
        gamma_start at the lower bound is the smallest pace at which any pair
        can be selected at all.
        """
        lo, hi = loss_bounds(batch_originals, self.tau)
        return replace(
            self,
            gamma_start=lo if self.gamma_start is None else self.gamma_start,
            gamma_end=hi if self.gamma_end is None else self.gamma_end,
        )


@dataclass(frozen=True)
class PairWeightMatrix:
    """Dense w_ij in [0, 1] aligned with a PairLossMatrix (mask shared)."""

    values: np.ndarray
    mask: np.ndarray
    gamma: float
    regularizer: str

    def entries(self) -> np.ndarray:
        return self.values[self.mask]

    def stats(self) -> tuple[float, float, float]:
        """(mean, min, max) of the in-mask weights."""
        w = self.entries()
        return float(w.mean()), float(w.min()), float(w.max())


def _check_gamma(gamma: float) -> float:
    gamma = float(gamma)
    if gamma <= 0.0:
        raise InvalidConfig(f"gamma must be positive, got {gamma}")
    return gamma


def optimal_weight(loss, gamma: float, regularizer: str):
    """Closed-form argmin over w in [0, 1] of w*loss + R_gamma(w).

    Hard mode thresholds (ties at loss == gamma resolve to w = 1); linear mode
    ramps as 1 - loss/gamma, clipped to [0, 1] so the argmin property holds
    for any real loss value. Accepts scalars or arrays.
    """
    gamma = _check_gamma(gamma)
    l = np.asarray(loss, dtype=np.float64)
    if regularizer == HARD:
        w = np.where(l <= gamma, 1.0, 0.0)
    elif regularizer == LINEAR:
        w = np.clip(1.0 - l / gamma, 0.0, 1.0)
    else:
        raise InvalidConfig(f"unknown regularizer {regularizer!r}")
    return float(w) if np.isscalar(loss) or np.ndim(loss) == 0 else w


def regularizer_value(w, gamma: float, regularizer: str):
    """R_gamma(w): -gamma*w (hard) or gamma*(w^2/2 - w) (linear)."""
    gamma = _check_gamma(gamma)
    w_arr = np.asarray(w, dtype=np.float64)
    if np.any(w_arr < 0.0) or np.any(w_arr > 1.0):
        raise InvalidConfig("weights must lie in [0, 1]")
    if regularizer == HARD:
        r = -gamma * w_arr
    elif regularizer == LINEAR:
        r = gamma * (0.5 * w_arr * w_arr - w_arr)
    else:
        raise InvalidConfig(f"unknown regularizer {regularizer!r}")
    return float(r) if np.ndim(w) == 0 else r


def loss_bounds(batch_originals: int, tau: float) -> tuple[float, float]:
    """Exact attainable range of l_ij over unit-row batches of N originals.

    (log(1 + 2(N-1) e^{-2/tau}), log(1 + 2(N-1) e^{2/tau})), evaluated via
    log1p/logaddexp so small temperatures cannot overflow.
    """
    n = int(batch_originals)
    if n < 2:
        raise InvalidConfig(f"need at least 2 originals, got {n}")
    if tau <= 0.0:
        raise InvalidConfig(f"tau must be positive, got {tau}")
    count = 2.0 * (n - 1)
    lo = float(np.log1p(count * np.exp(-2.0 / tau)))
    hi = float(np.logaddexp(0.0, np.log(count) + 2.0 / tau))
    return lo, hi


def pace_schedule(config: SelfPacedConfig, cur_epoch: int, max_epoch: int) -> float:
    """gamma at a given epoch: start + (end - start) * (cur/max)^p."""
    if max_epoch < 1:
        raise InvalidConfig(f"max_epoch must be >= 1, got {max_epoch}")
    if not (0 <= cur_epoch <= max_epoch):
        raise InvalidConfig(f"cur_epoch {cur_epoch} outside [0, {max_epoch}]")
    if config.gamma_start is None or config.gamma_end is None:
        raise InvalidConfig("pace endpoints unresolved; call with_default_pace first")
    frac = (cur_epoch / max_epoch) ** config.p
    return float(config.gamma_start + (config.gamma_end - config.gamma_start) * frac)


def sp_contrastive_loss(
    batch: AugmentedBatch,
    k: int,
    gamma: float,
    config: SelfPacedConfig,
) -> tuple[Tensor, PairWeightMatrix, PairLossMatrix]:
    """Self-paced contrastive loss for meta-label k at pace gamma.

    Computes l_ij, solves the inner weight problem exactly in closed form,
    and returns (1/2N) sum_i (1/|P(i)|) sum_j [w_ij l_ij + R_gamma(w_ij)].
    The weights (and the regularizer term) are constants for gradient
    purposes: only w_ij * grad(l_ij) reaches the encoder.
    """
    gamma = _check_gamma(gamma)
    if not (0 <= k < batch.num_meta_labels):
        raise InvalidConfig(f"meta-label index {k} out of range [0, {batch.num_meta_labels})")
    values = pair_loss_values(batch, config.tau)
    mask = positive_mask(batch, k)
    counts = mask.sum(axis=1)
    coef = mask.astype(np.float64) / counts[:, None]

    w = np.where(mask, optimal_weight(values.data, gamma, config.regularizer), 0.0)
    r = np.where(mask, regularizer_value(w, gamma, config.regularizer), 0.0)

    n2 = batch.num_samples
    weighted = tsum(Tensor(coef * w) * values) * (1.0 / n2)
    reg_part = float((coef * r).sum() / n2)
    loss = weighted + reg_part
    return (
        loss,
        PairWeightMatrix(values=w, mask=mask, gamma=gamma, regularizer=config.regularizer),
        PairLossMatrix(values=np.array(values.data), mask=mask, tau=config.tau),
    )


def weighted_loss_terms(
    losses: PairLossMatrix,
    weights: PairWeightMatrix,
) -> tuple[float, float]:
    """(w*l part, regularizer part) of the self-paced scalar, from stored matrices."""
    mask = losses.mask
    coef = mask.astype(np.float64) / mask.sum(axis=1)[:, None]
    w = np.where(mask, weights.values, 0.0)
    r = np.where(mask, regularizer_value(w, weights.gamma, weights.regularizer), 0.0)
    n2 = mask.shape[0]
    wl = float(np.sum(coef * w * losses.values) * (1.0 / n2))
    reg = float((coef * r).sum() / n2)
    return wl, reg


def combined_sp_loss(batch: AugmentedBatch, gamma: float, config: SelfPacedConfig) -> Tensor:
    """Weighted sum over meta-labels: sum_k lambda_k * sp_loss_k.

    Meta-labels with lambda_k == 0 are skipped entirely (their label vectors
    are never touched).
    """
    if len(config.lambdas) > batch.num_meta_labels:
        raise InvalidConfig(
            f"{len(config.lambdas)} lambdas but batch has {batch.num_meta_labels} meta-labels"
        )
    total: Tensor | None = None
    for k, lam in enumerate(config.lambdas):
        if lam == 0.0:
            continue
        term, _, _ = sp_contrastive_loss(batch, k, gamma, config)
        term = term * lam
        total = term if total is None else total + term
    assert total is not None  # config guarantees one positive lambda
    return total
