"""Pace dynamics report: gamma and pair-weight statistics over epochs.

On a frozen model and a frozen batch, the pair losses are fixed, so the
weight statistics trace exactly how the schedule admits pairs: gamma runs
its curve for each exponent p and regularizer, and mean/min/max w_ij follow.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .config import ExperimentConfig
from .contrastive import AugmentedBatch
from .models import ParamModel
from .self_paced import pace_schedule, sp_contrastive_loss
from .synth_data import build_pair_batch, generate_dataset

PACE_EXPONENTS = (0.5, 1.0, 2.0)
REGULARIZERS = ("hard", "linear")


@dataclass(frozen=True)
class PaceRow:
    epoch: int
    p: float
    regularizer: str
    gamma: float
    mean_w: float
    min_w: float
    max_w: float


def pace_report(
    config: ExperimentConfig,
    max_epoch: int = 20,
    exponents: tuple[float, ...] = PACE_EXPONENTS,
    regularizers: tuple[str, ...] = REGULARIZERS,
) -> list[PaceRow]:
    """One row per (epoch, p, regularizer) on a frozen model and batch."""
    dataset = generate_dataset(**config.data_kwargs())
    model = ParamModel(config.model_config())
    rng = np.random.default_rng([config.seed, 777])
    refs = dataset.slice_refs("train")
    take = [refs[i] for i in rng.permutation(len(refs))[: config.pretrain.batch_originals]]
    pair = build_pair_batch(dataset, take, config.augment_policy(), rng)
    batch = AugmentedBatch(model.embed_batch(pair.images), pair.pair_of, pair.meta_labels)

    rows = []
    base = config.self_paced_config()
    for regularizer in regularizers:
        for p in exponents:
            cfg = replace(base, regularizer=regularizer, p=p).with_default_pace(
                config.pretrain.batch_originals
            )
            for epoch in range(max_epoch + 1):
                gamma = pace_schedule(cfg, epoch, max_epoch)
                pooled = []
                for k, lam in enumerate(cfg.lambdas):
                    if lam > 0:
                        _, weights, _ = sp_contrastive_loss(batch, k, gamma, cfg)
                        pooled.append(weights.entries())
                w = np.concatenate(pooled)
                rows.append(
                    PaceRow(
                        epoch=epoch,
                        p=p,
                        regularizer=regularizer,
                        gamma=gamma,
                        mean_w=float(w.mean()),
                        min_w=float(w.min()),
                        max_w=float(w.max()),
                    )
                )
    return rows


def write_pace_csv(rows: list[PaceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "p", "regularizer", "gamma", "mean_w", "min_w", "max_w"])
        for r in rows:
            writer.writerow(
                [r.epoch, repr(r.p), r.regularizer, repr(r.gamma), repr(r.mean_w), repr(r.min_w), repr(r.max_w)]
            )
