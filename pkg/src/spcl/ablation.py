"""Variant ladder on synthetic data: pre-training losses, semi-supervised
regularizers, and the fully supervised bounds, with shared seeds per row.

Each variant is one training recipe; rows report per-seed test Dice plus
mean/std. The directional experiment (a fixed five-row subset under a
feature-preserving fine-tune protocol, plus a label-noise comparison of
linear self-pacing against unweighted meta-contrast) reproduces the
qualitative trends at desk scale.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
import numpy as np

from .config import ExperimentConfig
from .errors import InvalidConfig
from .models import ParamModel
from .semi_supervised import (
    evaluate_dice,
    run_pretraining,
    run_semisup,
    train_supervised,
)
from .synth_data import SynthDataset, generate_dataset

VARIANTS = (
    "baseline",
    "unsup-con",
    "unsup-con+SP",
    "con(meta)",
    "sp-con(pretrain)",
    "sp-con(semisup)",
    "sp-con(both)",
    "sp-con(both)+mean-teacher",
    "full-supervision",
)

_PRETRAIN_MODE = {
    "unsup-con": "unsup",
    "unsup-con+SP": "unsup_sp",
    "con(meta)": "meta",
    "sp-con(pretrain)": "sp",
    "sp-con(both)": "sp",
    "sp-con(both)+mean-teacher": "sp",
}


@dataclass(frozen=True)
class AblationRow:
    variant: str
    dice: tuple[float, ...]  # one entry per seed, same seeds across variants
    mean: float
    std: float

    @classmethod
    def from_scores(cls, variant: str, scores: list[float]) -> "AblationRow":
        return cls(
            variant=variant,
            dice=tuple(scores),
            mean=float(np.mean(scores)),
            std=float(np.std(scores)),
        )

    @property
    def median(self) -> float:
        return float(np.median(self.dice))


def run_variant(
    variant: str,
    dataset: SynthDataset,
    config: ExperimentConfig,
    seed: int,
    eval_dataset: SynthDataset | None = None,
) -> float:
    """Train one recipe end to end and return its test Dice."""
    if variant not in VARIANTS:
        raise InvalidConfig(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    policy = config.augment_policy()
    model = ParamModel(config.model_config(seed=seed))

    mode = _PRETRAIN_MODE.get(variant)
    if mode is not None and variant != "sp-con(semisup)":
        pre = replace(config.pretrain_config(), loss_mode=mode)
        run_pretraining(model, dataset, pre, seed=seed, policy=policy)

    labeled = dataset.splits["train"][: config.ablation.num_labeled]
    if variant == "full-supervision":
        state = train_supervised(model, dataset, dataset.splits["train"], config.semisup_config(), seed=seed)
    elif variant == "sp-con(semisup)":
        state = run_semisup(
            model, dataset, labeled, config.semisup_config(lambda_reg=0.0), seed=seed, policy=policy
        )
    elif variant == "sp-con(both)":
        state = run_semisup(
            model, dataset, labeled, config.semisup_config(lambda_reg=0.0), seed=seed, policy=policy
        )
    elif variant == "sp-con(both)+mean-teacher":
        state = run_semisup(model, dataset, labeled, config.semisup_config(), seed=seed, policy=policy)
    else:  # baseline and the pretrain-only rows: supervised fine-tune
        state = run_semisup(
            model,
            dataset,
            labeled,
            config.semisup_config(lambda_reg=0.0, lambda_sp=0.0),
            seed=seed,
            policy=policy,
        )
    report = evaluate_dice(state.model, eval_dataset or dataset, split=config.ablation.eval_split)
    return report.mean


def run_ablation(
    config: ExperimentConfig,
    dataset: SynthDataset | None = None,
    variants: tuple[str, ...] = VARIANTS,
    eval_dataset: SynthDataset | None = None,
) -> list[AblationRow]:
    """All requested variants over the shared seed set."""
    dataset = dataset or generate_dataset(**config.data_kwargs())
    if len(config.ablation.seeds) < 3:
        raise InvalidConfig("ablation needs at least 3 seeds for a standard deviation")
    rows = []
    for variant in variants:
        scores = [
            run_variant(variant, dataset, config, seed, eval_dataset=eval_dataset)
            for seed in config.ablation.seeds
        ]
        rows.append(AblationRow.from_scores(variant, scores))
    return rows


def ablation_checks(rows: list[AblationRow], baseline_margin: float) -> list[str]:
    """Expected orderings for a completed table; returns human-readable failures."""
    by_name = {r.variant: r for r in rows}
    problems = []
    if "full-supervision" in by_name:
        top = by_name["full-supervision"].mean
        for r in rows:
            if r.variant != "full-supervision" and top < r.mean:
                problems.append(f"full-supervision ({top:.3f}) below {r.variant} ({r.mean:.3f})")
    if "sp-con(both)+mean-teacher" in by_name and "baseline" in by_name:
        gap = by_name["sp-con(both)+mean-teacher"].mean - by_name["baseline"].mean
        if gap < baseline_margin:
            problems.append(
                f"sp-con(both)+mean-teacher beats baseline by {gap:.3f} < margin {baseline_margin}"
            )
    return problems


def write_ablation_csv(rows: list[AblationRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        seeds = len(rows[0].dice) if rows else 0
        writer.writerow(["variant"] + [f"dice_seed{i}" for i in range(seeds)] + ["mean", "std"])
        for r in rows:
            writer.writerow([r.variant] + [repr(v) for v in r.dice] + [repr(r.mean), repr(r.std)])


def format_ablation_table(rows: list[AblationRow]) -> str:
    width = max(len(r.variant) for r in rows)
    lines = [f"{'variant'.ljust(width)}  mean    std     per-seed"]
    for r in rows:
        per_seed = " ".join(f"{v:.3f}" for v in r.dice)
        lines.append(f"{r.variant.ljust(width)}  {r.mean:.3f}  {r.std:.3f}   {per_seed}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# the directional desk-scale experiment
# ---------------------------------------------------------------------------

CHAIN_VARIANTS = (
    "baseline",
    "unsup-con",
    "con(meta)",
    "sp-con(pretrain)",
    "sp-con(both)+mean-teacher",
)


@dataclass(frozen=True)
class DirectionalResult:
    medians: dict[str, float]
    chain_holds: bool
    mean_teacher_gain: float
    spl_noise_gain: float
    seconds: float


def directional_experiment(
    config: ExperimentConfig,
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4),
    noise_level: float = 0.5,
    margin: float = 0.05,
    spl_margin: float = 0.02,
) -> DirectionalResult:
    """Five-variant chain at the configured noise plus the high-noise SPL test.

    The chain rows share one feature-preserving fine-tune protocol (the
    config's encoder_lr_scale); the high-noise comparison trains the full
    semi-supervised objective with closed-form pair weighting against the
    same objective with every pair weight pinned to one.
    """
    import time

    t0 = time.time()
    dataset = generate_dataset(**config.data_kwargs())
    eval_cfg = {**config.data_kwargs(), "num_patients": 20, "noise_level": 0.0, "seed": 1234}
    eval_dataset = generate_dataset(**eval_cfg, val_fraction=0.05, test_fraction=0.9)

    chain_cfg = replace(config, ablation=replace(config.ablation, seeds=tuple(seeds)))
    rows = run_ablation(chain_cfg, dataset=dataset, variants=CHAIN_VARIANTS, eval_dataset=eval_dataset)
    medians = {r.variant: r.median for r in rows}
    order = [medians[v] for v in CHAIN_VARIANTS]
    chain_holds = all(b >= a for a, b in zip(order, order[1:]))
    mt_gain = medians["sp-con(both)+mean-teacher"] - medians["baseline"]

    noisy_kwargs = {**config.data_kwargs(), "noise_level": noise_level}
    noisy = generate_dataset(**noisy_kwargs)
    labeled = noisy.splits["train"][: config.ablation.num_labeled]
    policy = config.augment_policy()

    def noisy_run(sp_weighting: bool, loss_mode: str, seed: int) -> float:
        model = ParamModel(config.model_config(seed=seed))
        run_pretraining(
            model,
            noisy,
            replace(config.pretrain_config(), loss_mode=loss_mode),
            seed=seed,
            policy=policy,
        )
        state = run_semisup(
            model,
            noisy,
            labeled,
            config.semisup_config(sp_weighting=sp_weighting),
            seed=seed,
            policy=policy,
        )
        return evaluate_dice(state.model, eval_dataset, split=config.ablation.eval_split).mean

    with_spl = [noisy_run(True, "sp", s) for s in seeds]
    without = [noisy_run(False, "meta", s) for s in seeds]
    spl_gain = float(np.median(with_spl) - np.median(without))

    return DirectionalResult(
        medians=medians,
        chain_holds=chain_holds and mt_gain >= margin,
        mean_teacher_gain=float(mt_gain),
        spl_noise_gain=spl_gain,
        seconds=time.time() - t0,
    )
