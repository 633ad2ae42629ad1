"""Self-paced contrastive learning with meta-labels, end to end on synthetic
volumetric data: tape-based autodiff, temperature-scaled contrastive losses,
closed-form pair weighting with a pace schedule, a toy encoder/decoder stack
with an EMA teacher, and the semi-supervised training objective.
"""

from .autodiff import GradTape, Tensor, finite_diff_check, grad, l2_normalize
from .contrastive import (
    AugmentedBatch,
    PairLossMatrix,
    meta_contrastive_loss,
    pair_loss,
    positive_set,
    unsup_contrastive_loss,
)
from .models import EmaTeacher, ModelConfig, ParamModel, embed, ema_update, segment
from .self_paced import (
    PairWeightMatrix,
    SelfPacedConfig,
    combined_sp_loss,
    loss_bounds,
    optimal_weight,
    pace_schedule,
    regularizer_value,
    sp_contrastive_loss,
)
from .semi_supervised import (
    LossBreakdown,
    PretrainConfig,
    SemiSupConfig,
    TrainingState,
    consistency_loss,
    dice_coefficient,
    evaluate_dice,
    pretrain_epoch,
    run_pretraining,
    run_semisup,
    semisup_epoch,
    supervised_loss,
    train_supervised,
)
from .synth_data import (
    AugmentationPolicy,
    MetaLabelSpec,
    SynthDataset,
    SynthVolume,
    augment_pair,
    generate_dataset,
    load_dataset,
    meta_labels_for,
    save_dataset,
)

__version__ = "0.1.0"
