"""Co-training toolkit: supervised heads plus self-supervised auxiliary heads
on a shared backbone, with pretext transforms, loss assembly, training
protocols, sign-gradient robustness sweeps, and CSV/figure reporting."""

from .adversarial import AttackConfig, epsilon_sweep, fgsm
from .datasets import (
    ImageRecord,
    LabeledDataset,
    TaskKind,
    TaskSpec,
    bin_label,
    class_weights,
    classification_task,
    gender_task,
    head_pose_task,
    load_folder,
    synth_faces,
    valence_arousal_task,
    write_folder,
)
from .heads import (
    BackboneConfig,
    ConvBackbone,
    HeadKind,
    HeadSpec,
    ModelAssembly,
    assemble,
    build_backbone,
    load_checkpoint,
    save_checkpoint,
    strip_ssh,
)
from .losses import (
    BinScheme,
    ClassWeights,
    HeadLossWeights,
    LossReport,
    cat_reg_loss,
    expectation_from_bins,
    focal_loss,
    hmtl_inpaint_loss,
    hmtl_puzzle_loss,
    hmtl_puzzle_rotation_loss,
    perceptual_decoder_loss,
    pixelwise_rmse,
    weighted_ce,
)
from .metrics import MetricSet, confusion_matrix, euler_mae, macro_f1
from .pretext import (
    AugmentLevel,
    InpaintSample,
    PuzzleSample,
    Region,
    RotationSample,
    augment,
    default_region_weights,
    make_inpaint,
    make_puzzle,
    make_rotation,
    rotate_image,
    unscramble,
)
from .trainer import (
    LossConfig,
    OptimConfig,
    PretextConfig,
    RunConfig,
    RunResult,
    fine_tune,
    frozen_eval,
    pretext_without_ssh,
    pretrain_ssl,
    step_decay_lr,
    subsample,
    train_hmtl,
    train_inpaint_pl_two_stage,
    train_sl,
)

__version__ = "0.1.0"
