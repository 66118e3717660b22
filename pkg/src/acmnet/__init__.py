"""Self-supervised place descriptors: appearance-contrastive plus rotation-predictive training."""

from acmnet.augment import GroupKind, TransformGroup, build_view_batch, sample_appearance_transform
from acmnet.datagen import Dataset, generate_synthetic_traverse, load_dataset, save_dataset
from acmnet.evaluation import EvalReport, evaluate, recall_at_n
from acmnet.loss import ContrastiveConfig, DenominatorMode, ntxent_loss, rotation_ce_loss
from acmnet.model import ModelConfig, ModelParams, init_params
from acmnet.retrieval import DescriptorBank, build_bank, embed, knn_query
from acmnet.train import TrainConfig, adam_step, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "ContrastiveConfig", "Dataset", "DenominatorMode", "DescriptorBank", "EvalReport",
    "GroupKind", "ModelConfig", "ModelParams", "TrainConfig", "TransformGroup", "adam_step",
    "build_bank", "build_view_batch", "embed", "evaluate", "generate_synthetic_traverse",
    "init_params", "knn_query", "load_checkpoint", "load_dataset", "ntxent_loss",
    "recall_at_n", "rotation_ce_loss", "sample_appearance_transform", "save_checkpoint",
    "save_dataset", "train",
]
