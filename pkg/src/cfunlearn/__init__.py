"""Debiased machine unlearning with interventional distillation and counterfactual forgetting."""

from .counterfactual import CfSearchConfig, Counterfactual, find_counterfactual, validate_counterfactual
from .datagen import (
    Dataset,
    FullClass,
    Partition,
    ScmSpec,
    SelectiveClass,
    SelectiveGroup,
    Uniform,
    generate_scm_dataset,
    load_tabular_csv,
    make_deletion,
    split_train_test,
)
from .evaluation import ExperimentConfig, MetricsReport, run_experiment
from .intervention import InterventionContext, MaskedInstance, build_intervention_context, compute_mask
from .model import ModelParams, TrainConfig, embed, forward, init_model, train_baseline
from .unlearn import UnlearnConfig, total_loss, unlearn

__version__ = "0.1.0"
