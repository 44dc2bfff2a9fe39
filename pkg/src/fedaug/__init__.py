"""Deterministic single-process simulator for federated learning across
rotated domains, with controllable data augmentation and heterogeneity
diagnostics."""

from .data import (
    AugmentationSpec,
    Environment,
    Glyph,
    SplitSpec,
    apply_augmentation,
    augment_batch,
    dirichlet_split,
    export_glyph_prototypes,
    glyph_prototypes,
    load_glyph_prototypes,
    load_idx_dataset,
    make_environments,
    make_glyph_bank,
    rotate_image,
    rotate_images,
)
from .diagnostics import (
    HeterogeneityReport,
    RoundRecord,
    TvQuery,
    gap_report,
    heterogeneity,
    optimality_gap_proxy,
    tv_analytic,
    tv_dirac,
    tv_numeric,
    tv_uniform,
)
from .federation import (
    FederationState,
    LocalUpdate,
    StrategyConfig,
    aggregate_fedavg,
    aggregate_vm,
    aggregate_weighted,
    draw_training_batch,
    local_train,
    run_federation,
    update_lambda_afl,
    update_lambda_gen_afl,
)
from .linalg import axpy, matvec, squared_norm
from .model import (
    Batch,
    ModelSpec,
    OptimizerState,
    accuracy,
    fd_hvp,
    forward,
    init_params,
    irm_penalty_and_grad,
    loss_and_grad,
    make_optimizer,
    num_params,
    optimizer_step,
    param_layout,
)
from .rng import RngStream, rng_uniform
from .simplex import project_generalized, project_simplex

__version__ = "0.1.0"

__all__ = [
    "AugmentationSpec",
    "Batch",
    "Environment",
    "FederationState",
    "Glyph",
    "HeterogeneityReport",
    "LocalUpdate",
    "ModelSpec",
    "OptimizerState",
    "RngStream",
    "RoundRecord",
    "SplitSpec",
    "StrategyConfig",
    "TvQuery",
    "accuracy",
    "aggregate_fedavg",
    "aggregate_vm",
    "aggregate_weighted",
    "apply_augmentation",
    "augment_batch",
    "axpy",
    "dirichlet_split",
    "draw_training_batch",
    "export_glyph_prototypes",
    "fd_hvp",
    "forward",
    "gap_report",
    "glyph_prototypes",
    "heterogeneity",
    "init_params",
    "irm_penalty_and_grad",
    "load_glyph_prototypes",
    "load_idx_dataset",
    "local_train",
    "loss_and_grad",
    "make_environments",
    "make_glyph_bank",
    "make_optimizer",
    "matvec",
    "num_params",
    "optimality_gap_proxy",
    "optimizer_step",
    "param_layout",
    "project_generalized",
    "project_simplex",
    "rng_uniform",
    "rotate_image",
    "rotate_images",
    "run_federation",
    "squared_norm",
    "tv_analytic",
    "tv_dirac",
    "tv_numeric",
    "tv_uniform",
    "update_lambda_afl",
    "update_lambda_gen_afl",
]
