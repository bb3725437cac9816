"""Attention-guided noise optimization and similarity token pruning on a
toy latent-diffusion pipeline, with a reproducible benchmark harness."""

from .attn_core import (
    AttentionLayerParams,
    CrossAttnMaps,
    DimensionMismatchError,
    SelfAttnMaps,
    TokenMatrix,
    cosine_similarity_matrix,
    gaussian_smooth,
    softmax_attention,
)
from .latent_mapper import (
    MapperConfig,
    NoiseDistribution,
    OptimizeResult,
    ValidityScores,
    cross_attn_score,
    joint_loss,
    kl_to_standard_normal,
    optimize_noise,
    score_noise,
    self_attn_conflict,
)
from .sim_prune import (
    PruneCatalog,
    attention_op_count,
    build_catalog,
    pruned_self_attention,
    select_base_tokens,
    select_pruned_tokens,
    sim_scores,
)
from .toy_pipeline import (
    PipelineHandle,
    PromptSpec,
    build_pipeline,
    denoiser_forward,
    sample,
)
from .harness import (
    ExperimentConfig,
    RunReport,
    emit_metrics,
    load_config,
    run_experiment,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionLayerParams",
    "CrossAttnMaps",
    "DimensionMismatchError",
    "ExperimentConfig",
    "MapperConfig",
    "NoiseDistribution",
    "OptimizeResult",
    "PipelineHandle",
    "PromptSpec",
    "PruneCatalog",
    "RunReport",
    "SelfAttnMaps",
    "TokenMatrix",
    "ValidityScores",
    "attention_op_count",
    "build_catalog",
    "build_pipeline",
    "cosine_similarity_matrix",
    "cross_attn_score",
    "denoiser_forward",
    "emit_metrics",
    "gaussian_smooth",
    "joint_loss",
    "kl_to_standard_normal",
    "load_config",
    "optimize_noise",
    "pruned_self_attention",
    "run_experiment",
    "sample",
    "score_noise",
    "select_base_tokens",
    "select_pruned_tokens",
    "self_attn_conflict",
    "sim_scores",
    "softmax_attention",
]
