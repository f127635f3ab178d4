"""Python access to the headlens core: models, pipeline stages and statistics."""

from ._core import (
    HeadlensError,
    Model,
    build_toy,
    config_hash,
    hypergeom_tail,
    kl_divergence,
    run_pipeline,
    run_stage,
    spearman,
    validate_config,
)

STAGES = ("capture", "aie", "rsa", "select", "vectors", "steer", "report")

__all__ = [
    "HeadlensError",
    "Model",
    "STAGES",
    "build_toy",
    "config_hash",
    "hypergeom_tail",
    "kl_divergence",
    "run_pipeline",
    "run_stage",
    "spearman",
    "validate_config",
]
