"""Conditional mask generator and its hand-written backward pass."""

from .checkpoint import load_checkpoint, save_checkpoint
from .generator import (
    Architecture,
    CandidateBatch,
    GeneratorParams,
    LatentSpec,
    Tape,
    adain,
    draw_latents,
    generator_backward,
    generator_forward,
    init_params,
    param_shapes,
    sample_candidates,
    style_map,
    threshold_logits,
)

__all__ = [
    "Architecture",
    "CandidateBatch",
    "GeneratorParams",
    "LatentSpec",
    "Tape",
    "adain",
    "draw_latents",
    "generator_backward",
    "generator_forward",
    "init_params",
    "load_checkpoint",
    "param_shapes",
    "sample_candidates",
    "save_checkpoint",
    "style_map",
    "threshold_logits",
]
