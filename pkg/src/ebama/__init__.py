"""Attribute-binding guidance for text-to-image diffusion through cross-attention energies."""

from .attention import AggregatedAttention, CrossAttentionRecord, aggregate, renormalize_without_sot
from .energy import (
    Ablations,
    EnergyKind,
    GuidanceHyperparams,
    LossBreakdown,
    binding_loss,
    conditional_distribution,
    energy,
    exact_loglik_grad,
    intensity_loss,
    total_loss,
)
from .guidance import GuidanceTrace, SamplerConfig, guided_sample, guided_sample_with_externals, sample
from .prompt_graph import ObjectGraph, TokenAnnotation, annotate, append_external_modifiers, extract_object_graph
from .toy import ToyDenoiser, embed_tokens

__version__ = "0.1.0"

__all__ = [
    "AggregatedAttention",
    "CrossAttentionRecord",
    "aggregate",
    "renormalize_without_sot",
    "Ablations",
    "EnergyKind",
    "GuidanceHyperparams",
    "LossBreakdown",
    "binding_loss",
    "conditional_distribution",
    "energy",
    "exact_loglik_grad",
    "intensity_loss",
    "total_loss",
    "GuidanceTrace",
    "SamplerConfig",
    "guided_sample",
    "guided_sample_with_externals",
    "sample",
    "ObjectGraph",
    "TokenAnnotation",
    "annotate",
    "append_external_modifiers",
    "extract_object_graph",
    "ToyDenoiser",
    "embed_tokens",
]
