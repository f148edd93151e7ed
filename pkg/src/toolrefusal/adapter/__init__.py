"""Instrumented model adapters, chat profiles and prompt rendering."""

from .base import (
    METRICS,
    AdapterError,
    CapabilityError,
    ContextOverflowError,
    Edge,
    GradientResult,
    InterventionError,
    InterventionPlan,
    ModelAdapter,
    metric_from_logits,
)
from .profiles import ChatProfile, ProfileError, SpanSpec, bundled_profile_ids, load_profile
from .render import RenderedPrompt, SpanBoundaryError, SpanMap, render_prompt
from .tiny import TinyAdapter, TinyConfig
from .tokenize import HFTokenizer, RegexTokenizer

__all__ = [
    "METRICS", "AdapterError", "CapabilityError", "ContextOverflowError", "Edge", "GradientResult",
    "InterventionError", "InterventionPlan", "ModelAdapter", "metric_from_logits", "ChatProfile",
    "ProfileError", "SpanSpec", "bundled_profile_ids", "load_profile", "RenderedPrompt",
    "SpanBoundaryError", "SpanMap", "render_prompt", "TinyAdapter", "TinyConfig", "HFTokenizer",
    "RegexTokenizer",
]
