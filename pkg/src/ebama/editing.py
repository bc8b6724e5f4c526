"""Prompt-to-Prompt style attribute editing on top of guided generation.

The source prompt is generated with guidance while its sampling-pass
attention is stored. The edited prompt is then generated from the same
seed, again with guidance, and during the first ``cross_replace`` fraction
of steps its cross-attention for aligned tokens is overwritten with the
stored maps; self-attention is overwritten during the first
``self_replace`` fraction. Injection only touches sampling passes, so the
latent update at each step still sees live attention.
"""

from __future__ import annotations

import difflib
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .denoiser import DenoiserAdapter, PromptEncoding
from .energy import GuidanceHyperparams
from .errors import ConfigurationError, InputError
from .guidance import SampleResult, SamplerConfig, guided_sample
from .prompt_graph import Annotator, annotate, extract_object_graph

MODES = ("word_swap", "add_phrase", "reweight")


@dataclass(frozen=True)
class EditSpec:
    source_prompt: str
    edited_prompt: str
    mode: str = "word_swap"
    reweight_factor: float = 1.0
    reweight_words: tuple[str, ...] = ()
    cross_replace: float = 0.8
    self_replace: float = 0.4

    def __post_init__(self):
        if self.mode not in MODES:
            raise InputError(f"mode must be one of {MODES}")
        for name in ("cross_replace", "self_replace"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InputError(f"{name} must lie in [0, 1]")


def token_alignment(source: Sequence[str], edited: Sequence[str], mode: str) -> dict[int, int]:
    """Map edited-prompt word positions to source positions whose attention is injected.

    Word swaps keep every position (the swapped word inherits the layout of
    the word it replaces); added phrases map only the unchanged words.
    """
    if mode in {"word_swap", "reweight"}:
        if len(source) != len(edited):
            raise InputError(
                f"{mode} needs prompts of equal length ({len(source)} vs {len(edited)} words)"
            )
        return {i: i for i in range(len(edited))}
    matcher = difflib.SequenceMatcher(
        a=[w.lower() for w in source], b=[w.lower() for w in edited], autojunk=False
    )
    mapping = {}
    for block in matcher.get_matching_blocks():
        for k in range(block.size):
            mapping[block.b + k] = block.a + k
    if len(set(mapping.values())) != len(mapping):
        raise InputError("token alignment is not one-to-one")
    if not mapping:
        raise InputError("edited prompt shares no words with the source prompt")
    return mapping


class AttentionStore:
    def __init__(self):
        self.maps: dict[tuple[int, str, str], np.ndarray] = {}

    def step_hook(self, step, t):
        def hook(kind, layer_id, probs):
            self.maps[(step, kind, layer_id)] = probs.copy()
            return probs

        return hook


class AttentionInjector:
    def __init__(
        self,
        store: AttentionStore,
        source: PromptEncoding,
        edited: PromptEncoding,
        mapping: dict[int, int],
        cross_steps: int,
        self_steps: int,
        reweight: dict[int, float] | None = None,
    ):
        self.store = store
        self.cross_steps = cross_steps
        self.self_steps = self_steps
        self.pairs = []  # (edited columns, source columns)
        for j, i in sorted(mapping.items()):
            dst = [1 + c for c in edited.spans[j]]
            src = [1 + c for c in source.spans[i]]
            self.pairs.append((dst, src))
        self.reweight = {
            tuple(1 + c for c in edited.spans[j]): f for j, f in (reweight or {}).items()
        }

    def step_hook(self, step, t):
        if step >= self.cross_steps and step >= self.self_steps:
            return None

        def hook(kind, layer_id, probs):
            stored = self.store.maps.get((step, kind, layer_id))
            if stored is None:
                return probs
            if kind == "self":
                return stored if step < self.self_steps else probs
            if step >= self.cross_steps:
                return probs
            out = probs.copy()
            out[..., 0] = stored[..., 0]
            for dst, src in self.pairs:
                if len(dst) == len(src):
                    out[..., dst] = stored[..., src]
                else:
                    out[..., dst] = stored[..., src].mean(axis=-1, keepdims=True)
            for cols, factor in self.reweight.items():
                out[..., list(cols)] *= factor
            return out

        return hook


@dataclass
class EditResult:
    original: SampleResult
    edited: SampleResult

    @property
    def images(self):
        return self.original.image, self.edited.image


def edit(
    adapter: DenoiserAdapter,
    spec: EditSpec,
    sampler: SamplerConfig,
    hyper: GuidanceHyperparams,
    annotator: Annotator | None = None,
) -> EditResult:
    if not getattr(adapter, "supports_injection", False):
        raise ConfigurationError("adapter cannot capture and inject attention maps")
    src_tokens = annotate(spec.source_prompt, annotator)
    dst_tokens = annotate(spec.edited_prompt, annotator)
    src_words = [t.text for t in src_tokens]
    dst_words = [t.text for t in dst_tokens]
    mapping = token_alignment(src_words, dst_words, spec.mode)

    reweight = {}
    if spec.mode == "reweight":
        targets = {w.lower() for w in spec.reweight_words}
        reweight = {j: spec.reweight_factor for j, w in enumerate(dst_words) if w.lower() in targets}
        if spec.reweight_words and not reweight:
            raise InputError(f"none of {spec.reweight_words} occurs in the edited prompt")

    store = AttentionStore()
    original = guided_sample(
        adapter, src_words, extract_object_graph(src_tokens), sampler, hyper,
        step_hook=store.step_hook,
    )
    steps = sampler.total_steps
    injector = AttentionInjector(
        store,
        adapter.encode(src_words),
        adapter.encode(dst_words),
        mapping,
        cross_steps=int(round(spec.cross_replace * steps)),
        self_steps=int(round(spec.self_replace * steps)),
        reweight=reweight,
    )
    edited = guided_sample(
        adapter, dst_words, extract_object_graph(dst_tokens), sampler, hyper,
        step_hook=injector.step_hook,
    )
    return EditResult(original, edited)
