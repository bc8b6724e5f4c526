"""Denoiser adapter contract and the deterministic DDIM schedule.

An adapter encodes prompts and runs one conditional denoiser pass::

    eps, records, pullback = adapter.forward(z, t, encoding, need_grad=True)

``records`` are the pass's :class:`CrossAttentionRecord` objects. With
``need_grad`` set, ``pullback(grads)`` takes one array per record (or
``None``) holding dL/dlogits and returns dL/dz. Weights stay frozen.

``hook(kind, layer_id, probs)`` may be passed to ``forward`` to read or
replace attention probabilities (``kind`` is ``"cross"`` or ``"self"``).
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np

from .attention import CrossAttentionRecord

AttentionHook = Callable[[str, str, np.ndarray], np.ndarray]
Pullback = Callable[[Sequence[np.ndarray | None]], np.ndarray]

TRAIN_STEPS = 1000


@dataclass
class PromptEncoding:
    words: tuple[str, ...]
    embeddings: Any
    # encoder columns after the start token that belong to each word
    spans: list[list[int]] = field(default_factory=list)

    @property
    def token_count(self) -> int:
        """Number of word-level prompt tokens."""
        return len(self.words)

    @property
    def column_count(self) -> int:
        return 1 + max((c for span in self.spans for c in span), default=-1)

    @property
    def identity_spans(self) -> bool:
        return all(span == [i] for i, span in enumerate(self.spans))


class DenoiserAdapter(Protocol):
    resolution: int
    latent_shape: tuple[int, ...]
    alphas_cumprod: np.ndarray

    def encode(self, words: Sequence[str]) -> PromptEncoding: ...

    def forward(
        self,
        z: np.ndarray,
        t: int,
        encoding: PromptEncoding,
        need_grad: bool = False,
        hook: AttentionHook | None = None,
    ) -> tuple[np.ndarray, list[CrossAttentionRecord], Pullback | None]: ...

    def decode(self, z: np.ndarray) -> np.ndarray: ...


def scaled_linear_alphas_cumprod(
    beta_start: float = 0.00085, beta_end: float = 0.012, steps: int = TRAIN_STEPS
) -> np.ndarray:
    betas = np.linspace(beta_start**0.5, beta_end**0.5, steps) ** 2
    return np.cumprod(1.0 - betas)


def ddim_timesteps(num_steps: int, train_steps: int = TRAIN_STEPS, offset: int = 1) -> np.ndarray:
    """Descending timesteps, evenly spaced (981, 961, ..., 1 for 50 steps)."""
    if num_steps < 1:
        raise ValueError("need at least one sampling step")
    ratio = train_steps // num_steps
    return (np.arange(num_steps) * ratio)[::-1] + offset


def ddim_step(
    z: np.ndarray, eps: np.ndarray, t: int, t_prev: int, alphas_cumprod: np.ndarray
) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``."""
    a_t = alphas_cumprod[t]
    a_prev = alphas_cumprod[t_prev] if t_prev >= 0 else alphas_cumprod[0]
    x0 = (z - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
    return np.sqrt(a_prev) * x0 + np.sqrt(1.0 - a_prev) * eps


def initial_latent(shape: Sequence[int], seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(tuple(shape))
