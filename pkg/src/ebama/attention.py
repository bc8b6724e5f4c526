"""Aggregation of cross-attention logits into per-token feature and score maps.

Records are ``[spatial, tokens]`` logit matrices where column 0 is the
start-of-text token. ``aggregate`` averages every 16x16 record, keeps the
``token_count`` prompt columns (padding and end-of-text are dropped), merges
sub-token columns per word, and renormalises without the start token.
``aggregate_backward`` is the matching vector-Jacobian product.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigurationError, InputError

RESOLUTION = 16


@dataclass(frozen=True)
class CrossAttentionRecord:
    layer_id: str
    head_id: int
    resolution: int
    logits: np.ndarray  # [resolution**2, tokens incl. start token]

    def __post_init__(self):
        if self.logits.ndim != 2 or self.logits.shape[0] != self.resolution**2:
            raise InputError(
                f"record {self.layer_id}/{self.head_id}: expected {self.resolution**2} rows, "
                f"got shape {self.logits.shape}"
            )


@dataclass(frozen=True)
class AggregatedAttention:
    features: np.ndarray  # [N, resolution**2], pre-softmax
    scores: np.ndarray  # [N, resolution**2], softmax over tokens per position
    token_count: int
    resolution: int = RESOLUTION

    def score_map(self, i: int) -> np.ndarray:
        return self.scores[i].reshape(self.resolution, self.resolution)

    def feature_map(self, i: int) -> np.ndarray:
        return self.features[i].reshape(self.resolution, self.resolution)


def renormalize_without_sot(aggregate_logits: np.ndarray) -> np.ndarray:
    """Drop the start-token column and softmax the rest per position.

    Returns ``[spatial, tokens - 1]``; every row sums to one.
    """
    logits = np.asarray(aggregate_logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise InputError("need the start token plus at least one prompt token")
    return kernels.softmax_rows(np.ascontiguousarray(logits[:, 1:]))


def merge_columns(logits: np.ndarray, spans: Sequence[Sequence[int]] | None) -> np.ndarray:
    """Average sub-token columns of each word; ``spans`` index prompt columns (0-based)."""
    if spans is None:
        return logits
    out = np.empty((logits.shape[0], len(spans)))
    for w, span in enumerate(spans):
        out[:, w] = logits[:, list(span)].mean(axis=1)
    return out


def _select(records, resolution):
    chosen = [r for r in records if r.resolution == resolution]
    if not chosen:
        raise ConfigurationError(
            f"no cross-attention records at {resolution}x{resolution}; "
            "the denoiser adapter must expose that resolution"
        )
    width = chosen[0].logits.shape[1]
    if any(r.logits.shape[1] != width for r in chosen):
        raise InputError("records disagree on token count")
    return chosen


def mean_logits(records: Sequence[CrossAttentionRecord], resolution: int = RESOLUTION):
    chosen = _select(records, resolution)
    total = np.zeros_like(chosen[0].logits, dtype=np.float64)
    for r in chosen:
        total += r.logits
    return total / len(chosen)


def aggregate(
    records: Sequence[CrossAttentionRecord],
    token_count: int | None = None,
    spans: Sequence[Sequence[int]] | None = None,
    resolution: int = RESOLUTION,
) -> AggregatedAttention:
    """Average logits over all layers and heads at ``resolution``.

    ``token_count`` is the number of encoder columns after the start token
    that belong to the prompt (defaults to all). ``spans`` optionally groups
    those columns into words.
    """
    mean = mean_logits(records, resolution)
    width = mean.shape[1] - 1
    n = width if token_count is None else token_count
    if not 1 <= n <= width:
        raise InputError(f"token_count {n} outside [1, {width}]")
    prompt_cols = merge_columns(mean[:, 1 : n + 1], spans)
    with_sot = np.concatenate([mean[:, :1], prompt_cols], axis=1)
    scores = renormalize_without_sot(with_sot)
    return AggregatedAttention(
        features=np.ascontiguousarray(prompt_cols.T),
        scores=np.ascontiguousarray(scores.T),
        token_count=prompt_cols.shape[1],
        resolution=resolution,
    )


def aggregate_backward(
    records: Sequence[CrossAttentionRecord],
    agg: AggregatedAttention,
    grad_features: np.ndarray,
    grad_scores: np.ndarray,
    token_count: int | None = None,
    spans: Sequence[Sequence[int]] | None = None,
) -> list[np.ndarray | None]:
    """Gradient w.r.t. each record's logits, given gradients on features and scores.

    Returns one array per input record (``None`` for records at other
    resolutions).
    """
    chosen = [r for r in records if r.resolution == agg.resolution]
    width = chosen[0].logits.shape[1] - 1
    n = width if token_count is None else token_count

    # scores = softmax(prompt_cols) per position; features = prompt_cols^T
    g_cols = grad_features.T + kernels.softmax_rows_vjp(
        np.ascontiguousarray(agg.scores.T), np.ascontiguousarray(grad_scores.T)
    )
    g_mean = np.zeros_like(chosen[0].logits, dtype=np.float64)
    if spans is None:
        g_mean[:, 1 : n + 1] = g_cols
    else:
        for w, span in enumerate(spans):
            for c in span:
                g_mean[:, 1 + c] += g_cols[:, w] / len(span)
    g_rec = g_mean / len(chosen)
    return [g_rec if r.resolution == agg.resolution else None for r in records]
