"""Guided DDIM sampling with energy-based attention alignment.

For the first ``update_steps`` timesteps the latent is nudged down the
gradient of the attention loss before the regular classifier-free DDIM
step; the remaining steps are plain DDIM. Each update step costs one extra
conditional forward (the loss pass) on top of the sampling passes.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attention import aggregate, aggregate_backward
from .denoiser import DenoiserAdapter, PromptEncoding, ddim_step, ddim_timesteps, initial_latent
from .energy import GuidanceHyperparams, LossBreakdown, intensity_level, loss_and_grad
from .errors import ConfigurationError, GuidanceError, InputError
from .prompt_graph import ObjectGraph, extend_with_words

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplerConfig:
    total_steps: int = 50
    guidance_scale: float = 7.5
    seed: int = 0
    sampler_kind: str = "ddim"

    def __post_init__(self):
        if self.total_steps < 1:
            raise InputError("total_steps must be >= 1")
        if self.guidance_scale < 0:
            raise InputError("guidance_scale must be >= 0")
        if self.sampler_kind != "ddim":
            raise InputError("only the deterministic DDIM sampler is supported")


@dataclass
class TraceStep:
    step: int
    timestep: int
    loss: dict | None = None
    intensity: dict[str, float] = field(default_factory=dict)
    pair_energies: dict[str, list[float]] = field(default_factory=dict)
    skipped: bool = False


@dataclass
class GuidanceTrace:
    steps: list[TraceStep] = field(default_factory=list)

    @property
    def update_records(self) -> list[TraceStep]:
        return [s for s in self.steps if s.loss is not None]

    def binding_totals(self) -> list[float]:
        return [sum(s.loss["binding"].values()) for s in self.update_records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(s), sort_keys=True) + "\n" for s in self.steps)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


@dataclass
class SampleResult:
    image: np.ndarray
    latent: np.ndarray
    trace: GuidanceTrace
    latents: list[np.ndarray] = field(default_factory=list)


def _metrics(agg, graph: ObjectGraph, breakdown: LossBreakdown | None, hyper):
    if breakdown is None:
        from .energy import energy_matrix

        e = energy_matrix(hyper.energy, agg.features)
        pairs = {str(s): [float(v) for v in e[s]] for s in graph.objects}
    else:
        pairs = {str(s): v for s, v in breakdown.pair_energies.items()}
    levels = {str(s): intensity_level(agg.score_map(s)) for s in graph.objects}
    return levels, pairs


def _check_graph(graph: ObjectGraph, encoding: PromptEncoding):
    if graph.token_count != encoding.token_count:
        raise InputError(
            f"object graph covers {graph.token_count} tokens but the prompt encodes "
            f"{encoding.token_count}; parse and encode the same tokenisation"
        )


def _cfg_eps(adapter, z, t, cond, uncond, scale, hook=None):
    eps_c, records, _ = adapter.forward(z, t, cond, hook=hook)
    if scale == 1.0:
        return eps_c, records
    eps_u, _, _ = adapter.forward(z, t, uncond)
    return eps_u + scale * (eps_c - eps_u), records


def sample(
    adapter: DenoiserAdapter, words: Sequence[str], sampler: SamplerConfig, keep_latents: bool = False
) -> SampleResult:
    """Unguided deterministic DDIM sampling."""
    hyper = GuidanceHyperparams(
        alpha=0.0,
        total_steps=sampler.total_steps,
        update_steps=0,
        guidance_scale=sampler.guidance_scale,
    )
    empty = ObjectGraph((), {}, len(words), words=tuple(words))
    return guided_sample(adapter, words, empty, sampler, hyper, collect_metrics=False,
                         keep_latents=keep_latents)


def guidance_step(
    adapter: DenoiserAdapter,
    z: np.ndarray,
    t: int,
    encoding: PromptEncoding,
    graph: ObjectGraph,
    hyper: GuidanceHyperparams,
    step: int | None = None,
):
    """One latent update ``z - alpha * grad L`` from a fresh conditional forward.

    Returns ``(new_z, breakdown, aggregated_attention)``. A non-finite loss
    leaves ``z`` unchanged (with a warning); a non-finite gradient raises
    :class:`GuidanceError`.
    """
    _, records, pullback = adapter.forward(z, t, encoding, need_grad=True)
    spans = None if encoding.identity_spans else encoding.spans
    cols = encoding.column_count
    agg = aggregate(records, token_count=cols, spans=spans, resolution=adapter.resolution)
    breakdown, g_feat, g_score = loss_and_grad(agg, graph, hyper)
    if not math.isfinite(breakdown.total):
        log.warning("step %s: non-finite loss %r, skipping update", step, breakdown.total)
        return z, breakdown, agg
    grad_z = pullback(aggregate_backward(records, agg, g_feat, g_score, cols, spans))
    if not np.all(np.isfinite(grad_z)):
        raise GuidanceError(
            f"non-finite latent gradient at step {step} (t={t}); loss {breakdown.to_record()}",
            step=step,
            breakdown=breakdown,
        )
    return z - hyper.alpha * grad_z, breakdown, agg


def guided_sample(
    adapter: DenoiserAdapter,
    words: Sequence[str],
    graph: ObjectGraph,
    sampler: SamplerConfig,
    hyper: GuidanceHyperparams,
    external_words: Sequence[str] = (),
    collect_metrics: bool = True,
    keep_latents: bool = False,
    step_hook=None,
) -> SampleResult:
    """Run the guided sampler. ``words`` is the prompt's word tokenisation.

    ``step_hook(step, t)`` may return an attention hook for that step's
    sampling pass (used by editing); it never sees the loss pass.
    """
    if not hasattr(adapter, "forward") or getattr(adapter, "resolution", None) is None:
        raise ConfigurationError("adapter does not expose cross-attention records")
    if sampler.total_steps != hyper.total_steps:
        hyper = GuidanceHyperparams(**{**hyper.__dict__, "total_steps": sampler.total_steps,
                                       "update_steps": min(hyper.update_steps, sampler.total_steps)})
    cond = adapter.encode(list(words))
    uncond = adapter.encode([])
    _check_graph(graph, cond)

    loss_cond, loss_graph = cond, graph
    if external_words:
        loss_cond = adapter.encode(list(words) + list(external_words))
        loss_graph = extend_with_words(graph, external_words)

    guided = hyper.alpha > 0 and hyper.update_steps > 0 and not graph.degraded
    z = initial_latent(adapter.latent_shape, sampler.seed)
    timesteps = ddim_timesteps(sampler.total_steps)
    stride = int(timesteps[0] - timesteps[1]) if len(timesteps) > 1 else int(timesteps[0]) + 1
    trace = GuidanceTrace()
    latents = [z.copy()] if keep_latents else []

    for i, t in enumerate(timesteps):
        t = int(t)
        rec = TraceStep(step=i, timestep=t)
        if guided and i < hyper.update_steps:
            z, breakdown, agg = guidance_step(adapter, z, t, loss_cond, loss_graph, hyper, step=i)
            rec.loss = breakdown.to_record()
            rec.skipped = not math.isfinite(breakdown.total)
            if collect_metrics:
                rec.intensity, rec.pair_energies = _metrics(agg, loss_graph, breakdown, hyper)
        hook = step_hook(i, t) if step_hook is not None else None
        eps, records = _cfg_eps(adapter, z, t, cond, uncond, sampler.guidance_scale, hook)
        if collect_metrics and rec.loss is None and not graph.degraded:
            spans = None if cond.identity_spans else cond.spans
            agg = aggregate(records, token_count=cond.column_count, spans=spans,
                            resolution=adapter.resolution)
            rec.intensity, rec.pair_energies = _metrics(agg, graph, None, hyper)
        z = ddim_step(z, eps, t, t - stride, adapter.alphas_cumprod)
        trace.steps.append(rec)
        if keep_latents:
            latents.append(z.copy())

    return SampleResult(adapter.decode(z), z, trace, latents)


def guided_sample_with_externals(
    adapter: DenoiserAdapter,
    words: Sequence[str],
    graph: ObjectGraph,
    sampler: SamplerConfig,
    hyper: GuidanceHyperparams,
    external_words: Sequence[str],
    **kwargs,
) -> SampleResult:
    """Loss passes see ``words + external_words``; sampling passes see ``words`` only."""
    return guided_sample(adapter, words, graph, sampler, hyper, external_words, **kwargs)


def save_image(image: np.ndarray, path: str | Path, metadata: dict | None = None) -> None:
    from PIL import Image

    path = Path(path)
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, format="PNG")
    if metadata is not None:
        path.with_suffix(".json").write_text(
            json.dumps(metadata, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
