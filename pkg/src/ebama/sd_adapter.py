"""Stable Diffusion adapter (torch + diffusers), loaded lazily.

Implements the denoiser contract of :mod:`ebama.denoiser` on a pretrained
UNet: custom attention processors record the pre-softmax cross-attention
logits of every 16x16 layer (down and up blocks), optionally route
attention probabilities through a hook, and keep the autograd graph so the
pullback can return dL/dz. Weights stay frozen.
"""

from __future__ import annotations

import math

import numpy as np

from .attention import CrossAttentionRecord
from .denoiser import PromptEncoding
from .errors import ConfigurationError

DEFAULT_MODEL = "CompVis/stable-diffusion-v1-4"
LATENT_SCALE = 0.18215


def _import_torch():
    try:
        import torch
    except ImportError as exc:
        raise ConfigurationError(
            "the real adapter needs torch and diffusers: pip install 'artifact[real]'"
        ) from exc
    return torch


class _Collector:
    def __init__(self, hook=None):
        self.hook = hook
        self.cross: list[tuple[str, object]] = []


class _Processor:
    def __init__(self, adapter, name: str, is_cross: bool):
        self.adapter = adapter
        self.name = name
        self.is_cross = is_cross

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None,
                 temb=None, **kwargs):
        torch = self.adapter.torch
        residual = hidden_states
        if encoder_hidden_states is None:
            ctx = hidden_states
        elif getattr(attn, "norm_cross", None):
            ctx = attn.norm_encoder_hidden_states(encoder_hidden_states)
        else:
            ctx = encoder_hidden_states
        q = attn.head_to_batch_dim(attn.to_q(hidden_states))
        k = attn.head_to_batch_dim(attn.to_k(ctx))
        v = attn.head_to_batch_dim(attn.to_v(ctx))
        logits = torch.bmm(q, k.transpose(-1, -2)) * attn.scale
        probs = logits.softmax(dim=-1)

        col = self.adapter._collector
        if col is not None:
            side = int(math.isqrt(hidden_states.shape[1]))
            if self.is_cross and side == self.adapter.resolution:
                col.cross.append((self.name, logits))
            # self-attention above 16x16 is neither stored nor replaced (memory)
            if col.hook is not None and (self.is_cross or side <= self.adapter.resolution):
                kind = "cross" if self.is_cross else "self"
                replaced = col.hook(kind, self.name, probs.detach().cpu().numpy())
                probs = torch.as_tensor(replaced, dtype=probs.dtype, device=probs.device)

        out = attn.batch_to_head_dim(torch.bmm(probs, v))
        out = attn.to_out[1](attn.to_out[0](out))
        if getattr(attn, "residual_connection", False):
            out = out + residual
        return out / getattr(attn, "rescale_output_factor", 1.0)


class StableDiffusionAdapter:
    resolution = 16
    supports_injection = True

    def __init__(self, model: str = DEFAULT_MODEL, device: str | None = None):
        torch = _import_torch()
        try:
            from diffusers import StableDiffusionPipeline
        except ImportError as exc:
            raise ConfigurationError(
                "the real adapter needs diffusers: pip install 'artifact[real]'"
            ) from exc
        device = device or ("cuda" if torch.cuda.is_available() else "cpu")
        try:
            pipe = StableDiffusionPipeline.from_pretrained(model, safety_checker=None)
        except OSError as exc:
            raise ConfigurationError(
                f"cannot load {model!r}; log in to the Hugging Face hub or set HF_HOME"
            ) from exc
        pipe = pipe.to(device)
        self._setup(torch, device, pipe.unet, pipe.vae, pipe.tokenizer, pipe.text_encoder,
                    pipe.scheduler.alphas_cumprod)

    @classmethod
    def from_components(cls, unet, vae, tokenizer, text_encoder, alphas_cumprod, device="cpu"):
        """Wrap already-loaded modules (any UNet exposing ``attn_processors``)."""
        self = cls.__new__(cls)
        self._setup(_import_torch(), device, unet, vae, tokenizer, text_encoder, alphas_cumprod)
        return self

    def _setup(self, torch, device, unet, vae, tokenizer, text_encoder, alphas_cumprod):
        self.torch = torch
        self.device = device
        self.unet, self.vae = unet, vae
        self.tokenizer, self.text_encoder = tokenizer, text_encoder
        for module in (unet, vae, text_encoder):
            module.requires_grad_(False)
        self.alphas_cumprod = torch.as_tensor(alphas_cumprod).double().cpu().numpy()
        side = unet.config.sample_size
        self.latent_shape = (unet.config.in_channels, side, side)
        self._collector = None
        unet.set_attn_processor(
            {
                name: _Processor(self, name.rsplit(".processor", 1)[0], name.endswith("attn2.processor"))
                for name in unet.attn_processors
            }
        )

    def encode(self, words) -> PromptEncoding:
        tok = self.tokenizer
        ids = [tok.bos_token_id]
        spans = []
        for w in words:
            sub = tok(w, add_special_tokens=False).input_ids
            spans.append(list(range(len(ids) - 1, len(ids) - 1 + len(sub))))
            ids += sub
        limit = tok.model_max_length
        if len(ids) + 1 > limit:
            raise ConfigurationError(f"prompt exceeds the text encoder's {limit} tokens")
        ids += [tok.eos_token_id]
        ids += [tok.pad_token_id] * (limit - len(ids))
        with self.torch.no_grad():
            emb = self.text_encoder(self.torch.tensor([ids], device=self.device))[0]
        return PromptEncoding(words=tuple(words), embeddings=emb, spans=spans)

    def forward(self, z, t, encoding, need_grad=False, hook=None):
        torch = self.torch
        zt = torch.tensor(np.asarray(z)[None], dtype=torch.float32, device=self.device)
        zt.requires_grad_(need_grad)
        self._collector = _Collector(hook)
        try:
            with torch.set_grad_enabled(need_grad):
                eps = self.unet(zt, t, encoder_hidden_states=encoding.embeddings).sample
        finally:
            collected, self._collector = self._collector.cross, None

        heads = []
        records = []
        for name, logits in collected:
            for h in range(logits.shape[0]):
                heads.append(logits[h])
                records.append(
                    CrossAttentionRecord(
                        name, h, self.resolution, logits[h].detach().double().cpu().numpy()
                    )
                )
        eps_np = eps[0].detach().double().cpu().numpy()
        if not need_grad:
            return eps_np, records, None

        def pullback(grads):
            pairs = [(x, g) for x, g in zip(heads, grads) if g is not None]
            if not pairs:
                return np.zeros(self.latent_shape)
            outs = [x for x, _ in pairs]
            gouts = [torch.as_tensor(g, dtype=x.dtype, device=x.device) for x, g in pairs]
            (gz,) = torch.autograd.grad(outs, zt, gouts, retain_graph=False)
            return gz[0].double().cpu().numpy()

        return eps_np, records, pullback

    def decode(self, z) -> np.ndarray:
        torch = self.torch
        with torch.no_grad():
            zt = torch.tensor(np.asarray(z)[None], dtype=torch.float32, device=self.device)
            img = self.vae.decode(zt / LATENT_SCALE).sample[0]
        img = ((img.clamp(-1, 1) + 1) * 127.5).round().byte().permute(1, 2, 0)
        return img.cpu().numpy()
