"""A miniature cross-attention denoiser with frozen random weights.

Two cross-attention blocks read queries from the 4x16x16 latent (the
second through a tanh mixing layer) and keys from seeded word embeddings;
one self-attention block over spatial positions feeds the noise head. The
latent grid equals the attention resolution, so every forward emits one
16x16 record per cross-attention block. The pullback is written by hand.
"""

from __future__ import annotations

import zlib
from collections.abc import Sequence

import numpy as np

from . import kernels
from .attention import CrossAttentionRecord
from .denoiser import PromptEncoding, TRAIN_STEPS, scaled_linear_alphas_cumprod
from .errors import InputError

SOT = "<|startoftext|>"


def embed_tokens(n: int, seed: int = 0, token_dim: int = 8) -> np.ndarray:
    """Seeded ``(n + 1) x token_dim`` embedding; row 0 is the start token."""
    if n < 1:
        raise InputError("need at least one token")
    return np.random.default_rng([seed, n]).standard_normal((n + 1, token_dim))


def _word_vector(word: str, seed: int, dim: int) -> np.ndarray:
    key = zlib.crc32(word.lower().encode("utf-8"))
    return np.random.default_rng([seed, key]).standard_normal(dim)


class ToyDenoiser:
    resolution = 16
    supports_injection = True

    def __init__(self, seed: int = 0, channels: int = 4, token_dim: int = 8, head_dim: int = 8):
        self.seed = seed
        self.channels = channels
        self.token_dim = token_dim
        self.head_dim = head_dim
        self.latent_shape = (channels, self.resolution, self.resolution)
        self.alphas_cumprod = scaled_linear_alphas_cumprod()

        rng = np.random.default_rng(seed)
        c, d, m = channels, token_dim, head_dim
        self.w_mix = rng.standard_normal((c, c)) / np.sqrt(c)
        self.w_q = [rng.standard_normal((c, m)) / np.sqrt(c) for _ in range(2)]
        self.w_k = [rng.standard_normal((d, m)) / np.sqrt(d) for _ in range(2)]
        self.w_v = [rng.standard_normal((d, c)) / np.sqrt(d) for _ in range(2)]
        self.s_q = rng.standard_normal((c, m)) / np.sqrt(c)
        self.s_k = rng.standard_normal((c, m)) / np.sqrt(c)
        self.s_v = rng.standard_normal((c, c)) / np.sqrt(c)
        self.w_out = rng.standard_normal((c, c)) / np.sqrt(c)
        self.freqs = np.pi * (1.0 + np.arange(c)) / TRAIN_STEPS
        self.layer_ids = ("down.0", "up.0")

    # -- text side --------------------------------------------------------

    def encode(self, words: Sequence[str]) -> PromptEncoding:
        rows = [_word_vector(SOT, self.seed, self.token_dim)]
        for pos, w in enumerate(words):
            v = _word_vector(w, self.seed, self.token_dim)
            v = v + 0.1 * np.sin((pos + 1) * (1.0 + np.arange(self.token_dim)))
            rows.append(v)
        return PromptEncoding(
            words=tuple(words),
            embeddings=np.stack(rows),
            spans=[[i] for i in range(len(words))],
        )

    def encode_matrix(self, embeddings: np.ndarray) -> PromptEncoding:
        """Wrap a raw embedding matrix (row 0 = start token)."""
        n = embeddings.shape[0] - 1
        return PromptEncoding(
            words=tuple(f"tok{i}" for i in range(n)),
            embeddings=np.asarray(embeddings, dtype=np.float64),
            spans=[[i] for i in range(n)],
        )

    # -- image side -------------------------------------------------------

    def time_embedding(self, t: int) -> np.ndarray:
        return 0.5 * np.sin(self.freqs * t)

    def forward(self, z, t, encoding: PromptEncoding, need_grad=False, hook=None):
        z = np.asarray(z, dtype=np.float64)
        if z.shape != self.latent_shape:
            raise InputError(f"latent must have shape {self.latent_shape}, got {z.shape}")
        emb = np.asarray(encoding.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[1] != self.token_dim:
            raise InputError(f"token embeddings must be [tokens, {self.token_dim}]")

        c, p = self.channels, self.resolution**2
        h = z.reshape(c, p).T + self.time_embedding(t)
        mixed = np.tanh(h @ self.w_mix)
        inputs = (h, mixed)
        scale = 1.0 / np.sqrt(self.head_dim)

        records, keys = [], []
        acc = h @ self.w_out
        for k, layer_id in enumerate(self.layer_ids):
            key = emb @ self.w_k[k]
            logits = (inputs[k] @ self.w_q[k]) @ key.T * scale
            records.append(CrossAttentionRecord(layer_id, 0, self.resolution, logits))
            keys.append(key)
            probs = kernels.softmax_rows(np.ascontiguousarray(logits))
            if hook is not None:
                probs = hook("cross", layer_id, probs)
            acc = acc + probs @ (emb @ self.w_v[k])

        sq, sk = h @ self.s_q, h @ self.s_k
        self_probs = kernels.softmax_rows(np.ascontiguousarray(sq @ sk.T * scale))
        if hook is not None:
            self_probs = hook("self", "mid.self", self_probs)
        acc = acc + self_probs @ (h @ self.s_v)
        eps = np.tanh(acc).T.reshape(self.latent_shape)

        if not need_grad:
            return eps, records, None

        def pullback(grads):
            dh = np.zeros_like(h)
            for k, g in enumerate(grads):
                if g is None:
                    continue
                du = (np.asarray(g) @ keys[k]) * scale @ self.w_q[k].T
                if k == 0:
                    dh += du
                else:
                    dh += (du * (1.0 - mixed**2)) @ self.w_mix.T
            return dh.T.reshape(self.latent_shape)

        return eps, records, pullback

    def decode(self, z: np.ndarray) -> np.ndarray:
        """Map the first three latent channels to a 64x64 RGB uint8 image."""
        rgb = 0.5 + 0.5 * np.tanh(np.asarray(z)[:3])
        img = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
        return np.repeat(np.repeat(img, 4, axis=0), 4, axis=1)
