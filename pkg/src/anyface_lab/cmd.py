"""Cross-modal distillation mapper: transformer stack + 3-layer linear head.

Input is a stack of ``n_cap`` embeddings per example (``[n_cap, d_e]`` or
``[B, n_cap, d_e]``). There is no positional encoding, and the hidden feature
is the mean over tokens of the final transformer output, so permuting the
caption rows does not change the result.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, InputError, SplitError
from .nn import LayerNorm, Linear, Module
from .ops import softmax
from .tensor import Tensor, as_tensor, concat


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise DimensionError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        B, n, dim = x.shape
        h, dh = self.heads, dim // self.heads

        def split(t: Tensor) -> Tensor:
            return t.reshape(B, n, h, dh).transpose(0, 2, 1, 3)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
        mixed = softmax(scores, axis=-1) @ v
        return self.out(mixed.transpose(0, 2, 1, 3).reshape(B, n, dim))


class TransformerBlock(Module):
    """Pre-norm block: attention and a 4x feed-forward, each with a residual."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ff1 = Linear(dim, 4 * dim, rng)
        self.ff2 = Linear(4 * dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.ff2(self.ff1(self.ln2(x)).gelu())


class CmdModule(Module):
    def __init__(
        self,
        embed_dim: int = 32,
        n_layers: int = 8,
        latent_dim: int = 32,
        depth: int = 3,
        heads: int = 4,
        head_hidden: int = 128,
        seed: int = 0,
    ):
        rng = np.random.default_rng([seed, 21])
        self.embed_dim = embed_dim
        self.latent_shape = (n_layers, latent_dim)
        self.blocks = [TransformerBlock(embed_dim, heads, rng) for _ in range(depth)]
        self.ln_final = LayerNorm(embed_dim)
        self.head = [
            Linear(embed_dim, head_hidden, rng),
            Linear(head_hidden, head_hidden, rng),
            Linear(head_hidden, n_layers * latent_dim, rng),
        ]

    def encode(self, features) -> Tensor:
        """Hidden feature h: mean-pooled output of the transformer stack."""
        x = as_tensor(features)
        single = x.ndim == 2
        if single:
            x = x.reshape(1, *x.shape)
        if x.ndim != 3:
            raise DimensionError(f"expected [n_cap, d_e] or [B, n_cap, d_e], got {x.shape}")
        if x.shape[-1] != self.embed_dim:
            raise DimensionError(f"feature dim {x.shape[-1]} != {self.embed_dim}")
        if x.shape[1] == 0:
            raise InputError("at least one caption/image feature is required")
        for block in self.blocks:
            x = block(x)
        h = self.ln_final(x).mean(axis=1)
        return h

    def project(self, h: Tensor) -> Tensor:
        x = self.head[0](h).gelu()
        x = self.head[1](x).gelu()
        x = self.head[2](x)
        return x.reshape(h.shape[0], *self.latent_shape)

    def forward(self, features) -> tuple[Tensor, Tensor]:
        """Return (w, h): latent ``[L, d]`` and hidden ``[1, d_e]`` (or batched ``[B, ...]``)."""
        single = as_tensor(features).ndim == 2
        h = self.encode(features)
        w = self.project(h)
        if single:
            return w.reshape(*self.latent_shape), h
        return w, h


def cmd_forward(module: CmdModule, features) -> tuple[Tensor, Tensor]:
    return module(features)


def compose_latent(w_t, w_c, m: int, n: int) -> Tensor:
    """Rows ``0..n`` from ``w_c`` followed by the last ``m`` rows of ``w_t``.

    Works on single ``[L, d]`` codes or batches ``[B, L, d]``.
    """
    w_t, w_c = as_tensor(w_t), as_tensor(w_c)
    L = w_t.shape[-2]
    if m < 0 or n < 0 or m + n != L:
        raise SplitError(f"m + n must equal {L}, got m={m}, n={n}")
    if w_c.shape[-2] != n or w_c.shape[-1] != w_t.shape[-1]:
        raise DimensionError(f"w_c must have {n} rows of width {w_t.shape[-1]}, got {w_c.shape}")
    if n == 0:
        return w_t
    if m == 0:
        return w_c
    return concat([w_c, w_t[..., L - m:, :]], axis=-2)
