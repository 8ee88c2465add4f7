"""Post-LayerNorm Transformer encoder that reconstructs masked features from context."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn


def positional_embedding(T: int, d: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed sinusoidal table ``(T, d)``: sin on even columns, cos on odd ones."""
    if T < 1:
        raise ValueError("sequence length must be >= 1")
    if d % 2:
        raise ValueError(f"feature dimension must be even, got {d}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    table = np.zeros((T, d))
    table[:, 0::2] = np.sin(pos / freq)
    table[:, 1::2] = np.cos(pos / freq)
    return torch.as_tensor(table, dtype=dtype)


def add_positions(h0: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    if h0.shape[-2:] != table.shape:
        raise ValueError(f"features {tuple(h0.shape)} do not match positional table {tuple(table.shape)}")
    return h0 + table


class TransformerBlock(nn.Module):
    """Self-attention and feed-forward sublayers, each followed by residual + LayerNorm.

    Attention logits are the plain dot products ``(W_q h_i) . (W_k h_j)``;
    ``scale=True`` divides them by ``sqrt(d_head)``.
    """

    def __init__(self, d: int, ffn_mult: int = 4, heads: int = 1, scale: bool = False):
        super().__init__()
        if d % heads:
            raise ValueError(f"feature dimension {d} is not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.scale = scale
        self.w_q = nn.Linear(d, d, bias=False)
        self.w_k = nn.Linear(d, d, bias=False)
        self.w_v = nn.Linear(d, d, bias=False)
        self.ln1 = nn.LayerNorm(d)
        self.ffn1 = nn.Linear(d, ffn_mult * d)
        self.ffn2 = nn.Linear(ffn_mult * d, d)
        self.ln2 = nn.LayerNorm(d)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, T, d = x.shape
        return x.reshape(*lead, T, self.heads, d // self.heads).transpose(-3, -2)

    def attention(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (attended values, attention weights ``(..., heads, T, T)``)."""
        q, k, v = self._split(self.w_q(h)), self._split(self.w_k(h)), self._split(self.w_v(h))
        scores = q @ k.transpose(-1, -2)
        if self.scale:
            scores = scores / math.sqrt(self.d // self.heads)
        scores = scores - scores.amax(dim=-1, keepdim=True).detach()
        alpha = torch.softmax(scores, dim=-1)
        out = (alpha @ v).transpose(-3, -2)
        return out.reshape(h.shape), alpha

    def forward(self, h: torch.Tensor, return_attention: bool = False):
        attended, alpha = self.attention(h)
        h_tilde = self.ln1(h + attended)
        ffn = self.ffn2(torch.relu(self.ffn1(h_tilde)))
        out = self.ln2(h_tilde + ffn)
        if return_attention:
            return out, alpha
        return out


class SequenceTransformer(nn.Module):
    """``L`` stacked blocks applied to position-augmented encoder features."""

    def __init__(self, d: int = 50, num_layers: int = 2, heads: int = 1, ffn_mult: int = 4,
                 scale: bool = False):
        super().__init__()
        self.d = d
        self.blocks = nn.ModuleList(
            TransformerBlock(d, ffn_mult=ffn_mult, heads=heads, scale=scale) for _ in range(num_layers)
        )
        self._tables: dict[tuple, torch.Tensor] = {}

    def table(self, T: int, dtype=torch.float32) -> torch.Tensor:
        key = (T, dtype)
        if key not in self._tables:
            self._tables[key] = positional_embedding(T, self.d, dtype=dtype)
        return self._tables[key]

    def forward(self, h0: torch.Tensor, table: torch.Tensor | None = None) -> torch.Tensor:
        """``h0`` is ``(T, d)`` or ``(B, T, d)``; returns the last block's output."""
        if table is None:
            table = self.table(h0.shape[-2], h0.dtype)
        h = add_positions(h0, table)
        for block in self.blocks:
            h = block(h)
        return h

    encode_sequence = forward
