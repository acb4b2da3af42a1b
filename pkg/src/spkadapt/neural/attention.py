"""Multi-head attention, sinusoidal positions and post-norm transformer blocks."""

import math

import numpy as np
import torch
from torch import nn

from .._validation import ValidationError
from .layers import DEFAULT_DROPOUT


def sinusoidal_pe(length, dim):
    """``PE[pos, 2i] = sin(pos / 10000^(2i/dim))``, ``PE[pos, 2i+1] = cos(...)``."""
    if dim % 2:
        raise ValidationError(f"positional encoding dim must be even, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    rates = 10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos / rates)
    pe[:, 1::2] = np.cos(pos / rates)
    return pe


def causal_mask(n, device=None):
    """Bool (n, n) mask, True where query i would see a future key j > i."""
    return torch.triu(torch.ones(n, n, dtype=torch.bool, device=device), diagonal=1)


def padding_mask(lengths, max_len):
    """Bool (B, max_len), True at padded positions."""
    lengths = torch.as_tensor(lengths)
    return torch.arange(max_len)[None, :] >= lengths[:, None]


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over ``n_heads`` heads.

    ``mask`` entries that are True are blocked: they get exactly zero weight.
    Accepts (batch, time, dim) or unbatched (time, dim) inputs.
    """

    def __init__(self, d_model, n_heads):
        super().__init__()
        if d_model % n_heads:
            raise ValidationError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.last_weights = None

    def forward(self, q, k, v, mask=None):
        unbatched = q.dim() == 2
        if unbatched:
            q, k, v = q.unsqueeze(0), k.unsqueeze(0), v.unsqueeze(0)
        B, Tq, _ = q.shape
        Tk = k.shape[1]

        def split(x, T):
            return x.reshape(B, T, self.n_heads, self.d_head).transpose(1, 2)

        qh = split(self.q_proj(q), Tq)
        kh = split(self.k_proj(k), Tk)
        vh = split(self.v_proj(v), Tk)
        scores = qh @ kh.transpose(-1, -2) / math.sqrt(self.d_head)
        if mask is not None:
            if mask.dim() == 2:
                mask = mask[None, None]
            elif mask.dim() == 3:
                mask = mask[:, None]
            scores = scores.masked_fill(mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        if mask is not None:
            # a row with every key blocked has no valid distribution; emit zeros
            weights = torch.nan_to_num(weights, nan=0.0)
        self.last_weights = weights.detach()
        out = (weights @ vh).transpose(1, 2).reshape(B, Tq, self.d_model)
        out = self.out_proj(out)
        return out[0] if unbatched else out


class FeedForward(nn.Module):
    def __init__(self, d_model, d_ff, dropout=DEFAULT_DROPOUT):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ff)
        self.fc2 = nn.Linear(d_ff, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.drop(torch.relu(self.fc1(x))))


class EncoderBlock(nn.Module):
    """Self-attention and feed-forward sub-layers, each followed by dropout,
    residual add and layer norm."""

    def __init__(self, d_model, n_heads, d_ff, dropout=DEFAULT_DROPOUT):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.ff = FeedForward(d_model, d_ff, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask=None):
        x = self.norm1(x + self.drop(self.attn(x, x, x, mask)))
        return self.norm2(x + self.drop(self.ff(x)))


class DecoderBlock(nn.Module):
    def __init__(self, d_model, n_heads, d_ff, dropout=DEFAULT_DROPOUT):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.ff = FeedForward(d_model, d_ff, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.norm3 = nn.LayerNorm(d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, y, memory, self_mask=None, memory_mask=None):
        y = self.norm1(y + self.drop(self.self_attn(y, y, y, self_mask)))
        y = self.norm2(y + self.drop(self.cross_attn(y, memory, memory, memory_mask)))
        return self.norm3(y + self.drop(self.ff(y)))
