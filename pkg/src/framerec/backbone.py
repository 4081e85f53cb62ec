"""Self-attention sequential encoder over left-padded item-id windows.

The encoder embeds item ids, adds learned positional embeddings, and stacks
causal self-attention blocks, each followed by a position-wise feed-forward
network with pre-layer-norm residual connections. The state at the last
window position (always a real item under left padding) is the initial
preference representation handed to the preference denoiser.
"""

import math

import torch
import torch.nn as nn

# Additive mask value. Large-but-finite keeps softmax well defined on rows
# where every key is padding (their outputs are zeroed afterwards anyway).
NEG_INF = -1e9


def attention(q, k, v, causal: bool = False, key_mask=None, return_weights: bool = False):
    """Scaled dot-product attention softmax(Q K^T / sqrt(d_k)) V.

    q, k, v: (..., n, d). key_mask is a boolean tensor broadcastable to
    (..., n_k) marking valid keys; causal=True restricts position i to
    keys j <= i. Attention weights are row-stochastic over visible keys.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(
            f"incompatible attention shapes q={tuple(q.shape)} "
            f"k={tuple(k.shape)} v={tuple(v.shape)}"
        )
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if causal:
        n_q, n_k = scores.shape[-2], scores.shape[-1]
        visible = torch.ones(n_q, n_k, dtype=torch.bool, device=scores.device).tril()
        scores = scores.masked_fill(~visible, NEG_INF)
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask.unsqueeze(-2).to(torch.bool), NEG_INF)
    weights = torch.softmax(scores, dim=-1)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads != 0:
            raise ValueError(f"dim {dim} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.w_q = nn.Linear(dim, dim)
        self.w_k = nn.Linear(dim, dim)
        self.w_v = nn.Linear(dim, dim)
        self.w_out = nn.Linear(dim, dim)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, x, causal=False, key_mask=None):
        q, k, v = self._split(self.w_q(x)), self._split(self.w_k(x)), self._split(self.w_v(x))
        mask = key_mask.unsqueeze(1) if key_mask is not None else None
        out = attention(q, k, v, causal=causal, key_mask=mask)
        b, _, n, _ = out.shape
        out = out.transpose(1, 2).reshape(b, n, self.n_heads * self.head_dim)
        return self.w_out(out)


class EncoderBlock(nn.Module):
    """Pre-LN self-attention block with a position-wise feed-forward net."""

    def __init__(self, dim: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.ln_attn = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, n_heads)
        self.ln_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, dim),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(dim, dim),
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, x, causal=False, key_mask=None):
        x = x + self.drop(self.attn(self.ln_attn(x), causal=causal, key_mask=key_mask))
        x = x + self.drop(self.ffn(self.ln_ffn(x)))
        return x


class SequenceEncoder(nn.Module):
    """SASRec-style causal encoder producing per-position states and the
    last-position preference vector.

    Item index 0 is the padding row; sequences must be left-padded so the
    final window slot always holds the most recent real item.
    """

    def __init__(self, n_items: int, dim: int = 64, n_blocks: int = 2,
                 n_heads: int = 2, max_len: int = 10, dropout: float = 0.2):
        super().__init__()
        self.n_items = n_items
        self.dim = dim
        self.max_len = max_len
        self.item_emb = nn.Embedding(n_items + 1, dim, padding_idx=0)
        self.pos_emb = nn.Embedding(max_len, dim)
        # small-init embeddings keep initial ranking logits near zero
        nn.init.normal_(self.item_emb.weight, std=0.02)
        nn.init.normal_(self.pos_emb.weight, std=0.02)
        with torch.no_grad():
            self.item_emb.weight[0].zero_()
        self.emb_dropout = nn.Dropout(dropout)
        self.blocks = nn.ModuleList(
            EncoderBlock(dim, n_heads, dropout) for _ in range(n_blocks)
        )
        self.final_ln = nn.LayerNorm(dim)

    def forward(self, item_ids):
        """item_ids: (B, L) long tensor, left-padded with 0, L <= max_len.

        Returns (states, x0): states (B, L, dim) with padding rows zeroed,
        x0 (B, dim) the state at the last (non-padding) position.
        """
        if item_ids.dim() != 2:
            raise ValueError("item_ids must be (batch, length)")
        b, length = item_ids.shape
        if length > self.max_len:
            raise ValueError(f"sequence length {length} exceeds max_len {self.max_len}")
        if int(item_ids.max()) > self.n_items or int(item_ids.min()) < 0:
            raise ValueError("item index out of vocabulary range")
        mask = item_ids > 0
        if not bool(mask.any(dim=1).all()):
            raise ValueError("every sequence needs at least one non-padding item")
        if not bool(mask[:, -1].all()):
            raise ValueError("sequences must be left-padded (last slot is padding)")

        x = self.item_emb(item_ids) * math.sqrt(self.dim)
        x = x + self.pos_emb(torch.arange(length, device=item_ids.device))
        x = x * mask.unsqueeze(-1)
        x = self.emb_dropout(x)
        for block in self.blocks:
            x = block(x, causal=True, key_mask=mask)
            x = x * mask.unsqueeze(-1)
        states = self.final_ln(x) * mask.unsqueeze(-1)
        return states, states[:, -1]
