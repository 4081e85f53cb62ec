"""Temporal-guided content diffusion over per-video frame sequences.

A temporal attention encoder turns the most recent item's frame features
into a contextualized latent z0. A 1-D U-Net over the frame axis, guided by
a recency-weighted visual context vector through cross-attention and by a
learnable timestep embedding, predicts the clean latent from corrupted ones;
the reverse posterior chain then produces the refined frame representation.
"""

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import EncoderBlock, attention
from .schedule import DiffusionSchedule, posterior_step, q_sample


def recency_weights(length: int, gamma: float) -> np.ndarray:
    """Normalized exponential-decay weights over a history of `length` items.

    w_k = exp(-gamma * (length - k)) / sum_j exp(-gamma * (length - j)) for
    k = 1..length: the most recent item gets the largest weight, consecutive
    weights have the exact ratio e^gamma, and gamma=0 is uniform.
    """
    if length < 1:
        raise ValueError(f"history length must be >= 1, got {length}")
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    # one rounding per step keeps every adjacent ratio within a few ULPs of
    # e^gamma; evaluating exp(-gamma * k) directly would not
    decay = math.exp(-float(gamma))
    raw = np.concatenate(([1.0], np.cumprod(np.full(length - 1, decay))))[::-1]
    return raw / raw.sum()


def visual_context(history_visuals, gamma: float):
    """Recency-weighted convex combination of historical global visuals.

    history_visuals: (L, d_v) array or tensor, oldest first. Returns d_v.
    """
    length = history_visuals.shape[0]
    weights = recency_weights(length, gamma)
    if torch.is_tensor(history_visuals):
        w = torch.as_tensor(weights, dtype=history_visuals.dtype,
                            device=history_visuals.device)
        return w @ history_visuals
    return weights.astype(history_visuals.dtype) @ history_visuals


def visual_context_batch(visuals, mask, gamma: float):
    """Batched recency context over left-padded history windows.

    visuals: (B, L, d_v) with zero rows at padding; mask: (B, L) boolean.
    Weight of a real position depends only on its distance from the window
    end, so per-row results match `visual_context` on the unpadded history.
    """
    b, length, _ = visuals.shape
    steps_back = torch.arange(length - 1, -1, -1, dtype=visuals.dtype,
                              device=visuals.device)
    w = torch.exp(-float(gamma) * steps_back).expand(b, length) * mask
    w = w / w.sum(dim=1, keepdim=True)
    return torch.einsum("bl,bld->bd", w, visuals)


def sinusoidal_table(n: int, dim: int) -> torch.Tensor:
    """Classic fixed sin/cos position table, used to initialize the
    learnable timestep embedding."""
    position = torch.arange(n, dtype=torch.float32).unsqueeze(1)
    half = (dim + 1) // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half, 1))
    angles = position * freq
    table = torch.zeros(n, dim)
    table[:, 0::2] = torch.sin(angles[:, : (dim + 1) // 2])
    table[:, 1::2] = torch.cos(angles[:, : dim // 2])
    return table


class TemporalFrameEncoder(nn.Module):
    """Adds learnable frame positions then applies one full self-attention
    block over the frame axis."""

    def __init__(self, n_frames: int, d_v: int, n_heads: int = 2):
        super().__init__()
        self.n_frames = n_frames
        self.pos = nn.Parameter(torch.zeros(n_frames, d_v))
        nn.init.normal_(self.pos, std=0.02)
        self.block = EncoderBlock(d_v, n_heads)

    def forward(self, frames):
        """frames: (B, K, d_v) -> contextualized latent of the same shape."""
        if frames.shape[-2] != self.n_frames:
            raise ValueError(
                f"expected {self.n_frames} frames, got {frames.shape[-2]}"
            )
        return self.block(frames + self.pos)


class ContextCrossAttention(nn.Module):
    """Cross-attention of frame tokens onto the visual context vector.

    The single context vector is expanded to two key/value tokens through
    separate projections so the query actually modulates the mixture.
    """

    N_CONTEXT_TOKENS = 2

    def __init__(self, width: int, cond_dim: int):
        super().__init__()
        self.width = width
        self.to_tokens = nn.Linear(cond_dim, self.N_CONTEXT_TOKENS * width)
        self.ln = nn.LayerNorm(width)
        self.w_q = nn.Linear(width, width)
        self.w_k = nn.Linear(width, width)
        self.w_v = nn.Linear(width, width)
        self.w_out = nn.Linear(width, width)

    def forward(self, tokens, cond):
        """tokens: (B, n, width); cond: (B, cond_dim)."""
        ctx = self.to_tokens(cond).view(-1, self.N_CONTEXT_TOKENS, self.width)
        q = self.w_q(self.ln(tokens))
        out = attention(q, self.w_k(ctx), self.w_v(ctx))
        return tokens + self.w_out(out)


class FrameUNet(nn.Module):
    """1-D U-Net over the frame axis predicting the clean frame latent.

    Two resolution levels (K -> ceil(K/2) -> K), channel widths
    d_v -> 2*d_v -> d_v, skip connection across the downsampling, a
    sinusoidally initialized learnable timestep embedding added at each
    level, and one context cross-attention block per level.
    """

    def __init__(self, d_v: int, n_steps: int, time_dim: int = 32):
        super().__init__()
        self.n_steps = n_steps
        wide = 2 * d_v
        self.t_emb = nn.Embedding(n_steps, time_dim)
        with torch.no_grad():
            self.t_emb.weight.copy_(sinusoidal_table(n_steps, time_dim))
        self.t_mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU())
        self.t_in = nn.Linear(time_dim, wide)
        self.t_mid = nn.Linear(time_dim, wide)

        self.conv_in = nn.Conv1d(d_v, wide, kernel_size=3, padding=1)
        self.xattn_in = ContextCrossAttention(wide, d_v)
        self.conv_down = nn.Conv1d(wide, wide, kernel_size=3, stride=2, padding=1)
        self.conv_mid = nn.Conv1d(wide, wide, kernel_size=3, padding=1)
        self.xattn_mid = ContextCrossAttention(wide, d_v)
        self.conv_fuse = nn.Conv1d(2 * wide, d_v, kernel_size=3, padding=1)
        self.conv_out = nn.Conv1d(d_v, d_v, kernel_size=3, padding=1)

    def _time(self, t, batch: int, ref):
        t_arr = torch.as_tensor(t, dtype=torch.long, device=ref.device).reshape(-1)
        if t_arr.numel() == 1:
            t_arr = t_arr.expand(batch)
        if int(t_arr.min()) < 1 or int(t_arr.max()) > self.n_steps:
            raise ValueError(f"timestep out of range [1, {self.n_steps}]")
        return self.t_mlp(self.t_emb(t_arr - 1))

    def forward(self, z_t, t, c_v):
        """z_t: (B, K, d_v); t: int or (B,) ints in [1, T]; c_v: (B, d_v)."""
        if c_v.shape[-1] != self.conv_in.in_channels:
            raise ValueError("context dimension does not match frame dimension")
        b, n_frames, _ = z_t.shape
        temb = self._time(t, b, z_t)

        h = z_t.transpose(1, 2)                              # (B, C, K)
        h1 = F.silu(self.conv_in(h)) + self.t_in(temb).unsqueeze(-1)
        h1 = self.xattn_in(h1.transpose(1, 2), c_v).transpose(1, 2)

        hd = F.silu(self.conv_down(h1))                      # K -> ceil(K/2)
        hd = F.silu(self.conv_mid(hd) + self.t_mid(temb).unsqueeze(-1))
        hd = self.xattn_mid(hd.transpose(1, 2), c_v).transpose(1, 2)

        if hd.shape[-1] != n_frames:
            hd = F.interpolate(hd, size=n_frames, mode="linear", align_corners=False)
        fused = F.silu(self.conv_fuse(torch.cat([hd, h1], dim=1)))
        return self.conv_out(fused).transpose(1, 2)


class ContentDiffusion(nn.Module):
    """Temporal encoder plus conditional U-Net with reverse-chain refinement."""

    def __init__(self, n_frames: int, d_v: int, n_steps: int,
                 n_heads: int = 2, time_dim: int = 32):
        super().__init__()
        self.encoder = TemporalFrameEncoder(n_frames, d_v, n_heads)
        self.unet = FrameUNet(d_v, n_steps, time_dim)

    def encode(self, frames):
        return self.encoder(frames)

    def denoise(self, z_t, t, c_v):
        """Single clean-latent prediction; deterministic in its inputs."""
        return self.unet(z_t, t, c_v)

    def reverse_chain(self, z_start, c_v, sched: DiffusionSchedule, step_noise):
        """Run t = T..1; step_noise holds the T-1 posterior noises for
        t = T..2 (the final step is deterministic)."""
        z = z_start
        for i, t in enumerate(range(sched.T, 0, -1)):
            z0_hat = self.denoise(z, t, c_v)
            eps = step_noise[i] if t > 1 else None
            z = posterior_step(z, z0_hat, t, sched, eps)
        return z

    def refine(self, frames, c_v, sched: DiffusionSchedule, rng: torch.Generator):
        """Full refinement: encode frames, then denoise from pure noise.

        Draw order on `rng`: the chain start (B, K, d_v), then one stacked
        tensor of T-1 step noises.
        """
        z0 = self.encode(frames)
        z_start = torch.randn(z0.shape, generator=rng, dtype=z0.dtype)
        step_noise = torch.randn((max(sched.T - 1, 0),) + tuple(z0.shape),
                                 generator=rng, dtype=z0.dtype)
        return self.reverse_chain(z_start, c_v, sched, step_noise)

    def training_loss(self, frames, c_v, sched: DiffusionSchedule, t, eps,
                      detach_target: bool = False):
        """Mean squared error between z0 and the one-step prediction at the
        sampled timestep. Returns (loss, z_hat)."""
        z0 = self.encode(frames)
        if detach_target:
            z0 = z0.detach()
        z_t = q_sample(z0, t, eps, sched)
        z_hat = self.denoise(z_t, t, c_v)
        return torch.mean((z0 - z_hat) ** 2), z_hat
