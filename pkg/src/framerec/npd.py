"""Blind (timestep-free) preference denoising under a fixed multimodal
condition.

The denoiser is a self-attention stack over the token set {noisy preference}
∪ {projected refined frames, projected text}. By construction it has no
timestep embedding and its forward signature carries no step argument: the
reverse chain's step counter lives entirely in the sampler.
"""

import torch
import torch.nn as nn

from .backbone import EncoderBlock
from .schedule import DiffusionSchedule, posterior_step, q_sample

RECOVER_MODES = ("from_noise", "from_corrupted")


class PreferenceDenoiser(nn.Module):
    """Timestep-agnostic denoiser g(x_t, c_m) -> x0_hat."""

    def __init__(self, dim: int, d_v: int, d_h: int, n_blocks: int = 2, n_heads: int = 2):
        super().__init__()
        self.dim = dim
        self.proj_frames = nn.Linear(d_v, dim)
        self.proj_text = nn.Linear(d_h, dim)
        self.blocks = nn.ModuleList(EncoderBlock(dim, n_heads) for _ in range(n_blocks))
        self.final_ln = nn.LayerNorm(dim)

    def build_condition(self, frame_latents, text):
        """Project K frame rows and the text vector into the model dimension.

        frame_latents: (B, K, d_v); text: (B, d_h). Returns (B, K+1, dim)
        with token order [frame 1 .. frame K, text]; the condition stays
        fixed across every step of one reverse chain.
        """
        if frame_latents.dim() != 3:
            raise ValueError("frame_latents must be (batch, K, d_v)")
        if text.shape[-1] != self.proj_text.in_features:
            raise ValueError(
                f"text dimension {text.shape[-1]} != {self.proj_text.in_features}"
            )
        frames = self.proj_frames(frame_latents)
        return torch.cat([frames, self.proj_text(text).unsqueeze(1)], dim=1)

    def blind_denoise(self, x_t, cond):
        """Predict the clean preference from (x_t, condition tokens) only.

        x_t: (B, dim); cond: (B, M, dim). There is no timestep argument:
        the network must infer the corruption level from the inputs.
        """
        if x_t.shape[-1] != self.dim or cond.shape[-1] != self.dim:
            raise ValueError("token dimension mismatch")
        tokens = torch.cat([x_t.unsqueeze(1), cond], dim=1)
        for block in self.blocks:
            tokens = block(tokens)
        return self.final_ln(tokens)[:, 0]

    def reverse_chain(self, x_start, cond, sched: DiffusionSchedule, step_noise):
        x = x_start
        for i, t in enumerate(range(sched.T, 0, -1)):
            x0_hat = self.blind_denoise(x, cond)
            eps = step_noise[i] if t > 1 else None
            x = posterior_step(x, x0_hat, t, sched, eps)
        return x

    def recover(self, x0, cond, sched: DiffusionSchedule, rng: torch.Generator,
                mode: str = "from_corrupted"):
        """Run the full reverse chain and return the recovered preference.

        from_noise starts at x_T ~ N(0, I); from_corrupted starts at
        q_sample(x0, T, eps). Draw order on `rng`: the start tensor (B, dim),
        then one stacked tensor of T-1 step noises.
        """
        if mode not in RECOVER_MODES:
            raise ValueError(f"mode must be one of {RECOVER_MODES}, got {mode!r}")
        start_eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
        if mode == "from_corrupted":
            x_start = q_sample(x0, sched.T, start_eps, sched)
        else:
            x_start = start_eps
        step_noise = torch.randn((max(sched.T - 1, 0),) + tuple(x0.shape),
                                 generator=rng, dtype=x0.dtype)
        return self.reverse_chain(x_start, cond, sched, step_noise)

    def training_loss(self, x0, cond, sched: DiffusionSchedule, t, eps):
        """Single-timestep reconstruction loss: one q_sample, one denoiser
        call. Returns (loss, x_hat)."""
        x_t = q_sample(x0, t, eps, sched)
        x_hat = self.blind_denoise(x_t, cond)
        return torch.mean((x0 - x_hat) ** 2), x_hat
