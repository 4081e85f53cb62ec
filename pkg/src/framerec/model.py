"""Composite recommender: sequential backbone, content diffusion over frames,
and blind preference denoising, with the ablation variants.

Variants:
  * full    — refined frames condition the preference denoiser; both
              reconstruction losses are active.
  * no_tcd  — the condition uses the raw frame features (projected) and the
              frame reconstruction loss is dropped.
  * no_npd  — the denoiser is replaced by a two-layer MLP fusing
              [x0; pooled visual tokens; text token]; the preference
              reconstruction loss is dropped.
  * no_both — both substitutions.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import SequenceEncoder
from .config import RunConfig
from .npd import PreferenceDenoiser
from .schedule import DiffusionSchedule, q_sample
from .seeds import derive_seed
from .tcd import ContentDiffusion, visual_context_batch

VARIANTS = ("full", "no_tcd", "no_npd", "no_both")


class FusionMLP(nn.Module):
    """Two-layer multimodal fusion used by the no_npd / no_both variants."""

    def __init__(self, dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(3 * dim, dim), nn.GELU(), nn.Linear(dim, dim))

    def forward(self, x0, cond):
        pooled = cond[:, :-1].mean(dim=1)
        return self.net(torch.cat([x0, pooled, cond[:, -1]], dim=-1))


class RecModel(nn.Module):
    """All learnable parameters of one run, plus the variant wiring.

    Every variant instantiates the same module set (so a given seed yields
    the same initialization everywhere); the variant only changes which
    modules the forward passes touch.
    """

    def __init__(self, n_items: int, n_frames: int, d_v: int, d_h: int, cfg: RunConfig):
        super().__init__()
        if cfg.train.variant not in VARIANTS:
            raise ValueError(f"unknown variant {cfg.train.variant!r}")
        self.variant = cfg.train.variant
        self.gamma = cfg.train.gamma
        self.detach_target = cfg.tcd.detach_target
        self.train_refine_mode = cfg.tcd.train_refine_mode
        self.residual = cfg.npd.residual
        self.n_frames = n_frames
        self.encoder = SequenceEncoder(
            n_items, dim=cfg.backbone.dim, n_blocks=cfg.backbone.blocks,
            n_heads=cfg.backbone.heads, max_len=cfg.backbone.max_len,
            dropout=cfg.backbone.dropout)
        self.content = ContentDiffusion(
            n_frames, d_v, n_steps=cfg.train.T, n_heads=cfg.tcd.heads,
            time_dim=cfg.tcd.time_dim)
        self.pref = PreferenceDenoiser(
            cfg.backbone.dim, d_v, d_h, n_blocks=cfg.npd.blocks, n_heads=cfg.npd.heads)
        self.fusion = FusionMLP(cfg.backbone.dim)

    @property
    def uses_tcd(self):
        return self.variant in ("full", "no_npd")

    @property
    def uses_npd(self):
        return self.variant in ("full", "no_tcd")

    def item_scores(self, rep):
        """Dot products against every non-padding item embedding row."""
        return rep @ self.encoder.item_emb.weight[1:].T

    def training_parts(self, batch, sched: DiffusionSchedule, rng, t_sampler):
        """One forward pass over a training batch.

        batch keys: seq (B, L) long, target (B,) long vocab indices,
        hist_visual (B, L, d_v), frames (B, K, d_v), text (B, d_h).
        Returns (loss_rec, loss_tcd, loss_npd, rep); dropped losses are
        zero tensors.
        """
        seq, target = batch["seq"], batch["target"]
        b = seq.shape[0]
        zeros = torch.zeros((), dtype=batch["frames"].dtype)

        states, x0 = self.encoder(seq)
        c_v = visual_context_batch(batch["hist_visual"], (seq > 0).to(x0.dtype), self.gamma)

        loss_tcd = zeros
        if self.uses_tcd:
            t_z = t_sampler(b, rng)
            eps_z = torch.randn(batch["frames"].shape, generator=rng, dtype=x0.dtype)
            loss_tcd, z_hat = self.content.training_loss(
                batch["frames"], c_v, sched, t_z, eps_z,
                detach_target=self.detach_target)
            if self.train_refine_mode == "full_chain":
                z_hat = self.content.refine(batch["frames"], c_v, sched, rng)
            cond_frames = z_hat
        else:
            cond_frames = batch["frames"]

        cond = self.pref.build_condition(cond_frames, batch["text"])

        loss_npd = zeros
        if self.uses_npd:
            t_x = t_sampler(b, rng)
            eps_x = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
            loss_npd, x_hat = self.pref.training_loss(x0, cond, sched, t_x, eps_x)
            rep = x0 + x_hat if self.residual else x_hat
        else:
            rep = self.fusion(x0, cond)

        scores = self.item_scores(rep)
        loss_rec = F.cross_entropy(scores, target - 1)
        return loss_rec, loss_tcd, loss_npd, rep

    def eval_representation(self, batch, sched: DiffusionSchedule, noise,
                            npd_start: str = "from_corrupted"):
        """Full-chain inference for ranking.

        noise: dict of pre-drawn tensors (see evaluation.draw_eval_noise);
        per-user draws keep evaluation independent of batch composition.
        Returns (rep, frame_latents) where frame_latents is the refined
        (or raw, for no_tcd variants) frame representation used in the
        condition.
        """
        seq = batch["seq"]
        states, x0 = self.encoder(seq)
        c_v = visual_context_batch(batch["hist_visual"], (seq > 0).to(x0.dtype), self.gamma)

        if self.uses_tcd:
            self.content.encode(batch["frames"])  # latent shape/contract check
            frame_latents = self.content.reverse_chain(
                noise["z_start"], c_v, sched, noise["z_steps"])
        else:
            frame_latents = batch["frames"]
        cond = self.pref.build_condition(frame_latents, batch["text"])

        if self.uses_npd:
            if npd_start == "from_corrupted":
                x_start = q_sample(x0, sched.T, noise["x_corrupt"], sched)
            elif npd_start == "from_noise":
                x_start = noise["x_start"]
            else:
                raise ValueError(f"unknown npd start mode {npd_start!r}")
            x_hat = self.pref.reverse_chain(x_start, cond, sched, noise["x_steps"])
            rep = x0 + x_hat if self.residual else x_hat
        else:
            rep = self.fusion(x0, cond)
        return rep, frame_latents


def build_model(cfg: RunConfig, n_items: int, n_frames: int, d_v: int, d_h: int) -> RecModel:
    """Construct a RecModel with deterministic initialization from the run
    seed's `init` sub-stream."""
    torch.manual_seed(derive_seed(cfg.train.seed, "init"))
    return RecModel(n_items, n_frames, d_v, d_h, cfg)
