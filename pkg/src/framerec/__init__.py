"""framerec: hierarchical diffusion denoising for micro-video sequential
recommendation.

A self-attention sequential backbone produces an initial preference vector;
a temporal U-Net diffusion module refines the newest item's frame features
under a recency-weighted visual context; a blind (timestep-free) denoiser
recovers the final preference under a fixed multimodal condition, and
recommendations rank items by dot product against the item embeddings.
"""

from .config import RunConfig, default_config, parse_config
from .data import (FeatureStore, InteractionRecord, SplitDataset, SynthConfig,
                   four_core_filter, inject_noise, leave_one_out_split,
                   load_features, parse_interactions, save_features,
                   synth_generate)
from .evaluation import EvalReport, evaluate, score_items, topk_metrics
from .experiments import (ExperimentPlan, apply_variant, export_embeddings,
                          run_ablation, run_noise_sweep, run_sensitivity)
from .model import RecModel, build_model
from .npd import PreferenceDenoiser
from .schedule import DiffusionSchedule, build_schedule, posterior_step, q_sample, schedule_from_betas
from .tcd import ContentDiffusion, recency_weights, visual_context
from .training import FitResult, fit, rec_loss, sample_timestep, total_loss

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "default_config", "parse_config",
    "FeatureStore", "InteractionRecord", "SplitDataset", "SynthConfig",
    "four_core_filter", "inject_noise", "leave_one_out_split",
    "load_features", "parse_interactions", "save_features", "synth_generate",
    "EvalReport", "evaluate", "score_items", "topk_metrics",
    "ExperimentPlan", "apply_variant", "export_embeddings",
    "run_ablation", "run_noise_sweep", "run_sensitivity",
    "RecModel", "build_model", "PreferenceDenoiser",
    "DiffusionSchedule", "build_schedule", "posterior_step", "q_sample",
    "schedule_from_betas",
    "ContentDiffusion", "recency_weights", "visual_context",
    "FitResult", "fit", "rec_loss", "sample_timestep", "total_loss",
    "__version__",
]
