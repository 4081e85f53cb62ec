"""DDPM variance schedule with closed-form forward sampling and the
x0-parameterized reverse posterior step.

One schedule instance is shared by both diffusion modules (frame latents and
preference latents). Tables are float64 numpy arrays; the sampling helpers
pull coefficients out as plain Python floats (or float64 arrays for batched
timesteps), so they work on numpy arrays and torch tensors alike without
promoting the latent dtype.

Timesteps are 1-based in every public signature: t ranges over [1, T],
``alpha_bar[t-1]`` stores the cumulative product up to t, and the implicit
``alpha_bar_0 == 1`` never appears in storage.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class DiffusionSchedule:
    """Precomputed noise tables for a T-step diffusion process.

    beta[t-1] is the per-step noise variance, alpha = 1 - beta,
    alpha_bar the cumulative product of alpha, posterior_var the exact
    DDPM reverse-posterior variance beta_t * (1 - abar_{t-1}) / (1 - abar_t)
    (zero at t=1), and sigma its square root.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray
    sigma: np.ndarray


def schedule_from_betas(beta) -> DiffusionSchedule:
    """Build the derived tables from an explicit per-step beta array."""
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size == 0:
        raise ValueError("beta must be a non-empty 1-D array")
    if np.any(beta <= 0.0) or np.any(beta >= 1.0):
        raise ValueError("every beta must lie strictly inside (0, 1)")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    # alpha_bar_0 == 1 makes the first posterior variance exactly zero.
    alpha_bar_prev = np.concatenate(([1.0], alpha_bar[:-1]))
    posterior_var = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    sigma = np.sqrt(posterior_var)
    return DiffusionSchedule(
        T=int(beta.size),
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        posterior_var=posterior_var,
        sigma=sigma,
    )


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear beta schedule over T steps.

    Raises ValueError for T < 1 or betas outside (0, 1) or a decreasing range.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    return schedule_from_betas(np.linspace(beta_start, beta_end, T))


def _check_t(t, T: int):
    """Validate a scalar or 1-D integer timestep against [1, T]."""
    t_arr = np.asarray(t)
    if not np.issubdtype(t_arr.dtype, np.integer):
        raise ValueError(f"timestep must be integer, got dtype {t_arr.dtype}")
    if np.any(t_arr < 1) or np.any(t_arr > T):
        raise ValueError(f"timestep {t} out of range [1, {T}]")
    return t_arr


def _like(values: np.ndarray, x):
    """Reshape per-example coefficients (B,) to broadcast against x (B, ...)."""
    shape = (-1,) + (1,) * (x.ndim - 1)
    if torch.is_tensor(x):
        return torch.as_tensor(values, dtype=x.dtype, device=x.device).reshape(shape)
    return values.reshape(shape).astype(x.dtype, copy=False)


def q_sample(x0, t, eps, sched: DiffusionSchedule):
    """Closed-form forward sample: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.

    t may be a scalar (one timestep for the whole tensor) or a 1-D array of
    per-row timesteps matching x0's leading dimension. eps must have x0's
    shape.
    """
    t_arr = _check_t(t, sched.T)
    if tuple(np.shape(eps)) != tuple(np.shape(x0)):
        raise ValueError(
            f"eps shape {tuple(np.shape(eps))} != x0 shape {tuple(np.shape(x0))}"
        )
    if t_arr.ndim == 0:
        abar = float(sched.alpha_bar[int(t_arr) - 1])
        return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps
    if t_arr.ndim != 1 or t_arr.shape[0] != np.shape(x0)[0]:
        raise ValueError("per-example t must be 1-D with one entry per row of x0")
    abar = sched.alpha_bar[t_arr - 1]
    return _like(np.sqrt(abar), x0) * x0 + _like(np.sqrt(1.0 - abar), x0) * eps


def posterior_step(x_t, x0_hat, t: int, sched: DiffusionSchedule, eps=None):
    """One reverse step x_t -> x_{t-1} from the clean-latent estimate x0_hat.

    Returns mu + sigma_t * eps with
    mu = sqrt(abar_{t-1}) * beta_t / (1 - abar_t) * x0_hat
       + sqrt(alpha_t) * (1 - abar_{t-1}) / (1 - abar_t) * x_t.

    At t=1 the posterior variance is zero and mu collapses to x0_hat, so the
    result is exactly x0_hat (eps is ignored). eps=None means a noiseless
    (mean-only) step at any t.
    """
    t = int(_check_t(t, sched.T))
    if tuple(np.shape(x0_hat)) != tuple(np.shape(x_t)):
        raise ValueError(
            f"x0_hat shape {tuple(np.shape(x0_hat))} != x_t shape {tuple(np.shape(x_t))}"
        )
    if t == 1:
        return x0_hat.clone() if torch.is_tensor(x0_hat) else np.array(x0_hat, copy=True)
    abar_t = float(sched.alpha_bar[t - 1])
    abar_prev = float(sched.alpha_bar[t - 2])
    coef_x0 = math.sqrt(abar_prev) * float(sched.beta[t - 1]) / (1.0 - abar_t)
    coef_xt = math.sqrt(float(sched.alpha[t - 1])) * (1.0 - abar_prev) / (1.0 - abar_t)
    mean = coef_x0 * x0_hat + coef_xt * x_t
    if eps is None:
        return mean
    if tuple(np.shape(eps)) != tuple(np.shape(x_t)):
        raise ValueError("eps shape does not match x_t")
    return mean + float(sched.sigma[t - 1]) * eps
