"""DDPM machinery: the noise schedule plus the chains that run on it.

Steps are 1-indexed as in the usual DDPM notation: ``t`` runs from ``T`` down
to ``1`` during generation and each reverse step produces ``x_{t-1}``.
Schedule arrays are 0-indexed, so ``betas[t - 1]`` is beta_t.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, ContractError, NumericDivergence

VARIANCE_KINDS = ("simple", "posterior")


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray
    variance_kind: str = "posterior"

    def coefficients(self, t: int) -> tuple[float, float, float, float]:
        """(alpha_t, alpha_bar_t, beta_t, sigma_t) as python floats."""
        _check_step(t, self.T)
        i = t - 1
        return (float(self.alphas[i]), float(self.alpha_bars[i]),
                float(self.betas[i]), float(self.sigmas[i]))


def _check_step(t, T):
    if not 1 <= int(t) <= T:
        raise ContractError(f"step index {t} outside [1, {T}]")


def schedule_from_betas(betas, variance_kind: str = "posterior") -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size < 2:
        raise ConfigError("need at least T=2 diffusion steps")
    if not np.all((betas > 0) & (betas < 1)):
        raise ConfigError("every beta must lie strictly inside (0, 1)")
    if variance_kind not in VARIANCE_KINDS:
        raise ConfigError(f"unknown variance_kind {variance_kind!r}")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    if variance_kind == "simple":
        sigmas = np.sqrt(betas)
    else:
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        sigmas = np.sqrt((1.0 - prev) / (1.0 - alpha_bars) * betas)
        sigmas[0] = 0.0
    for arr in (betas, alphas, alpha_bars, sigmas):
        arr.setflags(write=False)
    return NoiseSchedule(betas.size, betas, alphas, alpha_bars, sigmas, variance_kind)


def build_schedule(T: int, beta_start: float, beta_end: float,
                   spacing: str = "linear", variance_kind: str = "posterior") -> NoiseSchedule:
    if int(T) != T or T < 2:
        raise ConfigError(f"T must be an integer >= 2, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if spacing != "linear":
        raise ConfigError(f"unsupported beta spacing {spacing!r}")
    return schedule_from_betas(np.linspace(beta_start, beta_end, int(T)), variance_kind)


def forward_diffuse(x0, t: int, eps, schedule: NoiseSchedule):
    """Closed-form q(x_t | x_0) draw for a given noise sample ``eps``.

    Works on numpy arrays and torch tensors alike. ``t`` may also be a 1-D
    integer tensor of per-sample steps when ``x0`` is a batch.
    """
    if tuple(np.shape(x0)) != tuple(np.shape(eps)):
        raise ContractError(f"x0 shape {tuple(np.shape(x0))} != eps shape {tuple(np.shape(eps))}")
    if torch.is_tensor(t) and t.ndim == 1:
        if t.min() < 1 or t.max() > schedule.T:
            raise ContractError("step index outside [1, T]")
        ab = torch.tensor(np.array(schedule.alpha_bars), dtype=x0.dtype)[t - 1]
        ab = ab.view(-1, *([1] * (x0.ndim - 1)))
        return ab.sqrt() * x0 + (1 - ab).sqrt() * eps
    _check_step(t, schedule.T)
    ab = float(schedule.alpha_bars[int(t) - 1])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def reverse_step(x_t, t: int, eps_pred, schedule: NoiseSchedule, w=None):
    """One ancestral DDPM step producing x_{t-1}; ``w`` is ignored at t = 1."""
    _check_step(t, schedule.T)
    if tuple(np.shape(x_t)) != tuple(np.shape(eps_pred)):
        raise ContractError("x_t and eps_pred shapes differ")
    alpha, alpha_bar, _, sigma = schedule.coefficients(int(t))
    mean = (x_t - (1.0 - alpha) / math.sqrt(1.0 - alpha_bar) * eps_pred) / math.sqrt(alpha)
    if t == 1 or w is None or sigma == 0.0:
        return mean
    if tuple(np.shape(w)) != tuple(np.shape(x_t)):
        raise ContractError("w and x_t shapes differ")
    return mean + sigma * w


def training_loss(eps_true, eps_pred):
    """Mean squared error over every element."""
    if tuple(np.shape(eps_true)) != tuple(np.shape(eps_pred)):
        raise ContractError("eps_true and eps_pred shapes differ")
    if torch.is_tensor(eps_true) or torch.is_tensor(eps_pred):
        return torch.mean((torch.as_tensor(eps_pred) - torch.as_tensor(eps_true)) ** 2)
    diff = np.asarray(eps_pred, dtype=np.float64) - np.asarray(eps_true, dtype=np.float64)
    return float(np.mean(diff ** 2))


@dataclass
class SampleOutput:
    images: torch.Tensor           # (B, C, H, W) final x_0
    attention: np.ndarray | None   # (B, steps, L, N) mean attention, generation order
    steps_run: int
    full_attention: list = field(default_factory=list)


def initial_noise(seed: int, shape) -> tuple[torch.Tensor, torch.Generator]:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(shape, generator=gen), gen


@torch.no_grad()
def sample_batch(model, embeddings, schedule: NoiseSchedule, policy=None, seeds=(0,),
                 categories=None, record: bool = True, max_steps: int | None = None,
                 full_resolution: bool = False) -> SampleOutput:
    """Generate one image per row of ``embeddings`` (B, N, D).

    Each row owns a torch generator seeded with ``seeds[b]``, which supplies
    x_T followed by every ancestral noise draw, so row ``b`` does not depend
    on which other rows share the batch beyond float reduction order.
    ``categories`` (B, N) token categories are required when the policy
    masks summary tokens. ``max_steps`` stops after that many reverse steps
    (early exit for first-step detectors); the returned images are then
    x_{T - max_steps}.
    """
    from .denoiser import AttentionRecorder, as_intercept

    B = embeddings.shape[0]
    if len(seeds) != B:
        raise ContractError(f"{len(seeds)} seeds for a batch of {B}")
    shape = model.image_shape
    streams = [initial_noise(s, shape) for s in seeds]
    x = torch.stack([x for x, _ in streams]).to(embeddings.dtype)
    gens = [g for _, g in streams]
    n_steps = schedule.T if max_steps is None else int(max_steps)
    if not 1 <= n_steps <= schedule.T:
        raise ContractError(f"max_steps must lie in [1, {schedule.T}]")
    recorder = AttentionRecorder(full_resolution=full_resolution) if record else None
    intercept = as_intercept(policy, categories, embeddings.dtype)
    if intercept is not None and intercept.identity:
        intercept = None
    for k in range(n_steps):
        t = schedule.T - k
        if recorder is not None:
            recorder.begin_step(t)
        eps = model.predict_noise(x, t, embeddings, policy=intercept, recorder=recorder)
        if t > 1 and schedule.sigmas[t - 1] > 0:
            w = torch.stack([torch.randn(shape, generator=g) for g in gens]).to(x.dtype)
        else:
            w = None
        x = reverse_step(x, t, eps, schedule, w)
        if not torch.isfinite(x).all():
            raise NumericDivergence("non-finite values during sampling", step=t)
    attention = recorder.stacked() if recorder is not None else None
    full = recorder.full if recorder is not None else []
    return SampleOutput(x, attention, n_steps, full)


def sample(model, embedding, schedule: NoiseSchedule, policy=None, seed: int = 0,
           categories=None, **kwargs):
    """Single-prompt convenience wrapper: returns (image (C,H,W), attention (T,L,N))."""
    if embedding.ndim == 2:
        embedding = embedding.unsqueeze(0)
    if categories is not None:
        categories = np.atleast_2d(categories)
    out = sample_batch(model, embedding, schedule, policy, [seed], categories, **kwargs)
    att = None if out.attention is None else out.attention[0]
    return out.images[0], att
