"""Noise-prediction network with instrumented multi-head cross attention.

Every cross-attention layer exposes one interception point: the per-head
logits ``QK^T / sqrt(d)`` right before the softmax. A :class:`MitigationPolicy`
rescales the ``<begin>`` logit and/or replaces selected logits by ``-inf``
there, and an optional recorder receives the resulting attention
probabilities.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ContractError, NumericDivergence
from .text import SUMMARY

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MitigationPolicy:
    C: float = 1.0
    mask_summary: bool = False
    extra_masked_tokens: frozenset = frozenset()
    active_layers: frozenset | None = None   # 1-based layer indices; None means all

    def __post_init__(self):
        if not self.C > 0:
            raise ConfigError(f"rescale factor C must be positive, got {self.C}")
        object.__setattr__(self, "extra_masked_tokens", frozenset(int(i) for i in self.extra_masked_tokens))
        if 0 in self.extra_masked_tokens:
            raise ConfigError("the <begin> token (position 0) cannot be masked")
        if self.active_layers is not None:
            object.__setattr__(self, "active_layers", frozenset(int(i) for i in self.active_layers))

    @property
    def is_identity(self) -> bool:
        return self.C == 1.0 and not self.mask_summary and not self.extra_masked_tokens

    def applies_to(self, layer_index: int) -> bool:
        return self.active_layers is None or layer_index in self.active_layers

    def masked_positions(self, categories) -> np.ndarray:
        """Boolean mask of positions whose logit becomes -inf; rows follow ``categories``."""
        cats = np.atleast_2d(np.asarray(categories))
        mask = np.zeros(cats.shape, dtype=bool)
        if self.mask_summary:
            mask |= cats == SUMMARY
        for i in self.extra_masked_tokens:
            if i >= cats.shape[1]:
                raise ContractError(f"masked position {i} outside N={cats.shape[1]}")
            mask[:, i] = True
        return mask

    def echo(self) -> dict:
        return {
            "C": self.C,
            "mask_summary": self.mask_summary,
            "extra_masked_tokens": sorted(self.extra_masked_tokens),
            "active_layers": None if self.active_layers is None else sorted(self.active_layers),
        }


IDENTITY = MitigationPolicy()


def intercept_logits(s, policy: MitigationPolicy, categories=None):
    """Apply the policy to one logit vector ``s`` (length N, position 0 = <begin>).

    ``categories`` labels each position; it is only needed when the policy
    masks summary tokens.
    """
    s = np.asarray(s, dtype=np.float64)
    if policy.is_identity:
        return s.copy()
    if policy.mask_summary and categories is None:
        raise ContractError("masking summary tokens needs the token categories")
    if categories is None:
        categories = np.zeros(s.shape[-1], dtype=np.int8)
    out = s.copy()
    if policy.C != 1.0 and s[0] < 0:
        log.debug("begin-token logit %.4g < 0: rescaling by C=%g lowers its attention", s[0], policy.C)
    out[0] = policy.C * s[0]
    out[policy.masked_positions(categories)[0]] = -np.inf
    return out


def softmax(s, axis=-1):
    """Softmax with max-subtraction over finite entries; -inf maps to exactly 0."""
    s = np.asarray(s, dtype=np.float64)
    m = np.max(np.where(np.isfinite(s), s, -np.inf), axis=axis, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=axis, keepdims=True)


def analytic_dC_gradient(s, C: float) -> np.ndarray:
    """d softmax(s')_i / dC where s' = (C*s_0, s_1, ..., s_{N-1}).

    Non-beginning entries are ``-s_0 e^{C s_0} e^{s_i} / Z^2`` and the
    beginning entry is ``s_0 p_0 (1 - p_0)``, so the vector sums to zero.
    """
    s = np.asarray(s, dtype=np.float64)
    scaled = s.copy()
    scaled[0] = C * s[0]
    p = softmax(scaled)
    grad = -s[0] * p[0] * p
    grad[0] = s[0] * p[0] * (1.0 - p[0])
    return grad


class LogitIntercept:
    """A policy bound to concrete token categories, ready for the torch fast path.

    Without ``categories`` (only allowed when summary masking is off) the
    scale/bias rows are built lazily from the first logits seen.
    """

    def __init__(self, policy: MitigationPolicy, categories=None, dtype=torch.float32):
        self.policy = policy
        self.identity = policy.is_identity
        self.dtype = dtype
        self.scale = self.bias = None
        self._fused = {}
        if self.identity:
            return
        if policy.mask_summary and categories is None:
            raise ContractError("masking summary tokens needs the token categories")
        if categories is not None:
            self._build(np.atleast_2d(np.asarray(categories)))

    def _build(self, cats):
        B, N = cats.shape
        scale = torch.ones(B, 1, 1, N, dtype=self.dtype)
        scale[..., 0] = self.policy.C
        bias = torch.zeros(B, 1, 1, N, dtype=self.dtype)
        bias[torch.as_tensor(self.policy.masked_positions(cats)).view(B, 1, 1, N)] = -math.inf
        self.scale, self.bias = scale, bias

    @classmethod
    def per_row(cls, masks, C: float = 1.0, dtype=torch.float32):
        """Intercept masking a different set of positions in each batch row."""
        masks = np.atleast_2d(np.asarray(masks, dtype=bool))
        if masks[:, 0].any():
            raise ConfigError("the <begin> token (position 0) cannot be masked")
        self = cls(MitigationPolicy(C=C), dtype=dtype)
        self.identity = False
        B, N = masks.shape
        self.scale = torch.ones(B, 1, 1, N, dtype=dtype)
        self.scale[..., 0] = C
        self.bias = torch.zeros(B, 1, 1, N, dtype=dtype)
        self.bias[torch.as_tensor(masks).view(B, 1, 1, N)] = -math.inf
        return self

    def applies_to(self, layer_index):
        return not self.identity and self.policy.applies_to(layer_index)

    def __call__(self, logits):
        # logits: (B, H, Q, N), already divided by sqrt(d)
        return self.fused(logits, 1.0)

    def fused(self, raw, divisor):
        """Intercepted ``raw / divisor`` in one kernel; the division is folded into the scale row."""
        if self.scale is None:
            self._build(np.zeros((1, raw.shape[-1]), dtype=np.int8))
        if self.policy.C != 1.0 and log.isEnabledFor(logging.DEBUG):
            neg = int((raw[..., 0] < 0).sum())
            if neg:
                log.debug("%d rows with negative begin-token logit under C=%g", neg, self.policy.C)
        scale = self._fused.get(divisor)
        if scale is None:
            scale = self._fused[divisor] = self.scale / divisor
        return torch.addcmul(self.bias, raw, scale)


def as_intercept(policy, categories=None, dtype=torch.float32):
    if policy is None or isinstance(policy, LogitIntercept):
        return policy
    return LogitIntercept(policy, categories, dtype)


class AttentionRecorder:
    """Collects the head- and row-averaged attention vector per (step, layer)."""

    def __init__(self, full_resolution: bool = False):
        self.full_resolution = full_resolution
        self.steps: list[list[torch.Tensor]] = []
        self.step_ids: list[int] = []
        self.full: list[list[torch.Tensor]] = []

    def begin_step(self, t: int):
        self.steps.append([])
        self.step_ids.append(int(t))
        if self.full_resolution:
            self.full.append([])

    def record(self, layer_index: int, probs: torch.Tensor):
        if not self.steps:
            self.begin_step(-1)
        self.steps[-1].append(probs.detach().mean(dim=(1, 2)))
        if self.full_resolution:
            self.full[-1].append(probs.detach().clone())

    def stacked(self) -> np.ndarray:
        """(B, steps, L, N) float64 array in generation order."""
        per_step = [torch.stack(layers, dim=1) for layers in self.steps]
        return torch.stack(per_step, dim=1).double().numpy()


class AttentionTap:
    """Keeps references to the raw attention tensors of one forward pass."""

    def __init__(self):
        self.probs: list[torch.Tensor] = []

    def begin_step(self, t):
        pass

    def record(self, layer_index, probs):
        self.probs.append(probs)


@dataclass
class DenoiserConfig:
    channels: int = 3
    image_size: int = 16
    patch: int = 2
    width: int = 64
    layers: int = 4
    heads: int = 2
    text_width: int = 64
    self_attention: bool = True
    prediction: str = "eps"        # network output: "eps" directly, or "v" converted to eps

    def __post_init__(self):
        if self.prediction not in ("eps", "v"):
            raise ConfigError(f"unknown prediction target {self.prediction!r}")
        if self.image_size % self.patch:
            raise ConfigError("image_size must be divisible by patch")
        if self.width % self.heads:
            raise ConfigError("width must be divisible by heads")


class CrossAttention(nn.Module):
    def __init__(self, layer_index: int, width: int, text_width: int, heads: int):
        super().__init__()
        self.layer_index = layer_index
        self.heads = heads
        self.head_dim = width // heads
        self.norm = nn.LayerNorm(width)
        self.q = nn.Linear(width, width, bias=False)
        self.k = nn.Linear(text_width, width, bias=False)
        self.v = nn.Linear(text_width, width, bias=False)
        self.out = nn.Linear(width, width)

    def _qk(self, z, e_c):
        B, Q, _ = z.shape
        q = self.q(self.norm(z)).view(B, Q, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(e_c).view(B, -1, self.heads, self.head_dim).transpose(1, 2)
        return q @ k.transpose(-1, -2)

    def logits(self, z, e_c):
        return self._qk(z, e_c) / math.sqrt(self.head_dim)

    def forward(self, z, e_c, intercept=None, recorder=None):
        B, Q, W = z.shape
        if intercept is not None and intercept.applies_to(self.layer_index):
            s = intercept.fused(self._qk(z, e_c), math.sqrt(self.head_dim))
        else:
            s = self._qk(z, e_c) / math.sqrt(self.head_dim)
        probs = torch.softmax(s, dim=-1)
        if recorder is not None:
            recorder.record(self.layer_index, probs)
        v = self.v(e_c).view(B, -1, self.heads, self.head_dim).transpose(1, 2)
        out = (probs @ v).transpose(1, 2).reshape(B, Q, W)
        return self.out(out)


class LocalMix(nn.Module):
    """Depthwise 3x3 convolution over the patch grid followed by a pointwise MLP."""

    def __init__(self, width, grid):
        super().__init__()
        self.grid = grid
        self.norm = nn.LayerNorm(width)
        self.dw = nn.Conv2d(width, width, 3, padding=1, groups=width)
        self.mlp = nn.Sequential(nn.Linear(width, 2 * width), nn.GELU(), nn.Linear(2 * width, width))

    def forward(self, z):
        B, Q, W = z.shape
        h = self.norm(z).transpose(1, 2).reshape(B, W, self.grid, self.grid)
        h = self.dw(h).reshape(B, W, Q).transpose(1, 2)
        return self.mlp(h)


class PatchAttention(nn.Module):
    """Self attention among image patches (not instrumented)."""

    def __init__(self, width, heads):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width, bias=False)
        self.out = nn.Linear(width, width)

    def forward(self, z):
        B, Q, W = z.shape
        q, k, v = self.qkv(self.norm(z)).view(B, Q, 3, self.heads, W // self.heads).permute(2, 0, 3, 1, 4)
        h = F.scaled_dot_product_attention(q, k, v)
        return self.out(h.transpose(1, 2).reshape(B, Q, W))


class Block(nn.Module):
    def __init__(self, layer_index, cfg: DenoiserConfig, grid):
        super().__init__()
        self.time = nn.Linear(cfg.width, cfg.width)
        self.mix = LocalMix(cfg.width, grid)
        self.attn = PatchAttention(cfg.width, cfg.heads) if cfg.self_attention else None
        self.cross = CrossAttention(layer_index, cfg.width, cfg.text_width, cfg.heads)

    def forward(self, z, temb, e_c, intercept=None, recorder=None):
        z = z + self.time(temb).unsqueeze(1)
        z = z + self.mix(z)
        if self.attn is not None:
            z = z + self.attn(z)
        return z + self.cross(z, e_c, intercept, recorder)


def timestep_embedding(t, dim, max_period=10000.0):
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float().unsqueeze(-1) * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class Denoiser(nn.Module):
    """Flat stack of residual blocks, each ending in an instrumented cross attention."""

    def __init__(self, cfg: DenoiserConfig | None = None, alpha_bars=None):
        super().__init__()
        cfg = cfg or DenoiserConfig()
        self.cfg = cfg
        if cfg.prediction == "v":
            if alpha_bars is None:
                raise ConfigError("v prediction needs the schedule's alpha_bars")
            ab = torch.tensor(np.asarray(alpha_bars, dtype=np.float64))
            self.register_buffer("sqrt_ab", ab.sqrt().float(), persistent=False)
            self.register_buffer("sqrt_1mab", (1 - ab).sqrt().float(), persistent=False)
        self.grid = cfg.image_size // cfg.patch
        self.embed = nn.Conv2d(cfg.channels, cfg.width, cfg.patch, stride=cfg.patch)
        self.pos = nn.Parameter(torch.randn(self.grid * self.grid, cfg.width) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(cfg.width, cfg.width), nn.SiLU(), nn.Linear(cfg.width, cfg.width))
        self.blocks = nn.ModuleList(Block(i + 1, cfg, self.grid) for i in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.width)
        self.head = nn.Linear(cfg.width, cfg.channels * cfg.patch * cfg.patch)
        self.calls = 0

    @property
    def image_shape(self):
        return (self.cfg.channels, self.cfg.image_size, self.cfg.image_size)

    @property
    def n_layers(self):
        return self.cfg.layers

    def forward(self, x_t, t, e_c, intercept=None, recorder=None):
        B = x_t.shape[0]
        if not torch.is_tensor(t) or t.ndim == 0:
            t = torch.full((B,), int(t))
        temb = self.time_mlp(timestep_embedding(t, self.cfg.width).to(x_t.dtype))
        z = self.embed(x_t).flatten(2).transpose(1, 2) + self.pos
        for blk in self.blocks:
            z = blk(z, temb, e_c, intercept, recorder)
        out = self.head(self.norm(z))   # (B, Q, C*p*p)
        p, g = self.cfg.patch, self.grid
        out = out.transpose(1, 2).reshape(B, self.cfg.channels * p * p, g, g)
        out = F.pixel_shuffle(out, p)
        if self.cfg.prediction == "v":
            # eps = sqrt(ab) v + sqrt(1 - ab) x_t
            a = self.sqrt_ab.to(x_t.dtype)[t - 1].view(B, 1, 1, 1)
            b = self.sqrt_1mab.to(x_t.dtype)[t - 1].view(B, 1, 1, 1)
            out = a * out + b * x_t
        return out

    def predict_noise(self, x_t, t, e_c, policy=None, recorder=None, categories=None):
        """eps_theta(x_t, t, c); ``policy`` may be a MitigationPolicy or a prepared LogitIntercept."""
        self.calls += 1
        squeeze = x_t.ndim == 3
        if squeeze:
            x_t = x_t.unsqueeze(0)
        if e_c.ndim == 2:
            e_c = e_c.unsqueeze(0)
        if e_c.shape[0] != x_t.shape[0]:
            e_c = e_c.expand(x_t.shape[0], -1, -1)
        if tuple(x_t.shape[1:]) != self.image_shape:
            raise ContractError(f"image shape {tuple(x_t.shape[1:])} != {self.image_shape}")
        intercept = as_intercept(policy, categories, x_t.dtype)
        if intercept is not None and intercept.identity:
            intercept = None
        out = self(x_t, t, e_c, intercept, recorder)
        if not torch.isfinite(out).all():
            raise NumericDivergence("non-finite noise prediction", step=t if isinstance(t, int) else None)
        return out[0] if squeeze else out
