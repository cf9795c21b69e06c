"""Seeded training loop with optional entropy filtering; checkpoint I/O lives on Bundle."""
from __future__ import annotations

import hashlib
import io
import logging
import math
import pickle
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import LabConfig, from_dict
from .data import CorpusManifest, corpus_arrays
from .denoiser import AttentionTap, Denoiser, DenoiserConfig, LogitIntercept
from .diffusion import NoiseSchedule, build_schedule, forward_diffuse, sample_batch
from .errors import ConfigError, ContractError, NumericDivergence
from .mitigation import StepThresholds, batch_attention_entropy, keep_mask
from .text import CausalTextEncoder, TokenizedPrompt, Vocabulary, tokenize
from .data import caption_space

log = logging.getLogger(__name__)


def vocabulary_for_grammar() -> Vocabulary:
    return Vocabulary.from_captions(caption_space())


class Bundle:
    """Everything a checkpoint holds: the two networks plus what they were built from."""

    def __init__(self, cfg: LabConfig, vocab: Vocabulary | None = None, seed: int | None = None):
        self.cfg = cfg
        self.vocab = vocab or vocabulary_for_grammar()
        m = cfg.model
        torch.manual_seed(cfg.seed if seed is None else seed)
        self.encoder = CausalTextEncoder(len(self.vocab), m.N, m.width, m.text_layers, m.text_heads)
        d = cfg.diffusion
        self.schedule: NoiseSchedule = build_schedule(d.T, d.beta_start, d.beta_end, d.spacing, d.variance_kind)
        self.denoiser = Denoiser(DenoiserConfig(
            channels=3, image_size=cfg.data.image_size, patch=m.patch, width=m.width,
            layers=m.layers, heads=m.heads, text_width=m.width, self_attention=m.self_attention,
            prediction=m.prediction), self.schedule.alpha_bars)
        self.trained_steps = 0
        self.history: dict = {}

    @property
    def N(self):
        return self.cfg.model.N

    @property
    def model_id(self) -> str:
        h = hashlib.sha256()
        for module in (self.encoder, self.denoiser):
            for name, p in module.state_dict().items():
                h.update(name.encode())
                h.update(p.detach().contiguous().numpy().tobytes())
        return h.hexdigest()[:16]

    def tokenize(self, captions) -> list[TokenizedPrompt]:
        return [tokenize(c, self.N, self.vocab) for c in captions]

    def embed(self, prompts: list[TokenizedPrompt]) -> torch.Tensor:
        ids = torch.as_tensor(np.stack([p.ids for p in prompts]))
        with torch.no_grad():
            return self.encoder(ids)

    def eval(self):
        self.encoder.eval()
        self.denoiser.eval()
        return self

    def generate(self, captions, seeds, policy=None, record=True, max_steps=None,
                 batch_size: int = 64, full_resolution=False, masks=None):
        """Sample one image per (caption, seed); returns (images (B,C,H,W), attention (B,steps,L,N) or None, prompts).

        ``masks`` optionally gives a per-prompt boolean (N,) array of positions to mask,
        used instead of ``policy``.
        """
        self.eval()
        prompts = self.tokenize(captions)
        if len(seeds) != len(prompts):
            raise ContractError(f"{len(seeds)} seeds for {len(prompts)} prompts")
        images, atts = [], []
        for start in range(0, len(prompts), batch_size):
            chunk = prompts[start:start + batch_size]
            emb = self.embed(chunk)
            cats = np.stack([p.categories for p in chunk])
            pol = policy if masks is None else LogitIntercept.per_row(masks[start:start + batch_size])
            out = sample_batch(self.denoiser, emb, self.schedule, pol, list(seeds[start:start + batch_size]),
                               categories=cats, record=record, max_steps=max_steps,
                               full_resolution=full_resolution)
            images.append(out.images)
            if out.attention is not None:
                atts.append(out.attention)
        att = np.concatenate(atts) if atts else None
        return torch.cat(images), att, prompts

    def save(self, path):
        state = {
            "format": "attnmem-checkpoint/1",
            "config": self.cfg.echo(),
            "vocabulary": list(self.vocab.words),
            "trained_steps": self.trained_steps,
            "history": self.history,
            "encoder": {k: v.detach().clone() for k, v in self.encoder.state_dict().items()},
            "denoiser": {k: v.detach().clone() for k, v in self.denoiser.state_dict().items()},
        }
        buf = io.BytesIO()
        torch.save(state, buf)
        Path(path).write_bytes(buf.getvalue())
        self.vocab.save(Path(path).with_suffix(".vocab.txt"))

    @classmethod
    def load(cls, path) -> "Bundle":
        try:
            state = torch.load(path, map_location="cpu", weights_only=False)
        except (OSError, RuntimeError, pickle.UnpicklingError, EOFError) as exc:
            raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
        if state.get("format") != "attnmem-checkpoint/1":
            raise ConfigError(f"{path} is not a model checkpoint")
        b = cls(from_dict(state["config"]), Vocabulary(state["vocabulary"]))
        b.encoder.load_state_dict(state["encoder"])
        b.denoiser.load_state_dict(state["denoiser"])
        b.trained_steps = state["trained_steps"]
        b.history = state["history"]
        return b.eval()


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)          # (step, mean batch loss)
    removals: list = field(default_factory=list)        # per log interval: {"step", "dup", "non_dup", "seen"}
    total_seconds: float = 0.0
    filter_seconds: float = 0.0
    phase_seconds: dict = field(default_factory=dict)
    skipped_updates: int = 0
    val_loss: float | None = None

    def as_dict(self):
        return {
            "losses": self.losses, "removals": self.removals,
            "total_seconds": self.total_seconds, "filter_seconds": self.filter_seconds,
            "phase_seconds": self.phase_seconds, "skipped_updates": self.skipped_updates,
            "val_loss": self.val_loss,
        }


class _Data:
    def __init__(self, bundle: Bundle, manifest: CorpusManifest, records):
        self.records = records
        self.x0 = torch.as_tensor(corpus_arrays(manifest, records), dtype=torch.float32)
        prompts = bundle.tokenize([r.caption for r in records])
        self.ids = torch.as_tensor(np.stack([p.ids for p in prompts]))
        self.is_dup = torch.as_tensor([r.dup_group is not None for r in records])


def _lr_at(step, cfg):
    if cfg.warmup and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    return cfg.lr


def _snapshot(bundle):
    return [{k: v.detach().clone() for k, v in m.state_dict().items()} for m in (bundle.encoder, bundle.denoiser)]


def _restore(bundle, snap):
    bundle.encoder.load_state_dict(snap[0])
    bundle.denoiser.load_state_dict(snap[1])


def _run_phase(bundle, data: _Data, steps, gen, report, phase, thresholds=None,
               train_encoder=True, step_offset=0):
    tc = bundle.cfg.train
    enc, den = bundle.encoder, bundle.denoiser
    params = list(den.parameters()) + (list(enc.parameters()) if train_encoder else [])
    for p in enc.parameters():
        p.requires_grad_(train_encoder)
    enc.train(train_encoder)
    den.train()
    opt = torch.optim.AdamW(params, lr=tc.lr, weight_decay=tc.weight_decay)
    sched = bundle.schedule
    if tc.loss_weighting not in ("eps", "v"):
        raise ConfigError(f"unknown loss_weighting {tc.loss_weighting!r}")
    weights = 1.0 / torch.tensor(np.asarray(sched.alpha_bars), dtype=torch.float32)
    M = data.x0.shape[0]
    log_every = tc.log_every or max(1, M // tc.batch_size)
    window = {"dup": 0, "non_dup": 0, "seen": 0}
    losses = []
    good = _snapshot(bundle)
    t0 = time.perf_counter()
    for step in range(steps):
        idx = torch.randint(M, (tc.batch_size,), generator=gen)
        t = torch.randint(1, sched.T + 1, (tc.batch_size,), generator=gen)
        eps = torch.randn(data.x0[idx].shape, generator=gen)
        x_t = forward_diffuse(data.x0[idx], t, eps, sched)
        e_c = enc(data.ids[idx]) if train_encoder else enc(data.ids[idx]).detach()
        tap = AttentionTap() if thresholds is not None else None
        pred = den(x_t, t, e_c, recorder=tap)
        per_sample = ((pred - eps) ** 2).flatten(1).mean(1)
        if tc.loss_weighting == "v":
            per_sample = per_sample * weights[t - 1]
        if thresholds is not None:
            f0 = time.perf_counter()
            keep = keep_mask(batch_attention_entropy(tap.probs), t, thresholds)
            removed = ~keep
            window["dup"] += int((removed & data.is_dup[idx]).sum())
            window["non_dup"] += int((removed & ~data.is_dup[idx]).sum())
            report.filter_seconds += time.perf_counter() - f0
        else:
            keep = None
        window["seen"] += tc.batch_size
        batch_loss = float(per_sample.detach().mean())
        if not math.isfinite(batch_loss):
            _restore(bundle, good)
            bundle.eval()
            raise NumericDivergence(f"loss became non-finite in {phase}", step=step_offset + step)
        losses.append(batch_loss)
        if keep is None:
            loss = per_sample.mean()
        elif keep.any():
            loss = (per_sample * keep).sum() / keep.sum()
        else:
            loss = None
        if loss is not None:
            for g in opt.param_groups:
                g["lr"] = _lr_at(step, tc)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if tc.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, tc.grad_clip)
            opt.step()
        else:
            report.skipped_updates += 1
        if (step + 1) % log_every == 0 or step + 1 == steps:
            report.losses.append((phase, step_offset + step + 1, float(np.mean(losses))))
            losses = []
            if thresholds is not None:
                report.removals.append({"phase": phase, "step": step_offset + step + 1, **window})
            window = {"dup": 0, "non_dup": 0, "seen": 0}
            good = _snapshot(bundle)
    report.phase_seconds[phase] = time.perf_counter() - t0
    for p in enc.parameters():
        p.requires_grad_(True)
    bundle.eval()


def pretrain(cfg: LabConfig, manifest: CorpusManifest, bundle: Bundle | None = None) -> tuple[Bundle, TrainReport]:
    """Train encoder and denoiser on the non-duplicated records only."""
    bundle = bundle or Bundle(cfg)
    report = TrainReport()
    t0 = time.perf_counter()
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    clean = [r for r in manifest.records if r.dup_group is None]
    if cfg.train.pretrain_steps:
        _run_phase(bundle, _Data(bundle, manifest, clean), cfg.train.pretrain_steps, gen, report, "pretrain")
    bundle.trained_steps = cfg.train.pretrain_steps
    report.total_seconds = time.perf_counter() - t0
    return bundle, report


def finetune(bundle: Bundle, manifest: CorpusManifest, thresholds: StepThresholds | None = None,
             seed: int | None = None) -> TrainReport:
    """Continue training on the full corpus (duplicates included), optionally filtered."""
    cfg = bundle.cfg
    if thresholds is not None and thresholds.T != bundle.schedule.T:
        raise ConfigError(f"thresholds cover {thresholds.T} steps, schedule has {bundle.schedule.T}")
    report = TrainReport()
    t0 = time.perf_counter()
    gen = torch.Generator().manual_seed((cfg.seed if seed is None else seed) + 2)
    data = _Data(bundle, manifest, manifest.records)
    _run_phase(bundle, data, cfg.train.steps, gen, report, "finetune", thresholds,
               train_encoder=not cfg.train.freeze_encoder_after_pretrain,
               step_offset=bundle.trained_steps)
    bundle.trained_steps += cfg.train.steps
    report.total_seconds = time.perf_counter() - t0
    report.val_loss = validation_loss(bundle, manifest)
    return report


def train(cfg: LabConfig, manifest: CorpusManifest, thresholds: StepThresholds | None = None,
          pretrained: Bundle | None = None) -> tuple[Bundle, TrainReport]:
    """Pretrain on clean records (unless a pretrained bundle is given), then fine-tune on everything."""
    if pretrained is None:
        bundle, pre = pretrain(cfg, manifest)
    else:
        bundle, pre = pretrained, TrainReport()
    report = finetune(bundle, manifest, thresholds)
    report.losses = pre.losses + report.losses
    report.phase_seconds = {**pre.phase_seconds, **report.phase_seconds}
    report.total_seconds += pre.total_seconds
    bundle.history = report.as_dict()
    return bundle, report


@torch.no_grad()
def validation_loss(bundle: Bundle, manifest: CorpusManifest, seed: int = 12345, repeats: int = 4) -> float:
    """Denoising MSE on held-out non-duplicated images with fixed (t, eps) draws."""
    if not manifest.validation:
        return float("nan")
    bundle.eval()
    data = _Data(bundle, manifest, manifest.validation)
    gen = torch.Generator().manual_seed(seed)
    M, T = data.x0.shape[0], bundle.schedule.T
    total = 0.0
    for _ in range(repeats):
        t = torch.randint(1, T + 1, (M,), generator=gen)
        eps = torch.randn(data.x0.shape, generator=gen)
        x_t = forward_diffuse(data.x0, t, eps, bundle.schedule)
        pred = bundle.denoiser(x_t, t, bundle.encoder(data.ids))
        total += float(((pred - eps) ** 2).mean())
    return total / repeats
