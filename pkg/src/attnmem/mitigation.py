"""Inference-time policies and training-time entropy filtering."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .analytics import AttentionTrace, step_entropies
from .denoiser import MitigationPolicy
from .errors import ConfigError, ContractError

log = logging.getLogger(__name__)


def make_policy(C: float = 1.0, mask_summary: bool = False) -> MitigationPolicy:
    if not C > 0:
        raise ConfigError(f"C must be positive, got {C}")
    return MitigationPolicy(C=float(C), mask_summary=bool(mask_summary))


@dataclass(frozen=True)
class StepThresholds:
    per_step: np.ndarray        # index t-1 holds the threshold for model step t
    percentile: float
    factor: float

    def __post_init__(self):
        arr = np.asarray(self.per_step, dtype=np.float64)
        if arr.ndim != 1 or not np.all(np.isfinite(arr)):
            raise ContractError("thresholds must be a finite 1-D array")
        if not self.factor > 0:
            raise ConfigError("threshold factor must be positive")
        object.__setattr__(self, "per_step", arr)

    @property
    def T(self):
        return self.per_step.size

    def scaled(self, factor: float) -> "StepThresholds":
        """Same percentile levels under a different multiplier."""
        return StepThresholds(self.per_step / self.factor * factor, self.percentile, factor)

    def save(self, path):
        Path(path).write_text(json.dumps({
            "percentile": self.percentile,
            "factor": self.factor,
            "T": self.T,
            "thresholds": [float(x) for x in self.per_step],
        }, indent=1) + "\n")

    @classmethod
    def load(cls, path):
        try:
            raw = json.loads(Path(path).read_text())
            per_step = raw["thresholds"]
            if len(per_step) != raw["T"]:
                raise ConfigError(f"thresholds file {path}: T does not match the value count")
            return cls(np.asarray(per_step), float(raw["percentile"]), float(raw["factor"]))
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read thresholds file {path}: {exc}") from exc


def calibrate_thresholds(memorized_traces: list[AttentionTrace], percentile: float = 5.0,
                         factor: float = 1.2) -> StepThresholds:
    """Per-step ``factor * percentile`` of the memorized prompts' attention entropy.

    Generation entry ``k`` evaluates the model at step ``t = T - k``, so it
    feeds threshold slot ``t - 1``.
    """
    if not memorized_traces:
        raise ContractError("no memorized traces to calibrate on")
    if len(memorized_traces) < 5:
        log.warning("calibrating on only %d traces", len(memorized_traces))
    if not 0 < percentile < 100:
        raise ConfigError("percentile must lie in (0, 100)")
    T = memorized_traces[0].T
    if any(tr.T != T or tr.steps != T for tr in memorized_traces):
        raise ContractError("calibration needs full traces sharing one T")
    E = np.stack([step_entropies(tr) for tr in memorized_traces])   # (n, T) by entry
    by_step = E[:, ::-1]                                              # column t-1 is step t
    return StepThresholds(factor * np.percentile(by_step, percentile, axis=0), percentile, factor)


def filter_batch(batch_entropies, thresholds: StepThresholds) -> list:
    """Ids of samples whose entropy at their own step ``t`` is within threshold."""
    kept = []
    for sample_id, t, e in batch_entropies:
        if not 1 <= int(t) <= thresholds.T:
            raise ContractError(f"step {t} outside [1, {thresholds.T}]")
        if e <= thresholds.per_step[int(t) - 1]:
            kept.append(sample_id)
    return kept


def batch_attention_entropy(probs: list[torch.Tensor]) -> torch.Tensor:
    """(B,) entropy of the attention of one forward pass, averaged over everything but tokens."""
    with torch.no_grad():
        mean = torch.stack([p.mean(dim=(1, 2)) for p in probs]).mean(dim=0)
        return torch.special.entr(mean).sum(dim=-1)


def keep_mask(entropies: torch.Tensor, t: torch.Tensor, thresholds: StepThresholds) -> torch.Tensor:
    """Vectorised :func:`filter_batch` for a training batch."""
    th = torch.as_tensor(thresholds.per_step, dtype=entropies.dtype)[t - 1]
    return entropies <= th

