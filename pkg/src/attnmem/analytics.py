"""Attention statistics: entropies plus the detection and ROC summaries built on them.

All entropies use the natural logarithm with the 0 * log 0 = 0 convention.
Trace entry ``k`` is the generation step ``t = T - k`` that produced
``x_{T-1-k}``; the last entry produced ``x_0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .text import BEGINNING, PROMPT, SUMMARY

PROB_TOL = 1e-6


@dataclass
class AttentionTrace:
    attention: np.ndarray          # (steps, L, N)
    categories: np.ndarray         # (N,)
    T: int
    prompt_id: str = ""
    policy: dict = field(default_factory=dict)
    model_id: str = ""

    def __post_init__(self):
        self.attention = np.asarray(self.attention, dtype=np.float64)
        self.categories = np.asarray(self.categories, dtype=np.int8)
        if self.attention.ndim != 3:
            raise ContractError("attention must have shape (steps, L, N)")
        if self.attention.shape[2] != self.categories.size:
            raise ContractError("token axis does not match the category labels")
        if self.attention.shape[0] > self.T:
            raise ContractError(f"{self.attention.shape[0]} entries exceed T={self.T}")

    @property
    def steps(self) -> int:
        return self.attention.shape[0]

    @property
    def L(self) -> int:
        return self.attention.shape[1]

    @property
    def N(self) -> int:
        return self.attention.shape[2]

    @property
    def S(self) -> int:
        return int(np.sum(self.categories == SUMMARY))

    def entry_for(self, t: int) -> int:
        """Index of the entry that produced x_t."""
        k = self.T - 1 - t
        if not 0 <= k < self.steps:
            raise ContractError(f"trace has no entry producing x_{t}")
        return k

    def validate(self, tol=PROB_TOL):
        a = self.attention
        if np.any(a < 0) or np.any(np.abs(a.sum(-1) - 1) > tol):
            raise ContractError("trace holds vectors that are not probability vectors")
        return self


@dataclass
class DetectionResult:
    prompt_id: str
    score: float
    label: bool
    metric_kind: str = "D"        # "D" or "E_layer"
    layer: int | None = None

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ContractError(f"non-finite detection score for {self.prompt_id}")


def _plogp(a):
    a = np.asarray(a, dtype=np.float64)
    safe = np.where(a > 0, a, 1.0)
    return np.where(a > 0, -a * np.log(safe), 0.0)


def entropy_rows(a) -> np.ndarray:
    """Entropy along the last axis without input validation."""
    return _plogp(a).sum(axis=-1)


def entropy(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    if np.any(a < 0):
        raise ContractError("negative attention entry")
    if abs(a.sum() - 1.0) > 1e-4:
        raise ContractError(f"attention sums to {a.sum():.6f}, not 1")
    return float(entropy_rows(a))


def summary_entropy(a, S: int) -> float:
    """Entropy-style sum over the trailing ``S`` entries, without renormalising."""
    a = np.asarray(a, dtype=np.float64)
    if not 1 <= S <= a.shape[-1] - 1:
        raise ContractError(f"summary count S={S} must lie in [1, N-1]")
    return float(_plogp(a[..., -S:]).sum(axis=-1))


def mean_attention(trace: AttentionTrace, step_index: int, layer="all") -> np.ndarray:
    """Mean over layers of one entry's attention vectors; ``layer`` is 'all' or 1-based l."""
    if not 0 <= step_index < trace.steps:
        raise ContractError(f"step index {step_index} outside [0, {trace.steps})")
    vecs = trace.attention[step_index]
    if layer == "all":
        return vecs.mean(axis=0)
    if not 1 <= int(layer) <= trace.L:
        raise ContractError(f"layer {layer} outside [1, {trace.L}]")
    return vecs[int(layer) - 1].copy()


def step_entropies(trace: AttentionTrace) -> np.ndarray:
    """E_t for every entry, in generation order."""
    return entropy_rows(trace.attention.mean(axis=1))


def step_summary_entropies(trace: AttentionTrace, S: int | None = None) -> np.ndarray:
    S = trace.S if S is None else S
    mean = trace.attention.mean(axis=1)
    if not 1 <= S <= trace.N - 1:
        raise ContractError(f"summary count S={S} must lie in [1, N-1]")
    return _plogp(mean[:, -S:]).sum(axis=-1)


def d_statistic(entropies, summary_entropies, first_summary_entropy) -> float:
    """Mean entropy plus mean absolute summary-entropy drift over a step window."""
    e = np.asarray(entropies, dtype=np.float64)
    es = np.asarray(summary_entropies, dtype=np.float64)
    if e.shape != es.shape or e.size == 0:
        raise ContractError("entropy series must be non-empty and equally long")
    return float(e.mean() + np.abs(es - first_summary_entropy).mean())


def default_T_D(T: int) -> int:
    return max(1, T // 5)


def detection_D(trace: AttentionTrace, T_D: int | None = None, S: int | None = None) -> float:
    """Score over the last ``T_D`` generation steps (those producing x_{T_D-1} ... x_0)."""
    T = trace.T
    T_D = default_T_D(T) if T_D is None else int(T_D)
    if not 1 <= T_D <= T:
        raise ContractError(f"T_D={T_D} outside [1, {T}]")
    if trace.steps < T:
        raise ContractError(f"D needs a full trace of {T} entries, got {trace.steps}")
    E = step_entropies(trace)
    Es = step_summary_entropies(trace, S)
    window = [trace.entry_for(t) for t in range(T_D)]
    return d_statistic(E[window], Es[window], Es[0])


def first_step_layer_entropy(trace: AttentionTrace, l: int) -> float:
    if trace.steps < 1:
        raise ContractError("empty trace")
    return float(entropy_rows(mean_attention(trace, 0, l)))


def category_attention_sums(trace: AttentionTrace) -> dict[str, np.ndarray]:
    """Per-entry attention mass of each token category (keys: begin, prompt, summary)."""
    mean = trace.attention.mean(axis=1)
    cats = trace.categories
    return {
        "begin": mean[:, cats == BEGINNING].sum(axis=-1),
        "prompt": mean[:, cats == PROMPT].sum(axis=-1),
        "summary": mean[:, cats == SUMMARY].sum(axis=-1),
    }


def _split(results=None, scores=None, labels=None):
    if results is not None:
        scores = [r.score for r in results]
        labels = [r.label for r in results]
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    pos, neg = scores[labels], scores[~labels]
    if pos.size == 0 or neg.size == 0:
        raise ContractError("need at least one positive and one negative label")
    return pos, neg


def auroc(results=None, *, scores=None, labels=None) -> float:
    """P(random positive outscores random negative), ties counting 1/2, by pair enumeration."""
    pos, neg = _split(results, scores, labels)
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def tpr_at_fpr(results=None, fpr_budget: float = 0.03, *, scores=None, labels=None) -> float:
    """Best TPR over thresholds ``score >= th`` whose FPR stays within budget."""
    if not 0 <= fpr_budget <= 1:
        raise ContractError("fpr_budget must lie in [0, 1]")
    pos, neg = _split(results, scores, labels)
    best = 0.0
    for th in np.concatenate([np.unique(np.concatenate([pos, neg])), [np.inf]]):
        if np.mean(neg >= th) <= fpr_budget:
            best = max(best, float(np.mean(pos >= th)))
    return best
