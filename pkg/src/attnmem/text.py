"""Word-level tokenizer with token categories and a tiny causal text encoder."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ContractError

BEGIN, END, PAD, OOV = "<begin>", "<end>", "<pad>", "<oov>"
SPECIALS = (BEGIN, END, PAD, OOV)

# category codes stored in TokenizedPrompt.categories
BEGINNING, PROMPT, SUMMARY = 0, 1, 2
CATEGORY_NAMES = ("beginning", "prompt", "summary")


class Vocabulary:
    def __init__(self, words):
        words = list(words)
        if tuple(words[:4]) != SPECIALS:
            words = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        if len(set(words)) != len(words):
            raise ContractError("duplicate entries in vocabulary")
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}

    @classmethod
    def from_captions(cls, captions):
        seen = sorted({w for c in captions for w in c.lower().split()})
        return cls(list(SPECIALS) + seen)

    def __len__(self):
        return len(self.words)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.words == other.words

    def id(self, word: str) -> int:
        return self.index.get(word, self.index[OOV])

    def save(self, path):
        Path(path).write_text("\n".join(self.words) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


@dataclass(frozen=True)
class TokenizedPrompt:
    ids: np.ndarray
    categories: np.ndarray
    caption: str
    prompt_len: int

    @property
    def N(self) -> int:
        return len(self.ids)

    @property
    def S(self) -> int:
        """Number of summary tokens (end marker plus padding)."""
        return self.N - 1 - self.prompt_len

    def positions(self, category: int) -> np.ndarray:
        return np.flatnonzero(self.categories == category)


def tokenize(caption: str, N: int, vocab: Vocabulary) -> TokenizedPrompt:
    words = caption.lower().split()
    if len(words) > N - 2:
        raise ContractError(f"caption has {len(words)} words; at most {N - 2} fit in N={N}")
    ids = [vocab.id(BEGIN)] + [vocab.id(w) for w in words] + [vocab.id(END)]
    ids += [vocab.id(PAD)] * (N - len(ids))
    cats = np.full(N, SUMMARY, dtype=np.int8)
    cats[0] = BEGINNING
    cats[1:1 + len(words)] = PROMPT
    return TokenizedPrompt(np.asarray(ids, dtype=np.int64), cats, caption, len(words))


class CausalBlock(nn.Module):
    def __init__(self, width, heads):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, x, mask):
        h = self.ln1(x)
        x = x + self.attn(h, h, h, attn_mask=mask, need_weights=False)[0]
        return x + self.mlp(self.ln2(x))


class CausalTextEncoder(nn.Module):
    """Token + position embeddings followed by causally masked self-attention blocks.

    Position ``i`` only sees ids ``0..i``, so the ``<begin>`` embedding is the
    same for every prompt.
    """

    def __init__(self, vocab_size: int, N: int = 16, width: int = 64, layers: int = 2, heads: int = 4):
        super().__init__()
        self.vocab_size, self.N, self.width = vocab_size, N, width
        self.tok = nn.Embedding(vocab_size, width)
        self.pos = nn.Parameter(torch.randn(N, width) * 0.02)
        self.blocks = nn.ModuleList(CausalBlock(width, heads) for _ in range(layers))
        self.ln = nn.LayerNorm(width)
        self.register_buffer("mask", torch.triu(torch.ones(N, N, dtype=torch.bool), 1), persistent=False)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.ndim == 1:
            ids = ids.unsqueeze(0)
        if ids.shape[-1] != self.N:
            raise ContractError(f"expected {self.N} token ids, got {ids.shape[-1]}")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ContractError("token id outside the encoder vocabulary")
        x = self.tok(ids) + self.pos
        for blk in self.blocks:
            x = blk(x, self.mask)
        return self.ln(x)


def encode(prompt, encoder: CausalTextEncoder) -> torch.Tensor:
    """Embed one TokenizedPrompt (returns (N, width)) or a list of them ((B, N, width))."""
    single = isinstance(prompt, TokenizedPrompt)
    prompts = [prompt] if single else list(prompt)
    ids = torch.as_tensor(np.stack([p.ids for p in prompts]))
    with torch.no_grad():
        out = encoder(ids)
    if not torch.isfinite(out).all():
        raise ContractError("non-finite prompt embedding")
    return out[0] if single else out
