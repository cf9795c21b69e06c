"""Pixel-space similarity proxy used to call memorization."""
from __future__ import annotations

import numpy as np
import torch

MEMORIZED_THRESHOLD = 0.8


def _as_array(img):
    if torch.is_tensor(img):
        img = img.detach().cpu().numpy()
    return np.asarray(img, dtype=np.float64)


def _descriptor(img):
    c, h, w = img.shape
    pooled = img[:, : h - h % 2, : w - w % 2].reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    centred = pooled - pooled.mean(axis=(1, 2), keepdims=True)
    v = centred.ravel()
    norm = np.linalg.norm(v)
    return None if norm < 1e-12 else v / norm


def similarity_score(img_a, img_b) -> float:
    """Cosine of per-channel mean-subtracted, 2x average-pooled pixels.

    A constant image has no descriptor and scores 0 against anything.
    """
    a, b = _as_array(img_a), _as_array(img_b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    da, db = _descriptor(a), _descriptor(b)
    if da is None or db is None:
        return 0.0
    return float(np.clip(da @ db, -1.0, 1.0))


def pairwise_diversity(images) -> float:
    """Mean of 1 - similarity over all pairs; a crude diversity signal, not FID."""
    images = list(images)
    vals = [1.0 - similarity_score(images[i], images[j])
            for i in range(len(images)) for j in range(i + 1, len(images))]
    return float(np.mean(vals)) if vals else 0.0
