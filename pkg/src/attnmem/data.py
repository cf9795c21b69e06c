"""Procedural shape corpus with controlled caption/image duplication."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .config import DataConfig
from .errors import ConfigError, ContractError

COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.75, 0.2),
    "blue": (0.15, 0.25, 0.9),
    "yellow": (0.95, 0.9, 0.15),
    "cyan": (0.1, 0.85, 0.9),
    "magenta": (0.85, 0.15, 0.8),
    "white": (0.97, 0.97, 0.97),
    "black": (0.05, 0.05, 0.05),
    "orange": (0.95, 0.55, 0.1),
    "purple": (0.45, 0.15, 0.6),
}
SHAPES = ("square", "circle", "triangle", "cross", "diamond", "ring")
SIZES = ("small", "large")
SUPERSAMPLE = 4


@dataclass
class Record:
    sample_id: str
    caption: str
    image_path: str
    dup_group: int | None = None


@dataclass
class CorpusManifest:
    records: list[Record]
    counts: dict
    fresh_captions: list[str] = field(default_factory=list)
    validation: list[Record] = field(default_factory=list)
    root: Path | None = None

    def __post_init__(self):
        ids = [r.sample_id for r in self.records + self.validation]
        if len(set(ids)) != len(ids):
            raise ContractError("sample ids must be unique")

    @property
    def groups(self) -> dict[int, list[Record]]:
        out: dict[int, list[Record]] = {}
        for r in self.records:
            if r.dup_group is not None:
                out.setdefault(r.dup_group, []).append(r)
        return out

    def group_captions(self) -> dict[int, str]:
        """First caption of each duplicated group."""
        return {g: recs[0].caption for g, recs in sorted(self.groups.items())}

    def image(self, record: Record) -> np.ndarray:
        return load_image(self.root / record.image_path)

    def save(self, root):
        root = Path(root)
        with open(root / "manifest.jsonl", "w") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
        with open(root / "validation.jsonl", "w") as fh:
            for r in self.validation:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
        meta = {"counts": self.counts, "fresh_captions": self.fresh_captions}
        (root / "corpus.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, root):
        root = Path(root)
        try:
            records = [Record(**json.loads(line)) for line in open(root / "manifest.jsonl")]
            val = [Record(**json.loads(line)) for line in open(root / "validation.jsonl")]
            meta = json.loads((root / "corpus.json").read_text())
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"cannot read corpus at {root}: {exc}") from exc
        return cls(records, meta["counts"], meta["fresh_captions"], val, root)


def caption_space():
    """Every caption the grammar can produce, in a fixed order."""
    return [f"a {size} {fg} {shape} on a {bg} background"
            for size in SIZES for shape in SHAPES for fg in COLORS for bg in COLORS if fg != bg]


def parse_caption(caption: str):
    words = caption.split()
    return {"size": words[1], "fg": words[2], "shape": words[3], "bg": words[6]}


def _shape_mask(shape, cx, cy, r, size):
    n = size * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / SUPERSAMPLE
    x, y = np.meshgrid(coords, coords)
    dx, dy = x - cx, y - cy
    if shape == "square":
        m = (np.abs(dx) <= r * 0.85) & (np.abs(dy) <= r * 0.85)
    elif shape == "circle":
        m = dx ** 2 + dy ** 2 <= r ** 2
    elif shape == "ring":
        d2 = dx ** 2 + dy ** 2
        m = (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    elif shape == "diamond":
        m = np.abs(dx) + np.abs(dy) <= r
    elif shape == "cross":
        w = 0.38 * r
        m = ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy) <= w) & (np.abs(dx) <= r))
    elif shape == "triangle":
        m = (dy <= 0.8 * r) & (dy >= -r + 1.7 * np.abs(dx))
    else:
        raise ConfigError(f"unknown shape {shape!r}")
    return m.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))


def render(caption: str, rng: np.random.Generator, size: int = 16) -> np.ndarray:
    """(3, size, size) float image in [0, 1]; position and radius drawn from ``rng``."""
    p = parse_caption(caption)
    lo, hi = (0.14, 0.22) if p["size"] == "small" else (0.26, 0.36)
    r = rng.uniform(lo, hi) * size
    cx, cy = rng.uniform(r, size - r, size=2)
    cover = _shape_mask(p["shape"], cx, cy, r, size)
    fg, bg = np.asarray(COLORS[p["fg"]]), np.asarray(COLORS[p["bg"]])
    img = bg[:, None, None] * (1 - cover) + fg[:, None, None] * cover
    return img


def to_uint8(img) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_image(img, path):
    Image.fromarray(to_uint8(img).transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def synth_dataset(cfg: DataConfig, seed: int, out_dir=None) -> CorpusManifest:
    """Render the corpus; with ``out_dir`` the PNGs and manifest files are written there.

    Duplicated groups and fresh (never trained) captions are disjoint from the
    background caption pool.
    """
    space = caption_space()
    n_reserved = cfg.groups + cfg.fresh
    if n_reserved >= len(space):
        raise ConfigError(f"grammar has {len(space)} captions; cannot reserve {n_reserved}")
    if cfg.replication < 1 or cfg.groups < 0 or cfg.background < 0:
        raise ConfigError("counts must be non-negative and replication >= 1")
    if cfg.dup_mode not in ("matching", "template"):
        raise ConfigError(f"unknown dup_mode {cfg.dup_mode!r}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(space))
    dup_caps = [space[i] for i in order[: cfg.groups]]
    fresh = [space[i] for i in order[cfg.groups:n_reserved]]
    pool = [space[i] for i in order[n_reserved:]]
    if cfg.dup_mode == "template":
        pool = [c for c in pool if not any(_template_of(c) == _template_of(d) for d in dup_caps)]
        if not pool:
            raise ConfigError("template mode leaves no background captions")

    root = Path(out_dir) if out_dir is not None else None
    if root is not None:
        (root / "images").mkdir(parents=True, exist_ok=True)
    images: dict[str, np.ndarray] = {}

    def put(name, img):
        rel = f"images/{name}.png"
        images[rel] = img
        if root is not None:
            save_image(img, root / rel)
        return rel

    records = []
    for g, cap in enumerate(dup_caps):
        rel = put(f"dup_{g:03d}", render(cap, rng, cfg.image_size))
        if cfg.replication == 1:
            records.append(Record(f"bg_dup{g:03d}", cap, rel, None))
            continue
        caps = [cap] if cfg.dup_mode == "matching" else _template_variants(cap, cfg.template_variants, rng)
        for k in range(cfg.replication):
            records.append(Record(f"dup{g:03d}_{k:03d}", caps[k % len(caps)], rel, g))
    for i in range(cfg.background):
        cap = pool[rng.integers(len(pool))]
        records.append(Record(f"bg{i:05d}", cap, put(f"bg_{i:05d}", render(cap, rng, cfg.image_size))))
    val = []
    for i in range(cfg.validation):
        cap = pool[rng.integers(len(pool))]
        val.append(Record(f"val{i:05d}", cap, put(f"val_{i:05d}", render(cap, rng, cfg.image_size))))
    counts = {"background": cfg.background, "duplicated_groups": cfg.groups if cfg.replication > 1 else 0,
              "replication": cfg.replication}
    manifest = CorpusManifest(records, counts, fresh, val, root)
    manifest._images = {k: to_uint8(v).astype(np.float64) / 255.0 for k, v in images.items()}
    if root is not None:
        manifest.save(root)
    return manifest


def _template_of(caption):
    p = parse_caption(caption)
    return (p["shape"], p["fg"])


def _template_variants(caption, k, rng):
    """Captions sharing shape and colour with ``caption`` but differing in size/background."""
    p = parse_caption(caption)
    alts = [c for c in caption_space() if _template_of(c) == (p["shape"], p["fg"]) and c != caption]
    picks = [alts[i] for i in rng.permutation(len(alts))[: max(0, k - 1)]]
    return [caption] + picks


def corpus_arrays(manifest: CorpusManifest, records=None):
    """Stack the images of ``records`` into a (M, 3, H, W) array scaled to [-1, 1]."""
    records = manifest.records if records is None else records
    cache = getattr(manifest, "_images", None) or {}
    loaded = {}
    out = []
    for r in records:
        if r.image_path not in loaded:
            img = cache.get(r.image_path)
            loaded[r.image_path] = img if img is not None else manifest.image(r)
        out.append(loaded[r.image_path])
    return np.stack(out) * 2.0 - 1.0
