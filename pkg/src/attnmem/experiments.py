"""End-to-end experiment drivers and report emission.

Every driver returns a :class:`Fragment`; :func:`emit_report` merges
fragments that share one config echo into summary, record and plot files.
"""
from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .analytics import (AttentionTrace, DetectionResult, auroc, category_attention_sums, detection_D,
                        first_step_layer_entropy, step_entropies, tpr_at_fpr)
from .data import CorpusManifest
from .denoiser import MitigationPolicy
from .errors import ConfigError, ContractError
from .mitigation import StepThresholds, calibrate_thresholds, make_policy
from .similarity import MEMORIZED_THRESHOLD, pairwise_diversity, similarity_score
from .text import BEGINNING
from .traceio import file_checksum, write_trace
from .training import Bundle


@dataclass
class Fragment:
    kind: str
    config: dict
    data: dict = field(default_factory=dict)
    records: list = field(default_factory=list)       # line-delimited output rows
    plots: dict = field(default_factory=dict)         # name -> (header, rows)
    traces: dict = field(default_factory=dict)        # path -> sha256


@dataclass
class PromptSet:
    captions: list
    ids: list
    memorized: list            # bool per prompt
    train_images: list         # (C,H,W) in [-1,1] or None


def prompt_sets(manifest: CorpusManifest, n_fresh: int | None = None) -> PromptSet:
    """Duplicated-group captions (positives) followed by fresh grammar captions (negatives)."""
    caps, ids, mem, imgs = [], [], [], []
    for g, recs in sorted(manifest.groups.items()):
        caps.append(recs[0].caption)
        ids.append(f"dup{g:03d}")
        mem.append(True)
        imgs.append(_train_image(manifest, recs[0]))
    fresh = manifest.fresh_captions if n_fresh is None else manifest.fresh_captions[:n_fresh]
    for i, c in enumerate(fresh):
        caps.append(c)
        ids.append(f"fresh{i:03d}")
        mem.append(False)
        imgs.append(None)
    return PromptSet(caps, ids, mem, imgs)


def _train_image(manifest, record):
    cache = getattr(manifest, "_images", None) or {}
    img = cache.get(record.image_path)
    if img is None:
        img = manifest.image(record)
    return img * 2.0 - 1.0


def seeds_for(cfg, n, stream=0):
    return [cfg.seed * 1_000_003 + stream * 10_007 + i for i in range(n)]


def _require_trained(bundle: Bundle):
    if bundle.trained_steps <= 0:
        raise ConfigError("model has not been trained")


def generate_traces(bundle: Bundle, captions, ids, seeds, policy=None, max_steps=None, masks=None):
    imgs, att, prompts = bundle.generate(captions, seeds, policy, max_steps=max_steps, masks=masks)
    echo = policy.echo() if isinstance(policy, MitigationPolicy) else MitigationPolicy().echo()
    mid = bundle.model_id
    traces = [AttentionTrace(a, p.categories, bundle.schedule.T, pid, echo, mid)
              for a, p, pid in zip(att, prompts, ids)]
    return imgs, traces


def save_traces(traces, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return {str(out / f"{tr.prompt_id}.trace"): write_trace(tr, out / f"{tr.prompt_id}.trace") for tr in traces}


# -- memorization ------------------------------------------------------------------

def memorization_eval(bundle: Bundle, manifest: CorpusManifest, n_fresh=None) -> Fragment:
    """Similarity of duplicated-prompt generations to their training image over two seeds,
    and cross-seed similarity for fresh prompts."""
    _require_trained(bundle)
    ps = prompt_sets(manifest, n_fresh)
    cfg = bundle.cfg
    n = len(ps.captions)
    a, _, _ = bundle.generate(ps.captions, seeds_for(cfg, n, 1), record=False)
    b, _, _ = bundle.generate(ps.captions, seeds_for(cfg, n, 2), record=False)
    recs, mem_scores, fresh_scores = [], [], []
    for i in range(n):
        if ps.memorized[i]:
            s = [similarity_score(a[i], ps.train_images[i]), similarity_score(b[i], ps.train_images[i])]
            mem_scores.append(min(s))
            recs.append({"prompt_id": ps.ids[i], "kind": "memorization", "similarity_seed_a": s[0],
                         "similarity_seed_b": s[1], "memorized": min(s) >= MEMORIZED_THRESHOLD})
        else:
            s = similarity_score(a[i], b[i])
            fresh_scores.append(s)
            recs.append({"prompt_id": ps.ids[i], "kind": "memorization", "cross_seed_similarity": s})
    fresh_imgs = [a[i] for i in range(n) if not ps.memorized[i]]
    data = {
        "memorized_fraction": float(np.mean(np.array(mem_scores) >= MEMORIZED_THRESHOLD)) if mem_scores else 0.0,
        "memorized_count": int(np.sum(np.array(mem_scores) >= MEMORIZED_THRESHOLD)),
        "dup_prompts": len(mem_scores),
        "dup_min_similarity_mean": float(np.mean(mem_scores)) if mem_scores else float("nan"),
        "fresh_cross_seed_similarity_mean": float(np.mean(fresh_scores)) if fresh_scores else float("nan"),
        "diversity_proxy_not_fid": pairwise_diversity(fresh_imgs[:20]),
    }
    return Fragment("memorization", cfg.echo(), data, recs)


# -- detection -----------------------------------------------------------------------

def run_detection(bundle: Bundle, manifest: CorpusManifest, metric_kind="D", T_D=None, layer=None,
                  n_fresh=None, fpr_budget=None, trace_dir=None, batch_size=64) -> Fragment:
    """Generate once per prompt with the identity policy and score it.

    ``metric_kind`` "D" needs full traces; "E_layer" stops after the first
    reverse step and scores every layer (or only ``layer``).
    """
    _require_trained(bundle)
    if metric_kind not in ("D", "E_layer"):
        raise ConfigError(f"unknown metric {metric_kind!r}")
    cfg = bundle.cfg
    fpr_budget = cfg.detect.fpr_budget if fpr_budget is None else fpr_budget
    ps = prompt_sets(manifest, n_fresh)
    if len(set(ps.memorized)) < 2:
        raise ContractError("detection needs both memorized and non-memorized prompts")
    seeds = seeds_for(cfg, len(ps.captions), 3)
    max_steps = 1 if metric_kind == "E_layer" else None
    calls0 = bundle.denoiser.calls
    imgs, att, prompts = bundle.generate(ps.captions, seeds, max_steps=max_steps, batch_size=batch_size)
    calls = bundle.denoiser.calls - calls0
    mid = bundle.model_id
    traces = [AttentionTrace(a, p.categories, bundle.schedule.T, pid, MitigationPolicy().echo(), mid)
              for a, p, pid in zip(att, prompts, ps.ids)]
    results: list[DetectionResult] = []
    if metric_kind == "D":
        for tr, lab in zip(traces, ps.memorized):
            results.append(DetectionResult(tr.prompt_id, detection_D(tr, T_D), lab, "D", None))
    else:
        layers = [layer] if layer is not None else list(range(1, bundle.denoiser.n_layers + 1))
        for l in layers:
            for tr, lab in zip(traces, ps.memorized):
                results.append(DetectionResult(tr.prompt_id, first_step_layer_entropy(tr, l), lab, "E_layer", l))
    table = {}
    for key in sorted({(r.metric_kind, r.layer) for r in results}, key=lambda k: (k[0], k[1] or 0)):
        sub = [r for r in results if (r.metric_kind, r.layer) == key]
        name = key[0] if key[1] is None else f"{key[0]}{key[1]}"
        table[name] = {"auroc": auroc(sub), "tpr_at_fpr": tpr_at_fpr(sub, fpr_budget)}
    n_batches = math.ceil(len(ps.captions) / batch_size)
    data = {
        "metric_kind": metric_kind, "fpr_budget": fpr_budget, "table": table,
        "positives": int(sum(ps.memorized)), "negatives": int(len(ps.memorized) - sum(ps.memorized)),
        "denoiser_calls": calls, "batches": n_batches,
        "evaluations_per_prompt": calls // n_batches,
    }
    recs = [{"kind": "detection", "prompt_id": r.prompt_id, "metric_kind": r.metric_kind, "layer": r.layer,
             "score": r.score, "label": r.label} for r in results]
    frag = Fragment("detection", cfg.echo(), data, recs)
    if metric_kind == "D":
        frag.plots.update(finding_plots(traces, ps.memorized))
        frag.data["findings"] = finding_summary(traces, ps.memorized)
    else:
        rows = [(r.layer, r.prompt_id, int(r.label), r.score) for r in results]
        frag.plots["layer_entropy"] = (("layer", "prompt_id", "memorized", "entropy"), rows)
    if trace_dir is not None:
        frag.traces = save_traces(traces, trace_dir)
    frag.data["_traces"] = traces
    return frag


def finding_summary(traces, labels) -> dict:
    mem = [t for t, l in zip(traces, labels) if l]
    non = [t for t, l in zip(traces, labels) if not l]
    Em = np.mean([step_entropies(t) for t in mem], axis=0)
    En = np.mean([step_entropies(t) for t in non], axis=0)
    T = traces[0].T
    tail = max(1, T // 5)
    cm = [category_attention_sums(t) for t in mem]
    cn = [category_attention_sums(t) for t in non]
    decay = lambda cs: float(np.mean([c["summary"][0] - c["summary"][-1] for c in cs]))
    k = max(1, traces[0].steps // 10)
    begin_n = np.mean([c["begin"] for c in cn], axis=0)
    return {
        "entropy_tail_steps": tail,
        "entropy_memorized_above_everywhere_in_tail": bool(np.all(Em[-tail:] > En[-tail:])),
        "entropy_tail_mean_memorized": float(Em[-tail:].mean()),
        "entropy_tail_mean_nonmemorized": float(En[-tail:].mean()),
        "summary_decay_memorized": decay(cm),
        "summary_decay_nonmemorized": decay(cn),
        "begin_first_decile_nonmemorized": float(begin_n[:k].mean()),
        "begin_last_decile_nonmemorized": float(begin_n[-k:].mean()),
    }


def finding_plots(traces, labels) -> dict:
    mem = [t for t, l in zip(traces, labels) if l]
    non = [t for t, l in zip(traces, labels) if not l]
    T = traces[0].T
    Em = np.mean([step_entropies(t) for t in mem], axis=0)
    En = np.mean([step_entropies(t) for t in non], axis=0)
    ent_rows = [(T - 1 - k, Em[k], En[k]) for k in range(len(Em))]
    cm = [category_attention_sums(t) for t in mem]
    cn = [category_attention_sums(t) for t in non]
    cat_rows = []
    for k in range(len(Em)):
        row = [T - 1 - k]
        for cs in (cm, cn):
            row += [float(np.mean([c[name][k] for c in cs])) for name in ("begin", "prompt", "summary")]
        cat_rows.append(tuple(row))
    return {
        "entropy_curves": (("t", "entropy_memorized", "entropy_nonmemorized"), ent_rows),
        "category_sums": (("t", "begin_mem", "prompt_mem", "summary_mem",
                           "begin_non", "prompt_non", "summary_non"), cat_rows),
    }


# -- inference-time mitigation -------------------------------------------------------------

def _median_generation_seconds(bundle, caption, policy, runs, seed):
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        bundle.generate([caption], [seed], policy, record=False)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def run_mitigation_sweep(bundle: Bundle, manifest: CorpusManifest, C_values=None, mask=None,
                         captions=None, timing_runs=20) -> Fragment:
    """Mean similarity of memorized-prompt generations to their training images for each C."""
    _require_trained(bundle)
    cfg = bundle.cfg
    C_values = list(cfg.mitigate.sweep if C_values is None else C_values)
    mask = cfg.mitigate.mask_summary if mask is None else mask
    by_caption = {recs[0].caption: recs[0] for _, recs in sorted(manifest.groups.items())}
    captions = list(by_caption) if captions is None else list(captions)
    missing = [c for c in captions if c not in by_caption]
    if missing:
        raise ContractError(f"prompts without a duplicated-group image: {missing[:3]}")
    targets = [_train_image(manifest, by_caption[c]) for c in captions]
    seeds = seeds_for(cfg, len(captions), 4)

    def mean_sim(policy):
        imgs, _, _ = bundle.generate(captions, seeds, policy, record=False)
        return [similarity_score(i, t) for i, t in zip(imgs, targets)]

    rows, recs = [], []
    base = mean_sim(None)
    rows.append(("baseline", 1.0, 0, float(np.mean(base))))
    for C in C_values:
        sims = mean_sim(make_policy(C, mask))
        rows.append(("policy", C, int(mask), float(np.mean(sims))))
        recs.append({"kind": "mitigation", "C": C, "mask_summary": mask, "mean_similarity": float(np.mean(sims)),
                     "memorized_count": int(np.sum(np.array(sims) >= MEMORIZED_THRESHOLD))})
    timing = None
    if timing_runs:
        torch_threads = torch.get_num_threads()
        torch.set_num_threads(1)
        try:
            pol = make_policy(cfg.mitigate.C, mask)
            cap = captions[0]
            # interleave to share any drift between the two paths
            plain, policed = [], []
            for r in range(timing_runs):
                plain.append(_median_generation_seconds(bundle, cap, None, 1, seeds[0]))
                policed.append(_median_generation_seconds(bundle, cap, pol, 1, seeds[0]))
            timing = {"unpoliced_median_s": statistics.median(plain), "policy_median_s": statistics.median(policed),
                      "runs": timing_runs, "threads": 1}
            timing["relative_overhead"] = timing["policy_median_s"] / timing["unpoliced_median_s"] - 1
        finally:
            torch.set_num_threads(torch_threads)
    baseline = float(np.mean(base))
    at = {C: m for kind, C, _, m in rows if kind == "policy"}
    data = {"baseline_similarity": baseline, "by_C": {str(C): m for C, m in at.items()}, "mask_summary": mask,
            "timing": timing}
    if cfg.mitigate.C in at and baseline > 0:
        data["relative_reduction_at_default_C"] = 1 - at[cfg.mitigate.C] / baseline
    frag = Fragment("mitigation", cfg.echo(), data, recs)
    frag.plots["similarity_vs_C"] = (("row", "C", "mask_summary", "mean_similarity"), rows)
    return frag


# -- token ablation -----------------------------------------------------------------------

def ablation_mask(trace: AttentionTrace, fraction: float) -> np.ndarray:
    """Positions of the floor(fraction*(N-1)) lowest-attention non-begin tokens."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"removal fraction must lie in [0, 1], got {fraction}")
    N = trace.N
    k = int(math.floor(fraction * (N - 1) + 1e-9))
    abar = trace.attention.mean(axis=(0, 1))
    order = [i for i in np.argsort(abar, kind="stable") if trace.categories[i] != BEGINNING]
    mask = np.zeros(N, dtype=bool)
    mask[order[:k]] = True
    return mask


def token_ablation(bundle: Bundle, caption: str, fraction: float, seed: int, baseline=None):
    """Regenerate with the lowest-attention tokens masked; returns (image, similarity to baseline)."""
    if baseline is None:
        imgs, traces = generate_traces(bundle, [caption], ["ablation"], [seed])
        baseline = (imgs[0], traces[0])
    mask = ablation_mask(baseline[1], fraction)
    img, _, _ = bundle.generate([caption], [seed], record=False, masks=mask[None])
    return img[0], similarity_score(img[0], baseline[0])


def run_ablation(bundle: Bundle, manifest: CorpusManifest, fractions=None, n_fresh=None) -> Fragment:
    _require_trained(bundle)
    cfg = bundle.cfg
    fractions = list(cfg.ablate.fractions if fractions is None else fractions)
    ps = prompt_sets(manifest, n_fresh)
    seeds = seeds_for(cfg, len(ps.captions), 5)
    base_imgs, traces = generate_traces(bundle, ps.captions, ps.ids, seeds)
    rows, recs, curves = [], [], {}
    for f in fractions:
        masks = np.stack([ablation_mask(tr, f) for tr in traces])
        imgs, _, _ = bundle.generate(ps.captions, seeds, record=False, masks=masks)
        sims = np.array([similarity_score(a, b) for a, b in zip(imgs, base_imgs)])
        lab = np.array(ps.memorized)
        m, n = float(sims[lab].mean()), float(sims[~lab].mean())
        curves[str(f)] = {"memorized": m, "nonmemorized": n}
        rows.append((f, int(masks[0].sum()), m, n))
        recs += [{"kind": "ablation", "prompt_id": pid, "fraction": f, "similarity": float(s)}
                 for pid, s in zip(ps.ids, sims)]
    frag = Fragment("ablation", cfg.echo(), {"curves": curves}, recs)
    frag.plots["ablation"] = (("fraction", "masked_tokens", "similarity_memorized", "similarity_nonmemorized"), rows)
    return frag


# -- training-time mitigation -------------------------------------------------------------

def calibrate_from_model(bundle: Bundle, manifest: CorpusManifest, percentile=None, factor=None):
    """Thresholds from identity-policy generations of the duplicated-group prompts."""
    _require_trained(bundle)
    cfg = bundle.cfg
    percentile = cfg.mitigate.percentile if percentile is None else percentile
    factor = cfg.mitigate.factor if factor is None else factor
    ps = prompt_sets(manifest, 0)
    if not ps.captions:
        raise ConfigError("corpus has no duplicated groups to calibrate on")
    _, traces = generate_traces(bundle, ps.captions, ps.ids, seeds_for(cfg, len(ps.captions), 6))
    return calibrate_thresholds(traces, percentile, factor), traces


def training_fragment(report, label="training") -> Fragment:
    return Fragment("training", {}, {label: report.as_dict()})


# -- report ---------------------------------------------------------------------------

SECTION_ORDER = ("memorization", "detection", "mitigation", "ablation", "training")


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def emit_report(fragments, out_dir) -> dict:
    """Write summary.txt, records.jsonl, report.json and one .tsv per plot series."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echoes = [json.dumps(f.config, sort_keys=True) for f in fragments if f.config]
    if len(set(echoes)) > 1:
        raise ContractError("fragments come from different configurations")
    config = json.loads(echoes[0]) if echoes else {}
    checksums = {}
    for f in fragments:
        for path, sha in f.traces.items():
            if Path(path).exists() and file_checksum(path) != sha:
                raise ContractError(f"trace {path} changed after it was written")
            checksums[path] = sha
    sections: dict = {}
    for f in fragments:
        clean = {k: v for k, v in f.data.items() if not k.startswith("_")}
        sections.setdefault(f.kind, []).append(clean)
    report = {"config": config, "sections": sections, "trace_checksums": dict(sorted(checksums.items()))}
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True, default=_json_default) + "\n")
    with open(out / "records.jsonl", "w") as fh:
        for f in fragments:
            for r in f.records:
                fh.write(json.dumps(r, sort_keys=True, default=_json_default) + "\n")
    plots = []
    for f in fragments:
        for name, (header, rows) in f.plots.items():
            path = out / f"{name}.tsv"
            with open(path, "w") as fh:
                fh.write("\t".join(header) + "\n")
                for row in rows:
                    fh.write("\t".join(_fmt(v) for v in row) + "\n")
            plots.append(path.name)
    lines = ["attention memorization lab report", ""]
    if not fragments:
        lines.append("(no results)")
    for kind in SECTION_ORDER + tuple(k for k in sections if k not in SECTION_ORDER):
        for body in sections.get(kind, []):
            lines.append(f"[{kind}]")
            lines += _summary_lines(kind, body)
            lines.append("")
    if checksums:
        lines.append("[traces]")
        lines += [f"  {sha}  {path}" for path, sha in sorted(checksums.items())]
    (out / "summary.txt").write_text("\n".join(lines).rstrip() + "\n")
    return {"summary": str(out / "summary.txt"), "records": str(out / "records.jsonl"), "plots": plots}


def _summary_lines(kind, body):
    if kind == "detection":
        rows = [f"  metric={body['metric_kind']} evaluations/prompt={body['evaluations_per_prompt']}",
                f"  {'score':<10}{'AUROC':>8}{'TPR@' + _fmt(body['fpr_budget']) + 'FPR':>14}"]
        for name, v in body["table"].items():
            rows.append(f"  {name:<10}{v['auroc']:>8.4f}{v['tpr_at_fpr']:>14.4f}")
        return rows
    if kind == "mitigation":
        rows = [f"  baseline mean similarity {body['baseline_similarity']:.4f}"]
        rows += [f"  C={C:<6} mask={body['mask_summary']}  mean similarity {m:.4f}" for C, m in body["by_C"].items()]
        if body.get("timing"):
            t = body["timing"]
            rows.append(f"  per-image seconds: plain {t['unpoliced_median_s']:.4f}  policy {t['policy_median_s']:.4f}"
                        f"  (median of {t['runs']})")
        return rows
    if kind == "ablation":
        return [f"  fraction {f:<5} memorized {v['memorized']:.4f}  non-memorized {v['nonmemorized']:.4f}"
                for f, v in body["curves"].items()]
    if kind == "training":
        rows = []
        for label, rep in body.items():
            removed = sum(r["dup"] + r["non_dup"] for r in rep["removals"])
            dup = sum(r["dup"] for r in rep["removals"])
            final = rep["losses"][-1][-1] if rep["losses"] else float("nan")
            rows.append(f"  {label}: {rep['total_seconds']:.1f}s, final loss {final:.5f}, "
                        f"validation loss {_fmt(rep['val_loss'])}, filtered {removed} samples ({dup} duplicated)")
        return rows
    return [f"  {k}: {_fmt(v)}" for k, v in sorted(body.items()) if not isinstance(v, (dict, list))] + \
           [f"  {k}: {json.dumps(v, default=_json_default)[:200]}" for k, v in sorted(body.items())
            if isinstance(v, (dict, list))]


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, StepThresholds):
        return {"per_step": o.per_step.tolist(), "percentile": o.percentile, "factor": o.factor}
    raise TypeError(type(o).__name__)
