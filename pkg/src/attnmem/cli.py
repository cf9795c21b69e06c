"""Command-line entry point: ``attnmem <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 numeric divergence, 4 contract error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import experiments as ex
from .config import LabConfig, dump_config, from_dict, load_config
from .data import CorpusManifest, save_image, synth_dataset
from .errors import ConfigError, ContractError, LabError, NumericDivergence
from .mitigation import StepThresholds, make_policy
from .training import Bundle, finetune, pretrain

log = logging.getLogger("attnmem")

FLAG_KEYS = {"seed": "seed", "C": "mitigate.C", "mask_summary": "mitigate.mask_summary", "T_D": "detect.T_D",
             "layer": "detect.layer", "factor": "mitigate.factor", "percentile": "mitigate.percentile"}
# sections a checkpoint fixes; a config given alongside a checkpoint must agree on them
FIXED = ("data", "diffusion", "model", "train")


def _config(args, base: LabConfig | None = None) -> LabConfig:
    overrides = {key: getattr(args, name, None) for name, key in FLAG_KEYS.items()}
    if base is None:
        return load_config(args.config, overrides)
    raw = base.echo()
    if args.config:
        given = load_config(args.config).echo()
        for sec in FIXED:
            if given[sec] != raw[sec]:
                raise ConfigError(f"config section '{sec}' disagrees with the checkpoint")
        raw = given
    for key, value in overrides.items():
        if value is None:
            continue
        node = raw
        *parents, leaf = key.split(".")
        for p in parents:
            node = node[p]
        node[leaf] = value
    return from_dict(raw)


def _bundle(args) -> Bundle:
    b = Bundle.load(args.checkpoint)
    b.cfg = _config(args, b.cfg)
    return b


def _corpus(args) -> CorpusManifest:
    return CorpusManifest.load(args.corpus)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=ex._json_default) + "\n")


def _save_fragment(frag: ex.Fragment, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "fragment.json", {
        "kind": frag.kind, "config": frag.config,
        "data": {k: v for k, v in frag.data.items() if not k.startswith("_")},
        "records": frag.records, "plots": {k: [list(h), [list(r) for r in rows]] for k, (h, rows) in frag.plots.items()},
        "traces": frag.traces,
    })


def _load_fragment(path) -> ex.Fragment:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read fragment {path}: {exc}") from exc
    return ex.Fragment(d["kind"], d["config"], d["data"], d["records"],
                       {k: (tuple(h), [tuple(r) for r in rows]) for k, (h, rows) in d["plots"].items()},
                       d["traces"])


# -- subcommands ------------------------------------------------------------------------

def cmd_synth(args):
    cfg = _config(args)
    out = Path(args.out)
    man = synth_dataset(cfg.data, cfg.seed, out)
    dump_config(cfg, out / "config.yaml")
    print(f"{len(man.records)} records, {len(man.groups)} duplicated groups -> {out}")


def cmd_train(args):
    cfg = _config(args)
    man = _corpus(args)
    th = StepThresholds.load(args.thresholds) if args.thresholds else None
    pre = Bundle.load(args.pretrained) if args.pretrained else None
    if pre is not None:
        pre.cfg = cfg
    out = Path(args.out)
    bundle = pre or Bundle(cfg)
    try:
        if pre is None:
            bundle, _ = pretrain(cfg, man, bundle)
            if args.save_pretrained:
                bundle.save(args.save_pretrained)
        report = finetune(bundle, man, th)
    except NumericDivergence:
        bundle.save(out.with_suffix(".lastgood.pt"))
        log.error("training diverged; last good weights saved to %s", out.with_suffix(".lastgood.pt"))
        raise
    bundle.history = report.as_dict()
    bundle.save(out)
    summary = {"config": cfg.echo(), "model_id": bundle.model_id, **report.as_dict()}
    _write_json(out.with_suffix(".report.json"), summary)
    removed = sum(r["dup"] + r["non_dup"] for r in report.removals)
    print(f"trained {bundle.trained_steps} steps in {report.total_seconds:.1f}s, "
          f"val loss {report.val_loss:.5f}, removed {removed} samples -> {out}")


def cmd_calibrate(args):
    b = _bundle(args)
    th, traces = ex.calibrate_from_model(b, _corpus(args))
    th.save(args.out)
    if args.trace_dir:
        ex.save_traces(traces, args.trace_dir)
    print(f"thresholds for T={th.T} (percentile {th.percentile}, factor {th.factor}) -> {args.out}")


def cmd_generate(args):
    b = _bundle(args)
    cfg = b.cfg
    policy = make_policy(cfg.mitigate.C, cfg.mitigate.mask_summary) if args.mitigate else None
    prompts = list(args.prompt)
    seeds = [cfg.seed + i for i in range(len(prompts))]
    ids = [f"p{i:03d}" for i in range(len(prompts))]
    imgs, traces = ex.generate_traces(b, prompts, ids, seeds, policy)
    out = Path(args.out)
    sums = ex.save_traces(traces, out)
    index = []
    for pid, cap, seed, img in zip(ids, prompts, seeds, imgs):
        save_image(((img.numpy() + 1) / 2).clip(0, 1), out / f"{pid}.png")
        index.append({"prompt_id": pid, "caption": cap, "seed": seed, "image": f"{pid}.png",
                      "trace": f"{pid}.trace", "trace_sha256": sums[str(out / f"{pid}.trace")]})
    _write_json(out / "generations.json", {"config": cfg.echo(), "model_id": b.model_id,
                                           "policy": traces[0].policy, "items": index})
    print(f"{len(prompts)} generation(s) -> {out}")


def cmd_detect(args):
    b = _bundle(args)
    out = Path(args.out)
    frag = ex.run_detection(b, _corpus(args), args.metric, b.cfg.detect.T_D, b.cfg.detect.layer,
                            n_fresh=args.n_fresh, trace_dir=out / "traces")
    from .traceio import write_detection_records
    write_detection_records([_as_result(r) for r in frag.records], out / "detection.jsonl")
    _save_fragment(frag, out)
    for name, v in frag.data["table"].items():
        print(f"{name:<10} AUROC {v['auroc']:.4f}  TPR@{frag.data['fpr_budget']}FPR {v['tpr_at_fpr']:.4f}")


def _as_result(r):
    from .analytics import DetectionResult
    return DetectionResult(r["prompt_id"], r["score"], r["label"], r["metric_kind"], r["layer"])


def cmd_mitigate_sweep(args):
    b = _bundle(args)
    Cs = args.sweep if args.sweep else None
    frag = ex.run_mitigation_sweep(b, _corpus(args), Cs, b.cfg.mitigate.mask_summary, timing_runs=args.timing_runs)
    _save_fragment(frag, Path(args.out))
    print(f"baseline {frag.data['baseline_similarity']:.4f}  " +
          "  ".join(f"C={C}: {m:.4f}" for C, m in frag.data["by_C"].items()))


def cmd_ablate(args):
    b = _bundle(args)
    frag = ex.run_ablation(b, _corpus(args), args.fractions, n_fresh=args.n_fresh)
    _save_fragment(frag, Path(args.out))
    for f, v in frag.data["curves"].items():
        print(f"fraction {f}: memorized {v['memorized']:.4f}  non-memorized {v['nonmemorized']:.4f}")


def cmd_report(args):
    frags = [_load_fragment(p) for p in args.fragments]
    paths = ex.emit_report(frags, args.out)
    print(f"report -> {paths['summary']}")


# -- parser -----------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="attnmem", description="Attention-entropy memorization lab")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1, deterministic)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False, corpus=False):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--C", type=float, dest="C", help="begin-token rescale factor")
        sp.add_argument("--mask-summary", dest="mask_summary", action=argparse.BooleanOptionalAction, default=None)
        sp.add_argument("--T-D", dest="T_D", type=int, help="trailing steps used by D")
        sp.add_argument("--layer", type=int, help="single layer for the first-step detector")
        sp.add_argument("--factor", type=float, help="threshold multiplier")
        sp.add_argument("--percentile", type=float, help="calibration percentile")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)
        if corpus:
            sp.add_argument("--corpus", required=True, help="directory written by 'synth'")
        sp.add_argument("--out", required=True)

    sp = sub.add_parser("synth", help="render the duplicated-caption corpus")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="pretrain on clean data, then fine-tune on the full corpus")
    common(sp, corpus=True)
    sp.add_argument("--thresholds", help="JSON thresholds from 'calibrate' (enables the filter)")
    sp.add_argument("--pretrained", help="skip pretraining and start from this checkpoint")
    sp.add_argument("--save-pretrained", dest="save_pretrained")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("calibrate", help="per-step entropy thresholds from memorized prompts")
    common(sp, checkpoint=True, corpus=True)
    sp.add_argument("--trace-dir")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("generate", help="sample images and write attention traces")
    common(sp, checkpoint=True)
    sp.add_argument("--prompt", action="append", required=True)
    sp.add_argument("--mitigate", action="store_true", help="apply the (C, mask-summary) policy")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("detect", help="score duplicated vs fresh prompts")
    common(sp, checkpoint=True, corpus=True)
    sp.add_argument("--metric", choices=["D", "E_layer"], default="D")
    sp.add_argument("--n-fresh", dest="n_fresh", type=int)
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("mitigate-sweep", help="similarity to training images across C")
    common(sp, checkpoint=True, corpus=True)
    sp.add_argument("--sweep", type=float, nargs="+")
    sp.add_argument("--timing-runs", dest="timing_runs", type=int, default=20)
    sp.set_defaults(func=cmd_mitigate_sweep)

    sp = sub.add_parser("ablate", help="mask lowest-attention tokens and regenerate")
    common(sp, checkpoint=True, corpus=True)
    sp.add_argument("--fractions", type=float, nargs="+")
    sp.add_argument("--n-fresh", dest="n_fresh", type=int)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("report", help="merge fragment.json files into a report")
    sp.add_argument("fragments", nargs="*")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        args.func(args)
    except LabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
