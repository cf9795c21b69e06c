"""
A miniature memorization lab
============================

Synthesise a small duplicated-caption corpus, train briefly, then look at
detection scores, the inference-time policy and token ablation. The sizes
are shrunk so the whole script runs in a couple of minutes on one core; the
numbers it prints are illustrative only (the acceptance suite uses the full
default configuration).

    python demos/02_toy_lab.py [out_dir]
"""
import sys
from pathlib import Path

import torch

from attnmem import experiments as ex
from attnmem.config import from_dict
from attnmem.data import synth_dataset
from attnmem.training import train

torch.set_num_threads(1)
out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")

cfg = from_dict({
    "data": {"background": 300, "groups": 6, "replication": 40, "fresh": 12, "validation": 40},
    "diffusion": {"T": 40},
    "train": {"pretrain_steps": 300, "steps": 600, "batch_size": 32},
})
manifest = synth_dataset(cfg.data, cfg.seed, out / "corpus")
print(len(manifest.records), "training records,", len(manifest.groups), "duplicated groups")

bundle, report = train(cfg, manifest)
print(f"trained in {report.total_seconds:.0f}s, validation loss {report.val_loss:.4f}")

# does the model copy its duplicated images?
mem = ex.memorization_eval(bundle, manifest, n_fresh=12)
print("memorized fraction", mem.data["memorized_fraction"])

# entropy-based detection on duplicated vs fresh prompts
det = ex.run_detection(bundle, manifest, "D", n_fresh=12)
print("D AUROC", det.data["table"]["D"]["auroc"])
first = ex.run_detection(bundle, manifest, "E_layer", n_fresh=12)
for name, row in first.data["table"].items():
    print(f"  {name}: AUROC {row['auroc']:.3f}")

# begin-token rescale plus summary masking at generation time
sweep = ex.run_mitigation_sweep(bundle, manifest, [1.0, 1.25, 2.0], True, timing_runs=3)
print("similarity to training image:", sweep.data["baseline_similarity"], sweep.data["by_C"])

# keep only the most-attended tokens and compare against the full prompt
abl = ex.run_ablation(bundle, manifest, [0.0, 0.6, 1.0], n_fresh=12)
for f, v in abl.data["curves"].items():
    print(f"  drop {f}: memorized {v['memorized']:.3f}  fresh {v['nonmemorized']:.3f}")

paths = ex.emit_report([mem, det, first, sweep, abl, ex.training_fragment(report)], out / "report")
print(Path(paths["summary"]).read_text())
