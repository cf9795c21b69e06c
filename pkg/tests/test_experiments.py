import math

import numpy as np
import pytest

from attnmem import experiments as ex
from attnmem.analytics import AttentionTrace
from attnmem.config import from_dict
from attnmem.data import synth_dataset
from attnmem.errors import ConfigError, ContractError
from attnmem.text import BEGINNING, PROMPT, SUMMARY
from attnmem.training import Bundle, finetune, pretrain

TINY = {
    "seed": 1,
    "data": {"background": 40, "groups": 3, "replication": 4, "fresh": 5, "validation": 8},
    "diffusion": {"T": 8, "beta_start": 0.001, "beta_end": 0.2},
    "model": {"width": 16, "layers": 2, "heads": 2, "text_layers": 1, "text_heads": 2},
    "train": {"pretrain_steps": 2, "steps": 2, "batch_size": 8, "warmup": 0},
}


@pytest.fixture(scope="module")
def trained():
    cfg = from_dict(TINY)
    man = synth_dataset(cfg.data, cfg.seed)
    b, _ = pretrain(cfg, man)
    finetune(b, man)
    return b, man


def test_prompt_sets(trained):
    _, man = trained
    ps = ex.prompt_sets(man)
    assert ps.memorized == [True] * 3 + [False] * 5
    assert ps.ids[0] == "dup000" and ps.ids[3] == "fresh000"
    assert ps.train_images[0].min() >= -1 and ps.train_images[3] is None


def test_ablation_mask_ranks_by_mean_attention():
    a = np.zeros((2, 1, 6))
    a[:, 0] = [0.3, 0.05, 0.4, 0.1, 0.15, 0.0]
    tr = AttentionTrace(a, [BEGINNING, PROMPT, PROMPT, SUMMARY, SUMMARY, SUMMARY], 2)
    assert not ex.ablation_mask(tr, 0.0).any()
    # floor(0.6 * 5) = 3 lowest non-begin: positions 5, 1, 3
    np.testing.assert_array_equal(np.flatnonzero(ex.ablation_mask(tr, 0.6)), [1, 3, 5])
    full = ex.ablation_mask(tr, 1.0)
    assert not full[0] and full[1:].all()
    for bad in (-0.1, 1.5):
        with pytest.raises(ConfigError):
            ex.ablation_mask(tr, bad)


def test_begin_token_never_ranked_even_when_lowest():
    a = np.zeros((1, 1, 4))
    a[0, 0] = [0.0, 0.5, 0.3, 0.2]
    tr = AttentionTrace(a, [BEGINNING, PROMPT, SUMMARY, SUMMARY], 1)
    np.testing.assert_array_equal(np.flatnonzero(ex.ablation_mask(tr, 0.34)), [3])


def test_token_ablation_fraction_zero_is_identical(trained):
    b, man = trained
    cap = man.fresh_captions[0]
    img, sim = ex.token_ablation(b, cap, 0.0, seed=5)
    assert sim == pytest.approx(1.0, abs=1e-12)
    img1, sim1 = ex.token_ablation(b, cap, 1.0, seed=5)
    assert sim1 < 1.0


def test_detection_first_step_uses_one_evaluation(trained):
    b, man = trained
    frag = ex.run_detection(b, man, "E_layer", batch_size=2)
    n = 3 + 5
    assert frag.data["denoiser_calls"] == math.ceil(n / 2) and frag.data["evaluations_per_prompt"] == 1
    assert all(tr.steps == 1 for tr in frag.data["_traces"])
    assert set(frag.data["table"]) == {"E_layer1", "E_layer2"}
    full = ex.run_detection(b, man, "D")
    assert full.data["evaluations_per_prompt"] == b.schedule.T
    assert 0.0 <= full.data["table"]["D"]["auroc"] <= 1.0


def test_detection_requires_training_and_two_classes(trained):
    b, man = trained
    fresh = Bundle(b.cfg)
    with pytest.raises(ConfigError):
        ex.run_detection(fresh, man)
    with pytest.raises(ContractError):
        ex.run_detection(b, man, n_fresh=0)


def test_mitigation_sweep_baseline_row(trained):
    b, man = trained
    frag = ex.run_mitigation_sweep(b, man, [1.0], mask=False, timing_runs=0)
    assert frag.data["by_C"]["1.0"] == pytest.approx(frag.data["baseline_similarity"], abs=1e-12)
    with pytest.raises(ContractError):
        ex.run_mitigation_sweep(b, man, [1.0], mask=True, captions=[man.fresh_captions[0]], timing_runs=0)


def test_calibration_from_model(trained):
    b, man = trained
    th, traces = ex.calibrate_from_model(b, man)
    assert th.T == b.schedule.T and len(traces) == 3
    assert np.all(th.per_step > 0)


def test_report_mixed_echo_rejected(tmp_path):
    a = ex.Fragment("detection", {"seed": 1}, {})
    b = ex.Fragment("detection", {"seed": 2}, {})
    with pytest.raises(ContractError):
        ex.emit_report([a, b], tmp_path)


def test_report_detects_modified_trace(trained, tmp_path):
    b, man = trained
    frag = ex.run_detection(b, man, "E_layer", trace_dir=tmp_path / "tr")
    ex.emit_report([frag], tmp_path / "ok")
    path = next(iter(frag.traces))
    with open(path, "ab") as fh:
        fh.write(b"x")
    with pytest.raises(ContractError):
        ex.emit_report([frag], tmp_path / "bad")


def test_report_summary_sections(tmp_path):
    from attnmem.training import TrainReport
    rep = TrainReport(losses=[("finetune", 4, 0.5)], total_seconds=2.0, val_loss=0.25,
                      removals=[{"phase": "finetune", "step": 4, "dup": 3, "non_dup": 1, "seen": 8}])
    abl = ex.Fragment("ablation", {}, {"curves": {"0.6": {"memorized": 0.9, "nonmemorized": 0.7}}}, [])
    paths = ex.emit_report([abl, ex.training_fragment(rep, "filtered")], tmp_path)
    text = open(paths["summary"]).read()
    assert "fraction 0.6   memorized 0.9000  non-memorized 0.7000" in text
    assert "filtered: 2.0s, final loss 0.50000, validation loss 0.25, filtered 4 samples (3 duplicated)" in text
