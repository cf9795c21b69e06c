import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from attnmem.analytics import AttentionTrace
from attnmem.errors import ConfigError, ContractError
from attnmem.mitigation import (StepThresholds, batch_attention_entropy, calibrate_thresholds,
                                filter_batch, keep_mask, make_policy)
from attnmem.text import BEGINNING, PROMPT, SUMMARY

CATS = np.array([BEGINNING, PROMPT, SUMMARY, SUMMARY])


def test_make_policy():
    assert make_policy(1.0, False).is_identity
    p = make_policy(1.25, True)
    assert p.C == 1.25 and p.mask_summary and not p.extra_masked_tokens and p.active_layers is None
    assert make_policy(2.0, True).C == 2.0
    with pytest.raises(ConfigError):
        make_policy(0.0, True)


def trace_with_step_entropy(values):
    """Trace whose entry k has a two-point distribution; returns it with its E_t by entry."""
    T = len(values)
    a = np.zeros((T, 1, 4))
    for k, p in enumerate(values):
        a[k, 0, :2] = [p, 1 - p]
    return AttentionTrace(a, CATS, T)


def test_calibration_identical_traces():
    tr = trace_with_step_entropy([0.5, 0.9, 0.99])
    th = calibrate_thresholds([tr] * 5, 5, 1.0)
    E = -(np.array([0.5, 0.9, 0.99]) * np.log([0.5, 0.9, 0.99])
          + np.array([0.5, 0.1, 0.01]) * np.log([0.5, 0.1, 0.01]))
    # entry k is model step T - k, so slot t-1 is entry T - t
    np.testing.assert_allclose(th.per_step, E[::-1], rtol=1e-12)


def test_calibration_linear_percentile():
    # five traces, one entropy level each; 5th percentile of n=5 sits 0.2 of the way
    # from the smallest to the second smallest value
    ps = [0.5, 0.6, 0.7, 0.8, 0.9]
    traces = [trace_with_step_entropy([p, p]) for p in ps]
    e = sorted(-(p * np.log(p) + (1 - p) * np.log(1 - p)) for p in ps)
    expect = e[0] + 0.2 * (e[1] - e[0])
    th = calibrate_thresholds(traces, 5, 1.0)
    th135 = calibrate_thresholds(traces, 5, 1.35)
    np.testing.assert_allclose(th.per_step, [expect, expect], rtol=1e-12)
    np.testing.assert_allclose(th135.per_step, 1.35 * th.per_step, rtol=1e-15)


def test_calibration_contracts():
    with pytest.raises(ContractError):
        calibrate_thresholds([], 5, 1.2)


def test_filter_examples():
    th = StepThresholds(np.full(20, 1.0), 5, 1.0)
    assert filter_batch([("a", 10, 0.5), ("b", 10, 0.2)], th) == ["a", "b"]
    assert filter_batch([("a", 10, 0.5), ("b", 10, 2.0)], th) == ["a"]
    zero = StepThresholds(np.zeros(20), 5, 1.0)
    assert filter_batch([("a", 3, 0.5), ("b", 4, 0.1)], zero) == []
    with pytest.raises(ContractError):
        filter_batch([("a", 21, 0.5)], th)


@given(st.lists(st.tuples(st.integers(1, 10), st.floats(0, 3)), max_size=30),
       st.floats(0.5, 2), st.floats(0, 1))
def test_filter_monotone_in_factor(batch, factor, extra):
    base = StepThresholds(np.linspace(0.5, 2.0, 10), 5, 1.0)
    items = [(i, t, e) for i, (t, e) in enumerate(batch)]
    lo = set(filter_batch(items, base.scaled(factor)))
    hi = set(filter_batch(items, base.scaled(factor + extra)))
    assert lo <= hi


def test_vectorised_filter_agrees():
    rng = np.random.default_rng(0)
    probs = [torch.softmax(torch.randn(6, 2, 5, 4, generator=torch.Generator().manual_seed(i)), -1)
             for i in range(3)]
    ent = batch_attention_entropy(probs)
    mean = np.mean([p.mean(dim=(1, 2)).numpy() for p in probs], axis=0)
    np.testing.assert_allclose(ent.numpy(), -(mean * np.log(mean)).sum(-1), rtol=1e-5)
    t = torch.as_tensor(rng.integers(1, 11, size=6))
    th = StepThresholds(rng.uniform(0.8, 1.4, size=10), 5, 1.2)
    kept = filter_batch([(i, int(t[i]), float(ent[i])) for i in range(6)], th)
    assert kept == [i for i, k in enumerate(keep_mask(ent, t, th)) if k]


def test_thresholds_file_round_trip(tmp_path):
    th = StepThresholds(np.array([0.1, 0.25, 1 / 3]), 5.0, 1.2)
    th.save(tmp_path / "th.json")
    back = StepThresholds.load(tmp_path / "th.json")
    np.testing.assert_array_equal(back.per_step, th.per_step)
    assert back.factor == 1.2 and back.percentile == 5.0
    (tmp_path / "bad.json").write_text("{}")
    with pytest.raises(ConfigError):
        StepThresholds.load(tmp_path / "bad.json")
