import math
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from attnmem.analytics import (AttentionTrace, DetectionResult, auroc, category_attention_sums,
                               d_statistic, detection_D, entropy, first_step_layer_entropy,
                               mean_attention, step_entropies, step_summary_entropies,
                               summary_entropy, tpr_at_fpr)
from attnmem.errors import ContractError
from attnmem.text import BEGINNING, PROMPT, SUMMARY


def cats(N, prompt_len):
    return np.array([BEGINNING] + [PROMPT] * prompt_len + [SUMMARY] * (N - 1 - prompt_len))


def random_trace(rng, T=10, L=3, N=8, prompt_len=3):
    a = rng.dirichlet(np.ones(N) * 0.5, size=(T, L))
    return AttentionTrace(a, cats(N, prompt_len), T)


# -- entropy ----------------------------------------------------------------

def test_entropy_examples():
    assert entropy(np.full(4, 0.25)) == pytest.approx(math.log(4), abs=1e-12)
    assert entropy([0, 0, 1, 0]) == 0.0
    assert entropy([0.5, 0.5, 0, 0]) == pytest.approx(math.log(2), abs=1e-12)


def test_entropy_contract():
    with pytest.raises(ContractError):
        entropy([-0.1, 1.1])
    with pytest.raises(ContractError):
        entropy([0.5, 0.4])


@settings(max_examples=200)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(0, 1)))
def test_entropy_bounds(raw):
    if raw.sum() <= 1e-6:
        return
    a = raw / raw.sum()
    assert -1e-12 <= entropy(a) <= math.log(a.size) + 1e-12


# -- mean attention ---------------------------------------------------------

def test_mean_attention_examples():
    one = AttentionTrace(np.array([[[0.1, 0.2, 0.3, 0.4]]]), cats(4, 1), 1)
    np.testing.assert_array_equal(mean_attention(one, 0), [0.1, 0.2, 0.3, 0.4])
    two = AttentionTrace(np.array([[[1.0, 0, 0, 0], [0, 1.0, 0, 0]]]), cats(4, 1), 1)
    np.testing.assert_array_equal(mean_attention(two, 0), [0.5, 0.5, 0, 0])
    np.testing.assert_array_equal(mean_attention(two, 0, 2), [0, 1.0, 0, 0])
    with pytest.raises(ContractError):
        mean_attention(two, 1)
    with pytest.raises(ContractError):
        mean_attention(two, 0, 3)


def test_mean_attention_sums_to_one():
    rng = np.random.default_rng(0)
    tr = random_trace(rng)
    for k in range(tr.steps):
        assert abs(mean_attention(tr, k).sum() - 1) < 1e-9


# -- summary entropy --------------------------------------------------------

def test_summary_entropy_examples():
    assert summary_entropy([1.0, 0.0, 0.0], 2) == 0.0
    assert summary_entropy([0.5, 0.25, 0.25], 2) == pytest.approx(0.5 * math.log(4), abs=1e-12)
    assert summary_entropy([0, 0, 0, 1.0], 3) == 0.0
    with pytest.raises(ContractError):
        summary_entropy([0.5, 0.5], 2)


@given(arrays(np.float64, st.integers(2, 10), elements=st.floats(0, 1)), st.data())
def test_summary_entropy_nonnegative(raw, data):
    if raw.sum() <= 1e-6:
        return
    a = raw / raw.sum()
    S = data.draw(st.integers(1, a.size - 1))
    assert summary_entropy(a, S) >= 0


# -- D ------------------------------------------------------------------------

def test_d_hand_example():
    assert d_statistic([1.0, 1.2], [0.3, 0.4], 0.5) == pytest.approx(1.25, abs=1e-12)


def test_d_with_injected_entropy_series():
    # trace whose last two entries have known E_t and E_t^summary
    T, N = 4, 4
    first = np.array([0.25, 0.25, 0.25, 0.25])
    a = np.tile(first, (T, 1, 1))
    a[-2, 0] = [0.5, 0.5, 0.0, 0.0]        # produces x_1
    a[-1, 0] = [0.7, 0.1, 0.1, 0.1]        # produces x_0
    tr = AttentionTrace(a, cats(N, 1), T)
    E0 = entropy(a[-1, 0])
    E1 = math.log(2)
    S0 = 2 * (-0.1 * math.log(0.1))
    S1 = 0.0
    ST = 2 * (-0.25 * math.log(0.25))
    expect = (E0 + E1) / 2 + (abs(S0 - ST) + abs(S1 - ST)) / 2
    assert detection_D(tr, T_D=2) == pytest.approx(expect, abs=1e-12)


def test_d_constant_trace():
    v = np.array([0.4, 0.3, 0.2, 0.1])
    tr = AttentionTrace(np.tile(v, (10, 2, 1)), cats(4, 1), 10)
    assert detection_D(tr) == pytest.approx(entropy(v), abs=1e-12)


def test_d_default_window_and_contracts():
    rng = np.random.default_rng(1)
    tr = random_trace(rng, T=20)
    E, Es = step_entropies(tr), step_summary_entropies(tr)
    expect = E[-4:].mean() + np.abs(Es[-4:] - Es[0]).mean()
    assert detection_D(tr) == pytest.approx(expect, abs=1e-12)
    short = AttentionTrace(tr.attention[:5], tr.categories, 20)
    with pytest.raises(ContractError):
        detection_D(short)
    with pytest.raises(ContractError):
        detection_D(tr, T_D=0)


def test_d_invariant_to_prompt_token_permutation():
    rng = np.random.default_rng(2)
    tr = random_trace(rng, T=10, N=8, prompt_len=4)
    perm = np.arange(8)
    perm[1:5] = perm[1:5][::-1]
    swapped = AttentionTrace(tr.attention[..., perm], tr.categories, tr.T)
    assert detection_D(swapped) == pytest.approx(detection_D(tr), abs=1e-12)


# -- first-step layer entropy ---------------------------------------------------

def test_first_step_layer_entropy():
    a = np.zeros((3, 2, 4))
    a[:, 0, 2] = 1.0
    a[:, 1] = 0.25
    tr = AttentionTrace(a, cats(4, 1), 3)
    assert first_step_layer_entropy(tr, 1) == 0.0
    assert first_step_layer_entropy(tr, 2) == pytest.approx(math.log(4))
    with pytest.raises(ContractError):
        first_step_layer_entropy(tr, 3)


# -- category sums --------------------------------------------------------------

def test_category_sums_examples():
    a = np.zeros((5, 2, 16))
    a[..., 0] = 1
    sums = category_attention_sums(AttentionTrace(a, cats(16, 7), 5))
    assert np.all(sums["begin"] == 1) and np.all(sums["prompt"] == 0) and np.all(sums["summary"] == 0)
    u = AttentionTrace(np.full((5, 2, 16), 1 / 16), cats(16, 7), 5)
    sums = category_attention_sums(u)
    np.testing.assert_allclose(sums["begin"], 1 / 16)
    np.testing.assert_allclose(sums["prompt"], 7 / 16)
    np.testing.assert_allclose(sums["summary"], 8 / 16)


def test_category_sums_partition_unity():
    tr = random_trace(np.random.default_rng(5))
    s = category_attention_sums(tr)
    np.testing.assert_allclose(s["begin"] + s["prompt"] + s["summary"], 1, atol=1e-6)


# -- ROC ----------------------------------------------------------------------

def results(pos, neg):
    return ([DetectionResult(f"p{i}", s, True) for i, s in enumerate(pos)]
            + [DetectionResult(f"n{i}", s, False) for i, s in enumerate(neg)])


def pair_enumeration(pos, neg):
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_auroc_examples():
    assert auroc(results([3, 4], [1, 2])) == 1.0
    assert auroc(results([2, 4], [1, 3])) == 0.75
    assert auroc(results([1, 1], [1, 1, 1])) == 0.5
    with pytest.raises(ContractError):
        auroc(results([1, 2], []))


@given(st.lists(st.integers(-5, 5), min_size=1, max_size=12),
       st.lists(st.integers(-5, 5), min_size=1, max_size=12))
def test_auroc_matches_pair_enumeration_and_is_rank_invariant(pos, neg):
    a = auroc(results(pos, neg))
    assert a == pytest.approx(pair_enumeration(pos, neg), abs=1e-12)
    squash = lambda v: [math.atan(x) * 3 + 7 for x in v]
    assert auroc(results(squash(pos), squash(neg))) == pytest.approx(a, abs=1e-12)


def test_tpr_at_fpr_examples():
    assert tpr_at_fpr(results([3, 4], [1, 2]), 0.0) == 1.0
    assert tpr_at_fpr(results([3, 4], [1, 2]), 0.5) == 1.0
    assert tpr_at_fpr(results([2, 4], [1, 3]), 0.0) == 0.5
    assert tpr_at_fpr(results([2, 4], [1, 3]), 1.0) == 1.0
    assert tpr_at_fpr(results([0], [1, 2, 3]), 1.0) == 1.0
    with pytest.raises(ContractError):
        tpr_at_fpr(results([], [1]), 0.1)


def test_detection_result_rejects_nan():
    with pytest.raises(ContractError):
        DetectionResult("x", float("nan"), True)
