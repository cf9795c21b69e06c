import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from attnmem.similarity import MEMORIZED_THRESHOLD, pairwise_diversity, similarity_score

images = arrays(np.float64, (3, 8, 8), elements=st.floats(-1, 1))


def test_self_similarity_is_one():
    img = np.random.default_rng(0).normal(size=(3, 16, 16))
    assert similarity_score(img, img) == pytest.approx(1.0, abs=1e-12)


def test_accepts_torch_and_2d():
    img = torch.randn(3, 16, 16, generator=torch.Generator().manual_seed(0))
    assert similarity_score(img, img.numpy()) == pytest.approx(1.0, abs=1e-12)
    g = np.arange(16.0).reshape(4, 4)
    assert similarity_score(g, g) == pytest.approx(1.0)


def test_zero_variance_scores_zero():
    flat = np.full((3, 8, 8), 0.3)
    other = np.random.default_rng(1).normal(size=(3, 8, 8))
    assert similarity_score(flat, other) == 0.0
    assert similarity_score(flat, flat) == 0.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        similarity_score(np.zeros((3, 8, 8)), np.zeros((3, 4, 4)))


def test_hand_example():
    # pooled 2x2 blocks of a 4x4 single-channel image
    a = np.kron(np.array([[1.0, 0.0], [0.0, 0.0]]), np.ones((2, 2)))
    b = np.kron(np.array([[1.0, 1.0], [0.0, 0.0]]), np.ones((2, 2)))
    da = np.array([0.75, -0.25, -0.25, -0.25])
    db = np.array([0.5, 0.5, -0.5, -0.5])
    expect = da @ db / np.linalg.norm(da) / np.linalg.norm(db)
    assert similarity_score(a, b) == pytest.approx(expect, abs=1e-12)
    assert expect == pytest.approx(1 / np.sqrt(3), abs=1e-12)


def test_invariant_to_brightness_and_contrast_per_channel():
    img = np.random.default_rng(2).normal(size=(3, 8, 8))
    moved = img * np.array([2.0, 0.5, 3.0])[:, None, None] + np.array([1.0, -4.0, 0.2])[:, None, None]
    # per-channel gain changes the mix between channels, so only the offset is exact
    shifted = img + np.array([1.0, -4.0, 0.2])[:, None, None]
    assert similarity_score(img, shifted) == pytest.approx(1.0, abs=1e-12)
    assert similarity_score(img, moved) > 0.5


@settings(max_examples=200)
@given(images, images)
def test_symmetric_and_bounded(a, b):
    s = similarity_score(a, b)
    assert s == pytest.approx(similarity_score(b, a), abs=1e-12)
    assert -1.0 <= s <= 1.0


def test_independent_noise_is_near_zero():
    # 1000 independent pairs: the mean is centred on 0 and the spread follows 1/sqrt(dim)
    rng = np.random.default_rng(3)
    vals = np.array([similarity_score(rng.normal(size=(3, 16, 16)), rng.normal(size=(3, 16, 16)))
                     for _ in range(1000)])
    dim = 3 * 8 * 8 - 3
    assert abs(vals.mean()) < 4 / np.sqrt(dim * 1000)
    assert vals.std() == pytest.approx(1 / np.sqrt(dim), rel=0.1)
    assert np.mean(vals >= MEMORIZED_THRESHOLD) == 0.0


def test_pairwise_diversity():
    img = np.random.default_rng(4).normal(size=(3, 8, 8))
    assert pairwise_diversity([img, img, img]) == pytest.approx(0.0, abs=1e-12)
    assert pairwise_diversity([img, -img]) == pytest.approx(2.0, abs=1e-12)
    assert pairwise_diversity([img]) == 0.0


def test_negated_image_scores_minus_one():
    img = np.random.default_rng(5).normal(size=(3, 16, 16))
    assert similarity_score(img, -img) == pytest.approx(-1.0, abs=1e-12)


def test_noise_pairs_stay_below_point_three():
    rng = np.random.default_rng(6)
    vals = [abs(similarity_score(rng.normal(size=(3, 16, 16)), rng.normal(size=(3, 16, 16)))) for _ in range(1000)]
    assert np.mean(np.array(vals) < 0.3) >= 0.99
