import numpy as np
import pytest

from attnmem.config import DataConfig
from attnmem.data import (COLORS, SHAPES, CorpusManifest, caption_space, corpus_arrays,
                          load_image, parse_caption, render, synth_dataset)
from attnmem.errors import ConfigError


def small(**kw):
    base = dict(background=60, groups=4, replication=5, fresh=6, validation=10)
    base.update(kw)
    return DataConfig(**base)


def test_caption_space():
    space = caption_space()
    assert len(space) == 2 * len(SHAPES) * len(COLORS) * (len(COLORS) - 1) == 1080
    assert len(set(space)) == len(space)
    p = parse_caption(space[0])
    assert set(p) == {"size", "fg", "shape", "bg"} and p["fg"] != p["bg"]


def test_render_range_and_determinism():
    cap = "a large red circle on a blue background"
    a = render(cap, np.random.default_rng(0))
    b = render(cap, np.random.default_rng(0))
    assert a.shape == (3, 16, 16) and a.min() >= 0 and a.max() <= 1
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, render(cap, np.random.default_rng(1)))
    # the background colour dominates the corner pixel
    np.testing.assert_allclose(a[:, 0, 0], COLORS["blue"], atol=0.2)


def test_counts_and_disjoint_pools():
    man = synth_dataset(small(), seed=0)
    groups = man.groups
    assert len(groups) == 4 and all(len(r) == 5 for r in groups.values())
    assert len(man.records) == 60 + 20 and len(man.validation) == 10
    dup = {r.caption for recs in groups.values() for r in recs}
    bg = {r.caption for r in man.records if r.dup_group is None}
    assert not dup & bg
    assert not set(man.fresh_captions) & (dup | bg | {r.caption for r in man.validation})
    # every copy in a group points at one image
    assert all(len({r.image_path for r in recs}) == 1 for recs in groups.values())


def test_seeded_determinism():
    a, b = synth_dataset(small(), seed=5), synth_dataset(small(), seed=5)
    assert [r.caption for r in a.records] == [r.caption for r in b.records]
    np.testing.assert_array_equal(corpus_arrays(a), corpus_arrays(b))
    c = synth_dataset(small(), seed=6)
    assert [r.caption for r in a.records] != [r.caption for r in c.records]


def test_replication_one_has_no_groups():
    man = synth_dataset(small(replication=1), seed=0)
    assert man.groups == {} and man.counts["duplicated_groups"] == 0
    assert len(man.records) == 64


def test_template_mode():
    man = synth_dataset(small(dup_mode="template", template_variants=3), seed=0)
    for recs in man.groups.values():
        caps = {r.caption for r in recs}
        assert 1 < len(caps) <= 3
        assert len({(parse_caption(c)["shape"], parse_caption(c)["fg"]) for c in caps}) == 1


@pytest.mark.parametrize("kw", [dict(groups=1000, fresh=100), dict(replication=0), dict(dup_mode="x")])
def test_bad_config(kw):
    with pytest.raises(ConfigError):
        synth_dataset(small(**kw), seed=0)


def test_on_disk_round_trip(tmp_path):
    man = synth_dataset(small(), seed=1, out_dir=tmp_path)
    back = CorpusManifest.load(tmp_path)
    assert [r.sample_id for r in back.records] == [r.sample_id for r in man.records]
    assert back.fresh_captions == man.fresh_captions
    np.testing.assert_allclose(corpus_arrays(back), corpus_arrays(man), atol=1e-12)
    img = load_image(tmp_path / man.records[0].image_path)
    assert img.shape == (3, 16, 16)
    with pytest.raises(ConfigError):
        CorpusManifest.load(tmp_path / "missing")


def test_corpus_arrays_range():
    x = corpus_arrays(synth_dataset(small(), seed=2))
    assert x.shape == (80, 3, 16, 16) and x.min() >= -1 and x.max() <= 1
