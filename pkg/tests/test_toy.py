import numpy as np

from dive.data import Modality, ingest_manifest
from dive.toy import (VI_VIEWS, CaptionedStream, base_words, load_image, load_masks,
                      make_toy_corpus, render, sample_people)


def test_render_range_and_mask():
    person = sample_people(1, 0)[0]
    for modality in Modality:
        img, mask = render(person, VI_VIEWS[modality][0], modality, (32, 16),
                           np.random.default_rng(0))
        assert img.shape == (3, 32, 16) and mask.shape == (32, 16)
        assert img.min() >= -1 and img.max() <= 1
        assert 0.1 < mask.mean() < 0.8


def test_infrared_renders_are_grey():
    person = sample_people(1, 1)[0]
    img, _ = render(person, VI_VIEWS[Modality.INFRARED][0], "infrared",
                    rng=np.random.default_rng(0))
    assert np.abs(img - img.mean(0, keepdims=True)).max() < 0.15


def test_sample_people_respects_exclusion():
    held = sample_people(10, 0)
    others = sample_people(20, 1, exclude=held)
    assert not set(held) & set(others)
    assert sample_people(10, 0) == held


def test_corpus_layout(tmp_path):
    toy = make_toy_corpus(tmp_path, 2, 3, 2, (16, 8), seed=0)
    assert len(toy.vi) == 2 * 4 * 2 and len(toy.external) == 3 * 2 * 2
    assert ingest_manifest(tmp_path / "vi.tsv").records == toy.vi.records
    assert toy.external.modality_views == {Modality.VISIBLE: 2}
    masks = load_masks(tmp_path)
    r = toy.vi.records[0]
    assert masks[r.image_path].shape == (16, 8)
    assert load_image(tmp_path / r.image_path).shape == (3, 16, 8)
    vi_people = {toy.person(r) for r in toy.vi}
    assert not vi_people & {toy.person(r) for r in toy.external}


def test_captioned_stream_is_seeded_and_in_vocabulary():
    held = sample_people(4, 0)
    stream = CaptionedStream((16, 8), exclude=held)
    x, caps = stream.batch(5, 6)
    x2, caps2 = stream.batch(5, 6)
    np.testing.assert_array_equal(x, x2)
    assert caps == caps2
    vocab = set(base_words())
    for c in caps:
        words = c.split()
        assert set(words) <= vocab
        assert tuple(words[5:9]) not in {tuple(p.caption_words()) for p in held}
