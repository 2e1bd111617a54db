import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dive.data import (EmptyCorpusError, ManifestError, MergePlan, Modality, ReidCorpus,
                       ReidRecord, corpus_stats, format_manifest, ingest_manifest,
                       ingest_market_layout, ingest_sysu_layout, merge, select_identities,
                       write_manifest)


def rec(path, ident, mod="visible", cam=0, ds="a", syn=False):
    return ReidRecord(path, ident, mod, cam, ds, syn)


def test_manifest_roundtrip(tmp_path):
    corpus = ReidCorpus((rec("x.png", 1), rec("y.png", 2, "infrared", 1, syn=True)))
    p = write_manifest(corpus, tmp_path / "m.tsv")
    back = ingest_manifest(p)
    assert back.records == corpus.records
    assert back.modality_views == {Modality.VISIBLE: 1, Modality.INFRARED: 2}


def test_manifest_five_columns_and_comments(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("# comment\n\na.png\t3\tvisible\t0\tds\n")
    (r,) = ingest_manifest(p).records
    assert r.identity == 3 and not r.is_synthetic


@pytest.mark.parametrize("line, fragment", [
    ("a.png\t1\tthermal\t0\tds", "unknown modality"),
    ("a.png\tone\tvisible\t0\tds", "identity must be an integer"),
    ("a.png\t1\tvisible\tx\tds", "camera_id must be an integer"),
    ("a.png\t1\tvisible", "expected 5 or 6"),
    ("a.png\t-2\tvisible\t0\tds", "identity must be >= 0"),
    ("a.png\t1\tvisible\t0\tds\tmaybe", "is_synthetic"),
])
def test_manifest_errors_carry_line_numbers(tmp_path, line, fragment):
    p = tmp_path / "m.tsv"
    p.write_text("# header\n" + line + "\n")
    with pytest.raises(ManifestError) as err:
        ingest_manifest(p)
    assert err.value.lineno == 2
    assert fragment in str(err.value)
    assert str(err.value).startswith("line 2")


def test_duplicate_paths_rejected(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("a.png\t1\tvisible\t0\tds\na.png\t2\tvisible\t0\tds\n")
    with pytest.raises(ManifestError, match="duplicate"):
        ingest_manifest(p)


def _touch(path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"")


def test_market_layout(tmp_path):
    for name in ["0002_c1s1_000451_03.jpg", "0002_c3s1_000551_01.jpg", "-1_c1s1_000001_00.jpg",
                 "0000_c2s1_000001_00.jpg", "0007_c6s4_002202_02.jpg", "readme.jpg"]:
        _touch(tmp_path / "bounding_box_train" / name)
    with pytest.warns(UserWarning, match="skipped 1"):
        corpus = ingest_market_layout(tmp_path)
    assert sorted(corpus.identity_set) == [2, 7]
    assert sorted(r.camera_id for r in corpus) == [0, 2, 5]
    assert all(r.modality is Modality.VISIBLE for r in corpus)


def test_market_layout_empty(tmp_path):
    _touch(tmp_path / "notes.jpg")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(EmptyCorpusError):
            ingest_market_layout(tmp_path)


def test_sysu_layout_maps_cameras_to_views(tmp_path):
    for cam in range(1, 7):
        _touch(tmp_path / f"cam{cam}" / "0001" / "0001.jpg")
    corpus = ingest_sysu_layout(tmp_path)
    assert corpus.modality_views == {Modality.VISIBLE: 4, Modality.INFRARED: 2}
    ir = sorted((r.image_path.split("/")[-3], r.camera_id) for r in corpus
                if r.modality is Modality.INFRARED)
    assert ir == [("cam3", 0), ("cam6", 1)]


def test_select_identities_strict_threshold():
    corpus = ReidCorpus(tuple(rec(f"{i}_{k}.png", i) for i in range(4) for k in range(i + 1)))
    assert select_identities(corpus, 2) == [2, 3]
    assert select_identities(corpus, 0) == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        select_identities(corpus, -1)


def test_merge_offsets_external_ids():
    base = ReidCorpus((rec("a", 0), rec("b", 1)))
    ext = ReidCorpus((rec("c", 0, ds="e"),))
    merged = merge(MergePlan(base, ext))
    assert merged.identity_set == {0, 1, 2}
    with pytest.raises(ValueError, match="collides"):
        MergePlan(base, ext, id_offset=1)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=1, max_size=20),
       st.lists(st.integers(0, 30), min_size=1, max_size=20), st.integers(0, 5))
def test_merge_disjoint_and_size_preserving(base_ids, ext_ids, extra):
    base = ReidCorpus(tuple(rec(f"b{k}", i) for k, i in enumerate(base_ids)))
    ext = ReidCorpus(tuple(rec(f"e{k}", i, ds="e") for k, i in enumerate(ext_ids)))
    plan = MergePlan(base, ext, base.max_identity() + 1 + extra)
    merged = merge(plan)
    assert len(merged) == len(base) + len(ext)
    shifted = {i + plan.id_offset for i in ext.identity_set}
    assert not (shifted & base.identity_set)
    assert merged.identity_set == base.identity_set | shifted


def test_corpus_stats_table():
    corpus = ReidCorpus((rec("a", 0), rec("b", 0, "infrared", 1), rec("c", 1, cam=1)))
    stats = corpus_stats(corpus)
    assert stats.identities == 2
    assert stats.images == {"visible": 2, "infrared": 1}
    assert stats.cameras == {"visible": 2, "infrared": 2}
    assert "identities" in stats.format_table()


def test_format_manifest_has_header():
    text = format_manifest([rec("a", 0)])
    assert text.splitlines()[0].startswith("# path")
    assert text.splitlines()[1] == "a\t0\tvisible\t0\ta\t0"
