import pytest
import torch

from dive.data import Modality, ReidCorpus, ReidRecord, ingest_manifest
from dive.diffusion import Checkpoint, NoiseSchedule, ToyUNet, attach_adapters
from dive.expansion import (LOG_NAME, ExpansionError, ExpansionPlan, decode_filename, expand,
                            finalize_merge, image_seed, read_log)
from dive.prompts import PromptEncoder, TokenRegistry, UnregisteredTokenError
from dive.sampling import SamplerConfig
from helpers import TINY, WORDS


def tiny_checkpoint(n_ids=2, n_views=2):
    torch.manual_seed(0)
    model, adapters = attach_adapters(ToyUNet(TINY), rank=2)
    reg = TokenRegistry(WORDS, dim=TINY.text_dim)
    for i in range(n_ids):
        reg.register_identity(i, rng_seed=i, namespace="ext")
    views = [reg.register_view("infrared", c, "vi").surface for c in range(n_views)]
    reg.register_view("visible", 0, "vi")
    return Checkpoint(model, adapters, reg, PromptEncoder(TINY.text_dim), NoiseSchedule()), views


def plan_for(tmp_path, ckpt, views, **kw):
    args = dict(images_per_view=3, seed=7, id_offset=10, sampler=SamplerConfig(steps=2),
                image_size=(8, 4))
    args.update(kw)
    return ExpansionPlan(ckpt, [1, 0], "ext", views, tmp_path / "out", **args)


def test_expand_counts_records_and_names(tmp_path):
    ckpt, views = tiny_checkpoint()
    res = expand(plan_for(tmp_path, ckpt, views))
    assert len(res.corpus) == 2 * 2 * 3
    assert len(list((tmp_path / "out" / "images").glob("*.png"))) == 12
    for r in res.corpus:
        assert r.modality is Modality.INFRARED and r.is_synthetic
        assert r.identity in (10, 11)
        id_tok, view_tok, k = decode_filename(r.image_path)
        assert views.index(view_tok) == r.camera_id
        assert ckpt.registry.token(id_tok).ref == ("ext", r.identity - 10)
        assert 0 <= k < 3
    assert ingest_manifest(res.manifest_path).records == res.corpus.records
    assert [s for _, s, _, _ in read_log(tmp_path / "out" / LOG_NAME)] == ["done"] * 4


def test_expand_is_idempotent_and_resumable(tmp_path):
    ckpt, views = tiny_checkpoint()
    plan = plan_for(tmp_path, ckpt, views)
    expand(plan)
    images = {p.name: p.read_bytes() for p in (tmp_path / "out" / "images").iterdir()}
    manifest = (tmp_path / "out" / "synthetic.tsv").read_bytes()
    res = expand(plan)
    assert res.generated_cells == [] and len(res.resumed_cells) == 4
    assert {p.name: p.read_bytes() for p in (tmp_path / "out" / "images").iterdir()} == images
    assert (tmp_path / "out" / "synthetic.tsv").read_bytes() == manifest


def test_interrupted_run_resumes_without_duplicates(tmp_path, monkeypatch):
    ckpt, views = tiny_checkpoint()
    plan = plan_for(tmp_path, ckpt, views)
    reference = expand(plan_for(tmp_path / "ref", ckpt, views))

    import dive.expansion as ex
    real = ex._write_cell
    calls = {"n": 0}

    def flaky(cell, images, image_dir):
        calls["n"] += 1
        if calls["n"] == 2:
            raise OSError("disk full")
        real(cell, images, image_dir)

    monkeypatch.setattr(ex, "_write_cell", flaky)
    with pytest.raises(ExpansionError) as err:
        expand(plan)
    assert err.value.cell is not None and "disk full" in str(err.value)
    monkeypatch.setattr(ex, "_write_cell", real)
    res = expand(plan)
    assert len(res.resumed_cells) == 1 and len(res.generated_cells) == 3
    statuses = [s for _, s, _, _ in read_log(tmp_path / "out" / LOG_NAME)]
    assert statuses == ["done", "resumed", "done", "done", "done"]
    out = tmp_path / "out" / "images"
    assert len(list(out.glob("*.png"))) == 12 and not list(out.glob("*.tmp"))
    for p in (tmp_path / "ref" / "out" / "images").iterdir():
        assert (out / p.name).read_bytes() == p.read_bytes()
    assert reference.corpus.records == res.corpus.records


def test_parallel_jobs_match_serial(tmp_path):
    ckpt, views = tiny_checkpoint()
    a = expand(plan_for(tmp_path / "a", ckpt, views), jobs=1)
    b = expand(plan_for(tmp_path / "b", ckpt, views), jobs=2)
    assert a.corpus.records == b.corpus.records
    for p in (tmp_path / "a" / "out" / "images").iterdir():
        assert (tmp_path / "b" / "out" / "images" / p.name).read_bytes() == p.read_bytes()


def test_plan_validation(tmp_path):
    ckpt, views = tiny_checkpoint()
    with pytest.raises(ValueError):
        plan_for(tmp_path, ckpt, views, images_per_view=0)
    with pytest.raises(ValueError):
        ExpansionPlan(ckpt, [], "ext", views, tmp_path)
    with pytest.raises(UnregisteredTokenError):
        expand(ExpansionPlan(ckpt, [5], "ext", views, tmp_path / "o"))
    visible = ckpt.registry.view("visible", 0, "vi").surface
    with pytest.raises(ValueError, match="infrared"):
        expand(ExpansionPlan(ckpt, [0], "ext", [visible], tmp_path / "o"))


def test_image_seed_depends_on_every_part():
    base = image_seed(0, "aaaaaaaa", "bbbbbbbb", 0)
    assert base == image_seed(0, "aaaaaaaa", "bbbbbbbb", 0)
    assert len({base, image_seed(1, "aaaaaaaa", "bbbbbbbb", 0),
                image_seed(0, "aaaaaaab", "bbbbbbbb", 0), image_seed(0, "aaaaaaaa", "bbbbbbbc", 0),
                image_seed(0, "aaaaaaaa", "bbbbbbbb", 1)}) == 5


def test_decode_filename_rejects_foreign_names():
    with pytest.raises(ValueError):
        decode_filename("photo.png")


def _r(path, ident, mod, ds, syn=False):
    return ReidRecord(path, ident, mod, 0, ds, syn)


def test_finalize_merge_pairs_identities():
    vi = ReidCorpus((_r("a", 0, "visible", "vi"), _r("b", 0, "infrared", "vi"),
                     _r("c", 1, "visible", "vi"), _r("d", 1, "infrared", "vi")))
    v_ext = ReidCorpus((_r("e", 0, "visible", "ext"),))
    i_ext = ReidCorpus((_r("f", 2, "infrared", "ext", True),))
    v_star, i_star = finalize_merge(vi, v_ext, i_ext, 2)
    assert v_star.identity_set == i_star.identity_set == {0, 1, 2}
    assert all(r.modality is Modality.VISIBLE for r in v_star)
    assert all(r.modality is Modality.INFRARED for r in i_star)


def test_finalize_merge_errors():
    vi = ReidCorpus((_r("a", 0, "visible", "vi"), _r("b", 0, "infrared", "vi")))
    v_ext = ReidCorpus((_r("e", 0, "visible", "ext"), _r("g", 4, "visible", "ext")))
    i_ext = ReidCorpus((_r("f", 1, "infrared", "ext", True),))
    with pytest.raises(ValueError, match=r"\[4\]"):
        finalize_merge(vi, v_ext, i_ext, 1)
    other = ReidCorpus((_r("f", 1, "infrared", "other", True),))
    with pytest.raises(ValueError, match="namespace"):
        finalize_merge(vi, v_ext.subset(identities=[0]), other, 1)
