"""End-to-end toy run: corpus, base, fine-tuning, expansion, merge, evaluation.

:func:`run_toy_demo` is what ``dive toy-demo`` executes.  All randomness
flows from the config seed, so two runs with the same config and base write
byte-identical images, manifests and reports (log wall times excepted).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .attention import attention_maps, bounding_box, mask_mass, render_attention_grid
from .data import Modality, ReidCorpus, select_identities, write_manifest
from .diffusion import Checkpoint, load_checkpoint, save_checkpoint
from .estimators import ModalityClassifier, ToyReidExtractor
from .expansion import ExpansionPlan, expand, finalize_merge
from .metrics import FeatureSet, class_distances, cmc_map, fid, moment_summary
from .prompts import PromptSpec
from .report import MetricReport
from .sampling import SamplerConfig
from .toy import (VI_VIEWS, load_image, make_toy_corpus, render, render_reid_training_set,
                  reserved_people)
from .training import (COARSE_DATASET, BaseModel, PretrainConfig, TrainConfig,
                       build_training_set, prepare_finetune, pretrain_base, train,
                       write_loss_curve)

__all__ = ["cache_dir", "load_or_pretrain_base", "infrared_view_tokens", "load_corpus_images",
           "ToyDemoResult", "run_toy_demo", "evaluate_generation"]

log = logging.getLogger(__name__)


def cache_dir() -> Path:
    return Path(os.environ.get("DIVE_CACHE_DIR", Path.home() / ".cache" / "dive"))


def _base_key(config: PretrainConfig, exclude) -> str:
    payload = json.dumps({"pretrain": asdict(config), "exclude": [asdict(p) for p in exclude],
                          "denoiser": config.denoiser_config().config_hash(), "format": 1},
                         sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def base_from_checkpoint(ckpt: Checkpoint) -> BaseModel:
    return BaseModel(ckpt.model, ckpt.registry, ckpt.encoder, ckpt.sched)


def load_or_pretrain_base(config: PretrainConfig, exclude=(), cache: Path | None = None,
                          path: str | Path | None = None) -> BaseModel:
    """The frozen base for ``config``, pretrained once and cached.

    ``path`` names the file explicitly; otherwise the file lives in
    :func:`cache_dir` under a key derived from the config and exclusions.
    """
    if path is None:
        cache = cache_dir() if cache is None else Path(cache)
        path = cache / f"base-{_base_key(config, exclude)}.pt"
    path = Path(path)
    if path.exists():
        return base_from_checkpoint(load_checkpoint(path, config.denoiser_config()))
    log.info("pretraining base denoiser (%d steps) -> %s", config.steps, path)
    base = pretrain_base(config, exclude=exclude, progress=True)
    save_checkpoint(path, base.model, base.registry, base.encoder, base.sched,
                    extra={"pretrain_config": asdict(config)})
    # reload so a fresh run and a cached run start from identical tensors
    return base_from_checkpoint(load_checkpoint(path, config.denoiser_config()))


def infrared_view_tokens(registry, vi: ReidCorpus, granularity: str) -> list[str]:
    """Surfaces of the infrared view tokens, ordered by camera."""
    if granularity == "modality":
        return [registry.view(Modality.INFRARED, None, COARSE_DATASET).surface]
    ir = vi.subset(Modality.INFRARED)
    datasets = sorted({r.dataset_id for r in ir})
    if len(datasets) != 1:
        raise ValueError(f"expected one infrared dataset, found {datasets}")
    n = vi.modality_views.get(Modality.INFRARED, 0)
    return [registry.view(Modality.INFRARED, c, datasets[0]).surface for c in range(n)]


def load_corpus_images(corpus: ReidCorpus, root: str | Path, size) -> np.ndarray:
    root = Path(root)
    if not len(corpus):
        return np.zeros((0, 3, *size), np.float32)
    return np.stack([load_image(root / r.image_path, size) for r in corpus])


@dataclass
class ToyDemoResult:
    report: MetricReport
    out_dir: Path
    synthetic: ReidCorpus
    visible_star: ReidCorpus
    infrared_star: ReidCorpus
    expected_images: int


def evaluate_generation(synthetic: ReidCorpus, syn_root: Path, real_visible: ReidCorpus,
                        real_root: Path, extractor, classifier, size,
                        real_infrared: ReidCorpus | None = None,
                        real_ir_root: Path | None = None) -> MetricReport:
    """Modality rate, distances, retrieval and FID for synthetic infrared images.

    ``real_visible`` must carry the same identity labels as ``synthetic``.
    """
    report = MetricReport()
    syn = load_corpus_images(synthetic, syn_root, size)
    vis = load_corpus_images(real_visible, real_root, size)
    report.modality = {"infrared_rate": classifier.infrared_rate(syn), "n": int(len(syn))}
    f_syn, f_vis = extractor.transform(syn), extractor.transform(vis)
    q = FeatureSet(f_syn, [r.identity for r in synthetic], [r.modality for r in synthetic],
                   [r.camera_id for r in synthetic])
    g = FeatureSet(f_vis, [r.identity for r in real_visible], [r.modality for r in real_visible],
                   [r.camera_id for r in real_visible])
    both = q.concat(g)
    if len(set(both.labels.tolist())) >= 2:
        report.set_class_distances(*class_distances(both))
    report.set_retrieval(cmc_map(q, g))
    if real_infrared is not None and len(real_infrared) >= 2 and len(syn) >= 2:
        ir = load_corpus_images(real_infrared, real_ir_root, size)
        report.fid = fid(moment_summary(extractor.transform(ir)), moment_summary(f_syn))
    return report


def figure_mask(person, view_index: int, granularity: str, size) -> np.ndarray:
    """Figure mask of ``person`` rendered without jitter in an infrared camera.

    The coarse token is not tied to a camera; camera 0 stands in for it.
    """
    cam = 0 if granularity == "modality" else view_index
    _, mask = render(person, VI_VIEWS[Modality.INFRARED][cam], Modality.INFRARED, size,
                     np.random.default_rng(0), jitter=0.0)
    return mask


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_toy_demo(out_dir: str | Path, cfg: Mapping[str, object], base_path: str | Path | None = None,
                 jobs: int = 1) -> ToyDemoResult:
    """Run the pipeline end to end on the procedural toy corpus.

    ``cfg`` is an effective config as produced by :func:`dive.config.layered`.
    """
    from .config import pretrain_config, sampler_config, train_config

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = int(cfg["seed"])
    tcfg: TrainConfig = train_config(cfg)
    size = tcfg.image_size
    n_vi, n_ext = int(cfg["toy_vi_identities"]), int(cfg["toy_ext_identities"])

    toy = make_toy_corpus(out / "corpus", n_vi, n_ext, int(cfg["toy_per_view"]), size, seed)
    held = reserved_people(n_vi + n_ext, seed)
    base = load_or_pretrain_base(pretrain_config(cfg), exclude=held, path=base_path)

    model, adapters = prepare_finetune(base, [toy.vi, toy.external], tcfg)
    examples = build_training_set(toy.vi, toy.external, base.registry, tcfg.view_granularity)
    trainer = train(tcfg, examples, model, adapters, base.registry, base.encoder, base.sched,
                    image_root=toy.root)
    write_loss_curve(trainer.loss_curve, out / "loss_curve.tsv")
    ckpt_path = save_checkpoint(out / "checkpoint.pt", model, base.registry, base.encoder,
                                base.sched, adapters, extra={"train_config": asdict(tcfg)})
    ckpt = Checkpoint(model, adapters, base.registry, base.encoder, base.sched)

    identities = select_identities(toy.external, int(cfg["min_images"]))
    views = infrared_view_tokens(base.registry, toy.vi, tcfg.view_granularity)
    offset = int(cfg["id_offset"])
    offset = toy.vi.max_identity() + 1 if offset < 0 else offset
    plan = ExpansionPlan(ckpt, identities, "toyext", views, out / "expansion",
                         images_per_view=int(cfg["images_per_view"]), seed=seed, id_offset=offset,
                         sampler=sampler_config(cfg), image_size=size)
    result = expand(plan, jobs=jobs)

    # merged corpora with paths relative to the output directory
    v_ext = toy.external.subset(identities=identities)
    rel_ext = ReidCorpus(tuple(r.__class__(f"corpus/{r.image_path}", r.identity, r.modality,
                                           r.camera_id, r.dataset_id, r.is_synthetic)
                               for r in v_ext))
    rel_vi = ReidCorpus(tuple(r.__class__(f"corpus/{r.image_path}", r.identity, r.modality,
                                          r.camera_id, r.dataset_id, r.is_synthetic)
                              for r in toy.vi))
    rel_syn = ReidCorpus(tuple(r.__class__(f"expansion/{r.image_path}", r.identity, r.modality,
                                           r.camera_id, r.dataset_id, r.is_synthetic)
                               for r in result.corpus))
    v_star, i_star = finalize_merge(rel_vi, rel_ext, rel_syn, offset)
    write_manifest(v_star, out / "visible_star.tsv")
    write_manifest(i_star, out / "infrared_star.tsv")

    # evaluation models, trained on renders disjoint from the corpus persons
    X, y, _ = render_reid_training_set(48, 6, size, seed + 1, exclude=held)
    extractor = ToyReidExtractor(seed=seed).fit(X, y)
    vi_imgs = load_corpus_images(toy.vi, toy.root, size)
    classifier = ModalityClassifier().fit(vi_imgs, [r.modality for r in toy.vi])
    shifted_ext = ReidCorpus(tuple(r.with_identity(r.identity + offset) for r in v_ext))
    report = evaluate_generation(result.corpus, plan.output_dir, shifted_ext, toy.root,
                                 extractor, classifier, size,
                                 real_infrared=toy.vi.subset(Modality.INFRARED),
                                 real_ir_root=toy.root)

    # attention heatmaps of every expanded identity under the first infrared view
    view_tok = base.registry.token(views[0])
    masses = {"identity_mask_mass": [], "view_mask_mass": [], "identity_box_mass": [],
              "view_box_mass": []}
    results = []
    for ident in identities:
        ident_tok = base.registry.identity(ident, "toyext")
        att = attention_maps(PromptSpec(ident_tok, view_tok), model, base.registry, base.encoder,
                             base.sched, adapters, tokens=[ident_tok.surface, view_tok.surface],
                             sampler=SamplerConfig(int(cfg["sampler_steps"])), image_size=size,
                             seed=seed)
        results.append(att)
        figure = figure_mask(toy.people[("toyext", ident)], 0, tcfg.view_granularity, size)
        box = bounding_box(figure)
        for token, heat in (("identity", att.maps[0]), ("view", att.maps[1])):
            masses[f"{token}_mask_mass"].append(mask_mass(heat, figure))
            masses[f"{token}_box_mass"].append(mask_mass(heat, box))
    render_attention_grid(results[:4], out / "attention.png")
    report.provenance = {
        "seed": seed,
        "checkpoint_sha256": _sha256(ckpt_path),
        "view_granularity": tcfg.view_granularity,
        "images_per_view_unit": "per (identity, view) cell",
    }
    report.counts = {
        "synthetic_images": len(result.corpus),
        "expanded_identities": len(identities),
        "infrared_views": len(views),
        "visible_star_identities": len(v_star.identity_set),
        "infrared_star_identities": len(i_star.identity_set),
    }
    report.provenance["attention"] = {k: float(np.mean(v)) for k, v in masses.items()}
    report.provenance["attention"]["identities"] = len(identities)
    report.save(out / "report.json")
    expected = len(identities) * len(views) * plan.images_per_view
    return ToyDemoResult(report, out, result.corpus, v_star, i_star, expected)
