"""Infrared expansion of an external visible corpus.

Every selected external identity is rendered under every infrared view
token.  Work is split into ``(identity, view)`` cells that are processed in
sorted order.  A cell is marked done in ``expansion.log`` only after all of
its images are on disk, so an interrupted run resumes at the first
unfinished cell.

Output layout::

    out/
      images/{identity_token}_{view_token}_{index:03d}.png
      synthetic.tsv      manifest of the generated records
      expansion.json     plan metadata
      expansion.log      cell_id, status, wall_time_ms, seed
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .data import Modality, ReidCorpus, ReidRecord, MergePlan, merge, write_manifest
from .diffusion import Checkpoint, load_checkpoint
from .prompts import PlaceholderToken, PromptSpec, TokenKind, UnregisteredTokenError
from .sampling import SamplerConfig, SamplerMethod, initial_noise, sample
from .toy import save_image

__all__ = ["ExpansionPlan", "ExpansionError", "ExpansionResult", "expand", "finalize_merge",
           "image_seed", "decode_filename", "read_log", "LOG_NAME", "MANIFEST_NAME"]

LOG_NAME = "expansion.log"
MANIFEST_NAME = "synthetic.tsv"
META_NAME = "expansion.json"
STATUS_DONE = "done"
STATUS_RESUMED = "resumed"
_FILENAME = re.compile(r"^([A-Za-z0-9]{8})_([A-Za-z0-9]{8})_(\d+)\.png$")


class ExpansionError(RuntimeError):
    def __init__(self, message: str, cell: str | None = None):
        self.cell = cell
        super().__init__(message if cell is None else f"cell {cell}: {message}")


@dataclass
class ExpansionPlan:
    """What to generate.

    Parameters
    ----------
    checkpoint : path or loaded Checkpoint
    identities : external identity labels (e.g. from ``select_identities``)
    namespace : dataset id the identity tokens were registered under
    view_tokens : surfaces of the infrared view tokens; position gives the
        output camera id
    images_per_view : images per (identity, view) cell
    output_dir : destination directory
    seed : base seed of the per-image noise
    id_offset : added to every identity in the output manifest
    """

    checkpoint: object
    identities: Sequence[int]
    namespace: str
    view_tokens: Sequence[str]
    output_dir: str | Path
    images_per_view: int = 18
    seed: int = 0
    id_offset: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    image_size: tuple[int, int] = (32, 16)
    # visible synthesis is exposed but not used by the default pipeline
    modality: Modality = Modality.INFRARED

    def __post_init__(self):
        self.identities = sorted(set(int(i) for i in self.identities))
        self.view_tokens = list(self.view_tokens)
        self.output_dir = Path(self.output_dir)
        self.modality = Modality(self.modality)
        if self.images_per_view < 1:
            raise ValueError("images_per_view must be >= 1")
        if not self.identities:
            raise ValueError("expansion plan has no identities")
        if not self.view_tokens:
            raise ValueError("expansion plan has no view tokens")
        if len(set(self.view_tokens)) != len(self.view_tokens):
            raise ValueError("duplicate view tokens")
        if self.id_offset < 0:
            raise ValueError("id_offset must be >= 0")


@dataclass
class ExpansionResult:
    corpus: ReidCorpus
    generated_cells: list[str]
    resumed_cells: list[str]
    manifest_path: Path


def image_seed(seed: int, identity_token: str, view_token: str, index: int) -> int:
    digest = hashlib.sha256(f"{seed}|{identity_token}|{view_token}|{index}".encode()).digest()
    return int.from_bytes(digest[:8], "big") & (2 ** 63 - 1)


def image_name(identity_token: str, view_token: str, index: int) -> str:
    return f"{identity_token}_{view_token}_{index:03d}.png"


def decode_filename(name: str) -> tuple[str, str, int]:
    """``(identity token, view token, index)`` of a generated file name."""
    m = _FILENAME.match(Path(name).name)
    if not m:
        raise ValueError(f"not a generated image name: {name!r}")
    return m.group(1), m.group(2), int(m.group(3))


def read_log(path: str | Path) -> list[tuple[str, str, int, int]]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            cell, status, wall, seed = line.split("\t")
            out.append((cell, status, int(wall), int(seed)))
    return out


def _resolve_checkpoint(ref) -> Checkpoint:
    if isinstance(ref, Checkpoint):
        return ref
    return load_checkpoint(ref)


@dataclass(frozen=True)
class _Cell:
    identity: int
    view_index: int
    id_token: PlaceholderToken
    view_token: PlaceholderToken

    @property
    def cell_id(self) -> str:
        return f"{self.id_token.surface}_{self.view_token.surface}"


def _cells(plan: ExpansionPlan, ckpt: Checkpoint) -> list[_Cell]:
    reg = ckpt.registry
    views = []
    for surface in plan.view_tokens:
        if not reg.has(surface):
            raise UnregisteredTokenError(f"view token {surface!r} is not registered")
        tok = reg.token(surface)
        if tok.kind is not TokenKind.MODALITY_VIEW:
            raise ValueError(f"{surface!r} is not a view token")
        if Modality(tok.ref[1]) is not plan.modality:
            raise ValueError(f"view token {surface!r} is not a {plan.modality.value} view")
        views.append(tok)
    cells = []
    for identity in plan.identities:
        tok = reg.identity(identity, plan.namespace)
        for v, view in enumerate(views):
            cells.append(_Cell(identity, v, tok, view))
    return cells


def _generate_cell(cell: _Cell, plan: ExpansionPlan, ckpt: Checkpoint) -> list[torch.Tensor]:
    C = ckpt.model.config.in_channels
    H, W = plan.image_size
    noise = torch.cat([initial_noise((1, C, H, W),
                                     image_seed(plan.seed, cell.id_token.surface,
                                                cell.view_token.surface, k))
                       for k in range(plan.images_per_view)])
    cfg = SamplerConfig(steps=plan.sampler.steps, method=plan.sampler.method,
                        batch=plan.images_per_view, clip_output=True)
    images = sample(PromptSpec(cell.id_token, cell.view_token), cfg, ckpt.model, ckpt.registry,
                    ckpt.encoder, ckpt.sched, ckpt.adapters, plan.image_size, noise=noise)
    return list(images)


def _write_cell(cell: _Cell, images, image_dir: Path) -> None:
    for k, img in enumerate(images):
        name = image_name(cell.id_token.surface, cell.view_token.surface, k)
        tmp = image_dir / (name + ".tmp")
        save_image(img.numpy(), tmp)
        os.replace(tmp, image_dir / name)


def _cell_complete(cell: _Cell, plan: ExpansionPlan, image_dir: Path) -> bool:
    return all((image_dir / image_name(cell.id_token.surface, cell.view_token.surface,
                                       k)).exists() for k in range(plan.images_per_view))


def _records(cell: _Cell, plan: ExpansionPlan) -> list[ReidRecord]:
    return [ReidRecord(f"images/{image_name(cell.id_token.surface, cell.view_token.surface, k)}",
                       cell.identity + plan.id_offset, plan.modality, cell.view_index,
                       plan.namespace, is_synthetic=True)
            for k in range(plan.images_per_view)]


def _metadata(plan: ExpansionPlan, cells: Sequence[_Cell]) -> dict:
    return {
        "format": "dive-expansion",
        "images_per_view": plan.images_per_view,
        "images_per_view_unit": "per (identity, view) cell",
        "identities": list(plan.identities),
        "namespace": plan.namespace,
        "id_offset": plan.id_offset,
        "modality": plan.modality.value,
        "view_tokens": list(plan.view_tokens),
        "seed": plan.seed,
        "sampler": {"steps": plan.sampler.steps,
                    "method": SamplerMethod(plan.sampler.method).value},
        "image_size": list(plan.image_size),
        "cells": [c.cell_id for c in cells],
    }


def expand(plan: ExpansionPlan, jobs: int = 1) -> ExpansionResult:
    """Generate the synthetic corpus for ``plan``.

    Cells already logged as done (with all files present) are skipped and a
    ``resumed`` line is appended for each.  ``jobs > 1`` generates cells
    concurrently; the log and files are still written by this thread in
    cell order.
    """
    ckpt = _resolve_checkpoint(plan.checkpoint)
    cells = _cells(plan, ckpt)
    out = plan.output_dir
    image_dir = out / "images"
    try:
        image_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ExpansionError(f"cannot create output directory: {exc}") from exc
    log_path = out / LOG_NAME
    done = {c for c, status, _, _ in read_log(log_path) if status in (STATUS_DONE, STATUS_RESUMED)}
    todo = [c for c in cells if not (c.cell_id in done and _cell_complete(c, plan, image_dir))]
    resumed = [c.cell_id for c in cells if c not in todo]
    generated: list[str] = []

    with open(log_path, "a", encoding="utf-8") as log:
        for cid in resumed:
            log.write(f"{cid}\t{STATUS_RESUMED}\t0\t{plan.seed}\n")
        log.flush()

        def work(cell):
            t0 = time.perf_counter()
            with torch.no_grad():
                imgs = _generate_cell(cell, plan, ckpt)
            return imgs, t0

        if jobs > 1 and len(todo) > 1:
            pool = ThreadPoolExecutor(max_workers=jobs)
            results = pool.map(work, todo)
        else:
            pool = None
            results = map(work, todo)
        try:
            for cell, (imgs, t0) in zip(todo, results):
                try:
                    _write_cell(cell, imgs, image_dir)
                except OSError as exc:
                    raise ExpansionError(f"writing images failed: {exc}", cell.cell_id) from exc
                wall = int(round((time.perf_counter() - t0) * 1000))
                log.write(f"{cell.cell_id}\t{STATUS_DONE}\t{wall}\t{plan.seed}\n")
                log.flush()
                generated.append(cell.cell_id)
        finally:
            if pool is not None:
                pool.shutdown(wait=True)

    records = [r for c in cells for r in _records(c, plan)]
    corpus = ReidCorpus(tuple(records))
    manifest = write_manifest(corpus, out / MANIFEST_NAME)
    (out / META_NAME).write_text(json.dumps(_metadata(plan, cells), indent=2, sort_keys=True) + "\n",
                                 encoding="utf-8")
    return ExpansionResult(corpus, generated, resumed, manifest)


def finalize_merge(vi: ReidCorpus, v_ext: ReidCorpus, i_ext: ReidCorpus,
                   id_offset: int | None = None) -> tuple[ReidCorpus, ReidCorpus]:
    """Form the visible and infrared training corpora.

    ``v_ext`` carries the original external labels; ``i_ext`` is the output
    of :func:`expand` and already carries labels shifted by ``id_offset``.
    Every external identity kept in the visible corpus must have at least one
    synthetic infrared counterpart.
    """
    vis = vi.subset(Modality.VISIBLE)
    ir = vi.subset(Modality.INFRARED)
    if any(r.modality is not Modality.VISIBLE for r in v_ext):
        raise ValueError("external corpus must be visible only")
    if any(r.modality is not Modality.INFRARED for r in i_ext):
        raise ValueError("synthetic corpus must be infrared only")
    ext_ns = {r.dataset_id for r in v_ext}
    syn_ns = {r.dataset_id for r in i_ext}
    if ext_ns != syn_ns:
        raise ValueError(f"namespace mismatch: external {sorted(ext_ns)} vs synthetic "
                         f"{sorted(syn_ns)}")
    plan = MergePlan(vi, v_ext, id_offset)
    v_star = merge(MergePlan(vis, v_ext, plan.id_offset))
    shifted = {i + plan.id_offset for i in v_ext.identity_set}
    orphans = sorted(i - plan.id_offset for i in shifted - i_ext.identity_set)
    if orphans:
        raise ValueError(f"external identities without synthetic infrared images: {orphans}")
    strays = sorted(i_ext.identity_set - shifted)
    if strays:
        raise ValueError(f"synthetic identities not present in the external corpus: {strays}")
    i_star = ir + i_ext
    return v_star, i_star
