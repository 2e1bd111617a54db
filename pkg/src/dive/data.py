"""Canonical record model for multi-modality ReID corpora.

Everything downstream (training, expansion, evaluation) consumes a
:class:`ReidCorpus`.  Real corpus layouts are handled by adapters that produce
the same structure as the line-delimited manifest.
"""

from __future__ import annotations

import enum
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

__all__ = [
    "Modality",
    "ReidRecord",
    "ReidCorpus",
    "MergePlan",
    "CorpusStats",
    "ManifestError",
    "EmptyCorpusError",
    "ingest_manifest",
    "write_manifest",
    "format_manifest",
    "ingest_market_layout",
    "ingest_sysu_layout",
    "select_identities",
    "merge",
    "corpus_stats",
]

MANIFEST_HEADER = "# path\tidentity\tmodality\tcamera_id\tdataset_id\tis_synthetic"
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp")


class Modality(str, enum.Enum):
    VISIBLE = "visible"
    INFRARED = "infrared"

    def __str__(self) -> str:
        return self.value


class ManifestError(ValueError):
    """Raised when a manifest line cannot be parsed."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class EmptyCorpusError(ValueError):
    pass


@dataclass(frozen=True)
class ReidRecord:
    image_path: str
    identity: int
    modality: Modality
    camera_id: int
    dataset_id: str
    is_synthetic: bool = False

    def __post_init__(self):
        if not isinstance(self.modality, Modality):
            object.__setattr__(self, "modality", Modality(self.modality))
        if self.identity < 0:
            raise ValueError(f"identity must be >= 0, got {self.identity}")
        if self.camera_id < 0:
            raise ValueError(f"camera_id must be >= 0, got {self.camera_id}")

    def with_identity(self, identity: int) -> "ReidRecord":
        return ReidRecord(self.image_path, identity, self.modality, self.camera_id,
                          self.dataset_id, self.is_synthetic)


@dataclass(frozen=True)
class ReidCorpus:
    """An ordered collection of records.

    ``identity_set`` and ``modality_views`` are derived from the records.
    ``modality_views[k]`` is ``1 + max(camera_id)`` over modality ``k``, which
    equals the number of distinct cameras whenever camera ids are contiguous
    (they are for every adapter in this module).
    """

    records: tuple[ReidRecord, ...] = ()
    identity_set: frozenset[int] = field(init=False)
    modality_views: Mapping[Modality, int] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "identity_set",
                           frozenset(r.identity for r in self.records))
        views: dict[Modality, int] = {}
        for r in self.records:
            views[r.modality] = max(views.get(r.modality, 0), r.camera_id + 1)
        object.__setattr__(self, "modality_views", dict(sorted(views.items())))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ReidRecord]:
        return iter(self.records)

    def subset(self, modality: Modality | str | None = None,
               identities: Iterable[int] | None = None) -> "ReidCorpus":
        keep = self.records
        if modality is not None:
            modality = Modality(modality)
            keep = [r for r in keep if r.modality is modality]
        if identities is not None:
            ids = set(identities)
            keep = [r for r in keep if r.identity in ids]
        return ReidCorpus(tuple(keep))

    def identity_counts(self) -> Counter:
        return Counter(r.identity for r in self.records)

    def max_identity(self) -> int:
        """Largest identity label, or -1 for an empty corpus."""
        return max(self.identity_set, default=-1)

    def __add__(self, other: "ReidCorpus") -> "ReidCorpus":
        return ReidCorpus(self.records + other.records)


@dataclass(frozen=True)
class MergePlan:
    base_corpus: ReidCorpus
    external_corpus: ReidCorpus
    id_offset: int | None = None

    def __post_init__(self):
        floor = self.base_corpus.max_identity() + 1
        if self.id_offset is None:
            object.__setattr__(self, "id_offset", floor)
        elif self.id_offset < floor:
            raise ValueError(
                f"id_offset {self.id_offset} collides with base identities "
                f"(must be >= {floor})")


@dataclass(frozen=True)
class CorpusStats:
    identities: int
    images: dict[str, int]
    cameras: dict[str, int]

    def format_table(self) -> str:
        mods = [m.value for m in Modality]
        lines = [f"{'':<12}{'total':>8}" + "".join(f"{m:>10}" for m in mods)]
        lines.append(f"{'identities':<12}{self.identities:>8}")
        lines.append(f"{'images':<12}{sum(self.images.values()):>8}"
                     + "".join(f"{self.images.get(m, 0):>10}" for m in mods))
        lines.append(f"{'cameras':<12}{sum(self.cameras.values()):>8}"
                     + "".join(f"{self.cameras.get(m, 0):>10}" for m in mods))
        return "\n".join(lines)


# -- manifest -----------------------------------------------------------------

def _parse_bool(text: str, lineno: int) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "synthetic"):
        return True
    if lowered in ("0", "false", "no", "real", ""):
        return False
    raise ManifestError(f"cannot parse is_synthetic flag {text!r}", lineno)


def _parse_int(text: str, name: str, lineno: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise ManifestError(f"{name} must be an integer, got {text!r}", lineno) from None


def ingest_manifest(path: str | Path) -> ReidCorpus:
    """Read a tab-separated manifest.

    Each non-comment line is ``path, identity, modality, camera_id,
    dataset_id`` with an optional sixth ``is_synthetic`` column.  Lines
    starting with ``#`` and blank lines are ignored.
    """
    path = Path(path)
    records: list[ReidRecord] = []
    seen: dict[str, int] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (5, 6):
                raise ManifestError(f"expected 5 or 6 tab-separated fields, got {len(parts)}",
                                    lineno)
            image_path, ident, modality, camera, dataset_id = parts[:5]
            try:
                modality = Modality(modality)
            except ValueError:
                raise ManifestError(f"unknown modality {modality!r}", lineno) from None
            if image_path in seen:
                raise ManifestError(
                    f"duplicate path {image_path!r} (first seen on line {seen[image_path]})",
                    lineno)
            seen[image_path] = lineno
            try:
                rec = ReidRecord(
                    image_path=image_path,
                    identity=_parse_int(ident, "identity", lineno),
                    modality=modality,
                    camera_id=_parse_int(camera, "camera_id", lineno),
                    dataset_id=dataset_id,
                    is_synthetic=_parse_bool(parts[5], lineno) if len(parts) == 6 else False,
                )
            except ManifestError:
                raise
            except ValueError as exc:
                raise ManifestError(str(exc), lineno) from None
            records.append(rec)
    return ReidCorpus(tuple(records))


def format_manifest(corpus: Iterable[ReidRecord]) -> str:
    lines = [MANIFEST_HEADER]
    for r in corpus:
        lines.append("\t".join([r.image_path, str(r.identity), r.modality.value,
                                str(r.camera_id), r.dataset_id, str(int(r.is_synthetic))]))
    return "\n".join(lines) + "\n"


def write_manifest(corpus: Iterable[ReidRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_manifest(corpus), encoding="utf-8")
    return path


# -- real-corpus adapters -----------------------------------------------------

_MARKET_RE = re.compile(r"^(-?\d+)_c(\d+)s\d+_\d+_\d+$")


def ingest_market_layout(root: str | Path, dataset_id: str = "market1501") -> ReidCorpus:
    """Collect images named ``ID_cCsS_frame_box.jpg`` below ``root``.

    Junk (``-1``) and distractor (``0000``) identities are dropped silently;
    files that do not follow the convention are skipped and counted in a
    single warning.
    """
    root = Path(root)
    records = []
    unparsable = 0
    for file in sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES):
        m = _MARKET_RE.match(file.stem)
        if m is None:
            unparsable += 1
            continue
        identity, camera = int(m.group(1)), int(m.group(2))
        if identity <= 0 or camera < 1:
            continue
        records.append(ReidRecord(str(file), identity, Modality.VISIBLE, camera - 1, dataset_id))
    if unparsable:
        warnings.warn(f"skipped {unparsable} file(s) not matching the Market-1501 naming "
                      f"convention under {root}", stacklevel=2)
    if not records:
        raise EmptyCorpusError(f"no usable Market-1501 images found under {root}")
    return ReidCorpus(tuple(records))


SYSU_CAMERA_MODALITY = {1: Modality.VISIBLE, 2: Modality.VISIBLE, 3: Modality.INFRARED,
                        4: Modality.VISIBLE, 5: Modality.VISIBLE, 6: Modality.INFRARED}


def ingest_sysu_layout(root: str | Path, dataset_id: str = "sysu-mm01",
                       camera_modality: Mapping[int, Modality] | None = None,
                       identities: Iterable[int] | None = None) -> ReidCorpus:
    """Collect images from a ``camN/<id>/<image>`` directory tree.

    Physical camera numbers are mapped to per-modality view indices in
    ascending order, so SYSU-MM01's cameras 1, 2, 4, 5 become visible views
    0..3 and cameras 3, 6 become infrared views 0, 1.
    """
    root = Path(root)
    camera_modality = dict(camera_modality or SYSU_CAMERA_MODALITY)
    wanted = None if identities is None else set(identities)
    view_index: dict[int, int] = {}
    for modality in Modality:
        cams = sorted(c for c, m in camera_modality.items() if m is modality)
        view_index.update({c: i for i, c in enumerate(cams)})

    records = []
    for cam_dir in sorted(root.glob("cam*")):
        m = re.fullmatch(r"cam(\d+)", cam_dir.name)
        if m is None or not cam_dir.is_dir():
            continue
        cam = int(m.group(1))
        if cam not in camera_modality:
            continue
        for id_dir in sorted(p for p in cam_dir.iterdir() if p.is_dir()):
            if not id_dir.name.isdigit():
                continue
            identity = int(id_dir.name)
            if wanted is not None and identity not in wanted:
                continue
            for file in sorted(id_dir.iterdir()):
                if file.suffix.lower() in IMAGE_SUFFIXES:
                    records.append(ReidRecord(str(file), identity, camera_modality[cam],
                                              view_index[cam], dataset_id))
    if not records:
        raise EmptyCorpusError(f"no usable images found under {root}")
    return ReidCorpus(tuple(records))


# -- corpus operations --------------------------------------------------------

def select_identities(corpus: ReidCorpus, min_images: int) -> list[int]:
    """Identities with strictly more than ``min_images`` records, ascending."""
    if min_images < 0:
        raise ValueError("min_images must be >= 0")
    counts = corpus.identity_counts()
    return sorted(i for i, n in counts.items() if n > min_images)


def merge(plan: MergePlan) -> ReidCorpus:
    """Union of base and external records with the external ids shifted by
    ``plan.id_offset``."""
    offset = plan.id_offset
    shifted = tuple(r.with_identity(r.identity + offset) for r in plan.external_corpus)
    merged = ReidCorpus(plan.base_corpus.records + shifted)
    assert not (plan.base_corpus.identity_set & {r.identity for r in shifted})
    return merged


def corpus_stats(corpus: ReidCorpus) -> CorpusStats:
    images = Counter(r.modality.value for r in corpus)
    return CorpusStats(
        identities=len(corpus.identity_set),
        images={m.value: images[m.value] for m in Modality if images[m.value]},
        cameras={m.value: n for m, n in corpus.modality_views.items()},
    )


def records_by_identity(records: Sequence[ReidRecord]) -> dict[int, list[ReidRecord]]:
    out: dict[int, list[ReidRecord]] = {}
    for r in records:
        out.setdefault(r.identity, []).append(r)
    return out
