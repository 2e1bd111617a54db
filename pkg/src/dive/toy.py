"""Procedurally rendered two-modality "person" corpus.

A toy person is a head/torso/legs silhouette whose clothing colors, torso
pattern and build form its identity.  Visible renders are chromatic; infrared
renders are single-channel inverted luminance with sensor noise.  Each camera
view owns a background and a geometric offset, so view tokens have something
to explain beyond modality.

The same renderer produces the captioned "web" corpus used to pretrain the
frozen base denoiser, standing in for the large-scale prior a real
text-to-image model would bring.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .data import Modality, ReidCorpus, ReidRecord, write_manifest

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.85, 0.12, 0.12),
    "green": (0.15, 0.70, 0.20),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.95, 0.88, 0.15),
    "cyan": (0.15, 0.80, 0.85),
    "magenta": (0.85, 0.20, 0.75),
    "orange": (0.95, 0.55, 0.10),
    "white": (0.95, 0.95, 0.95),
    "gray": (0.50, 0.50, 0.50),
    "black": (0.08, 0.08, 0.08),
}
BACKGROUNDS: dict[str, tuple[float, float, float]] = {
    "sky": (0.62, 0.75, 0.95),
    "grass": (0.45, 0.65, 0.30),
    "sand": (0.86, 0.78, 0.58),
    "night": (0.10, 0.10, 0.20),
    "concrete": (0.58, 0.58, 0.60),
    "brick": (0.60, 0.30, 0.25),
}
PATTERNS = ("plain", "striped")
BUILDS = ("slim", "wide")
STYLES = ("color", "mono", "negative")
SKIN = (0.90, 0.74, 0.60)
IR_NOISE = 0.03

# reference geometry on a 32x16 canvas
_REF_H, _REF_W = 32.0, 16.0


def base_words() -> list[str]:
    """Vocabulary the pretraining captions are written in."""
    words = ["a", "photo", "of", "person"]
    words += list(STYLES) + list(BACKGROUNDS) + list(COLORS) + list(PATTERNS) + list(BUILDS)
    return words


@dataclass(frozen=True)
class Person:
    top: str
    bottom: str
    pattern: str
    build: str

    def caption_words(self) -> list[str]:
        return [self.top, self.bottom, self.pattern, self.build]


@dataclass(frozen=True)
class View:
    """A camera: background plus a fixed geometric offset (in 32x16 pixels)."""

    background: str
    dx: float = 0.0
    dy: float = 0.0
    floor: float = 0.0  # brightness change of the floor band


def _luma(rgb: np.ndarray) -> np.ndarray:
    return rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114


def render(person: Person, view: View, modality: Modality | str, size=(32, 16),
           rng: np.random.Generator | None = None, jitter: float = 1.0,
           style: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Render one image.

    Returns ``(image, mask)`` with ``image`` of shape ``(3, H, W)`` in
    ``[-1, 1]`` and ``mask`` a boolean ``(H, W)`` figure mask.  ``style``
    overrides the modality rendering for pretraining captions.
    """
    modality = Modality(modality)
    rng = np.random.default_rng() if rng is None else rng
    H, W = size
    sy, sx = H / _REF_H, W / _REF_W
    dx = view.dx + (rng.uniform(-jitter, jitter) if jitter else 0.0)
    dy = view.dy + (rng.uniform(-jitter / 2, jitter / 2) if jitter else 0.0)

    ys = (np.arange(H) + 0.5) / sy
    xs = (np.arange(W) + 0.5) / sx
    Y, X = np.meshgrid(ys, xs, indexing="ij")
    X = X - dx
    Y = Y - dy

    bg = np.asarray(BACKGROUNDS[view.background], dtype=np.float64)
    shade = 1.0 - 0.15 * (np.arange(H) / max(H - 1, 1))
    img = np.broadcast_to(bg, (H, W, 3)) * shade[:, None, None]
    floor_rows = ys >= 27.0
    img = img.copy()
    img[floor_rows] = np.clip(img[floor_rows] + view.floor, 0.0, 1.0)

    half = 3.0 if person.build == "slim" else 4.5
    cx = 8.0
    head = (X - cx) ** 2 + ((Y - 5.0) * 1.0) ** 2 <= 2.6 ** 2
    torso = (np.abs(X - cx) <= half) & (Y >= 8.0) & (Y < 18.0)
    legs = (np.abs(X - cx) <= half - 0.5) & (np.abs(X - cx) >= 0.5) & (Y >= 18.0) & (Y < 29.0)

    top = np.asarray(COLORS[person.top])
    if person.pattern == "striped":
        stripe = np.asarray(COLORS["black"] if _luma(top) > 0.45 else COLORS["white"])
        band = (np.floor((Y - 8.0) / 2.0) % 2 == 1)
        img[torso & band] = stripe
        img[torso & ~band] = top
    else:
        img[torso] = top
    img[legs] = COLORS[person.bottom]
    img[head] = SKIN
    mask = head | torso | legs

    if style is None:
        style = "color" if modality is Modality.VISIBLE else "infrared"
    if style == "mono":
        img = np.repeat(_luma(img)[..., None], 3, axis=-1)
    elif style == "negative":
        img = np.repeat(1.0 - _luma(img)[..., None], 3, axis=-1)
    elif style == "infrared":
        lum = 0.1 + 0.85 * (1.0 - _luma(img))
        lum = lum + rng.normal(0.0, IR_NOISE, size=lum.shape)
        img = np.repeat(np.clip(lum, 0.0, 1.0)[..., None], 3, axis=-1)
    elif style != "color":
        raise ValueError(f"unknown style {style!r}")

    out = (img.transpose(2, 0, 1) * 2.0 - 1.0).astype(np.float32)
    return out, mask


def all_people() -> list[Person]:
    return [Person(t, b, p, s) for t, b, p, s in
            itertools.product(COLORS, COLORS, PATTERNS, BUILDS) if t != b]


# Persons the toy corpora draw from: the first RESERVED_PEOPLE of the
# seeded order, so one pretrained base serves every corpus up to that size.
RESERVED_PEOPLE = 32


def sample_people(n: int, seed: int, exclude: Sequence[Person] = ()) -> list[Person]:
    """The first ``n`` persons of a seeded permutation (so smaller draws are
    prefixes of larger ones), skipping ``exclude``."""
    excluded = set(exclude)
    pool = [p for p in all_people() if p not in excluded]
    if n > len(pool):
        raise ValueError(f"only {len(pool)} persons available, asked for {n}")
    order = np.random.default_rng(seed).permutation(len(pool))
    return [pool[i] for i in order[:n]]


def reserved_people(n_corpus: int, seed: int) -> list[Person]:
    """Persons kept out of base pretraining for corpora of ``n_corpus`` persons."""
    return sample_people(max(RESERVED_PEOPLE, n_corpus), seed)


# Camera layouts of the two toy datasets.
VI_VIEWS = {
    Modality.VISIBLE: (View("sky", dx=-1.0), View("grass", dx=1.0, floor=-0.1)),
    Modality.INFRARED: (View("concrete", dy=1.0), View("sky", dx=0.5, floor=0.25)),
}
EXT_VIEWS = {
    Modality.VISIBLE: (View("sand", dx=0.5), View("brick", dx=-0.5, floor=0.15)),
}


@dataclass
class ToyCorpus:
    """Toy VI + external corpora written to disk, with ground truth kept."""

    vi: ReidCorpus
    external: ReidCorpus
    people: dict[tuple[str, int], Person]
    masks: dict[str, np.ndarray]
    root: Path

    def person(self, record: ReidRecord) -> Person:
        return self.people[(record.dataset_id, record.identity)]


def save_image(array: np.ndarray, path: str | Path) -> None:
    """Write a ``(3, H, W)`` array in ``[-1, 1]`` as an 8-bit PNG."""
    arr = np.clip((np.asarray(array, dtype=np.float64) + 1.0) * 127.5 + 0.5, 0, 255)
    Image.fromarray(arr.astype(np.uint8).transpose(1, 2, 0)).save(path, format="PNG")


def load_image(path: str | Path, size=None) -> np.ndarray:
    """Inverse of :func:`save_image`, optionally resizing to ``(H, W)``."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32)
    return arr.transpose(2, 0, 1) / 127.5 - 1.0


def make_toy_corpus(root: str | Path, n_vi: int = 8, n_ext: int = 8, per_view: int = 3,
                    size=(32, 16), seed: int = 0) -> ToyCorpus:
    """Render the VI and external toy corpora under ``root``.

    Writes ``vi.tsv``, ``external.tsv`` and ``masks.npz`` (figure masks
    keyed by relative image path) next to the PNGs.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    chosen = sample_people(n_vi + n_ext, seed)
    vi_people, ext_people = chosen[:n_vi], chosen[n_vi:]
    rng = np.random.default_rng([seed, 1])
    people: dict[tuple[str, int], Person] = {}
    masks: dict[str, np.ndarray] = {}
    corpora = {}
    for dataset_id, group, views in (("toyvi", vi_people, VI_VIEWS),
                                     ("toyext", ext_people, EXT_VIEWS)):
        records = []
        for identity, person in enumerate(group):
            people[(dataset_id, identity)] = person
            for modality, cams in views.items():
                for cam, view in enumerate(cams):
                    for k in range(per_view):
                        img, mask = render(person, view, modality, size, rng)
                        rel = f"images/{dataset_id}_{identity:03d}_{modality.value[0]}{cam}_{k}.png"
                        save_image(img, root / rel)
                        masks[rel] = mask
                        records.append(ReidRecord(rel, identity, modality, cam, dataset_id))
        corpora[dataset_id] = ReidCorpus(tuple(records))
    write_manifest(corpora["toyvi"], root / "vi.tsv")
    write_manifest(corpora["toyext"], root / "external.tsv")
    np.savez_compressed(root / "masks.npz", **{k.replace("/", "__"): v for k, v in masks.items()})
    return ToyCorpus(corpora["toyvi"], corpora["toyext"], people, masks, root)


def load_masks(root: str | Path) -> dict[str, np.ndarray]:
    with np.load(Path(root) / "masks.npz") as z:
        return {k.replace("__", "/"): z[k] for k in z.files}


class CaptionedStream:
    """Infinite seeded stream of captioned pretraining images.

    Captions read ``a {style} {background} photo of {top} {bottom} {pattern}
    {build} person``; persons listed in ``exclude`` never appear.
    """

    def __init__(self, size=(32, 16), seed: int = 0, exclude: Sequence[Person] = ()):
        self.size = size
        self.seed = seed
        excluded = set(exclude)
        self.people = [p for p in all_people() if p not in excluded]

    def batch(self, step: int, n: int) -> tuple[np.ndarray, list[str]]:
        rng = np.random.default_rng([self.seed, step])
        images, captions = [], []
        for _ in range(n):
            person = self.people[rng.integers(len(self.people))]
            bg = list(BACKGROUNDS)[rng.integers(len(BACKGROUNDS))]
            style = STYLES[rng.integers(len(STYLES))]
            view = View(bg, dx=rng.uniform(-1.5, 1.5), dy=rng.uniform(-1.0, 1.0),
                        floor=rng.uniform(-0.15, 0.25))
            img, _ = render(person, view, Modality.VISIBLE, self.size, rng, style=style)
            images.append(img)
            captions.append(" ".join(["a", style, bg, "photo", "of",
                                      *person.caption_words(), "person"]))
        return np.stack(images), captions


def render_reid_training_set(n_people: int, per_modality: int, size=(32, 16), seed: int = 0,
                             exclude: Sequence[Person] = ()) -> tuple[np.ndarray, np.ndarray,
                                                                      np.ndarray]:
    """Labelled visible and infrared renders of persons outside ``exclude``.

    Each image gets a random background and offset.  Returns
    ``(images, identity labels, modality strings)``; this is the training
    data of the toy re-identification feature extractor.
    """
    people = sample_people(n_people, seed, exclude)
    rng = np.random.default_rng([seed, 2])
    images, labels, mods = [], [], []
    bgs = list(BACKGROUNDS)
    for label, person in enumerate(people):
        for modality in Modality:
            for _ in range(per_modality):
                view = View(bgs[rng.integers(len(bgs))], dx=rng.uniform(-1.5, 1.5),
                            dy=rng.uniform(-1.0, 1.0), floor=rng.uniform(-0.15, 0.25))
                img, _ = render(person, view, modality, size, rng)
                images.append(img)
                labels.append(label)
                mods.append(modality.value)
    return np.stack(images), np.asarray(labels), np.asarray(mods)
