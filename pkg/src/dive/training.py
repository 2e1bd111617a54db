"""Learning the identity tokens and modality adapters.

Fine-tuning optimizes only the trainable embedding rows (identity tokens)
and the LoRA factors against the denoising loss, over the union of the VI
corpus and the external visible corpus.  Batch composition, timesteps and
noise for step ``s`` are all derived from ``(seed, s)``, so a resumed run
replays the unbroken run exactly.

:func:`pretrain_base` produces the frozen base (denoiser, base vocabulary,
prompt encoder) from the captioned toy stream.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import torch

from .data import Modality, ReidCorpus, ReidRecord
from .diffusion import (DenoiserConfig, LoraAdapterSet, NoiseSchedule, ToyUNet,
                        attach_adapters, denoise_predict, diffusion_loss, freeze,
                        save_checkpoint)
from .prompts import (PlaceholderToken, PromptEncoder, PromptSpec, TokenRegistry,
                      UnregisteredTokenError, build_prompt)
from .toy import CaptionedStream, base_words, load_image

__all__ = [
    "TrainConfig",
    "PretrainConfig",
    "TrainingExample",
    "NonFiniteLossError",
    "register_corpus_tokens",
    "build_training_set",
    "training_loss",
    "Trainer",
    "train",
    "pretrain_base",
    "write_loss_curve",
]

log = logging.getLogger(__name__)

VIEW_GRANULARITIES = ("camera", "modality")
COARSE_DATASET = "all"


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, batch: Sequence[int], value: float):
        self.step, self.batch, self.value = step, list(batch), value
        super().__init__(f"non-finite loss {value} at step {step}; batch record indices "
                         f"{self.batch}")


def _parse_size(value) -> tuple[int, int]:
    if isinstance(value, str):
        h, w = value.lower().replace(" ", "").split("x")
        return int(h), int(w)
    h, w = value
    return int(h), int(w)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 16
    total_steps: int = 2000
    image_size: tuple[int, int] = (32, 16)
    horizontal_flip: bool = True
    seed: int = 0
    checkpoint_every: int = 500
    lora_rank: int = 128
    lora_scale: float = 1.0
    view_granularity: str = "camera"

    def __post_init__(self):
        object.__setattr__(self, "image_size", _parse_size(self.image_size))
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        H, W = self.image_size
        if H <= 0 or W <= 0 or H % 4 or W % 4:
            raise ValueError("image_size must be positive multiples of 4")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.view_granularity not in VIEW_GRANULARITIES:
            raise ValueError(f"view_granularity must be one of {VIEW_GRANULARITIES}")

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "TrainConfig":
        return cls(**_coerce(cls, values))


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 3000
    batch_size: int = 32
    learning_rate: float = 2e-3
    warmup: int = 100
    seed: int = 0
    image_size: tuple[int, int] = (32, 16)
    text_dim: int = 64
    widths: tuple[int, int] = (32, 64)
    attn_blocks: tuple[str, ...] = ("mid", "up1")

    def __post_init__(self):
        object.__setattr__(self, "image_size", _parse_size(self.image_size))
        object.__setattr__(self, "widths", tuple(self.widths))
        object.__setattr__(self, "attn_blocks", tuple(self.attn_blocks))

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(widths=self.widths, text_dim=self.text_dim,
                              attn_blocks=self.attn_blocks)


def _coerce(cls, values: Mapping[str, object]) -> dict:
    known = {f.name: f for f in fields(cls)}
    out = {}
    for key, raw in values.items():
        if key not in known:
            raise KeyError(f"unknown {cls.__name__} key {key!r}")
        default = getattr(cls, key, None) if not isinstance(getattr(cls, key, None), property) \
            else None
        out[key] = _coerce_value(raw, default)
    return out


def _coerce_value(raw, default):
    if not isinstance(raw, str):
        return raw
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        parts = [p for p in raw.replace("x", ",").split(",") if p]
        if default and isinstance(default[0], int):
            return tuple(int(p) for p in parts)
        return tuple(parts)
    return raw


# -- token registration and training sets -------------------------------------

def _identity_seed(seed: int, namespace: str, identity: int) -> int:
    import hashlib
    digest = hashlib.sha256(f"{seed}|{namespace}|{identity}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def view_key(record: ReidRecord, granularity: str) -> tuple[str, Modality, int | None]:
    if granularity == "camera":
        return record.dataset_id, record.modality, record.camera_id
    return COARSE_DATASET, record.modality, None


def register_corpus_tokens(registry: TokenRegistry, corpora: Sequence[ReidCorpus],
                           seed: int = 0, granularity: str = "camera") -> None:
    """Register an identity token per ``(dataset_id, identity)`` and a view
    token per camera (or per modality for ``granularity="modality"``).

    Already-registered tokens are left alone.
    """
    for corpus in corpora:
        for r in corpus:
            try:
                registry.identity(r.identity, r.dataset_id)
            except UnregisteredTokenError:
                registry.register_identity(r.identity, _identity_seed(seed, r.dataset_id,
                                                                      r.identity),
                                           namespace=r.dataset_id)
            ds, k, cam = view_key(r, granularity)
            try:
                registry.view(k, cam, ds)
            except UnregisteredTokenError:
                registry.register_view(k, cam, ds)


@dataclass(frozen=True)
class TrainingExample:
    record: ReidRecord
    identity_token: PlaceholderToken
    view_token: PlaceholderToken

    def prompt(self) -> tuple[str, ...]:
        return build_prompt(PromptSpec(self.identity_token, self.view_token))


def build_training_set(vi: ReidCorpus, ext: ReidCorpus, registry: TokenRegistry,
                       granularity: str = "camera") -> list[TrainingExample]:
    """One example per record; records of one identity share its token
    regardless of modality."""
    out = []
    for corpus in (vi, ext):
        for r in corpus:
            ident = registry.identity(r.identity, r.dataset_id)
            ds, k, cam = view_key(r, granularity)
            out.append(TrainingExample(r, ident, registry.view(k, cam, ds)))
    vi_ns = {r.dataset_id for r in vi}
    if vi_ns & {r.dataset_id for r in ext}:
        raise ValueError("VI and external corpora must use distinct dataset ids")
    return out


def training_loss(images: torch.Tensor, prompts: Sequence[Sequence[str]], model,
                  adapters: LoraAdapterSet | None, registry: TokenRegistry, encoder,
                  sched: NoiseSchedule, generator: torch.Generator | None = None,
                  t=None, eps=None) -> torch.Tensor:
    """Denoising loss of the adapted model on prompted images."""
    ids, mask = registry.batch_ids(prompts)
    cond = encoder(registry.table(ids), mask)

    def denoiser(z, tt, c, key_mask):
        return denoise_predict(z, tt, c, model, adapters, key_mask=key_mask)

    return diffusion_loss(denoiser, images, cond, sched, generator=generator, t=t, eps=eps,
                          key_mask=mask)


# -- fine-tuning loop ---------------------------------------------------------

def load_images(records: Sequence[ReidRecord], size, root: str | Path | None = None) -> torch.Tensor:
    root = Path(root) if root is not None else None
    arrays = []
    for r in records:
        p = Path(r.image_path)
        if root is not None and not p.is_absolute():
            p = root / p
        arrays.append(load_image(p, size))
    if not arrays:
        return torch.zeros(0, 3, *size)
    return torch.from_numpy(np.stack(arrays))


def step_seed(seed: int, step: int) -> int:
    return int(np.random.default_rng([seed, step]).integers(2 ** 62))


@dataclass
class TrainState:
    """Snapshot emitted by :meth:`Trainer.run`."""

    step: int
    loss_curve: list[tuple[int, float]]
    optimizer: dict = field(repr=False, default_factory=dict)


class Trainer:
    """Joint optimization of identity embeddings and LoRA factors.

    Parameters
    ----------
    config : TrainConfig
    examples : list of TrainingExample
    model : ToyUNet with adapters attached
    adapters : LoraAdapterSet
    registry, encoder : text side; only trainable registry rows change
    sched : NoiseSchedule
    images : optional pre-loaded tensor aligned with ``examples``
    """

    def __init__(self, config: TrainConfig, examples: Sequence[TrainingExample], model,
                 adapters: LoraAdapterSet, registry: TokenRegistry, encoder,
                 sched: NoiseSchedule, images: torch.Tensor | None = None,
                 image_root: str | Path | None = None):
        self.config = config
        self.examples = list(examples)
        self.model, self.adapters = model, adapters
        self.registry, self.encoder, self.sched = registry, encoder, sched
        if images is None:
            images = load_images([e.record for e in self.examples], config.image_size, image_root)
        if len(images) != len(self.examples):
            raise ValueError("images and examples must align")
        self.images = images
        self.prompts = [e.prompt() for e in self.examples]
        freeze(model)
        freeze(encoder)
        for p in adapters.parameters():
            p.requires_grad_(True)
        registry.table.weight.requires_grad_(True)
        self.params = [registry.table.weight, *adapters.parameters()]
        self.optimizer = torch.optim.Adam(self.params, lr=config.learning_rate,
                                          betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
        self.step = 0
        self.loss_curve: list[tuple[int, float]] = []

    def load_state(self, state: TrainState) -> None:
        self.step = state.step
        self.loss_curve = list(state.loss_curve)
        if state.optimizer:
            self.optimizer.load_state_dict(state.optimizer)

    def state(self) -> TrainState:
        return TrainState(self.step, list(self.loss_curve), self.optimizer.state_dict())

    def batch_indices(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng([self.config.seed, step, 1])
        idx = rng.integers(len(self.examples), size=self.config.batch_size)
        flip = (rng.random(self.config.batch_size) < 0.5) if self.config.horizontal_flip \
            else np.zeros(self.config.batch_size, dtype=bool)
        return idx, flip

    def train_step(self) -> float:
        step = self.step
        idx, flip = self.batch_indices(step)
        x = self.images[torch.from_numpy(idx)]
        if flip.any():
            f = torch.from_numpy(flip)
            x = x.clone()
            x[f] = x[f].flip(-1)
        prompts = [self.prompts[i] for i in idx]
        gen = torch.Generator().manual_seed(step_seed(self.config.seed, step))
        loss = training_loss(x, prompts, self.model, self.adapters, self.registry,
                             self.encoder, self.sched, gen)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(step, idx.tolist(), value)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.step += 1
        self.loss_curve.append((step, value))
        return value

    def run(self, until: int | None = None) -> Iterator[TrainState]:
        """Train to ``until`` (default ``total_steps``), yielding a state every
        ``checkpoint_every`` steps and at the end."""
        if not self.examples:
            raise ValueError("empty training set")
        until = self.config.total_steps if until is None else until
        t0 = time.time()
        while self.step < until:
            value = self.train_step()
            if self.step % 100 == 0:
                log.info("step %d loss %.4f (%.1fs)", self.step, value, time.time() - t0)
            if self.step % self.config.checkpoint_every == 0 or self.step == until:
                yield self.state()


def train(config: TrainConfig, examples: Sequence[TrainingExample], model, adapters,
          registry, encoder, sched, images=None, image_root=None,
          checkpoint_dir: str | Path | None = None) -> Trainer:
    """Run a full fine-tuning; optionally writes ``step-XXXXXX.pt`` checkpoints."""
    trainer = Trainer(config, examples, model, adapters, registry, encoder, sched, images,
                      image_root)
    for state in trainer.run():
        if checkpoint_dir is not None:
            save_checkpoint(Path(checkpoint_dir) / f"step-{state.step:06d}.pt", model, registry,
                            encoder, sched, adapters,
                            extra={"train_config": asdict(config), "step": state.step,
                                   "loss_curve": state.loss_curve,
                                   "optimizer": state.optimizer})
    return trainer


def write_loss_curve(curve: Sequence[tuple[int, float]], path: str | Path) -> Path:
    path = Path(path)
    path.write_text("".join(f"{s}\t{v!r}\n" for s, v in curve), encoding="utf-8")
    return path


# -- base pretraining ---------------------------------------------------------

@dataclass
class BaseModel:
    model: ToyUNet
    registry: TokenRegistry
    encoder: PromptEncoder
    sched: NoiseSchedule
    loss_curve: list[tuple[int, float]] = field(default_factory=list)


def pretrain_base(config: PretrainConfig = PretrainConfig(), exclude=(),
                  progress: bool = False) -> BaseModel:
    """Train a denoiser, base vocabulary and prompt encoder on the captioned
    toy stream, then freeze all three.

    ``exclude`` lists toy persons that must never be shown (the identities
    the fine-tuning stage will learn).
    """
    torch.manual_seed(config.seed)
    model = ToyUNet(config.denoiser_config())
    registry = TokenRegistry(base_words(), dim=config.text_dim, seed=config.seed)
    registry.table.set_trainable(None, True)
    encoder = PromptEncoder(config.text_dim, seed=config.seed)
    sched = NoiseSchedule()
    stream = CaptionedStream(config.image_size, seed=config.seed, exclude=exclude)
    params = [*model.parameters(), registry.table.weight, *encoder.parameters()]
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    total = max(config.steps, 1)

    def lr_at(step):
        warm = min(1.0, (step + 1) / max(config.warmup, 1))
        return warm * 0.5 * (1 + math.cos(math.pi * step / total))

    lr_sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_at)
    curve = []
    t0 = time.time()
    for step in range(config.steps):
        x, caps = stream.batch(step, config.batch_size)
        ids, mask = registry.batch_ids(caps)
        cond = encoder(registry.table(ids), mask)
        gen = torch.Generator().manual_seed(step_seed(config.seed + 7919, step))
        loss = diffusion_loss(model, torch.from_numpy(x), cond, sched, gen, key_mask=mask)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, 1.0)
        opt.step()
        lr_sched.step()
        curve.append((step, loss.item()))
        if progress and step % 200 == 0:
            log.info("pretrain step %d loss %.4f (%.0fs)", step, loss.item(), time.time() - t0)
    registry.table.set_trainable(None, False)
    freeze(model)
    freeze(encoder)
    registry.table.weight.requires_grad_(False)
    return BaseModel(model, registry, encoder, sched, curve)


def prepare_finetune(base: BaseModel, corpora: Sequence[ReidCorpus], config: TrainConfig):
    """Attach fresh adapters and register corpus tokens on a base model."""
    model, adapters = attach_adapters(base.model, config.lora_rank, config.lora_scale,
                                      seed=config.seed)
    register_corpus_tokens(base.registry, corpora, config.seed, config.view_granularity)
    return model, adapters
