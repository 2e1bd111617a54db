"""Per-token cross-attention heatmaps.

Attention probabilities are captured from every cross-attention block
during generation (or while denoising a given image at chosen timesteps),
averaged over heads, blocks and timesteps, upsampled bilinearly to image
size and divided by their maximum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .diffusion import NoiseSchedule, denoise_predict, forward_noise
from .prompts import PromptSpec, build_prompt
from .sampling import SamplerConfig, sample

__all__ = ["AttentionResult", "attention_maps", "mask_mass", "bounding_box",
           "render_attention_grid"]


@dataclass
class AttentionResult:
    """Heatmaps for one prompt.

    ``maps[i]`` belongs to ``tokens[i]``; ``raw`` keeps the head-averaged
    probabilities per block before upsampling, shape ``(HW_block, L)``.
    """

    prompt: tuple[str, ...]
    tokens: list[str]
    maps: np.ndarray
    image: np.ndarray
    raw: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def map(self, token: str) -> np.ndarray:
        return self.maps[self.tokens.index(token)]


class _Recorder:
    def __init__(self, model):
        self.blocks = model.attention_modules()
        self.sums: dict[str, torch.Tensor] = {}
        self.counts: dict[str, int] = {}
        self.shapes: dict[str, tuple[int, int]] = {}
        self.handles = []

    def __enter__(self):
        for name, block in self.blocks.items():
            self.handles.append(block.register_forward_hook(self._hook(name)))
            block.record = True
        return self

    def _hook(self, name):
        def fn(module, inputs, output):
            attn = module.last_attention.mean(1)          # B, HW, L (head average)
            self.sums[name] = self.sums.get(name, 0) + attn
            self.counts[name] = self.counts.get(name, 0) + 1
            self.shapes[name] = tuple(inputs[0].shape[-2:])
        return fn

    def __exit__(self, *exc):
        for h in self.handles:
            h.remove()
        for block in self.blocks.values():
            block.record = False
            block.last_attention = None


def attention_maps(prompt: PromptSpec, model, registry, encoder, sched: NoiseSchedule,
                   adapters=None, tokens: Sequence[str] | None = None,
                   image: torch.Tensor | None = None, timesteps: Sequence[float] | None = None,
                   sampler: SamplerConfig = SamplerConfig(), image_size=(32, 16),
                   seed: int = 0) -> AttentionResult:
    """Heatmaps of ``tokens`` (default: every prompt token) for one prompt.

    Without ``image`` a sample is generated and attention is averaged over
    all solver steps.  With ``image`` (``(3, H, W)``) it is noised at each
    of ``timesteps`` (default ``[250, 500, 750]``) with seeded noise and
    denoised once per timestep.
    """
    words = build_prompt(prompt)
    tokens = list(words) if tokens is None else list(tokens)
    for tok in tokens:
        if tok not in words:
            raise ValueError(f"token {tok!r} is not in the prompt {' '.join(words)!r}")
    if not model.attention_modules():
        raise ValueError("model has no cross-attention blocks")
    with _Recorder(model) as rec, torch.no_grad():
        if image is None:
            out = sample(prompt, SamplerConfig(sampler.steps, sampler.method, seed, 1),
                         model, registry, encoder, sched, adapters, image_size)
            img = out[0]
        else:
            img = torch.as_tensor(image, dtype=torch.float32)
            image_size = tuple(img.shape[-2:])
            ids, mask = registry.batch_ids([words])
            cond = encoder(registry.table(ids), mask)
            gen = torch.Generator().manual_seed(seed)
            for t in (timesteps if timesteps is not None else (250.0, 500.0, 750.0)):
                eps = torch.randn((1, *img.shape), generator=gen)
                z = forward_noise(img[None], torch.tensor([float(t)]), eps, sched)
                denoise_predict(z, float(t), cond, model, adapters, key_mask=mask)
    H, W = image_size
    pos = [words.index(t) for t in tokens]
    total = torch.zeros(len(tokens), H, W)
    raw = {}
    for name, s in rec.sums.items():
        avg = (s / rec.counts[name])[0]                   # HW, L
        raw[name] = avg.numpy().astype(np.float64)
        h, w = rec.shapes[name]
        grid = avg[:, pos].T.reshape(len(tokens), 1, h, w)
        total += F.interpolate(grid, size=(H, W), mode="bilinear", align_corners=False)[:, 0]
    total /= len(rec.sums)
    maps = total.numpy().astype(np.float64)
    peak = maps.reshape(len(tokens), -1).max(1)
    maps = maps / np.where(peak > 0, peak, 1.0)[:, None, None]
    return AttentionResult(words, tokens, maps, img.numpy(), raw)


def bounding_box(mask: np.ndarray) -> np.ndarray:
    """Filled axis-aligned bounding box of a boolean mask."""
    mask = np.asarray(mask, dtype=bool)
    box = np.zeros_like(mask)
    if mask.any():
        rows = np.flatnonzero(mask.any(1))
        cols = np.flatnonzero(mask.any(0))
        box[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1] = True
    return box


def mask_mass(heatmap: np.ndarray, region: np.ndarray) -> float:
    """Fraction of heatmap mass inside ``region``."""
    heatmap = np.asarray(heatmap, dtype=np.float64)
    total = heatmap.sum()
    return float(heatmap[np.asarray(region, dtype=bool)].sum() / total) if total > 0 else 0.0


def _colorize(h: np.ndarray) -> np.ndarray:
    # blue -> red ramp through yellow; h in [0, 1]
    h = np.clip(h, 0.0, 1.0)
    r = np.clip(2.0 * h, 0.0, 1.0)
    g = np.clip(2.0 - 2.0 * np.abs(2.0 * h - 1.0) - 1.0, 0.0, 1.0) * 0.9 + 0.1 * h
    b = np.clip(1.0 - 2.0 * h, 0.0, 1.0)
    return np.stack([r, g, b], -1)


def render_attention_grid(results: Sequence[AttentionResult], path: str | Path,
                          scale: int = 4) -> Path:
    """One row per prompt: the image, then one heatmap per token."""
    if not results:
        raise ValueError("nothing to render")
    H, W = results[0].maps.shape[-2:]
    cols = 1 + max(len(r.tokens) for r in results)
    pad = 2
    canvas = np.ones(((H + pad) * len(results), (W + pad) * cols, 3))
    for i, r in enumerate(results):
        y = i * (H + pad)
        canvas[y:y + H, :W] = (np.asarray(r.image).transpose(1, 2, 0) + 1.0) / 2.0
        for j, m in enumerate(r.maps):
            x = (j + 1) * (W + pad)
            canvas[y:y + H, x:x + W] = _colorize(m)
    arr = (np.clip(canvas, 0, 1) * 255 + 0.5).astype(np.uint8)
    im = Image.fromarray(arr).resize((arr.shape[1] * scale, arr.shape[0] * scale), Image.NEAREST)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    im.save(path, format="PNG")
    return path
