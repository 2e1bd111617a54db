"""Variance-preserving noise process, toy conditional denoiser and LoRA.

The denoiser is a two-level convolutional encoder/decoder with a sinusoidal
timestep embedding and cross-attention reading the prompt conditioning.
Low-rank adapters attach to the query/key/value projections of the
cross-attention blocks; with ``B = 0`` they are an exact no-op.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "NoiseSchedule",
    "DenoiserConfig",
    "ToyUNet",
    "CrossAttention",
    "LoRALinear",
    "LoraAdapterSet",
    "attach_adapters",
    "forward_noise",
    "denoise_predict",
    "diffusion_loss",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Cosine schedule: alpha_t = cos(pi/2 * t / T_max), clamped to
    ``[clamp, 1 - clamp]``, sigma_t = sqrt(1 - alpha_t^2).  Accepts float,
    numpy or torch timesteps (continuous t is allowed)."""

    T_max: int = 1000
    clamp: float = 1e-4

    def _check(self, t):
        lo, hi = (t.min(), t.max()) if hasattr(t, "min") else (t, t)
        if float(lo) < 0 or float(hi) > self.T_max:
            raise ValueError(f"timestep out of range [0, {self.T_max}]")

    def alpha(self, t):
        self._check(t)
        if isinstance(t, torch.Tensor):
            a = torch.cos(math.pi / 2 * t.to(torch.float64) / self.T_max)
            return a.clamp(self.clamp, 1 - self.clamp)
        a = np.cos(np.pi / 2 * np.asarray(t, dtype=np.float64) / self.T_max)
        a = np.clip(a, self.clamp, 1 - self.clamp)
        return float(a) if a.ndim == 0 else a

    def sigma(self, t):
        a = self.alpha(t)
        if isinstance(a, torch.Tensor):
            return torch.sqrt(1 - a * a)
        s = np.sqrt(1 - np.asarray(a) ** 2)
        return float(s) if s.ndim == 0 else s

    def log_snr(self, t):
        a, s = self.alpha(t), self.sigma(t)
        if isinstance(a, torch.Tensor):
            return torch.log(a / s)
        return np.log(np.asarray(a) / np.asarray(s)) if np.ndim(a) else math.log(a / s)


def _expand(coef: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    coef = torch.as_tensor(coef, dtype=x.dtype)
    return coef.reshape(coef.shape + (1,) * (x.ndim - coef.ndim)) if coef.ndim else coef


def forward_noise(x: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """z_t = alpha_t * x + sigma_t * eps; ``t`` is a scalar or per-sample."""
    if eps.shape != x.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != image shape {tuple(x.shape)}")
    t = torch.as_tensor(t, dtype=torch.float64)
    if t.ndim and t.shape[0] != x.shape[0]:
        raise ValueError("per-sample timesteps must match the batch size")
    return _expand(sched.alpha(t), x) * x + _expand(sched.sigma(t), x) * eps


# -- network ------------------------------------------------------------------

@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 3
    widths: tuple[int, int] = (32, 64)
    text_dim: int = 64
    time_dim: int = 64
    heads: int = 4
    head_dim: int = 16
    groups: int = 8
    # where cross-attention sits: "mid" (bottleneck), "down1"/"up1" (half resolution)
    attn_blocks: tuple[str, ...] = ("mid",)
    # "v": the trunk predicts v = alpha*eps - sigma*x and eps = sigma*z + alpha*v is
    # returned, which keeps x0 = (z - sigma*eps) / alpha bounded near t = T_max
    output: str = "v"
    T_max: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        object.__setattr__(self, "attn_blocks", tuple(self.attn_blocks))
        bad = set(self.attn_blocks) - {"mid", "down1", "up1"}
        if bad:
            raise ValueError(f"unknown attention blocks {sorted(bad)}")
        if self.output not in ("eps", "v"):
            raise ValueError(f"output must be 'eps' or 'v', got {self.output!r}")

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freq[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Spatial queries attend over prompt tokens.

    Set ``record = True`` to keep the last attention probabilities in
    ``last_attention`` with shape ``(B, heads, H*W, L)``.
    """

    def __init__(self, channels: int, text_dim: int, heads: int, head_dim: int, groups: int):
        super().__init__()
        inner = heads * head_dim
        self.heads, self.head_dim = heads, head_dim
        self.norm = nn.GroupNorm(min(groups, channels), channels)
        self.to_q = nn.Linear(channels, inner, bias=False)
        self.to_k = nn.Linear(text_dim, inner, bias=False)
        self.to_v = nn.Linear(text_dim, inner, bias=False)
        self.to_out = nn.Linear(inner, channels)
        self.record = False
        self.last_attention: torch.Tensor | None = None
        self.attention_override: Callable | None = None

    def forward(self, x, context, key_mask=None):
        B, C, H, W = x.shape
        L = context.shape[1]
        h = self.norm(x).flatten(2).transpose(1, 2)                     # B, HW, C
        q = self.to_q(h).view(B, H * W, self.heads, self.head_dim).transpose(1, 2)
        k = self.to_k(context).view(B, L, self.heads, self.head_dim).transpose(1, 2)
        v = self.to_v(context).view(B, L, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)     # B, heads, HW, L
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        if self.attention_override is not None:
            attn = self.attention_override(attn)
        if self.record:
            self.last_attention = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(B, H * W, -1)
        return x + self.to_out(out).transpose(1, 2).reshape(B, C, H, W)


class ToyUNet(nn.Module):
    """Noise-prediction network ``(z_t, t, context) -> eps``."""

    def __init__(self, config: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.config = c = config
        w0, w1 = c.widths
        tdim = 2 * c.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(c.time_dim, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.conv_in = nn.Conv2d(c.in_channels, w0, 3, padding=1)
        self.down0 = ResBlock(w0, w0, tdim, c.groups)
        self.pool0 = nn.Conv2d(w0, w0, 3, stride=2, padding=1)
        self.down1 = ResBlock(w0, w1, tdim, c.groups)
        self.pool1 = nn.Conv2d(w1, w1, 3, stride=2, padding=1)
        self.mid1 = ResBlock(w1, w1, tdim, c.groups)
        self.mid2 = ResBlock(w1, w1, tdim, c.groups)
        self.up1 = ResBlock(2 * w1, w1, tdim, c.groups)
        self.up0 = ResBlock(w1 + w0, w0, tdim, c.groups)
        self.out_norm = nn.GroupNorm(min(c.groups, w0), w0)
        self.conv_out = nn.Conv2d(w0, c.in_channels, 3, padding=1)
        self.attn = nn.ModuleDict({
            name: CrossAttention(w1, c.text_dim, c.heads, c.head_dim, c.groups)
            for name in c.attn_blocks
        })

    def _attend(self, name, h, context, key_mask):
        if name in self.attn:
            return self.attn[name](h, context, key_mask)
        return h

    def forward(self, z, t, context, key_mask=None):
        B = z.shape[0]
        t = torch.as_tensor(t, dtype=torch.float64)
        if t.ndim == 0:
            t = t.expand(B)
        temb = self.time_mlp(timestep_embedding(t, self.config.time_dim).to(z.dtype))
        if context.ndim == 2:
            context = context.expand(B, *context.shape)
        h0 = self.down0(self.conv_in(z), temb)
        h1 = self._attend("down1", self.down1(self.pool0(h0), temb), context, key_mask)
        m = self.mid1(self.pool1(h1), temb)
        m = self._attend("mid", m, context, key_mask)
        m = self.mid2(m, temb)
        u = F.interpolate(m, size=h1.shape[-2:], mode="nearest")
        u = self._attend("up1", self.up1(torch.cat([u, h1], 1), temb), context, key_mask)
        u = F.interpolate(u, size=h0.shape[-2:], mode="nearest")
        u = self.up0(torch.cat([u, h0], 1), temb)
        out = self.conv_out(F.silu(self.out_norm(u)))
        if self.config.output == "eps":
            return out
        sched = NoiseSchedule(self.config.T_max)
        a, s = sched.alpha(t), sched.sigma(t)
        return _expand(s, z) * z + _expand(a, z) * out

    def attention_modules(self) -> dict[str, CrossAttention]:
        return dict(self.attn.items())


# -- low-rank adapters --------------------------------------------------------

class LoRALinear(nn.Module):
    """``W x + s * A (B x)`` with ``A: out x r`` and ``B: r x in``."""

    def __init__(self, base: nn.Linear, rank: int, scale: float = 1.0,
                 generator: torch.Generator | None = None):
        super().__init__()
        out_f, in_f = base.weight.shape
        if rank <= 0:
            raise ValueError("rank must be positive")
        if rank > min(out_f, in_f):
            raise ValueError(f"rank {rank} exceeds min(out, in) = {min(out_f, in_f)}")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank, self.scale, self.enabled = rank, scale, True
        dtype = base.weight.dtype
        self.A = nn.Parameter(torch.randn(out_f, rank, generator=generator).to(dtype) / rank)
        self.B = nn.Parameter(torch.zeros(rank, in_f, dtype=dtype))

    @property
    def weight(self):
        return self.base.weight

    def delta(self) -> torch.Tensor:
        return self.scale * self.A @ self.B

    def forward(self, x):
        y = self.base(x)
        if self.enabled:
            y = y + self.scale * F.linear(F.linear(x, self.B), self.A)
        return y


class LoraAdapterSet:
    """The adapters attached to a model, keyed ``"<block>.to_q"`` etc."""

    def __init__(self, adapters: dict[str, LoRALinear]):
        self.adapters = adapters

    def __iter__(self):
        return iter(self.adapters.items())

    def __len__(self):
        return len(self.adapters)

    def __getitem__(self, key) -> LoRALinear:
        return self.adapters[key]

    def parameters(self) -> Iterator[nn.Parameter]:
        for ad in self.adapters.values():
            yield ad.A
            yield ad.B

    def set_scale(self, scale: float) -> None:
        for ad in self.adapters.values():
            ad.scale = scale

    @contextlib.contextmanager
    def disabled(self):
        prev = {k: ad.enabled for k, ad in self.adapters.items()}
        try:
            for ad in self.adapters.values():
                ad.enabled = False
            yield
        finally:
            for k, ad in self.adapters.items():
                ad.enabled = prev[k]

    def state_dict(self) -> dict:
        return {k: {"A": ad.A.detach().clone(), "B": ad.B.detach().clone(),
                    "rank": ad.rank, "scale": ad.scale} for k, ad in self.adapters.items()}

    def load_state_dict(self, state: dict) -> None:
        if set(state) != set(self.adapters):
            raise CheckpointError("adapter layout mismatch: "
                                  f"{sorted(state)} vs {sorted(self.adapters)}")
        with torch.no_grad():
            for k, ad in self.adapters.items():
                ad.A.copy_(state[k]["A"])
                ad.B.copy_(state[k]["B"])
                ad.scale = state[k]["scale"]


def attach_adapters(model: ToyUNet, rank: int = 128, scale: float = 1.0,
                    target_blocks: Sequence[str] | None = None,
                    seed: int = 0) -> tuple[ToyUNet, LoraAdapterSet]:
    """Wrap the Q/K/V projections of the targeted cross-attention blocks.

    The model is modified in place and returned together with its adapters.
    """
    if rank <= 0:
        raise ValueError("rank must be positive")
    blocks = model.attention_modules()
    names = list(blocks) if target_blocks is None else list(target_blocks)
    gen = torch.Generator().manual_seed(seed)
    adapters = {}
    for name in names:
        if name not in blocks:
            raise ValueError(f"model has no cross-attention block {name!r}")
        block = blocks[name]
        for proj in ("to_q", "to_k", "to_v"):
            current = getattr(block, proj)
            if isinstance(current, LoRALinear):
                raise ValueError(f"{name}.{proj} already has an adapter")
            wrapped = LoRALinear(current, rank, scale, generator=gen)
            setattr(block, proj, wrapped)
            adapters[f"{name}.{proj}"] = wrapped
    return model, LoraAdapterSet(adapters)


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def denoise_predict(z_t, t, conditioning, model: ToyUNet,
                    adapters: LoraAdapterSet | None = None, key_mask=None) -> torch.Tensor:
    """Predicted noise, with the adapters switched off when ``adapters`` is None."""
    if z_t.shape[1] != model.config.in_channels:
        raise ValueError("channel count does not match the denoiser")
    if conditioning.shape[-1] != model.config.text_dim:
        raise ValueError("conditioning width does not match the denoiser")
    if adapters is None:
        wrapped = [m for m in model.modules() if isinstance(m, LoRALinear)]
        prev = [m.enabled for m in wrapped]
        try:
            for m in wrapped:
                m.enabled = False
            return model(z_t, t, conditioning, key_mask)
        finally:
            for m, e in zip(wrapped, prev):
                m.enabled = e
    return model(z_t, t, conditioning, key_mask)


def diffusion_loss(denoiser: Callable, x: torch.Tensor, conditioning, sched: NoiseSchedule,
                   generator: torch.Generator | None = None, t=None, eps=None,
                   key_mask=None) -> torch.Tensor:
    """Mean squared error between injected and predicted noise.

    ``t`` defaults to uniform integers in ``[1, T_max]`` and ``eps`` to
    standard normal draws from ``generator``.
    """
    B = x.shape[0]
    if t is None:
        t = torch.randint(1, sched.T_max + 1, (B,), generator=generator)
    if eps is None:
        eps = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    z = forward_noise(x, t, eps, sched)
    pred = denoiser(z, t, conditioning, key_mask)
    return ((eps - pred) ** 2).mean()


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_FORMAT = "dive-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | Path, model: ToyUNet, registry, encoder,
                    sched: NoiseSchedule, adapters: LoraAdapterSet | None = None,
                    extra: dict | None = None) -> Path:
    """Write everything needed to reproduce generation into one file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base_state = {k: v for k, v in model.state_dict().items()
                  if ".A" not in k[-2:] and ".B" not in k[-2:]}
    base_state = {k.replace(".base.", "."): v for k, v in base_state.items()}
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "denoiser_config": asdict(model.config),
        "config_hash": model.config.config_hash(),
        "schedule": asdict(sched),
        "encoder": {"dim": encoder.dim, "max_len": encoder.max_len,
                    "positional": encoder.positional, "mixing": encoder.mixing,
                    "state": encoder.state_dict()},
        "base_state": base_state,
        "adapters": None if adapters is None else adapters.state_dict(),
        "registry": registry.state_dict(),
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


@dataclass
class Checkpoint:
    model: ToyUNet
    adapters: LoraAdapterSet | None
    registry: object
    encoder: nn.Module
    sched: NoiseSchedule
    extra: dict = field(default_factory=dict)
    config_hash: str = ""


def load_checkpoint(path: str | Path,
                    expected_config: DenoiserConfig | None = None) -> Checkpoint:
    """Rebuild model, adapters, registry and encoder from :func:`save_checkpoint`.

    Raises :class:`CheckpointError` on foreign files, version or
    architecture mismatch.
    """
    from .prompts import PromptEncoder, TokenRegistry

    try:
        payload = torch.load(path, weights_only=True)
    except Exception as exc:  # noqa: BLE001 - any unreadable file is a checkpoint error
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a DiVE checkpoint")
    if payload["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload['version']}")
    config = DenoiserConfig(**payload["denoiser_config"])
    if config.config_hash() != payload["config_hash"]:
        raise CheckpointError("checkpoint config hash does not match its stored config")
    if expected_config is not None and expected_config.config_hash() != config.config_hash():
        raise CheckpointError(
            f"architecture mismatch: checkpoint {config} vs expected {expected_config}")
    model = ToyUNet(config)
    try:
        model.load_state_dict(payload["base_state"])
    except RuntimeError as exc:
        raise CheckpointError(f"base weights do not fit the stored architecture: {exc}") from exc
    freeze(model)
    adapters = None
    if payload["adapters"] is not None:
        state = payload["adapters"]
        ranks = {v["rank"] for v in state.values()}
        blocks = sorted({k.split(".")[0] for k in state})
        if len(ranks) != 1:
            raise CheckpointError("mixed adapter ranks are not supported")
        model, adapters = attach_adapters(model, ranks.pop(), target_blocks=blocks)
        adapters.load_state_dict(state)
    enc = payload["encoder"]
    encoder = PromptEncoder(enc["dim"], enc["max_len"], enc["positional"], enc["mixing"])
    encoder.load_state_dict(enc["state"])
    freeze(encoder)
    registry = TokenRegistry.from_state_dict(payload["registry"])
    return Checkpoint(model, adapters, registry, encoder, NoiseSchedule(**payload["schedule"]),
                      payload["extra"], payload["config_hash"])
