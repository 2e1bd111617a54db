"""Small shared fixtures for the test modules."""

import torch

from dive.diffusion import DenoiserConfig, NoiseSchedule, ToyUNet, attach_adapters
from dive.prompts import PromptEncoder, PromptSpec, TokenRegistry, build_prompt

TINY = DenoiserConfig(widths=(8, 16), text_dim=8, time_dim=8, heads=2, head_dim=4, groups=4,
                      attn_blocks=("mid", "up1"))
WIDE = DenoiserConfig(widths=(64, 128), text_dim=128, time_dim=32, heads=8, head_dim=16,
                      groups=8, attn_blocks=("mid",))
WORDS = ["a", "photo", "of", "person", "red", "blue"]


def tiny_setup(seed: int, rank: int = 2, dtype=torch.float64, config=TINY):
    """Denoiser, adapters, registry with one identity and one view token."""
    torch.manual_seed(seed)
    model = ToyUNet(config).to(dtype)
    reg = TokenRegistry(WORDS, dim=config.text_dim, seed=seed)
    ident = reg.register_identity(0, rng_seed=seed)
    view = reg.register_view("infrared", 0, "ds")
    reg.table.to(dtype)
    enc = PromptEncoder(config.text_dim, seed=seed).to(dtype)
    for p in enc.parameters():
        p.requires_grad_(False)
    for p in model.parameters():
        p.requires_grad_(False)
    model, adapters = attach_adapters(model, rank=rank, seed=seed)
    for ad in adapters.adapters.values():
        ad.A.data = ad.A.data.to(dtype)
        ad.B.data = ad.B.data.to(dtype)
    return model, adapters, reg, enc, build_prompt(PromptSpec(ident, view)), NoiseSchedule()


def randomize_B(adapters, seed: int, scale: float = 0.1):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for ad in adapters.adapters.values():
            ad.B.copy_(torch.randn(ad.B.shape, generator=gen, dtype=torch.float64).to(ad.B.dtype)
                       * scale)


def central_difference(f, param: torch.Tensor, h: float, index=None):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. ``param``
    (restricted to ``index`` rows when given)."""
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    positions = range(flat.numel())
    if index is not None:
        cols = param.shape[1]
        positions = [r * cols + c for r in index for c in range(cols)]
    for i in positions:
        old = flat[i].item()
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        grad.view(-1)[i] = (up - down) / (2 * h)
    return grad


# (criterion, part) -> one result line, printed in the pytest terminal summary
ACCEPTANCE: dict[tuple[int, str], str] = {}


def record_criterion(number: int, passed: bool, detail: str, part: str = "") -> None:
    ACCEPTANCE[(number, part)] = (f"criterion {number}{part}: {'PASS' if passed else 'FAIL'}  "
                                  f"{detail}")
