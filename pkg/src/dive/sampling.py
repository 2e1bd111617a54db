"""Deterministic multistep generation from Gaussian noise.

Two solvers of the probability-flow ODE, both in data-prediction form on a
uniform timestep grid:

* ``first_order``: the deterministic DDIM update.
* ``multistep_2nd_order``: second-order multistep update in log-SNR
  coordinates (the DPM-Solver++ 2M recursion).

The last grid point is treated as clean data (sigma = 0), so the final update
returns the data prediction itself, always at first order.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .diffusion import NoiseSchedule, denoise_predict
from .prompts import PromptSpec, build_prompt

__all__ = ["SamplerMethod", "SamplerConfig", "SamplerTrace", "timestep_grid", "sample_ode",
           "sample"]


class SamplerMethod(str, enum.Enum):
    MULTISTEP_2ND_ORDER = "multistep_2nd_order"
    FIRST_ORDER = "first_order"


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 25
    method: SamplerMethod = SamplerMethod.MULTISTEP_2ND_ORDER
    seed: int = 0
    batch: int = 1
    clip_output: bool = True
    # classifier-free guidance is not part of the pipeline; any value but None is rejected
    guidance_scale: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "method", SamplerMethod(self.method))
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.guidance_scale is not None:
            raise NotImplementedError("classifier-free guidance is not implemented")


@dataclass
class SamplerTrace:
    """Filled in by :func:`sample_ode`: number of denoiser calls and the grid."""

    evaluations: int = 0
    grid: np.ndarray | None = None


def timestep_grid(steps: int, sched: NoiseSchedule) -> np.ndarray:
    """``steps + 1`` uniformly spaced timesteps from ``T_max`` down to 0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps > sched.T_max:
        raise ValueError(f"steps must be <= T_max ({sched.T_max})")
    return np.linspace(sched.T_max, 0.0, steps + 1)


EpsFn = Callable[[torch.Tensor, float], torch.Tensor]


def sample_ode(eps_fn: EpsFn, x_T: torch.Tensor, sched: NoiseSchedule,
               steps: int = 25, method: SamplerMethod | str = SamplerMethod.MULTISTEP_2ND_ORDER,
               clip_output: bool = True,
               callback: Callable[[int, float, torch.Tensor], None] | None = None,
               trace: SamplerTrace | None = None) -> torch.Tensor:
    """Integrate from ``x_T`` at ``t = T_max`` to data.

    ``eps_fn(x, t)`` predicts the noise.  ``callback(i, t, x)`` observes each
    intermediate (unclamped) state after update ``i``.
    """
    method = SamplerMethod(method)
    grid = timestep_grid(steps, sched)
    trace = trace if trace is not None else SamplerTrace()
    trace.grid = grid
    x = x_T
    prev_x0 = None
    prev_h = None
    for i in range(steps):
        s, t = float(grid[i]), float(grid[i + 1])
        a_s, sig_s = sched.alpha(s), sched.sigma(s)
        eps = eps_fn(x, s)
        trace.evaluations += 1
        x0 = (x - sig_s * eps) / a_s
        final = i == steps - 1
        if final:
            x = x0
        else:
            a_t, sig_t = sched.alpha(t), sched.sigma(t)
            h = math.log(a_t / sig_t) - math.log(a_s / sig_s)
            if method is SamplerMethod.FIRST_ORDER or prev_x0 is None:
                d = x0
            else:
                r = prev_h / h
                d = (1.0 + 0.5 / r) * x0 - (0.5 / r) * prev_x0
            x = (sig_t / sig_s) * x - a_t * math.expm1(-h) * d
            prev_x0, prev_h = x0, h
        if callback is not None:
            callback(i, t, x)
    if clip_output:
        x = x.clamp(-1.0, 1.0)
    return x


def initial_noise(shape, seed: int, dtype=torch.float32) -> torch.Tensor:
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


@torch.no_grad()
def sample(prompt: PromptSpec, config: SamplerConfig, model, registry, encoder,
           sched: NoiseSchedule, adapters=None, image_size=(32, 16),
           noise: torch.Tensor | None = None, trace: SamplerTrace | None = None,
           callback=None) -> torch.Tensor:
    """Generate ``config.batch`` images for ``prompt``.

    ``noise`` overrides the seeded initial state (shape ``(batch, C, H, W)``).
    """
    if model is None or registry is None:
        raise ValueError("sampling needs a trained checkpoint")
    tokens = build_prompt(prompt)
    ids, mask = registry.batch_ids([tokens])
    cond = encoder(registry.table(ids), mask)
    H, W = image_size
    if noise is None:
        noise = initial_noise((config.batch, model.config.in_channels, H, W), config.seed)
    B = noise.shape[0]
    cond_b, mask_b = cond.expand(B, -1, -1), mask.expand(B, -1)

    def eps_fn(x, t):
        return denoise_predict(x, t, cond_b, model, adapters, key_mask=mask_b)

    return sample_ode(eps_fn, noise, sched, config.steps, config.method,
                      config.clip_output, callback=callback, trace=trace)
