"""Cosine variance-preserving schedule, v-prediction, classifier-free guidance
and a second-order multistep data-prediction solver (DPM-Solver++ 2M)."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .conditioning import CondBatch, ConditionBundle, apply_condition_dropout, collate


class SamplingError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


# -- schedule -------------------------------------------------------------

def alpha(t):
    if isinstance(t, torch.Tensor):
        return torch.cos(0.5 * math.pi * t).clamp(min=0.0)
    return max(math.cos(0.5 * math.pi * float(t)), 0.0)


def sigma(t):
    if isinstance(t, torch.Tensor):
        return torch.sin(0.5 * math.pi * t)
    return math.sin(0.5 * math.pi * float(t))


def log_snr(t) -> float:
    """lambda(t) = log(alpha / sigma); scalar only."""
    return math.log(alpha(t)) - math.log(sigma(t))


def t_from_log_snr(lam: float) -> float:
    return 2.0 / math.pi * math.atan(math.exp(-lam))


def _bcast(coef, x):
    if isinstance(coef, torch.Tensor) and coef.ndim == 1 and x.ndim > 1:
        return coef.reshape(-1, *([1] * (x.ndim - 1)))
    return coef


def q_sample(x0, t, eps):
    return _bcast(alpha(t), x0) * x0 + _bcast(sigma(t), x0) * eps


def velocity_target(x0, eps, t):
    return _bcast(alpha(t), x0) * eps - _bcast(sigma(t), x0) * x0


def x0_from_v(x_t, v, t):
    return _bcast(alpha(t), x_t) * x_t - _bcast(sigma(t), x_t) * v


def eps_from_v(x_t, v, t):
    return _bcast(sigma(t), x_t) * x_t + _bcast(alpha(t), x_t) * v


def cfg_combine(v_uncond, v_cond, scale: float):
    if scale == 1.0:
        return v_cond
    if scale == 0.0:
        return v_uncond
    return v_uncond + scale * (v_cond - v_uncond)


# -- training objective ---------------------------------------------------

T_MIN = 1e-3


def training_loss(model, x0: torch.Tensor, bundles: list[ConditionBundle], rng: np.random.Generator,
                  dropout: float = 0.1, t_min: float = T_MIN, t: np.ndarray | None = None):
    """Mean squared v-prediction error on one batch.

    All randomness (timesteps, noise, condition dropout) comes from ``rng``
    so the loss is a deterministic function of the seed. ``t`` pins the
    timesteps when given.
    """
    B = x0.shape[0]
    if len(bundles) != B:
        raise ValueError(f"{len(bundles)} bundles for a batch of {B}")
    if t is None:
        t = rng.uniform(t_min, 1.0, size=B)
    eps = rng.standard_normal(x0.shape)
    dropped = [apply_condition_dropout(b, dropout, rng) for b in bundles]
    cond = collate(dropped, model.cfg.d_txt, model.cfg.d_vis, dtype=x0.dtype)
    t_ = torch.as_tensor(np.asarray(t), dtype=x0.dtype)
    eps_ = torch.as_tensor(eps, dtype=x0.dtype)
    x_t = q_sample(x0, t_, eps_)
    target = velocity_target(x0, eps_, t_)
    loss = (model(x_t, t_, cond) - target).pow(2).mean()
    if not torch.isfinite(loss):
        raise TrainingError(
            f"non-finite loss {loss.item()} (t range {t.min():.4f}-{t.max():.4f}, "
            f"|x0| max {x0.abs().max().item():.3g})"
        )
    return loss


# -- sampler ------------------------------------------------------------

@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 100
    guidance_scale: float = 5.0
    t_min: float = T_MIN
    t_max: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 < self.t_min < self.t_max <= 1.0:
            raise ValueError("need 0 < t_min < t_max <= 1")


def time_grid(cfg: SamplerConfig) -> np.ndarray:
    return np.linspace(cfg.t_max, cfg.t_min, cfg.steps + 1)


VelocityFn = Callable[[torch.Tensor, torch.Tensor, object], torch.Tensor]


def guided_velocity(model: VelocityFn, x, t, cond: CondBatch | None, scale: float):
    """Conditional and unconditional branches in one batched call, combined with CFG.

    ``cond=None`` is for condition-free models; the model is called once.
    """
    if cond is None or scale == 1.0:
        return model(x, t, cond)
    if scale == 0.0:
        return model(x, t, cond.nulled())
    v = model(torch.cat([x, x]), torch.cat([t, t]), CondBatch.cat([cond, cond.nulled()]))
    v_cond, v_uncond = v.chunk(2)
    return cfg_combine(v_uncond, v_cond, scale)


@torch.no_grad()
def sample(model: VelocityFn, cond, shape, cfg: SamplerConfig = SamplerConfig(),
           generator: torch.Generator | None = None, noise: torch.Tensor | None = None,
           dtype=torch.float32, trace: list | None = None) -> torch.Tensor:
    """Integrate the probability-flow ODE from ``t_max`` to ``t_min``.

    Each step converts the guided velocity to a data prediction
    ``x0 = alpha * x - sigma * v`` and applies the multistep update in
    log-SNR. The first step (and ``steps == 1``) is first order.
    """
    if noise is None:
        noise = torch.randn(shape, generator=generator, dtype=dtype)
    x = noise.to(dtype)
    grid = time_grid(cfg)
    lams = [log_snr(t) for t in grid]
    x0_prev, h_prev = None, None
    B = x.shape[0]
    for i in range(cfg.steps):
        s, t = float(grid[i]), float(grid[i + 1])
        h = lams[i + 1] - lams[i]
        v = guided_velocity(model, x, torch.full((B,), s, dtype=dtype), cond, cfg.guidance_scale)
        x0 = x0_from_v(x, v, s)
        if x0_prev is None:
            d = x0
        else:
            r = h_prev / h
            d = (1 + 0.5 / r) * x0 - (0.5 / r) * x0_prev
        x = (sigma(t) / sigma(s)) * x - alpha(t) * math.expm1(-h) * d
        if not torch.isfinite(x).all():
            raise SamplingError(f"non-finite sampler state at step {i + 1} (t={t:.4g})")
        if trace is not None:
            trace.append({"step": i + 1, "t": t, "log_snr": lams[i + 1],
                          "x_norm": float(x.norm()), "x0_norm": float(x0.norm())})
        x0_prev, h_prev = x0, h
    return x


def write_trace(path, trace: list) -> None:
    from .io import atomic_write_text
    atomic_write_text(path, json.dumps({"steps": trace}, indent=1) + "\n")
