"""Diffusion transformer with prepended timestep tokens, text cross-attention
and frame-wise AdaLN modulation from visual + timestep features.

Parameters fall into two groups. ``base`` covers the text+timestep model;
``visual`` covers modules that exist only when ``DiTConfig.visual`` is on
(concat projection, AdaLN generators, visual positional and null
embeddings). Zero-initializing the visual group reproduces the base model.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import (
    CondBatch,
    ConfigError,
    project_adaln,
    project_concat,
    sinusoidal_timestep_embedding,
    upsample_nearest,
)


@dataclass(frozen=True)
class DiTConfig:
    depth: int = 4
    d_model: int = 128
    heads: int = 4
    c_latent: int = 16
    d_txt: int = 64
    d_vis: int = 32
    n_prepend: int = 1
    ff_mult: int = 4
    concat_kernel: int = 1
    max_visual_frames: int = 512
    visual: bool = True

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError("d_model must be divisible by heads")
        if self.d_model % 2:
            raise ConfigError("d_model must be even (sinusoidal embeddings)")
        if self.n_prepend < 1:
            raise ConfigError("n_prepend must be >= 1")
        if self.concat_kernel % 2 == 0:
            raise ConfigError("concat_kernel must be odd")

    def to_dict(self) -> dict:
        return asdict(self)

    def base(self) -> "DiTConfig":
        return DiTConfig(**{**asdict(self), "visual": False})


def layer_norm(h: torch.Tensor) -> torch.Tensor:
    return F.layer_norm(h, h.shape[-1:], eps=1e-6)


def adaln_modulate(h: torch.Tensor, m: torch.Tensor | None, weight: torch.Tensor | None,
                   bias: torch.Tensor | None, n_prepend: int) -> torch.Tensor:
    """Frame-wise AdaLN: ``LN(h_i) * (1 + scale_i) + shift_i`` for frame tokens.

    ``weight``/``bias`` generate ``[scale, shift]`` from ``silu(m)``. The first
    ``n_prepend`` tokens get plain normalization.
    """
    x = layer_norm(h)
    if m is None:
        return x
    if h.shape[-2] != n_prepend + m.shape[-2]:
        raise RuntimeError(
            f"modulation length {m.shape[-2]} + {n_prepend} prepended != {h.shape[-2]} tokens"
        )
    scale, shift = F.linear(F.silu(m), weight, bias).chunk(2, dim=-1)
    head, frames = x[..., :n_prepend, :], x[..., n_prepend:, :]
    return torch.cat([head, frames * (1 + scale) + shift], dim=-2)


def positional_embedding(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = pos[:, None] * freqs[None, :]
    return torch.stack([torch.sin(args), torch.cos(args)], -1).reshape(length, dim).to(dtype)


def attention(q, k, v, heads: int, mask: torch.Tensor | None = None, mix: bool = True):
    B, Nq, D = q.shape
    Nk = k.shape[1]
    dh = D // heads
    if not mix:
        # test hook: each query token reads only its own value
        return v
    q = q.view(B, Nq, heads, dh).transpose(1, 2)
    k = k.view(B, Nk, heads, dh).transpose(1, 2)
    v = v.view(B, Nk, heads, dh).transpose(1, 2)
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    if mask is not None:
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
    out = scores.softmax(-1) @ v
    return out.transpose(1, 2).reshape(B, Nq, D)


class SelfAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x, mix: bool = True):
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        return self.out(attention(q, k, v, self.heads, mix=mix))


class CrossAttention(nn.Module):
    def __init__(self, d: int, d_ctx: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.kv = nn.Linear(d_ctx, 2 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x, ctx, mask, mix: bool = True):
        k, v = self.kv(ctx).chunk(2, dim=-1)
        if not mix:
            # identity hook for cross-attention: mean over valid context tokens
            w = mask.to(v.dtype) / mask.sum(-1, keepdim=True).to(v.dtype)
            return self.out((w[..., None] * v).sum(1, keepdim=True).expand(-1, x.shape[1], -1))
        return self.out(attention(self.q(x), k, v, self.heads, mask))


class Block(nn.Module):
    def __init__(self, cfg: DiTConfig):
        super().__init__()
        d = cfg.d_model
        self.n_prepend = cfg.n_prepend
        self.attn = SelfAttention(d, cfg.heads)
        self.cross = CrossAttention(d, cfg.d_txt, cfg.heads)
        self.ff = nn.Sequential(nn.Linear(d, cfg.ff_mult * d), nn.GELU(), nn.Linear(cfg.ff_mult * d, d))
        # scale/shift for the attention site then the feed-forward site
        self.adaln = nn.Linear(d, 4 * d) if cfg.visual else None

    def forward(self, h, m, text, text_mask, mix: bool = True):
        if self.adaln is not None and m is not None:
            w1, w2 = self.adaln.weight.chunk(2, dim=0)
            b1, b2 = self.adaln.bias.chunk(2, dim=0)
        else:
            w1 = w2 = b1 = b2 = None
            m = None
        h = h + self.attn(adaln_modulate(h, m, w1, b1, self.n_prepend), mix=mix)
        h = h + self.cross(layer_norm(h), text, text_mask, mix=mix)
        h = h + self.ff(adaln_modulate(h, m, w2, b2, self.n_prepend))
        return h


class VisualPath(nn.Module):
    def __init__(self, cfg: DiTConfig):
        super().__init__()
        self.pos = nn.Parameter(torch.zeros(cfg.max_visual_frames, cfg.d_vis))
        self.null = nn.Parameter(torch.zeros(1, cfg.d_vis))
        self.concat = nn.Conv1d(cfg.d_vis, cfg.c_latent, cfg.concat_kernel, padding=cfg.concat_kernel // 2)
        self.in_proj = nn.Linear(cfg.c_latent, cfg.d_model, bias=False)
        self.adaln_proj = nn.Linear(cfg.d_vis, cfg.d_model)

    def upsampled(self, cond: CondBatch, L: int) -> torch.Tensor:
        vis = cond.visual
        Fr = vis.shape[1]
        if Fr > self.pos.shape[0]:
            raise ConfigError(f"{Fr} visual frames exceed max_visual_frames={self.pos.shape[0]}")
        up = upsample_nearest(vis + self.pos[:Fr], L)
        null = self.null[None].expand(up.shape[0], L, -1)
        return torch.where(cond.visual_null[:, None, None], null, up)


class DiT(nn.Module):
    def __init__(self, cfg: DiTConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.prepend_offsets = nn.Parameter(torch.zeros(cfg.n_prepend, d))
        self.in_proj = nn.Linear(cfg.c_latent, d)
        self.null_text = nn.Parameter(torch.randn(1, cfg.d_txt) / math.sqrt(cfg.d_txt))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.depth))
        self.out_proj = nn.Linear(d, cfg.c_latent)
        self.visual = VisualPath(cfg) if cfg.visual else None

    @classmethod
    def build(cls, cfg: DiTConfig, seed: int = 0, dtype=torch.float32) -> "DiT":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            model = cls(cfg)
        return model.to(dtype)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond: CondBatch, mix_tokens: bool = True):
        """Velocity prediction ``(B, C, L)`` for latents ``x_t`` at times ``t`` (shape ``(B,)``)."""
        cfg = self.cfg
        B, C, L = x_t.shape
        if C != cfg.c_latent:
            raise ConfigError(f"latent has {C} channels, model expects {cfg.c_latent}")
        t = torch.as_tensor(t, dtype=x_t.dtype).reshape(-1).expand(B)
        temb = sinusoidal_timestep_embedding(t, cfg.d_model)
        head = self.time_mlp(temb)[:, None, :] + self.prepend_offsets[None]

        frames = self.in_proj(x_t.transpose(1, 2)) + positional_embedding(L, cfg.d_model, x_t.dtype)
        m = None
        if self.visual is not None:
            up = self.visual.upsampled(cond, L)
            frames = frames + self.visual.in_proj(
                project_concat(up, self.visual.concat.weight, self.visual.concat.bias))
            m = project_adaln(up, self.visual.adaln_proj.weight, self.visual.adaln_proj.bias) + temb[:, None, :]

        M = cond.text.shape[1]
        null_text = self.null_text[None].expand(B, M, -1)
        text = torch.where(cond.text_null[:, None, None], null_text, cond.text)
        first = torch.zeros(M, dtype=torch.bool, device=x_t.device)
        first[0] = True
        text_mask = torch.where(cond.text_null[:, None], first[None], cond.text_mask)

        h = torch.cat([head, frames], dim=1)
        for block in self.blocks:
            h = block(h, m, text, text_mask, mix=mix_tokens)
        out = self.out_proj(layer_norm(h[:, cfg.n_prepend:]))
        return out.transpose(1, 2)


def param_group(name: str) -> str:
    return "visual" if name.startswith("visual.") or ".adaln." in name else "base"


def weight_groups(model: nn.Module) -> dict[str, str]:
    return {name: param_group(name) for name, _ in model.named_parameters()}


def num_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
