"""Conditioning streams: text tokens, timestep embeddings and visual features."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F


class ConfigError(ValueError):
    pass


TIME_SCALE = 999.0
MAX_PERIOD = 10000.0


@dataclass(frozen=True)
class TextConfig:
    d_txt: int = 64
    vocab_size: int = 4096
    max_tokens: int = 64
    seed: int = 1234


@dataclass(frozen=True)
class TextEmbeddingSeq:
    vectors: np.ndarray  # (M, D_txt)

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ConfigError("text embedding needs at least one token")
        if not np.all(np.isfinite(self.vectors)):
            raise ConfigError("text embedding contains non-finite values")


@dataclass(frozen=True)
class VisualFeatureSeq:
    vectors: np.ndarray  # (F, D_vis)
    feature_rate: float = 8.0

    def __post_init__(self):
        v = np.asarray(self.vectors)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ConfigError("visual features need shape (F>=1, D_vis)")
        if not np.all(np.isfinite(v)):
            raise ConfigError("visual features contain non-finite values")
        object.__setattr__(self, "vectors", v)

    @property
    def num_frames(self) -> int:
        return self.vectors.shape[0]


@dataclass(frozen=True)
class ConditionBundle:
    """Text and visual conditions for one item; ``None`` marks a null stream."""

    text: TextEmbeddingSeq | None
    visual: VisualFeatureSeq | None
    text_is_null: bool = field(default=False)
    visual_is_null: bool = field(default=False)

    def __post_init__(self):
        if self.text_is_null != (self.text is None):
            raise ConfigError("text_is_null disagrees with the text stream")
        if self.visual_is_null != (self.visual is None):
            raise ConfigError("visual_is_null disagrees with the visual stream")

    @classmethod
    def make(cls, text=None, visual=None) -> "ConditionBundle":
        return cls(text, visual, text is None, visual is None)

    def nulled(self) -> "ConditionBundle":
        return ConditionBundle(None, None, True, True)


class TextEmbedder:
    """Deterministic stand-in for a frozen text encoder.

    Whitespace tokens are hashed (blake2b, stable across processes) into a
    seeded ``V x D_txt`` Gaussian table.
    """

    def __init__(self, cfg: TextConfig = TextConfig()):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.table = rng.standard_normal((cfg.vocab_size, cfg.d_txt)) / math.sqrt(cfg.d_txt)
        self.table.setflags(write=False)

    def token_id(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.cfg.vocab_size

    def __call__(self, caption: str) -> TextEmbeddingSeq:
        return embed_text(caption, self)


def embed_text(caption: str, embedder: TextEmbedder) -> TextEmbeddingSeq:
    tokens = caption.split()
    if not tokens:
        raise ConfigError("empty caption; substitute the fallback caption before embedding")
    tokens = tokens[: embedder.cfg.max_tokens]
    ids = [embedder.token_id(tok) for tok in tokens]
    return TextEmbeddingSeq(embedder.table[ids].copy())


def sinusoidal_timestep_embedding(t, dim: int):
    """Interleaved ``[sin, cos]`` pairs of ``t * 999`` at frequencies ``10000**(-k/(dim/2))``.

    Accepts a Python/numpy scalar (returns a numpy vector) or a 1-D torch
    tensor of timesteps (returns ``(B, dim)``).
    """
    if dim % 2:
        raise ConfigError(f"timestep embedding dim must be even, got {dim}")
    half = dim // 2
    if isinstance(t, torch.Tensor):
        k = torch.arange(half, dtype=t.dtype, device=t.device)
        freqs = torch.exp(-math.log(MAX_PERIOD) * k / half)
        args = (t.reshape(-1, 1) * TIME_SCALE) * freqs[None, :]
        return torch.stack([torch.sin(args), torch.cos(args)], dim=-1).reshape(-1, dim)
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ConfigError(f"timestep must lie in [0, 1], got {t}")
    freqs = np.exp(-math.log(MAX_PERIOD) * np.arange(half) / half)
    args = t * TIME_SCALE * freqs
    return np.stack([np.sin(args), np.cos(args)], axis=-1).reshape(dim)


def nearest_indices(num_in: int, target_len: int) -> np.ndarray:
    """Center-aligned nearest-neighbour source rows: ``floor((i + 0.5) * F / L)``."""
    if num_in < 1 or target_len < 1:
        raise ConfigError("upsampling needs F >= 1 and L >= 1")
    i = np.arange(target_len)
    # exact integer form of floor((i + 0.5) * F / L)
    idx = ((2 * i + 1) * num_in) // (2 * target_len)
    return np.clip(idx, 0, num_in - 1)


def upsample_nearest(vis, target_len: int):
    """Repeat rows of ``vis`` (``(F, D)`` array, ``(B, F, D)`` tensor, or
    :class:`VisualFeatureSeq`) to ``target_len`` frames."""
    if isinstance(vis, VisualFeatureSeq):
        vis = vis.vectors
    idx = nearest_indices(vis.shape[-2], target_len)
    if isinstance(vis, torch.Tensor):
        return vis[..., torch.from_numpy(idx).to(vis.device), :]
    return np.asarray(vis)[..., idx, :]


def project_concat(upsampled: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None):
    """Length-preserving temporal convolution ``(B, L, D_vis) -> (B, L, C_latent)``.

    ``weight`` has conv1d layout ``(C_latent, D_vis, k)`` with odd ``k``.
    """
    if weight.ndim != 3 or weight.shape[1] != upsampled.shape[-1]:
        raise ConfigError(f"concat weight {tuple(weight.shape)} does not accept D_vis={upsampled.shape[-1]}")
    k = weight.shape[-1]
    if k % 2 == 0:
        raise ConfigError("concat kernel width must be odd to preserve length")
    out = F.conv1d(upsampled.transpose(-1, -2), weight, bias, padding=k // 2)
    return out.transpose(-1, -2)


def project_adaln(upsampled: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None):
    """Per-frame affine map ``(..., L, D_vis) -> (..., L, D_model)``; ``weight`` is ``(D_model, D_vis)``."""
    if weight.ndim != 2 or weight.shape[1] != upsampled.shape[-1]:
        raise ConfigError(f"adaln weight {tuple(weight.shape)} does not accept D_vis={upsampled.shape[-1]}")
    return F.linear(upsampled, weight, bias)


def apply_condition_dropout(bundle: ConditionBundle, rate: float, rng: np.random.Generator) -> ConditionBundle:
    """Independently null each stream with probability ``rate`` (text draw first)."""
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1], got {rate}")
    drop_text = rng.random() < rate
    drop_visual = rng.random() < rate
    out = bundle
    if drop_text and not bundle.text_is_null:
        out = replace(out, text=None, text_is_null=True)
    if drop_visual and not bundle.visual_is_null:
        out = replace(out, visual=None, visual_is_null=True)
    return out


@dataclass
class CondBatch:
    """Padded torch view of a list of bundles, consumed by the DiT."""

    text: torch.Tensor         # (B, M, D_txt); rows of null items are ignored
    text_mask: torch.Tensor    # (B, M) bool, True on real tokens
    text_null: torch.Tensor    # (B,) bool
    visual: torch.Tensor       # (B, F, D_vis); rows of null items are ignored
    visual_null: torch.Tensor  # (B,) bool

    @property
    def batch_size(self) -> int:
        return self.text.shape[0]

    def nulled(self) -> "CondBatch":
        B = self.batch_size
        ones = torch.ones(B, dtype=torch.bool, device=self.text.device)
        return CondBatch(self.text, self.text_mask, ones, self.visual, ones.clone())

    def to(self, dtype=None, device=None) -> "CondBatch":
        return CondBatch(self.text.to(device=device, dtype=dtype), self.text_mask.to(device),
                         self.text_null.to(device), self.visual.to(device=device, dtype=dtype),
                         self.visual_null.to(device))

    def repeat(self, n: int) -> "CondBatch":
        return CondBatch(self.text.repeat(n, 1, 1), self.text_mask.repeat(n, 1), self.text_null.repeat(n),
                         self.visual.repeat(n, 1, 1), self.visual_null.repeat(n))

    @staticmethod
    def cat(batches: Sequence["CondBatch"]) -> "CondBatch":
        M = max(b.text.shape[1] for b in batches)
        Fr = max(b.visual.shape[1] for b in batches)

        def pad(x, n, dim=1):
            if x.shape[dim] == n:
                return x
            shape = list(x.shape)
            shape[dim] = n - x.shape[dim]
            return torch.cat([x, x.new_zeros(shape)], dim=dim)

        for b in batches:
            vis_real = ~b.visual_null
            if vis_real.any() and b.visual.shape[1] != Fr:
                raise ConfigError("cannot concatenate batches with different visual lengths")
        return CondBatch(
            torch.cat([pad(b.text, M) for b in batches]),
            torch.cat([pad(b.text_mask, M) for b in batches]),
            torch.cat([b.text_null for b in batches]),
            torch.cat([pad(b.visual, Fr) for b in batches]),
            torch.cat([b.visual_null for b in batches]),
        )


def collate(bundles: Sequence[ConditionBundle], d_txt: int, d_vis: int, dtype=torch.float32) -> CondBatch:
    B = len(bundles)
    M = max((b.text.vectors.shape[0] for b in bundles if b.text is not None), default=1)
    frames = {b.visual.num_frames for b in bundles if b.visual is not None}
    if len(frames) > 1:
        raise ConfigError(f"visual streams in one batch must share a length, got {sorted(frames)}")
    Fr = frames.pop() if frames else 1
    text = np.zeros((B, M, d_txt))
    mask = np.zeros((B, M), dtype=bool)
    visual = np.zeros((B, Fr, d_vis))
    for i, b in enumerate(bundles):
        if b.text is not None:
            m = b.text.vectors.shape[0]
            if b.text.vectors.shape[1] != d_txt:
                raise ConfigError(f"text dim {b.text.vectors.shape[1]} != {d_txt}")
            text[i, :m] = b.text.vectors
            mask[i, :m] = True
        if b.visual is not None:
            if b.visual.vectors.shape[1] != d_vis:
                raise ConfigError(f"visual dim {b.visual.vectors.shape[1]} != {d_vis}")
            visual[i] = b.visual.vectors
    return CondBatch(
        torch.as_tensor(text, dtype=dtype),
        torch.as_tensor(mask),
        torch.tensor([b.text_is_null for b in bundles]),
        torch.as_tensor(visual, dtype=dtype),
        torch.tensor([b.visual_is_null for b in bundles]),
    )
