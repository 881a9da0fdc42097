"""Fixed orthonormal frame-stacking codec standing in for a pretrained audio VAE.

Each window of ``R`` samples per channel is stacked into a vector of length
``channels * R`` and rotated by a seeded orthonormal matrix. The first ``C``
rows form the latent channels; ``C == channels * R`` is lossless.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray  # (channels, N)
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2 or s.shape[0] not in (1, 2):
            raise CodecError(f"expected 1 or 2 channels, got shape {s.shape}")
        if s.shape[1] < 1:
            raise CodecError("audio clip has no samples")
        if not np.all(np.isfinite(s)):
            raise CodecError("audio clip contains non-finite values")
        if int(self.sample_rate) <= 0:
            raise CodecError("sample_rate must be positive")
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate


@dataclass(frozen=True)
class CodecConfig:
    frames_per_step: int = 16  # R
    latent_channels: int = 16  # C
    channels: int = 1
    mixing_seed: int = 0

    def __post_init__(self):
        if self.frames_per_step < 1 or self.latent_channels < 1:
            raise CodecError("frames_per_step and latent_channels must be positive")
        if self.channels not in (1, 2):
            raise CodecError("channels must be 1 or 2")
        if self.latent_channels > self.window_dim:
            raise CodecError(
                f"latent_channels {self.latent_channels} exceeds channels*R = {self.window_dim}"
            )

    @property
    def window_dim(self) -> int:
        return self.channels * self.frames_per_step

    @property
    def lossless(self) -> bool:
        return self.latent_channels == self.window_dim


DESK = CodecConfig()
# production shape (stereo, 2048x compression, 64 channels); shape tests only
PRODUCTION = CodecConfig(frames_per_step=2048, latent_channels=64, channels=2)
# low-rate preset used by the end-to-end toy experiment
TOY = CodecConfig(frames_per_step=128, latent_channels=128, channels=1)


@dataclass(frozen=True)
class LatentSeq:
    data: np.ndarray  # (C, L)
    frame_rate: float

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 2:
            raise CodecError(f"latent must be 2-D (C, L), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise CodecError("latent contains non-finite values")
        object.__setattr__(self, "data", d)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]


@lru_cache(maxsize=16)
def _mixing_matrix(dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    # sign fix makes the factorization unique
    q = q * np.sign(np.diag(r))[None, :]
    q.setflags(write=False)
    return q


def mixing_matrix(cfg: CodecConfig) -> np.ndarray:
    """Full ``(channels*R, channels*R)`` orthonormal matrix for ``cfg``."""
    return _mixing_matrix(cfg.window_dim, cfg.mixing_seed)


def num_frames(num_samples: int, cfg: CodecConfig) -> int:
    return num_samples // cfg.frames_per_step


def encode(clip: AudioClip, cfg: CodecConfig = DESK) -> LatentSeq:
    R = cfg.frames_per_step
    if clip.channels != cfg.channels:
        raise CodecError(f"codec expects {cfg.channels} channel(s), clip has {clip.channels}")
    if clip.num_samples < R:
        raise CodecError(f"clip too short: {clip.num_samples} samples < R={R}")
    L = num_frames(clip.num_samples, cfg)
    x = clip.samples[:, : L * R].astype(np.float64)
    # (channels, L, R) -> (L, channels*R)
    windows = x.reshape(cfg.channels, L, R).transpose(1, 0, 2).reshape(L, cfg.window_dim)
    Q = mixing_matrix(cfg)[: cfg.latent_channels]
    return LatentSeq(Q @ windows.T, clip.sample_rate / R)


def decode(z: LatentSeq, cfg: CodecConfig = DESK) -> AudioClip:
    if z.channels != cfg.latent_channels:
        raise CodecError(f"latent has {z.channels} channels, codec expects {cfg.latent_channels}")
    R = cfg.frames_per_step
    Q = mixing_matrix(cfg)[: cfg.latent_channels]
    windows = (Q.T @ z.data).T  # (L, channels*R)
    L = windows.shape[0]
    x = windows.reshape(L, cfg.channels, R).transpose(1, 0, 2).reshape(cfg.channels, L * R)
    sr = int(round(z.frame_rate * R))
    return AudioClip(x, sr)
