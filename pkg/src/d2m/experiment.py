"""End-to-end toy experiment: train on synthetic dance/click pairs, then check
that generated audio follows the beat grid implied by the visual condition."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import codec
from .conditioning import ConditionBundle, TextEmbedder, collate, embed_text
from .data import MUSIC_STYLES, ToyPair, synth_toy_pair
from .diffusion import SamplerConfig, sample
from .dit import DiT, DiTConfig, num_params
from .rhythm import extract_beats, score_clip
from .training import LrSchedule, StageConfig, TrainingData, TrainItem, make_caption, train_stage, zero_init_transfer

log = logging.getLogger(__name__)


TOY_DIT = DiTConfig(depth=4, d_model=96, heads=4, c_latent=128, d_txt=64, d_vis=32, ff_mult=4,
                    concat_kernel=1, max_visual_frames=256)


@dataclass
class ToyConfig:
    n_train: int = 200
    n_eval: int = 30
    tempo_range: tuple[float, float] = (60.0, 180.0)
    train_seconds: float = 8.0
    clip_seconds: float = 4.0
    sample_rate: int = 8192
    feature_rate: float = 32.0
    codec_cfg: codec.CodecConfig = codec.TOY
    dit: DiTConfig = TOY_DIT
    stage: StageConfig = StageConfig(stage=1, weights={"v2a": 1.0}, total_steps=2000,
                                     lr=LrSchedule(5e-4, 100, 1500, 1e-4), batch_size=16, clip_seconds=4.0,
                                     log_every=50)
    steps: int = 100
    guidance: float = 5.0
    n_fft: int = 256
    hop: int = 64
    window: float = 0.07
    seed: int = 0


def make_pairs(n: int, cfg: ToyConfig, duration: float, rng: np.random.Generator) -> list[ToyPair]:
    pairs = []
    for _ in range(n):
        tempo = float(rng.uniform(*cfg.tempo_range))
        style = MUSIC_STYLES[int(rng.integers(len(MUSIC_STYLES)))]
        pairs.append(synth_toy_pair(tempo, style, duration, rng, cfg.sample_rate, cfg.feature_rate, cfg.dit.d_vis))
    return pairs


def latent_scale_for(latents: list[np.ndarray]) -> float:
    return float(1.0 / np.concatenate([z.ravel() for z in latents]).std())


def build_training_data(pairs: list[ToyPair], cfg: ToyConfig, role: str = "v2a") -> tuple[TrainingData, float]:
    latents = [codec.encode(p.audio, cfg.codec_cfg).data for p in pairs]
    scale = latent_scale_for(latents)
    items = [TrainItem(z * scale, p.visual, p.tags, id=f"toy{i:04d}") for i, (z, p) in enumerate(zip(latents, pairs))]
    data = TrainingData({role: items}, frame_rate=cfg.sample_rate / cfg.codec_cfg.frames_per_step)
    return data, scale


def generate(model: DiT, bundles: list[ConditionBundle], n_frames: int, latent_scale: float, cfg: ToyConfig,
             guidance: float, seed: int) -> list[codec.AudioClip]:
    cond = collate(bundles, model.cfg.d_txt, model.cfg.d_vis)
    gen = torch.Generator().manual_seed(seed)
    noise = torch.randn((len(bundles), model.cfg.c_latent, n_frames), generator=gen)
    model.eval()
    z = sample(model, cond, noise.shape, SamplerConfig(steps=cfg.steps, guidance_scale=guidance), noise=noise)
    z = z.numpy().astype(np.float64) / latent_scale
    return [codec.decode(codec.LatentSeq(zi, cfg.sample_rate / cfg.codec_cfg.frames_per_step), cfg.codec_cfg)
            for zi in z]


def beat_f1(audio: codec.AudioClip, beats: np.ndarray, cfg: ToyConfig) -> float:
    return score_clip(extract_beats(audio, cfg.n_fft, cfg.hop), beats, cfg.window).f1


def paired_permutation_p(a: np.ndarray, b: np.ndarray, n_perm: int = 10000, seed: int = 0) -> float:
    """One-sided sign-flip test of mean(a - b) > 0."""
    d = np.asarray(a) - np.asarray(b)
    obs = d.mean()
    rng = np.random.default_rng(seed)
    signs = rng.choice([-1.0, 1.0], size=(n_perm, d.size))
    null = (signs * d[None, :]).mean(axis=1)
    return float((1 + np.sum(null >= obs)) / (1 + n_perm))


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    while True:
        p = rng.permutation(n)
        if not np.any(p == np.arange(n)):
            return p


@dataclass
class ToyResult:
    f1_cond: np.ndarray
    f1_shuffled: np.ndarray
    f1_scale1: np.ndarray
    p_value: float
    n_params: int
    losses: list[float]
    train_seconds: float
    extra: dict = field(default_factory=dict)

    @property
    def summary(self) -> dict:
        return {"f1_cond": float(self.f1_cond.mean()), "f1_shuffled": float(self.f1_shuffled.mean()),
                "f1_scale1": float(self.f1_scale1.mean()), "p_value": self.p_value, "n_params": self.n_params,
                "train_seconds": self.train_seconds,
                "loss_first50": float(np.mean(self.losses[:50])), "loss_last50": float(np.mean(self.losses[-50:]))}


def run_toy_experiment(cfg: ToyConfig = ToyConfig()) -> ToyResult:
    rng = np.random.default_rng(cfg.seed)
    train_pairs = make_pairs(cfg.n_train, cfg, cfg.train_seconds, rng)
    eval_pairs = make_pairs(cfg.n_eval, cfg, cfg.clip_seconds, rng)
    data, scale = build_training_data(train_pairs, cfg)

    base = DiT.build(cfg.dit.base(), seed=cfg.seed)
    model = zero_init_transfer(base, cfg.dit, seed=cfg.seed)
    stage = replace(cfg.stage, clip_seconds=cfg.clip_seconds, seed=cfg.seed)
    t0 = time.time()
    result = train_stage(stage, model, data)
    train_time = time.time() - t0
    log.info("trained %d steps in %.0f s", stage.total_steps, train_time)

    text = TextEmbedder()
    cap_rng = np.random.default_rng([cfg.seed, 7])
    captions = [embed_text(make_caption(p.tags, cap_rng), text) for p in eval_pairs]
    perm = derangement(cfg.n_eval, np.random.default_rng([cfg.seed, 11]))
    true_b = [ConditionBundle.make(c, p.visual) for c, p in zip(captions, eval_pairs)]
    shuf_b = [ConditionBundle.make(captions[i], eval_pairs[perm[i]].visual) for i in range(cfg.n_eval)]
    n_frames = codec.num_frames(eval_pairs[0].audio.num_samples, cfg.codec_cfg)

    gen_seed = cfg.seed + 1000
    audio_cond = generate(model, true_b, n_frames, scale, cfg, cfg.guidance, gen_seed)
    audio_shuf = generate(model, shuf_b, n_frames, scale, cfg, cfg.guidance, gen_seed)
    audio_s1 = generate(model, true_b, n_frames, scale, cfg, 1.0, gen_seed)
    f1_c = np.array([beat_f1(a, p.beats, cfg) for a, p in zip(audio_cond, eval_pairs)])
    f1_s = np.array([beat_f1(a, p.beats, cfg) for a, p in zip(audio_shuf, eval_pairs)])
    f1_1 = np.array([beat_f1(a, p.beats, cfg) for a, p in zip(audio_s1, eval_pairs)])
    p = paired_permutation_p(f1_c, f1_s, seed=cfg.seed)
    return ToyResult(f1_c, f1_s, f1_1, p, num_params(model), result.losses, train_time,
                     {"latent_scale": scale, "model": model, "eval_pairs": eval_pairs, "audio_cond": audio_cond})
