"""Progressive training: zero-init grafting, staged schedules, 2:4:1 role
mixing, templated captions and the AdamW training loop."""
from __future__ import annotations

import csv
import io as _io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from . import io as d2m_io
from .conditioning import ConditionBundle, TextEmbedder, VisualFeatureSeq, embed_text
from .data import ROLES, TagSet
from .diffusion import TrainingError, training_loss
from .dit import DiT, DiTConfig, param_group, weight_groups

log = logging.getLogger(__name__)

FALLBACK_CAPTION = "An instrumental music track"
CAPTION_TEMPLATES = (
    "{tags}",
    "A {tags} music track",
    "Music with {tags}",
    "An instrumental piece: {tags}",
    "{tags} instrumental music",
    "A track featuring {tags}",
)
KEEP_PROB = 0.5


class GraftError(KeyError):
    pass


class ConfigError(ValueError):
    pass


# -- learning rate ----------------------------------------------------------

@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 1e-5
    warmup_steps: int = 1000
    drop_step: int | None = 30000
    post_drop_lr: float = 1e-6
    constant_lr: float | None = None

    def __post_init__(self):
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        rates = [self.base_lr, self.post_drop_lr] + ([self.constant_lr] if self.constant_lr is not None else [])
        if any(r <= 0 for r in rates):
            raise ConfigError("learning rates must be positive")


STAGE1_SCHEDULE = LrSchedule(1e-5, 1000, 30000, 1e-6)
STAGE2_SCHEDULE = LrSchedule(constant_lr=1e-6)


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Rate for 1-based ``step``: linear warm-up to ``base_lr`` (reached at
    ``warmup_steps``), then ``post_drop_lr`` once ``drop_step`` steps are done."""
    if step < 1:
        raise ValueError("steps are 1-based")
    if schedule.constant_lr is not None:
        return schedule.constant_lr
    if schedule.drop_step is not None and step > schedule.drop_step:
        return schedule.post_drop_lr
    if schedule.warmup_steps and step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    return schedule.base_lr


# -- stage configuration --------------------------------------------------

@dataclass(frozen=True)
class StageConfig:
    stage: int = 1
    weights: Mapping[str, float] = field(default_factory=lambda: {"d2m": 0.0, "t2m": 0.0, "v2a": 1.0})
    total_steps: int = 2000
    lr: LrSchedule = STAGE1_SCHEDULE
    batch_size: int = 16
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    dropout: float = 0.1
    clip_seconds: float = 4.0
    log_every: int = 10

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError("stage must be 1 or 2")
        w = dict(self.weights)
        if set(w) - set(ROLES):
            raise ConfigError(f"unknown roles {sorted(set(w) - set(ROLES))}")
        if any(v < 0 for v in w.values()) or not any(v > 0 for v in w.values()):
            raise ConfigError("role weights must be >= 0 with at least one positive")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        object.__setattr__(self, "weights", {r: float(w.get(r, 0.0)) for r in ROLES})

    def to_flat(self) -> dict:
        return {
            "stage": self.stage,
            **{f"weights.{r}": self.weights[r] for r in ROLES},
            "lr.base": self.lr.base_lr, "lr.warmup": self.lr.warmup_steps, "lr.drop_step": self.lr.drop_step,
            "lr.post": self.lr.post_drop_lr, "lr.constant": self.lr.constant_lr,
            "steps": self.total_steps, "batch": self.batch_size, "seed": self.seed,
            "betas": list(self.betas), "eps": self.eps, "weight_decay": self.weight_decay,
            "dropout": self.dropout, "clip_seconds": self.clip_seconds, "log_every": self.log_every,
        }


# full-scale presets
FULL_STAGE1 = StageConfig(stage=1, weights={"v2a": 1.0}, total_steps=200_000, lr=STAGE1_SCHEDULE, batch_size=128)
FULL_STAGE2 = StageConfig(stage=2, weights={"d2m": 2.0, "t2m": 4.0, "v2a": 1.0}, total_steps=1500,
                           lr=STAGE2_SCHEDULE, batch_size=128)
# desk-scale defaults
DESK_STAGE1 = StageConfig(stage=1, weights={"v2a": 1.0}, total_steps=2000,
                          lr=LrSchedule(1e-3, 100, 1500, 1e-4), batch_size=16)
DESK_STAGE2 = StageConfig(stage=2, weights={"d2m": 2.0, "t2m": 4.0, "v2a": 1.0}, total_steps=500,
                          lr=LrSchedule(constant_lr=1e-4), batch_size=16)

CONFIG_KEYS = ("stage", "weights.d2m", "weights.t2m", "weights.v2a", "lr.base", "lr.warmup", "lr.drop_step",
               "lr.post", "lr.constant", "steps", "batch", "seed", "betas", "eps", "weight_decay", "dropout",
               "clip_seconds", "log_every")


def stage_config_from_flat(flat: Mapping, base: StageConfig | None = None) -> StageConfig:
    """Overlay flat ``key: value`` settings on ``base`` (the desk default for the stage)."""
    unknown = set(flat) - set(CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    stage = int(flat.get("stage", base.stage if base else 1))
    if base is None:
        base = DESK_STAGE1 if stage == 1 else DESK_STAGE2
    merged = {**base.to_flat(), **{k: v for k, v in flat.items()}}
    lr = LrSchedule(float(merged["lr.base"]), int(merged["lr.warmup"]),
                    None if merged["lr.drop_step"] is None else int(merged["lr.drop_step"]),
                    float(merged["lr.post"]),
                    None if merged["lr.constant"] is None else float(merged["lr.constant"]))
    return StageConfig(
        stage=stage, weights={r: float(merged[f"weights.{r}"]) for r in ROLES}, total_steps=int(merged["steps"]),
        lr=lr, batch_size=int(merged["batch"]), betas=tuple(float(b) for b in merged["betas"]),
        eps=float(merged["eps"]), weight_decay=float(merged["weight_decay"]), seed=int(merged["seed"]),
        dropout=float(merged["dropout"]), clip_seconds=float(merged["clip_seconds"]),
        log_every=int(merged["log_every"]),
    )


# -- role mixing and captions ----------------------------------------------------

def sample_role(weights: Mapping[str, float] | Sequence[float], rng: np.random.Generator) -> str:
    if not isinstance(weights, Mapping):
        weights = dict(zip(ROLES, weights))
    w = np.array([float(weights.get(r, 0.0)) for r in ROLES])
    if np.any(w < 0) or w.sum() <= 0:
        raise ConfigError("role weights must be >= 0 with at least one positive")
    return ROLES[int(rng.choice(len(ROLES), p=w / w.sum()))]


def make_caption(tags: TagSet, rng: np.random.Generator, templates: Sequence[str] = CAPTION_TEMPLATES) -> str:
    if not templates:
        raise ConfigError("caption templates must be non-empty")
    present = [t.strip() for t in tags.all_tags() if t and t.strip()]
    if not present:
        return FALLBACK_CAPTION
    keep = rng.random(len(present)) < KEEP_PROB
    if not keep.any():
        keep[rng.integers(len(present))] = True
    chosen = [present[i] for i in rng.permutation(len(present)) if keep[i]]
    template = templates[int(rng.integers(len(templates)))]
    return template.format(tags=", ".join(chosen))


# -- grafting ------------------------------------------------------------------

def zero_init_transfer(base_weights: Mapping[str, torch.Tensor] | DiT, cfg: DiTConfig, seed: int = 0) -> DiT:
    """Extend a text+timestep model with the visual path so that it computes the same function.

    Base weights are copied. Visual modules are zeroed, except the input
    projection of the concatenated channels, which keeps its seeded random
    init (with the concat conv at zero it contributes nothing, and a zero
    pair would never receive a gradient).
    """
    if isinstance(base_weights, torch.nn.Module):
        base_weights = base_weights.state_dict()
    if not cfg.visual:
        raise ConfigError("target config must enable the visual path")
    model = DiT.build(cfg, seed=seed)
    dtype = next(iter(base_weights.values())).dtype if base_weights else torch.float32
    model = model.to(dtype)
    state = model.state_dict()
    base_names = [n for n in state if param_group(n) == "base"]
    missing = [n for n in base_names if n not in base_weights]
    if missing:
        raise GraftError(f"base weights lack group(s): {', '.join(missing)}")
    extra = sorted(set(base_weights) - set(base_names))
    if extra:
        raise GraftError(f"unexpected base weight(s): {', '.join(extra)}")
    with torch.no_grad():
        for name, tensor in state.items():
            if param_group(name) == "base":
                src = torch.as_tensor(base_weights[name])
                if src.shape != tensor.shape:
                    raise GraftError(f"{name}: shape {tuple(src.shape)} != {tuple(tensor.shape)}")
                tensor.copy_(src)
            elif name != "visual.in_proj.weight":
                tensor.zero_()
    return model


# -- checkpoints ---------------------------------------------------------------

CKPT_KIND = "d2m-checkpoint"


def save_checkpoint(path, model: DiT, meta: Mapping, optimizer: torch.optim.Optimizer | None = None) -> None:
    tensors = {f"model/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    groups = {f"model/{k}": g for k, g in weight_groups(model).items()}
    opt_step = 0
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                n = names[id(p)]
                tensors[f"optim/exp_avg/{n}"] = st["exp_avg"].cpu().numpy()
                tensors[f"optim/exp_avg_sq/{n}"] = st["exp_avg_sq"].cpu().numpy()
                groups[f"optim/exp_avg/{n}"] = groups[f"optim/exp_avg_sq/{n}"] = "optimizer"
                opt_step = int(st["step"])
    full_meta = {"kind": CKPT_KIND, "dit": model.cfg.to_dict(), "optimizer_step": opt_step, **meta}
    d2m_io.save_container(path, tensors, full_meta, groups)


def load_checkpoint(path, dtype=torch.float32):
    """Return ``(model, meta, optimizer_state)``; the optimizer state maps names to
    ``(exp_avg, exp_avg_sq)`` tensors."""
    tensors, meta, _ = d2m_io.load_container(path)
    if meta.get("kind") != CKPT_KIND:
        raise d2m_io.ContainerError(f"{path} is not a model checkpoint")
    cfg = DiTConfig(**meta["dit"])
    model = DiT.build(cfg).to(dtype)
    state = {k[len("model/"):]: torch.from_numpy(v).to(dtype) for k, v in tensors.items() if k.startswith("model/")}
    model.load_state_dict(state)
    opt = {}
    for k, v in tensors.items():
        if k.startswith("optim/exp_avg/"):
            n = k[len("optim/exp_avg/"):]
            opt[n] = (torch.from_numpy(v).to(dtype), torch.from_numpy(tensors[f"optim/exp_avg_sq/{n}"]).to(dtype))
    return model, meta, opt


def make_optimizer(model: DiT, cfg: StageConfig, opt_state: Mapping | None = None, opt_step: int = 0):
    opt = torch.optim.AdamW(model.parameters(), lr=lr_at(cfg.lr, 1), betas=tuple(cfg.betas), eps=cfg.eps,
                            weight_decay=cfg.weight_decay)
    if opt_state:
        params = dict(model.named_parameters())
        for n, (m, v) in opt_state.items():
            p = params[n]
            opt.state[p] = {"step": torch.tensor(float(opt_step)), "exp_avg": m.clone(), "exp_avg_sq": v.clone()}
    return opt


# -- training data --------------------------------------------------------

@dataclass
class TrainItem:
    latent: np.ndarray                # (C, L) already scaled
    visual: VisualFeatureSeq | None
    tags: TagSet
    caption: str | None = None
    id: str = ""


@dataclass
class TrainingData:
    items: dict[str, list[TrainItem]]
    frame_rate: float  # latent frames per second
    text: TextEmbedder = field(default_factory=TextEmbedder)

    def check(self, weights: Mapping[str, float]) -> None:
        for role, w in weights.items():
            if w > 0 and not self.items.get(role):
                raise ConfigError(f"role {role!r} has weight {w} but an empty manifest")


def crop_item(item: TrainItem, clip_frames: int, rng: np.random.Generator) -> tuple[np.ndarray, VisualFeatureSeq | None]:
    """Random crop of ``clip_frames`` latent frames, aligned to whole visual frames when possible."""
    L = item.latent.shape[1]
    if clip_frames > L:
        raise ConfigError(f"item {item.id!r} has {L} latent frames, clip needs {clip_frames}")
    vis = item.visual
    if vis is None:
        start = int(rng.integers(0, L - clip_frames + 1))
        return item.latent[:, start:start + clip_frames], None
    ratio = L / vis.num_frames  # latent frames per visual frame
    step = max(1, int(round(ratio))) if abs(ratio - round(ratio)) < 1e-9 else 1
    start = int(rng.integers(0, (L - clip_frames) // step + 1)) * step
    f0 = int(round(start / ratio))
    nf = max(1, int(round(clip_frames / ratio)))
    f0 = min(f0, vis.num_frames - nf)
    return (item.latent[:, start:start + clip_frames],
            VisualFeatureSeq(vis.vectors[f0:f0 + nf], vis.feature_rate))


def build_batch(data: TrainingData, role: str, cfg: StageConfig, rng: np.random.Generator, dtype=torch.float32):
    pool = data.items[role]
    clip_frames = int(math.floor(cfg.clip_seconds * data.frame_rate))
    latents, bundles = [], []
    for _ in range(cfg.batch_size):
        item = pool[int(rng.integers(len(pool)))]
        z, vis = crop_item(item, clip_frames, rng)
        if role == "v2a" and item.caption:
            caption = item.caption
        else:
            caption = make_caption(item.tags, rng)
        text = embed_text(caption, data.text)
        bundles.append(ConditionBundle.make(text, None if role == "t2m" else vis))
        latents.append(z)
    return torch.as_tensor(np.stack(latents), dtype=dtype), bundles


@dataclass
class TrainResult:
    losses: list[float]
    lrs: list[float]
    role_counts: dict[str, int]
    final_step: int


def train_stage(cfg: StageConfig, model: DiT, data: TrainingData, start_step: int = 0,
                optimizer: torch.optim.Optimizer | None = None, log_path=None, checkpoint_path=None,
                meta: Mapping | None = None) -> TrainResult:
    """Run steps ``start_step + 1 .. cfg.total_steps``.

    The data RNG is derived from ``(seed, step)`` so a resumed run draws the
    same batches as an uninterrupted one. On a non-finite loss the last good
    weights are written to ``checkpoint_path`` before the error propagates.
    """
    data.check(cfg.weights)
    dtype = next(model.parameters()).dtype
    if optimizer is None:
        optimizer = make_optimizer(model, cfg)
    model.train()
    losses, lrs = [], []
    counts = {r: 0 for r in ROLES}
    rows = []
    step = start_step
    meta = dict(meta or {})

    def write_ckpt(final_step):
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, {**meta, "stage": cfg.stage, "step": final_step,
                                                     "stage_config": cfg.to_flat()}, optimizer)

    for step in range(start_step + 1, cfg.total_steps + 1):
        rng = np.random.default_rng([cfg.seed, step])
        role = sample_role(cfg.weights, rng)
        counts[role] += 1
        x0, bundles = build_batch(data, role, cfg, rng, dtype)
        lr = lr_at(cfg.lr, step)
        for g in optimizer.param_groups:
            g["lr"] = lr
        try:
            loss = training_loss(model, x0, bundles, rng, dropout=cfg.dropout)
        except TrainingError:
            write_ckpt(step - 1)
            raise
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        losses.append(loss.item())
        lrs.append(lr)
        if step % cfg.log_every == 0 or step == cfg.total_steps:
            rows.append([step, losses[-1], lr, counts["d2m"], counts["t2m"], counts["v2a"]])
            log.info("stage %d step %d loss %.5f lr %.3g", cfg.stage, step, losses[-1], lr)
    if log_path is not None:
        _append_csv(log_path, rows)
    write_ckpt(step)
    return TrainResult(losses, lrs, counts, step)


LOG_HEADER = ["step", "loss", "lr", "count_d2m", "count_t2m", "count_v2a"]


def _append_csv(path, rows) -> None:
    path = Path(path)
    existing = path.read_text() if path.exists() else ""
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if not existing:
        w.writerow(LOG_HEADER)
    w.writerows(rows)
    d2m_io.atomic_write_text(path, existing + buf.getvalue())
