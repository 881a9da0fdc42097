"""``d2m`` command-line entry point.

Exit codes: 0 success, 1 completed with warnings (unpaired evaluation
files), 2 I/O error, 3 malformed input, 4 workflow ordering, 5 shape or
duration mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_WARN, EXIT_IO, EXIT_MALFORMED, EXIT_ORDER, EXIT_SHAPE = 0, 1, 2, 3, 4, 5

log = logging.getLogger("d2m")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _persist_config(path: Path, resolved: dict) -> None:
    from .io import write_json
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_json(path, resolved)
    except OSError as e:
        raise CliError(f"cannot write {path}: {e}", EXIT_IO) from None
    log.info("resolved config written to %s", path)


def _codec_preset(name: str):
    from . import codec
    return {"desk": codec.DESK, "toy": codec.TOY, "production": codec.PRODUCTION}[name]


# -- make-toy-data --------------------------------------------------------

def parse_split(text: str) -> dict[str, float]:
    from .data import ROLES
    out = {}
    for part in text.split(","):
        role, _, frac = part.partition("=")
        if role not in ROLES:
            raise CliError(f"unknown role {role!r} in --split", EXIT_MALFORMED)
        out[role] = float(frac)
    total = sum(out.values())
    if total <= 0:
        raise CliError("--split fractions must sum to a positive value", EXIT_MALFORMED)
    return {r: out.get(r, 0.0) / total for r in ROLES}


def role_counts(n: int, split: dict[str, float]) -> dict[str, int]:
    """Largest-remainder apportionment of ``n`` items."""
    raw = {r: n * f for r, f in split.items()}
    counts = {r: int(math.floor(v)) for r, v in raw.items()}
    order = sorted(raw, key=lambda r: (-(raw[r] - counts[r]), r))
    for r in order[: n - sum(counts.values())]:
        counts[r] += 1
    return counts


def _voice_clip(duration: float, sr: int, rng: np.random.Generator):
    from .codec import AudioClip
    t = np.arange(int(duration * sr)) / sr
    f0 = 220.0 * (1 + 0.02 * np.sin(2 * np.pi * 5.0 * t))
    tone = 0.3 * np.sin(2 * np.pi * np.cumsum(f0) / sr) * (t > 0.5 * duration - 2.0) * (t < 0.5 * duration + 2.0)
    return AudioClip(tone[None, :] + 0.02 * rng.standard_normal(t.size)[None, :], sr)


def cmd_make_toy_data(args) -> int:
    from . import io as dio
    from .codec import AudioClip
    from .data import MUSIC_STYLES, ManifestEntry, TagSet, synth_toy_pair, write_manifest

    out = Path(args.out)
    split = parse_split(args.split)
    resolved = {"command": "make-toy-data", "n_tracks": args.n_tracks, "tempo_min": args.tempo_min,
                "tempo_max": args.tempo_max, "duration": args.duration, "sample_rate": args.sample_rate,
                "feature_rate": args.feature_rate, "d_vis": args.d_vis, "split": split, "seed": args.seed,
                "filter_cases": args.filter_cases}
    try:
        (out / "audio").mkdir(parents=True, exist_ok=True)
        (out / "visual").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError(f"cannot create {out}: {e}", EXIT_IO) from None
    _persist_config(out / "run_config.json", resolved)

    counts = role_counts(args.n_tracks, split)
    roles = [r for r in ("d2m", "t2m", "v2a") for _ in range(counts[r])]
    rng = np.random.default_rng(args.seed)
    entries = []
    try:
        for i, role in enumerate(roles):
            tempo = float(rng.uniform(args.tempo_min, args.tempo_max))
            style = "field" if role == "v2a" else MUSIC_STYLES[int(rng.integers(len(MUSIC_STYLES)))]
            pair = synth_toy_pair(tempo, style, args.duration, rng, args.sample_rate, args.feature_rate, args.d_vis)
            eid = f"toy{i:04d}"
            dio.write_wav(out / "audio" / f"{eid}.wav", pair.audio)
            visual_ref = None
            if role != "t2m":
                dio.save_visual_features(out / "visual" / f"{eid}.vis", pair.visual.vectors, args.feature_rate)
                visual_ref = f"visual/{eid}.vis"
            caption = "rhythmic footsteps and claps recorded outdoors" if role == "v2a" else None
            entries.append(ManifestEntry(eid, f"audio/{eid}.wav", role, visual_ref, pair.tags, caption))
        if args.filter_cases:
            n = int(args.duration * args.sample_rate)
            t = np.arange(n) / args.sample_rate
            folk = synth_toy_pair(100.0, "latin", args.duration, rng, args.sample_rate)
            dio.write_wav(out / "audio" / "case_folk.wav", folk.audio)
            entries.append(ManifestEntry("case_folk", "audio/case_folk.wav", "t2m",
                                         tags=TagSet(genre=["Folk"], instrument=["guitar"])))
            tone = AudioClip(0.5 * np.sin(2 * np.pi * 220.0 * t)[None, :], args.sample_rate)
            dio.write_wav(out / "audio" / "case_tone.wav", tone)
            entries.append(ManifestEntry("case_tone", "audio/case_tone.wav", "t2m", tags=TagSet(genre=["Rock"])))
            dio.write_wav(out / "audio" / "case_voice.wav", _voice_clip(args.duration, args.sample_rate, rng))
            entries.append(ManifestEntry("case_voice", "audio/case_voice.wav", "t2m", tags=TagSet(genre=["Pop"])))
        write_manifest(out / "manifest.jsonl", entries)
    except OSError as e:
        raise CliError(f"cannot write toy data under {out}: {e}", EXIT_IO) from None
    log.info("wrote %d entries (%s) to %s", len(entries), counts, out)
    return EXIT_OK


# -- filter ---------------------------------------------------------------

def _read_manifest(path):
    from .data import ManifestError, read_manifest
    try:
        return read_manifest(path)
    except OSError as e:
        raise CliError(f"cannot read manifest {path}: {e}", EXIT_IO) from None
    except ManifestError as e:
        raise CliError(f"{path}: {e}", EXIT_MALFORMED) from None


def cmd_filter(args) -> int:
    from . import io as dio
    from .data import EnergyVAD, FilterThresholds, SilentSeparator, SustainedToneSeparator, resolve_ref, run_filter, write_manifest

    th = FilterThresholds(tuple(args.exclude_genres), args.rolloff_min, args.kappa, args.theta, args.min_seconds)
    resolved = {"command": "filter", "manifest": str(args.manifest), "out": str(args.out), "report": str(args.report),
                "excluded_genres": list(th.excluded_genres), "rolloff_min": th.rolloff_min, "kappa": th.kappa,
                "theta": th.theta, "min_seconds": th.min_seconds, "separator": args.separator,
                "vad_threshold_db": args.vad_threshold_db}
    _persist_config(Path(str(args.report) + ".config.json"), resolved)
    entries = _read_manifest(args.manifest)

    def load(entry):
        try:
            return dio.read_wav(resolve_ref(args.manifest, entry.audio_ref))
        except (OSError, ValueError) as e:
            raise CliError(f"cannot read audio for {entry.id}: {e}", EXIT_IO) from None

    separator = SustainedToneSeparator() if args.separator == "sustained" else SilentSeparator()
    kept, report = run_filter(entries, load, separator, EnergyVAD(args.vad_threshold_db), th)
    base = Path(args.manifest).parent
    out_dir = Path(args.out).parent
    for e in kept:  # keep media refs valid relative to the new manifest
        for attr in ("audio_ref", "visual_ref"):
            ref = getattr(e, attr)
            if ref is not None and not Path(ref).is_absolute():
                setattr(e, attr, str(Path(_relpath(base / ref, out_dir))))
    try:
        write_manifest(args.out, kept)
        dio.write_json(args.report, report.to_json())
    except OSError as e:
        raise CliError(f"cannot write filter outputs: {e}", EXIT_IO) from None
    log.info("filter summary: %s", report.summary())
    return EXIT_OK


def _relpath(target: Path, start: Path) -> str:
    import os
    return os.path.relpath(target.resolve(), start.resolve())


# -- train ----------------------------------------------------------------

def _load_yaml(path):
    import yaml
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except OSError as e:
        raise CliError(f"cannot read config {path}: {e}", EXIT_IO) from None
    except yaml.YAMLError as e:
        raise CliError(f"malformed config {path}: {e}", EXIT_MALFORMED) from None
    if not isinstance(data, dict):
        raise CliError(f"config {path} must be a flat key/value mapping", EXIT_MALFORMED)
    return data


def _load_training_data(manifest_path, codec_cfg, latent_scale):
    from . import codec
    from . import io as dio
    from .data import resolve_ref
    from .training import TrainingData, TrainItem
    from .conditioning import VisualFeatureSeq

    entries = _read_manifest(manifest_path)
    items, raw, sr = {}, [], None
    for e in entries:
        try:
            clip = dio.read_wav(resolve_ref(manifest_path, e.audio_ref))
            vis = None
            if e.visual_ref is not None:
                feats, rate = dio.load_visual_features(resolve_ref(manifest_path, e.visual_ref))
                vis = VisualFeatureSeq(feats.astype(np.float64), rate)
        except OSError as err:
            raise CliError(f"cannot read media for {e.id}: {err}", EXIT_IO) from None
        except ValueError as err:
            raise CliError(f"bad media for {e.id}: {err}", EXIT_MALFORMED) from None
        if sr is None:
            sr = clip.sample_rate
        elif clip.sample_rate != sr:
            raise CliError(f"{e.id}: sample rate {clip.sample_rate} != {sr}", EXIT_SHAPE)
        try:
            z = codec.encode(clip, codec_cfg).data
        except codec.CodecError as err:
            raise CliError(f"{e.id}: {err}", EXIT_SHAPE) from None
        raw.append(z)
        items.setdefault(e.role, []).append(TrainItem(z, vis, e.tags, e.caption, e.id))
    if not raw:
        raise CliError(f"manifest {manifest_path} is empty", EXIT_MALFORMED)
    if latent_scale is None:
        latent_scale = float(1.0 / np.concatenate([z.ravel() for z in raw]).std())
    for pool in items.values():
        for it in pool:
            it.latent = it.latent * latent_scale
    return TrainingData(items, frame_rate=sr / codec_cfg.frames_per_step), latent_scale, sr


def _stage_flags(args) -> dict:
    flags = {}
    for key, attr in (("steps", "steps"), ("batch", "batch"), ("seed", "seed"), ("lr.base", "lr_base"),
                      ("lr.warmup", "lr_warmup"), ("lr.drop_step", "lr_drop_step"), ("lr.post", "lr_post"),
                      ("lr.constant", "lr_constant"), ("clip_seconds", "clip_seconds")):
        v = getattr(args, attr, None)
        if v is not None:
            flags[key] = v
    for role in ("d2m", "t2m", "v2a"):
        v = getattr(args, f"w_{role}", None)
        if v is not None:
            flags[f"weights.{role}"] = v
    return flags


def _plot_training(out: Path, csv_path: Path, cfg) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from .training import lr_at

    rows = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(rows[:, 0], rows[:, 1])
    ax.set_xlabel("step")
    ax.set_ylabel("v-prediction MSE")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(out / "loss.png", dpi=100)
    plt.close(fig)
    steps = np.arange(1, cfg.total_steps + 1)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, [lr_at(cfg.lr, int(s)) for s in steps])
    ax.set_xlabel("step")
    ax.set_ylabel("learning rate")
    fig.tight_layout()
    fig.savefig(out / "lr.png", dpi=100)
    plt.close(fig)


def cmd_train(args) -> int:
    from dataclasses import asdict
    from .conditioning import TextConfig
    from .dit import DiT, DiTConfig
    from .io import ContainerError
    from .training import (ConfigError, DESK_STAGE1, DESK_STAGE2, load_checkpoint, make_optimizer,
                           stage_config_from_flat, train_stage, zero_init_transfer)

    out = Path(args.out)
    file_cfg = _load_yaml(args.config) if args.config else {}
    if "stage" in file_cfg and int(file_cfg["stage"]) != args.stage:
        raise CliError(f"config file is for stage {file_cfg['stage']}, command asked for {args.stage}", EXIT_MALFORMED)
    try:
        cfg = stage_config_from_flat({**file_cfg, **_stage_flags(args), "stage": args.stage},
                                     DESK_STAGE1 if args.stage == 1 else DESK_STAGE2)
    except (ConfigError, ValueError, TypeError) as e:
        raise CliError(f"invalid stage config: {e}", EXIT_MALFORMED) from None

    def load(path, what):
        try:
            return load_checkpoint(path)
        except OSError as e:
            raise CliError(f"cannot read {what} checkpoint {path}: {e}", EXIT_IO) from None
        except (ContainerError, KeyError, RuntimeError, TypeError) as e:
            raise CliError(f"{path} is not a valid {what} checkpoint: {e}", EXIT_MALFORMED) from None

    start_step, opt_state, meta_in = 0, None, {}
    if args.resume:
        model, meta_in, opt_state = load(args.resume, "resume")
        if meta_in.get("stage") != args.stage:
            raise CliError(f"--resume checkpoint is from stage {meta_in.get('stage')}, not {args.stage}", EXIT_ORDER)
        start_step = int(meta_in.get("step", 0))
    elif args.stage == 2:
        if not args.init:
            raise CliError("stage 2 fine-tunes a stage-1 checkpoint: run `d2m train --stage 1` first and pass --init",
                           EXIT_ORDER)
        model, meta_in, _ = load(args.init, "stage-1")
        if meta_in.get("stage") != 1:
            raise CliError(f"--init must be a stage-1 checkpoint (got stage {meta_in.get('stage')}); "
                           "stage order is 0 (graft) -> 1 -> 2", EXIT_ORDER)
    else:
        if args.base:
            base, meta_in, _ = load(args.base, "base")
            if base.cfg.visual:
                raise CliError("--base must be a text+timestep model without the visual path", EXIT_ORDER)
            dit_cfg = replace(base.cfg, visual=True)
        elif args.fresh_base:
            codec_cfg = _codec_preset(args.codec)
            dit_cfg = DiTConfig(depth=args.depth, d_model=args.d_model, heads=args.heads,
                                c_latent=codec_cfg.latent_channels, d_vis=args.d_vis,
                                concat_kernel=args.concat_kernel, max_visual_frames=args.max_visual_frames)
            base = DiT.build(dit_cfg.base(), seed=cfg.seed)
            meta_in = {"codec": asdict(codec_cfg), "text": asdict(TextConfig())}
        else:
            raise CliError("stage 1 needs a base model: pass --base CKPT or --fresh-base", EXIT_ORDER)
        model = zero_init_transfer(base, dit_cfg, seed=cfg.seed)

    from .codec import CodecConfig
    codec_cfg = CodecConfig(**meta_in["codec"]) if "codec" in meta_in else _codec_preset(args.codec)
    if codec_cfg.latent_channels != model.cfg.c_latent:
        raise CliError("codec latent channels do not match the model", EXIT_SHAPE)

    resolved = {"command": "train", "stage": args.stage, "data": str(args.data), "out": str(out),
                "base": args.base, "fresh_base": args.fresh_base, "init": args.init, "resume": args.resume,
                "start_step": start_step, "stage_config": cfg.to_flat(), "dit": model.cfg.to_dict(),
                "codec": asdict(codec_cfg)}
    _persist_config(out / "run_config.json", resolved)

    data, latent_scale, sr = _load_training_data(args.data, codec_cfg, meta_in.get("latent_scale"))
    try:
        data.check(cfg.weights)
    except ConfigError as e:
        raise CliError(str(e), EXIT_MALFORMED) from None
    optimizer = make_optimizer(model, cfg, opt_state, int(meta_in.get("optimizer_step", 0)) if args.resume else 0)
    meta = {"codec": asdict(codec_cfg), "text": meta_in.get("text", asdict(TextConfig())),
            "latent_scale": latent_scale, "sample_rate": sr}
    if start_step >= cfg.total_steps:
        log.info("checkpoint already at step %d of %d", start_step, cfg.total_steps)
    train_stage(cfg, model, data, start_step=start_step, optimizer=optimizer, log_path=out / "loss.csv",
                checkpoint_path=out / "checkpoint.d2m", meta=meta)
    if (out / "loss.csv").exists():
        _plot_training(out, out / "loss.csv", cfg)
    return EXIT_OK


# -- generate -------------------------------------------------------------

def cmd_generate(args) -> int:
    import torch
    from . import codec
    from . import io as dio
    from .conditioning import ConditionBundle, TextConfig, TextEmbedder, VisualFeatureSeq, collate, embed_text
    from .diffusion import SamplerConfig, sample, write_trace
    from .io import ContainerError
    from .training import FALLBACK_CAPTION, load_checkpoint

    if (args.visual is None) == (not args.null_visual):
        raise CliError("pass exactly one of --visual FILE or --null-visual", EXIT_MALFORMED)
    resolved = {"command": "generate", "checkpoint": str(args.checkpoint), "visual": args.visual,
                "null_visual": args.null_visual, "caption": args.caption, "steps": args.steps, "scale": args.scale,
                "seed": args.seed, "seconds": args.seconds, "out": str(args.out)}
    _persist_config(Path(str(args.out) + ".config.json"), resolved)
    try:
        model, meta, _ = load_checkpoint(args.checkpoint)
    except OSError as e:
        raise CliError(f"cannot read checkpoint: {e}", EXIT_IO) from None
    except (ContainerError, KeyError) as e:
        raise CliError(f"invalid checkpoint: {e}", EXIT_MALFORMED) from None
    codec_cfg = codec.CodecConfig(**meta["codec"])
    sr = int(meta.get("sample_rate", 8192))
    frame_rate = sr / codec_cfg.frames_per_step

    visual = None
    if args.visual:
        try:
            feats, rate = dio.load_visual_features(args.visual)
        except OSError as e:
            raise CliError(f"cannot read visual features: {e}", EXIT_IO) from None
        except ContainerError as e:
            raise CliError(str(e), EXIT_MALFORMED) from None
        visual = VisualFeatureSeq(feats.astype(np.float64), rate)
        vis_seconds = visual.num_frames / rate
        seconds = args.seconds if args.seconds is not None else vis_seconds
        if abs(seconds - vis_seconds) > 1.0 / rate + 1e-9:
            raise CliError(f"visual features cover {vis_seconds:.3f} s but {seconds:.3f} s were requested", EXIT_SHAPE)
        if visual.vectors.shape[1] != model.cfg.d_vis:
            raise CliError(f"visual dim {visual.vectors.shape[1]} != model d_vis {model.cfg.d_vis}", EXIT_SHAPE)
    else:
        seconds = args.seconds if args.seconds is not None else 4.0
    n_frames = int(math.floor(seconds * frame_rate))
    if n_frames < 1:
        raise CliError(f"{seconds} s is shorter than one latent frame", EXIT_SHAPE)

    caption = args.caption.strip() if args.caption and args.caption.strip() else FALLBACK_CAPTION
    text = embed_text(caption, TextEmbedder(TextConfig(**meta["text"])))
    cond = collate([ConditionBundle.make(text, visual)], model.cfg.d_txt, model.cfg.d_vis)
    gen = torch.Generator().manual_seed(args.seed)
    noise = torch.randn((1, model.cfg.c_latent, n_frames), generator=gen)
    trace = [] if args.trace else None
    model.eval()
    z = sample(model, cond, noise.shape, SamplerConfig(steps=args.steps, guidance_scale=args.scale), noise=noise,
               trace=trace)
    z = z[0].numpy().astype(np.float64) / float(meta.get("latent_scale", 1.0))
    clip = codec.decode(codec.LatentSeq(z, frame_rate), codec_cfg)
    try:
        dio.write_wav(args.out, clip)
        if trace is not None:
            write_trace(args.trace, trace)
        if args.spectrogram:
            _plot_spectrogram(clip, args.spectrogram)
    except OSError as e:
        raise CliError(f"cannot write output: {e}", EXIT_IO) from None
    return EXIT_OK


def _plot_spectrogram(clip, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.specgram(clip.samples.mean(axis=0), NFFT=256, Fs=clip.sample_rate, noverlap=192, cmap="magma")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("Hz")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# -- evaluate -------------------------------------------------------------

def _wav_index(directory) -> dict[str, Path]:
    d = Path(directory)
    if not d.is_dir():
        raise CliError(f"{d} is not a directory", EXIT_IO)
    return {p.stem: p for p in sorted(d.glob("*.wav"))}


def _read_grid(path) -> dict[str, np.ndarray]:
    grids = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise CliError(f"cannot read beat grid {path}: {e}", EXIT_IO) from None
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            grids[str(rec["id"])] = np.asarray(rec["beats"], dtype=np.float64)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise CliError(f"{path}: line {lineno}: malformed beat-grid entry ({e})", EXIT_MALFORMED) from None
    return grids


def cmd_evaluate(args) -> int:
    from . import io as dio
    from .rhythm import extract_beats, score_corpus

    if (args.ref is None) == (args.grid is None):
        raise CliError("pass exactly one of --ref DIR or --grid MANIFEST", EXIT_MALFORMED)
    resolved = {"command": "evaluate", "gen": str(args.gen), "ref": args.ref, "grid": args.grid,
                "window": args.window, "n_fft": args.n_fft, "hop": args.hop, "report": str(args.report)}
    _persist_config(Path(str(args.report) + ".config.json"), resolved)

    def beats_of(path):
        try:
            return extract_beats(dio.read_wav(path), args.n_fft, args.hop)
        except (OSError, ValueError) as e:
            raise CliError(f"cannot read {path}: {e}", EXIT_IO) from None

    gen = _wav_index(args.gen)
    refs: dict = _wav_index(args.ref) if args.ref else _read_grid(args.grid)
    ids = sorted(set(gen) & set(refs))
    unpaired = sorted(set(gen) ^ set(refs))
    if not ids:
        raise CliError("no paired clips to evaluate", EXIT_MALFORMED)
    pairs = []
    for i in ids:
        ref = beats_of(refs[i]) if args.ref else refs[i]
        pairs.append((beats_of(gen[i]), ref))
    report = score_corpus(pairs, args.window, ids)
    out = report.to_json()
    out.update({"window": args.window, "unpaired": unpaired})
    try:
        dio.write_json(args.report, out)
        if args.plot:
            _plot_metrics(out, args.plot)
    except OSError as e:
        raise CliError(f"cannot write report: {e}", EXIT_IO) from None
    log.info("BCS %.1f CSD %.1f BHS %.1f HSD %.1f F1 %.1f", out["bcs"], out["csd"], out["bhs"], out["hsd"], out["f1"])
    if unpaired:
        log.warning("unpaired files excluded: %s", ", ".join(unpaired))
        return EXIT_WARN
    return EXIT_OK


def _plot_metrics(report: dict, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    names = ["BCS", "CSD", "BHS", "HSD", "F1"]
    vals = [report[k.lower()] for k in names]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(names, vals, color=["C0", "C1", "C0", "C1", "C2"])
    for x, v in enumerate(vals):
        ax.text(x, v, f"{v:.1f}", ha="center", va="bottom")
    ax.set_ylim(0, 110)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# -- parser -------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Usage errors are malformed input (exit 3); argparse's own 2 would read as an I/O failure."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_MALFORMED, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    from .data import EXCLUDED_GENRES, ROLLOFF_KAPPA, ROLLOFF_THRESHOLD, VOICED_THRESHOLD

    p = _Parser(prog="d2m", description="Dance-to-music latent diffusion toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("make-toy-data", help="synthesize paired click-track/visual data")
    m.add_argument("--n-tracks", type=int, default=10)
    m.add_argument("--tempo-min", type=float, default=60.0)
    m.add_argument("--tempo-max", type=float, default=180.0)
    m.add_argument("--duration", type=float, default=8.0)
    m.add_argument("--sample-rate", type=int, default=8192)
    m.add_argument("--feature-rate", type=float, default=32.0)
    m.add_argument("--d-vis", type=int, default=32)
    m.add_argument("--split", default="d2m=0.5,t2m=0.3,v2a=0.2")
    m.add_argument("--filter-cases", action="store_true", help="append Folk, pure-tone and voiced entries")
    m.add_argument("--out", required=True)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_make_toy_data)

    f = sub.add_parser("filter", help="genre, roll-off and singing-voice gates")
    f.add_argument("--manifest", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--report", required=True)
    f.add_argument("--rolloff-min", type=float, default=ROLLOFF_THRESHOLD)
    f.add_argument("--kappa", type=float, default=ROLLOFF_KAPPA)
    f.add_argument("--theta", type=float, default=VOICED_THRESHOLD)
    f.add_argument("--min-seconds", type=float, default=0.0)
    f.add_argument("--exclude-genres", nargs="*", default=list(EXCLUDED_GENRES))
    f.add_argument("--separator", choices=["sustained", "silent"], default="sustained")
    f.add_argument("--vad-threshold-db", type=float, default=-35.0)
    f.set_defaults(func=cmd_filter)

    t = sub.add_parser("train", help="stage 1 (video-to-audio) or stage 2 (dance-to-music) training")
    t.add_argument("--stage", type=int, choices=[1, 2], required=True)
    t.add_argument("--data", required=True, help="JSONL manifest")
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="flat YAML/JSON stage config")
    g = t.add_mutually_exclusive_group()
    g.add_argument("--base", help="text+timestep base checkpoint to graft (stage 1)")
    g.add_argument("--fresh-base", action="store_true", help="graft onto a freshly initialized base (stage 1)")
    g.add_argument("--init", help="stage-1 checkpoint to fine-tune (stage 2)")
    g.add_argument("--resume", help="checkpoint of this stage to continue")
    t.add_argument("--codec", choices=["desk", "toy", "production"], default="toy")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr-base", type=float)
    t.add_argument("--lr-warmup", type=int)
    t.add_argument("--lr-drop-step", type=int)
    t.add_argument("--lr-post", type=float)
    t.add_argument("--lr-constant", type=float)
    t.add_argument("--clip-seconds", type=float)
    for role in ("d2m", "t2m", "v2a"):
        t.add_argument(f"--w-{role}", type=float, dest=f"w_{role}")
    t.add_argument("--depth", type=int, default=4)
    t.add_argument("--d-model", type=int, default=96)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--d-vis", type=int, default=32)
    t.add_argument("--concat-kernel", type=int, default=1)
    t.add_argument("--max-visual-frames", type=int, default=256)
    t.set_defaults(func=cmd_train)

    gn = sub.add_parser("generate", help="sample audio for a visual condition and caption")
    gn.add_argument("--checkpoint", required=True)
    gn.add_argument("--visual")
    gn.add_argument("--null-visual", action="store_true")
    gn.add_argument("--caption", default="")
    gn.add_argument("--steps", type=int, default=100)
    gn.add_argument("--scale", type=float, default=5.0)
    gn.add_argument("--seconds", type=float)
    gn.add_argument("--seed", type=int, default=0)
    gn.add_argument("--out", required=True)
    gn.add_argument("--trace", help="write the sampler trace as JSON")
    gn.add_argument("--spectrogram", help="write a spectrogram image")
    gn.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="BCS/CSD/BHS/HSD/F1 against reference audio or a beat grid")
    e.add_argument("--gen", required=True)
    e.add_argument("--ref")
    e.add_argument("--grid", help="JSONL with {id, beats}")
    e.add_argument("--window", type=float, default=0.07)
    e.add_argument("--n-fft", type=int, default=2048)
    e.add_argument("--hop", type=int, default=512)
    e.add_argument("--report", required=True)
    e.add_argument("--plot")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # usage errors and --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        log.error("%s", e)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
