"""Manifests, clip segmentation, dataset filtering and synthetic paired data."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np
from scipy import signal
from scipy.ndimage import minimum_filter1d

from .codec import AudioClip, CodecConfig
from .conditioning import VisualFeatureSeq

ROLES = ("d2m", "t2m", "v2a")
EXCLUDED_GENRES = ("Experimental", "Folk", "Old-Time", "Spoken")
ROLLOFF_THRESHOLD = 0.6
ROLLOFF_KAPPA = 0.99
VOICED_THRESHOLD = 0.1
DECISIONS = ("keep", "drop_genre", "drop_short", "drop_rolloff", "drop_singing", "drop_error")


class ManifestError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class ClipTooShort(ValueError):
    pass


@dataclass
class TagSet:
    genre: list[str] | None = None
    instrument: list[str] | None = None
    mood: list[str] | None = None

    def __post_init__(self):
        for name in ("genre", "instrument", "mood"):
            vals = getattr(self, name)
            if vals is not None and any(not isinstance(v, str) or not v.strip() for v in vals):
                raise ValueError(f"{name} tags must be non-empty strings")

    def all_tags(self) -> list[str]:
        return [t for name in ("genre", "instrument", "mood") for t in (getattr(self, name) or [])]

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict | None) -> "TagSet":
        d = d or {}
        unknown = set(d) - {"genre", "instrument", "mood"}
        if unknown:
            raise ValueError(f"unknown tag categories {sorted(unknown)}")
        return cls(**{k: list(v) for k, v in d.items()})


@dataclass
class ManifestEntry:
    id: str
    audio_ref: str
    role: str
    visual_ref: str | None = None
    tags: TagSet = field(default_factory=TagSet)
    caption: str | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        if self.role == "t2m" and self.visual_ref is not None:
            raise ValueError("t2m entries carry no visual_ref")
        if self.role != "t2m" and self.visual_ref is None:
            raise ValueError(f"{self.role} entries need a visual_ref")

    def to_dict(self) -> dict:
        return {"id": self.id, "audio_ref": self.audio_ref, "visual_ref": self.visual_ref,
                "tags": self.tags.to_dict(), "role": self.role, "caption": self.caption}

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        return cls(id=str(d["id"]), audio_ref=d["audio_ref"], role=d["role"], visual_ref=d.get("visual_ref"),
                   tags=TagSet.from_dict(d.get("tags")), caption=d.get("caption"))


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                entries.append(ManifestEntry.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ManifestError(f"malformed manifest entry ({e})", lineno) from None
    return entries


def write_manifest(path, entries: Iterable[ManifestEntry]) -> None:
    from .io import write_jsonl
    write_jsonl(path, [e.to_dict() for e in entries])


def resolve_ref(manifest_path, ref: str) -> Path:
    p = Path(ref)
    return p if p.is_absolute() else Path(manifest_path).parent / p


# -- segmentation ---------------------------------------------------------

def clip_num_samples(clip_seconds: float, sample_rate: int, codec_cfg: CodecConfig) -> int:
    R = codec_cfg.frames_per_step
    return int(np.floor(clip_seconds * sample_rate / R)) * R


def segment_start(num_samples: int, clip_samples: int, rng: np.random.Generator, step: int = 1) -> int:
    """Uniform random start offset, a multiple of ``step``."""
    if clip_samples > num_samples:
        raise ClipTooShort(f"source has {num_samples} samples, clip needs {clip_samples}")
    return int(rng.integers(0, (num_samples - clip_samples) // step + 1)) * step


def segment_clip(audio: AudioClip, clip_seconds: float, rng: np.random.Generator,
                 codec_cfg: CodecConfig) -> AudioClip:
    n = clip_num_samples(clip_seconds, audio.sample_rate, codec_cfg)
    if n < codec_cfg.frames_per_step:
        raise ClipTooShort(f"{clip_seconds} s is shorter than one codec frame")
    start = segment_start(audio.num_samples, n, rng)
    return AudioClip(audio.samples[:, start:start + n], audio.sample_rate)


# -- filters ------------------------------------------------------------

def spectral_rolloff_norm(audio: AudioClip, kappa: float = ROLLOFF_KAPPA, n_fft: int = 2048,
                          hop: int = 512) -> float:
    """Mean over Hann windows of the roll-off frequency (``kappa`` of the
    magnitude mass), divided by Nyquist. Silent windows count as 0."""
    x = audio.samples.mean(axis=0)
    if x.size < n_fft:
        raise ClipTooShort(f"roll-off needs at least {n_fft} samples, got {x.size}")
    n_frames = 1 + (x.size - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    mag = np.abs(np.fft.rfft(x[idx] * np.hanning(n_fft)[None, :], axis=1))
    total = mag.sum(axis=1)
    cum = np.cumsum(mag, axis=1)
    voiced = total > 0
    bins = np.argmax(cum >= kappa * total[:, None], axis=1)
    freqs = bins * audio.sample_rate / n_fft
    rolloff = np.where(voiced, freqs, 0.0)
    return float(rolloff.mean() / (audio.sample_rate / 2))


def filter_genre(tags: TagSet, excluded: Sequence[str] = EXCLUDED_GENRES) -> bool:
    """True to keep."""
    banned = {g.casefold() for g in excluded}
    return not any(g.casefold() in banned for g in (tags.genre or []))


class Separator(Protocol):
    def __call__(self, audio: AudioClip) -> AudioClip: ...


class VoiceActivityDetector(Protocol):
    def __call__(self, stem: AudioClip) -> list[tuple[float, float]]: ...


class SilentSeparator:
    def __call__(self, audio: AudioClip) -> AudioClip:
        return AudioClip(np.zeros_like(audio.samples), audio.sample_rate)


class SustainedToneSeparator:
    """Keeps spectral bins whose level holds steady over ``hold_seconds``; stands in for the vocal stem.

    A bin passes when its running minimum over the hold window is at least
    ``ratio`` of its current magnitude, and is scaled down to that floor.
    Clicks decay between beats and fail the test; held pitched tones (the toy
    "voice") pass.
    """

    def __init__(self, n_fft: int = 1024, hold_seconds: float = 0.5, ratio: float = 0.5):
        self.n_fft = n_fft
        self.hold_seconds = hold_seconds
        self.ratio = ratio

    def __call__(self, audio: AudioClip) -> AudioClip:
        x = audio.samples.mean(axis=0)
        hop = self.n_fft // 4
        _, _, Z = signal.stft(x, nperseg=self.n_fft, noverlap=self.n_fft - hop)
        mag = np.abs(Z)
        k = max(3, int(self.hold_seconds * audio.sample_rate / hop) | 1)
        floor = minimum_filter1d(mag, k, axis=1, mode="nearest")
        gain = np.where(floor >= self.ratio * mag, np.minimum(1.0, floor / (mag + 1e-12)), 0.0)
        _, y = signal.istft(Z * gain, nperseg=self.n_fft, noverlap=self.n_fft - hop)
        y = y[: x.size]
        if y.size < x.size:
            y = np.pad(y, (0, x.size - y.size))
        return AudioClip(y[None, :], audio.sample_rate)


class EnergyVAD:
    """Frames whose RMS exceeds ``threshold_db`` dBFS are voiced; returns merged segments."""

    def __init__(self, threshold_db: float = -35.0, frame_seconds: float = 0.032):
        self.threshold_db = threshold_db
        self.frame_seconds = frame_seconds

    def __call__(self, stem: AudioClip) -> list[tuple[float, float]]:
        x = stem.samples.mean(axis=0)
        n = max(1, int(self.frame_seconds * stem.sample_rate))
        n_frames = x.size // n
        if n_frames == 0:
            return []
        rms = np.sqrt(np.mean(x[: n_frames * n].reshape(n_frames, n) ** 2, axis=1))
        voiced = 20 * np.log10(rms + 1e-12) > self.threshold_db
        segments, start = [], None
        for i, v in enumerate(voiced):
            if v and start is None:
                start = i
            elif not v and start is not None:
                segments.append((start * n / stem.sample_rate, i * n / stem.sample_rate))
                start = None
        if start is not None:
            segments.append((start * n / stem.sample_rate, n_frames * n / stem.sample_rate))
        return segments


def voiced_ratio(segments: Sequence[tuple[float, float]], duration: float) -> float:
    if duration <= 0:
        return 0.0
    total = sum(max(0.0, min(e, duration) - max(s, 0.0)) for s, e in segments)
    return min(1.0, total / duration)


def filter_singing(audio: AudioClip, separator: Separator, vad: VoiceActivityDetector,
                   theta: float = VOICED_THRESHOLD) -> tuple[bool, float]:
    """``(keep, voiced_ratio)``; drop when the voiced share of the vocal stem exceeds ``theta``."""
    stem = separator(audio)
    ratio = voiced_ratio(vad(stem), audio.duration)
    return ratio <= theta, ratio


@dataclass
class FilterThresholds:
    excluded_genres: tuple[str, ...] = EXCLUDED_GENRES
    rolloff_min: float = ROLLOFF_THRESHOLD
    kappa: float = ROLLOFF_KAPPA
    theta: float = VOICED_THRESHOLD
    min_seconds: float = 0.0


@dataclass
class FilterRecord:
    id: str
    decision: str
    rolloff: float | None = None
    voiced_ratio: float | None = None
    error: str | None = None


@dataclass
class FilterReport:
    records: list[FilterRecord]

    def summary(self) -> dict[str, int]:
        counts = {d: 0 for d in DECISIONS}
        for r in self.records:
            counts[r.decision] += 1
        counts["total"] = len(self.records)
        return counts

    def to_json(self) -> dict:
        recs = sorted(self.records, key=lambda r: r.id)
        return {"records": {r.id: {k: v for k, v in asdict(r).items() if k != "id"} for r in recs},
                "summary": self.summary()}


def filter_entry(entry: ManifestEntry, load_audio: Callable[[ManifestEntry], AudioClip],
                 separator: Separator, vad: VoiceActivityDetector,
                 th: FilterThresholds = FilterThresholds()) -> FilterRecord:
    """Genre, then duration, then roll-off, then singing; the first failing gate decides."""
    if not filter_genre(entry.tags, th.excluded_genres):
        return FilterRecord(entry.id, "drop_genre")
    audio = load_audio(entry)
    if audio.duration < th.min_seconds:
        return FilterRecord(entry.id, "drop_short")
    try:
        rolloff = spectral_rolloff_norm(audio, th.kappa)
    except ClipTooShort:
        return FilterRecord(entry.id, "drop_short")
    if rolloff < th.rolloff_min:
        return FilterRecord(entry.id, "drop_rolloff", rolloff)
    try:
        keep, ratio = filter_singing(audio, separator, vad, th.theta)
    except Exception as e:  # pluggable models: a failure must not pass an entry through
        return FilterRecord(entry.id, "drop_error", rolloff, error=f"{type(e).__name__}: {e}")
    return FilterRecord(entry.id, "keep" if keep else "drop_singing", rolloff, ratio)


def run_filter(entries: Sequence[ManifestEntry], load_audio, separator: Separator, vad: VoiceActivityDetector,
               th: FilterThresholds = FilterThresholds()) -> tuple[list[ManifestEntry], FilterReport]:
    records = [filter_entry(e, load_audio, separator, vad, th) for e in entries]
    kept = [e for e, r in zip(entries, records) if r.decision == "keep"]
    return kept, FilterReport(records)


# -- synthetic paired data ------------------------------------------------------

@dataclass(frozen=True)
class Style:
    click_hz: float
    decay: float          # seconds
    noise_lowpass: float  # one-pole coefficient; higher is darker
    genre: str
    instrument: str
    mood: str


STYLES = {
    "house": Style(1800.0, 0.030, 0.2, "house", "drum machine", "energetic"),
    "hiphop": Style(600.0, 0.060, 0.6, "hip-hop", "kick drum", "laid-back"),
    "breaks": Style(2600.0, 0.020, 0.1, "breakbeat", "snare", "driving"),
    "latin": Style(1100.0, 0.045, 0.4, "latin", "conga", "playful"),
    "techno": Style(3200.0, 0.015, 0.05, "techno", "hi-hat", "dark"),
}
MUSIC_STYLES = tuple(STYLES)
# non-music events for video-to-audio pairs: irregular hits, louder noise bed
FIELD_STYLE = Style(900.0, 0.040, 0.8, "field recording", "footsteps", "ambient")

ANTICIPATION = 0.04  # visual motion peaks this long before the sound
MOTION_DIMS = 8
NOISE_LEVEL = 0.01


@dataclass
class ToyPair:
    audio: AudioClip
    visual: VisualFeatureSeq
    tags: TagSet
    beats: np.ndarray


def beat_grid(tempo_bpm: float, duration: float, phase: float) -> np.ndarray:
    period = 60.0 / tempo_bpm
    n = int(np.ceil((duration - phase) / period))
    beats = phase + period * np.arange(max(n, 0))
    return beats[beats < duration]


def _colored_noise(n: int, coef: float, rng: np.random.Generator) -> np.ndarray:
    w = rng.standard_normal(n)
    y = signal.lfilter([1.0 - coef], [1.0, -coef], w)
    return y / (np.std(y) + 1e-12)


def synth_toy_pair(tempo_bpm: float, style: str, duration: float, rng: np.random.Generator,
                   sample_rate: int = 8192, feature_rate: float = 32.0, d_vis: int = 32,
                   phase: float | None = None) -> ToyPair:
    """Click track on a beat grid plus a visual trajectory whose motion energy peaks
    ``ANTICIPATION`` seconds before each beat.

    ``style="field"`` produces a non-music pair: jittered event times and a louder
    noise bed.
    """
    if not 40 <= tempo_bpm <= 200:
        raise ValueError(f"tempo must lie in [40, 200] bpm, got {tempo_bpm}")
    st = FIELD_STYLE if style == "field" else STYLES[style]
    period = 60.0 / tempo_bpm
    if phase is None:
        phase = float(rng.uniform(0.0, period))
    beats = beat_grid(tempo_bpm, duration, phase)
    if style == "field":
        beats = np.sort(np.clip(beats + rng.uniform(-0.3, 0.3, beats.size) * period, 0, duration - 1e-3))
        beats = beats[np.concatenate([[True], np.diff(beats) > 0.1])]

    n = int(round(duration * sample_rate))
    audio = np.zeros(n)
    click_len = int(6 * st.decay * sample_rate)
    tc = np.arange(click_len) / sample_rate
    click = np.exp(-tc / st.decay) * np.sin(2 * np.pi * st.click_hz * tc)
    for b in beats:
        i = int(round(b * sample_rate))
        seg = click[: max(0, min(click_len, n - i))]
        audio[i:i + seg.size] += 0.8 * float(rng.uniform(0.8, 1.0)) * seg
    level = NOISE_LEVEL * (5 if style == "field" else 1)
    audio += level * _colored_noise(n, st.noise_lowpass, rng)
    peak = np.abs(audio).max()
    if peak > 1.0:
        audio /= peak

    n_feat = int(round(duration * feature_rate))
    tf = np.arange(n_feat) / feature_rate
    width = 0.025
    env = np.exp(-0.5 * ((tf[:, None] - (beats[None, :] - ANTICIPATION)) / width) ** 2).sum(axis=1)
    direction = rng.uniform(0.5, 1.0, MOTION_DIMS)
    feats = np.zeros((n_feat, d_vis))
    feats[:, :MOTION_DIMS] = env[:, None] * direction[None, :]
    n_dis = d_vis - MOTION_DIMS
    freqs = rng.uniform(0.1, 1.0, (3, n_dis))
    phases = rng.uniform(0, 2 * np.pi, (3, n_dis))
    amps = rng.uniform(0.1, 0.3, (3, n_dis))
    feats[:, MOTION_DIMS:] = (amps[None] * np.sin(2 * np.pi * freqs[None] * tf[:, None, None] + phases[None])).sum(1)

    tags = TagSet(genre=[st.genre], instrument=[st.instrument], mood=[st.mood])
    return ToyPair(AudioClip(audio[None, :], sample_rate), VisualFeatureSeq(feats, feature_rate), tags, beats)


def motion_energy(visual: VisualFeatureSeq) -> np.ndarray:
    return (visual.vectors[:, :MOTION_DIMS] ** 2).sum(axis=1)
