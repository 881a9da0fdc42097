"""Beat extraction and beat-alignment scores (BCS, CSD, BHS, HSD, F1)."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import maximum_filter1d, uniform_filter1d
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .codec import AudioClip

DEFAULT_WINDOW = 0.07


@dataclass(frozen=True)
class BeatSeq:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if t.size and (t[0] < 0 or np.any(np.diff(t) <= 0)):
            raise ValueError("beat times must be non-negative and strictly increasing")
        object.__setattr__(self, "times", t)

    def __len__(self) -> int:
        return self.times.size


def _as_times(beats) -> np.ndarray:
    return beats.times if isinstance(beats, BeatSeq) else np.asarray(beats, dtype=np.float64).reshape(-1)


def onset_envelope(clip: AudioClip, n_fft: int = 2048, hop: int = 512, compression: float = 10.0,
                   smooth: int = 3) -> np.ndarray:
    """Half-wave rectified spectral flux of log-compressed magnitudes, one value per hop.

    Frames are centred (frame ``i`` at ``i * hop`` samples) with reflect
    padding; the first frame has zero flux.
    """
    x = clip.samples.mean(axis=0)
    pad = n_fft // 2
    x = np.pad(x, (pad, pad), mode="reflect" if x.size > pad else "constant")
    n_frames = 1 + (x.size - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hanning(n_fft)[None, :]
    mag = np.log1p(compression * np.abs(np.fft.rfft(frames, axis=1)))
    diff = np.diff(mag, axis=0, prepend=mag[:1])
    flux = np.maximum(diff, 0.0).sum(axis=1)
    if smooth > 1:
        flux = uniform_filter1d(flux, smooth, mode="constant")
    return flux


def extract_beats(clip: AudioClip, n_fft: int = 2048, hop: int = 512, delta: float = 1.5,
                  suppress: float = 0.05, compression: float = 10.0) -> BeatSeq:
    """Peak-pick the onset envelope: local maxima within ``±suppress`` seconds
    that exceed ``mean + delta * std``."""
    env = onset_envelope(clip, n_fft, hop, compression)
    if env.size == 0 or env.max() <= 1e-9:
        return BeatSeq(np.empty(0))
    thresh = env.mean() + delta * env.std()
    radius = max(1, int(round(suppress * clip.sample_rate / hop)))
    local_max = maximum_filter1d(env, 2 * radius + 1, mode="constant")
    peaks = np.flatnonzero((env >= local_max) & (env > thresh))
    # plateaus: keep the first frame of each run of equal maxima
    keep, last = [], -np.inf
    for p in peaks:
        if p - last > radius:
            keep.append(p)
            last = p
    times = np.asarray(keep, dtype=np.float64) * hop / clip.sample_rate
    return BeatSeq(times[times < clip.duration])


def match_beats(gen, ref, w: float = DEFAULT_WINDOW) -> int:
    """Size of a maximum one-to-one matching with ``|g - r| <= w``."""
    if w <= 0:
        raise ValueError("matching window must be positive")
    g, r = _as_times(gen), _as_times(ref)
    if g.size == 0 or r.size == 0:
        return 0
    adj = np.abs(g[:, None] - r[None, :]) <= w
    if not adj.any():
        return 0
    match = maximum_bipartite_matching(csr_matrix(adj.astype(np.int8)), perm_type="column")
    return int((match >= 0).sum())


@dataclass(frozen=True)
class ClipScore:
    bcs: float
    bhs: float
    precision: float
    recall: float
    f1: float
    matched: int
    n_gen: int
    n_ref: int


def score_clip(gen, ref, w: float = DEFAULT_WINDOW) -> ClipScore:
    g, r = _as_times(gen), _as_times(ref)
    G, R = g.size, r.size
    A = match_beats(g, r, w)
    if G == 0 and R == 0:
        return ClipScore(1.0, 1.0, 1.0, 1.0, 1.0, 0, 0, 0)
    bcs = min(G, R) / max(G, R)
    bhs = A / R if R else 0.0
    precision = A / G if G else 0.0
    recall = A / R if R else 0.0
    f1 = 2 * precision * recall / (precision + recall) if A else 0.0
    return ClipScore(bcs, bhs, precision, recall, f1, A, G, R)


@dataclass
class MetricsReport:
    bcs: float
    csd: float
    bhs: float
    hsd: float
    f1: float
    per_clip: list[ClipScore] = field(default_factory=list)
    ids: list[str] | None = None

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.bcs, self.csd, self.bhs, self.hsd, self.f1)

    def to_json(self, scale: float = 100.0) -> dict:
        ids = self.ids or [str(i) for i in range(len(self.per_clip))]
        return {
            "bcs": self.bcs * scale, "csd": self.csd * scale, "bhs": self.bhs * scale,
            "hsd": self.hsd * scale, "f1": self.f1 * scale,
            "scale": scale,
            "clips": [{"id": i, **{k: (v * scale if isinstance(v, float) else v) for k, v in asdict(c).items()}}
                      for i, c in zip(ids, self.per_clip)],
        }


def score_corpus(clips: Sequence[tuple], w: float = DEFAULT_WINDOW, ids: Sequence[str] | None = None) -> MetricsReport:
    if not clips:
        raise ValueError("cannot score an empty corpus")
    per = [score_clip(g, r, w) for g, r in clips]
    bcs = np.array([c.bcs for c in per])
    bhs = np.array([c.bhs for c in per])
    f1 = np.array([c.f1 for c in per])
    return MetricsReport(float(bcs.mean()), float(bcs.std()), float(bhs.mean()), float(bhs.std()),
                         float(f1.mean()), per, list(ids) if ids is not None else None)


# JSON schema of the evaluation report written by the CLI
REPORT_SCHEMA = {
    "type": "object",
    "required": ["bcs", "csd", "bhs", "hsd", "f1", "scale", "clips", "window", "unpaired"],
    "properties": {
        **{k: {"type": "number", "minimum": 0} for k in ("bcs", "csd", "bhs", "hsd", "f1", "scale", "window")},
        "unpaired": {"type": "array", "items": {"type": "string"}},
        "clips": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "bcs", "bhs", "precision", "recall", "f1", "matched", "n_gen", "n_ref"],
            },
        },
    },
}
