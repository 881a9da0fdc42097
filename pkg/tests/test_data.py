import json

import numpy as np
import pytest

from d2m.codec import DESK, PRODUCTION, TOY, AudioClip
from d2m.data import (
    ANTICIPATION,
    ClipTooShort,
    EnergyVAD,
    ManifestEntry,
    ManifestError,
    SilentSeparator,
    SustainedToneSeparator,
    TagSet,
    beat_grid,
    clip_num_samples,
    filter_entry,
    filter_genre,
    filter_singing,
    motion_energy,
    read_manifest,
    run_filter,
    segment_clip,
    spectral_rolloff_norm,
    synth_toy_pair,
    voiced_ratio,
    write_manifest,
)


def tone(freq, seconds, sr=44100, amp=0.5):
    t = np.arange(int(seconds * sr)) / sr
    return AudioClip(amp * np.sin(2 * np.pi * freq * t)[None, :], sr)


def test_segment_length_production():
    rng = np.random.default_rng(0)
    src = AudioClip(np.zeros((2, 60 * 44100)), 44100)
    out = segment_clip(src, 7.98, rng, PRODUCTION)
    assert out.num_samples == 350208 == 171 * 2048
    assert clip_num_samples(7.98, 44100, PRODUCTION) == 350208


def test_segment_full_length_and_determinism():
    x = np.arange(4096, dtype=float)[None, :] / 4096
    src = AudioClip(x, 4096)
    out = segment_clip(src, 1.0, np.random.default_rng(0), DESK)
    np.testing.assert_array_equal(out.samples, x)
    a = segment_clip(AudioClip(np.random.default_rng(1).uniform(-1, 1, (1, 50000)), 8000), 2.0,
                     np.random.default_rng(7), DESK)
    b = segment_clip(AudioClip(np.random.default_rng(1).uniform(-1, 1, (1, 50000)), 8000), 2.0,
                     np.random.default_rng(7), DESK)
    np.testing.assert_array_equal(a.samples, b.samples)
    with pytest.raises(ClipTooShort):
        segment_clip(src, 2.0, np.random.default_rng(0), DESK)


@pytest.mark.parametrize("seconds", [0.5, 1.3, 2.77])
def test_segment_multiple_of_frame(seconds):
    src = AudioClip(np.zeros((1, 3 * 8192)), 8192)
    for cfg in (DESK, TOY):
        assert segment_clip(src, seconds, np.random.default_rng(0), cfg).num_samples % cfg.frames_per_step == 0


def test_rolloff_tone_noise_silence():
    r = spectral_rolloff_norm(tone(1000, 2.0))
    assert abs(r - 1000 / 22050) < 0.01 and r < 0.1
    noise = AudioClip(np.random.default_rng(0).uniform(-0.5, 0.5, (1, 88200)), 44100)
    assert spectral_rolloff_norm(noise) > 0.9
    assert spectral_rolloff_norm(AudioClip(np.zeros((1, 8192)), 44100)) == 0.0


def test_rolloff_monotone_in_kappa():
    clip = AudioClip(np.random.default_rng(3).standard_normal((1, 20000)) * 0.1 + tone(300, 20000 / 44100).samples,
                     44100)
    vals = [spectral_rolloff_norm(clip, k) for k in (0.5, 0.7, 0.85, 0.95, 0.99)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_genre_filter():
    assert not filter_genre(TagSet(genre=["Folk"]))
    assert not filter_genre(TagSet(genre=["old-time"]))
    assert filter_genre(TagSet(genre=["Rock"]))
    assert filter_genre(TagSet(genre=[]))
    assert filter_genre(TagSet())


class MarkedVAD:
    def __init__(self, segments):
        self.segments = segments

    def __call__(self, stem):
        return self.segments


def test_singing_filter_stub_oracles():
    clip = AudioClip(np.zeros((1, 8 * 1000)), 1000)
    keep, ratio = filter_singing(clip, SilentSeparator(), EnergyVAD())
    assert keep and ratio == 0.0
    keep, ratio = filter_singing(clip, SilentSeparator(), MarkedVAD([(1.0, 3.0)]), theta=0.1)
    assert ratio == 0.25 and not keep
    keep, _ = filter_singing(clip, SilentSeparator(), MarkedVAD([(0.0, 8.0)]), theta=1.0)
    assert keep
    assert voiced_ratio([(0, 1), (7, 9)], 8.0) == 0.25


def test_sustained_tone_separator_detects_voice_not_clicks():
    sr = 8192
    rng = np.random.default_rng(0)
    pair = synth_toy_pair(120.0, "house", 4.0, rng, sr)
    sep, vad = SustainedToneSeparator(), EnergyVAD()
    keep, ratio = filter_singing(pair.audio, sep, vad)
    assert keep, ratio
    voice = AudioClip(pair.audio.samples + tone(220, 4.0, sr, 0.3).samples, sr)
    keep, ratio = filter_singing(voice, sep, vad)
    assert not keep and ratio > 0.5


def _entry(i, genre="house", role="d2m"):
    return ManifestEntry(f"e{i}", f"a{i}.wav", role, None if role == "t2m" else f"v{i}.d2m",
                         TagSet(genre=[genre]))


def test_filter_order_and_report():
    sr = 44100
    clips = {
        "e0": AudioClip(np.random.default_rng(0).uniform(-0.5, 0.5, (1, sr)), sr),   # keep
        "e1": tone(1000, 1.0),                                                          # rolloff
        "e2": tone(1000, 1.0),                                                          # genre first
        "e3": AudioClip(np.random.default_rng(1).uniform(-0.5, 0.5, (1, sr)), sr),   # singing via stub
        "e4": AudioClip(np.zeros((1, 100)), sr),                                       # too short
    }
    entries = [_entry(0), _entry(1), _entry(2, "Folk"), _entry(3), _entry(4)]

    calls = []

    def load(e):
        calls.append(e.id)
        return clips[e.id]

    def vad(stem):
        return [(0.0, 1.0)] if calls[-1] == "e3" else []

    kept, report = run_filter(entries, load, SilentSeparator(), vad)
    decisions = {r.id: r.decision for r in report.records}
    assert decisions == {"e0": "keep", "e1": "drop_rolloff", "e2": "drop_genre", "e3": "drop_singing",
                         "e4": "drop_short"}
    assert "e2" not in calls  # genre short-circuits before audio is touched
    assert [e.id for e in kept] == ["e0"]
    s = report.summary()
    assert s["total"] == 5 and s["keep"] == 1
    js = report.to_json()
    assert list(js["records"]) == sorted(js["records"])


def test_filter_separator_failure_is_flagged():
    def boom(audio):
        raise RuntimeError("model crashed")

    rec = filter_entry(_entry(0), lambda e: AudioClip(np.random.default_rng(0).uniform(-1, 1, (1, 44100)), 44100),
                       boom, EnergyVAD())
    assert rec.decision == "drop_error" and "crashed" in rec.error


def test_manifest_round_trip_and_errors(tmp_path):
    entries = [_entry(0), _entry(1, role="t2m"), _entry(2, role="v2a")]
    entries[0].caption = "upbeat house"
    write_manifest(tmp_path / "m.jsonl", entries)
    back = read_manifest(tmp_path / "m.jsonl")
    assert [e.to_dict() for e in back] == [e.to_dict() for e in entries]
    with pytest.raises(ValueError):
        ManifestEntry("x", "a.wav", "t2m", "v.d2m")
    with pytest.raises(ValueError):
        ManifestEntry("x", "a.wav", "d2m", None)
    with pytest.raises(ValueError):
        ManifestEntry("x", "a.wav", "dance", "v.d2m")
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps(entries[0].to_dict()) + "\n{not json\n")
    with pytest.raises(ManifestError) as e:
        read_manifest(bad)
    assert e.value.line == 2


def test_toy_pair_grid_and_determinism():
    p = synth_toy_pair(120.0, "house", 8.0, np.random.default_rng(0), phase=0.0)
    np.testing.assert_allclose(p.beats, np.arange(16) * 0.5)
    assert np.abs(p.audio.samples).max() <= 1.0
    q = synth_toy_pair(120.0, "house", 8.0, np.random.default_rng(0), phase=0.0)
    np.testing.assert_array_equal(p.audio.samples, q.audio.samples)
    np.testing.assert_array_equal(p.visual.vectors, q.visual.vectors)
    assert p.tags.genre == ["house"]
    with pytest.raises(ValueError):
        synth_toy_pair(250.0, "house", 1.0, np.random.default_rng(0))


def test_toy_visual_anticipates_beats():
    p = synth_toy_pair(100.0, "latin", 8.0, np.random.default_rng(5))
    e = motion_energy(p.visual)
    fr = p.visual.feature_rate
    period = 0.6
    for b in p.beats:
        lo, hi = int(np.ceil((b - period / 2) * fr)), int(np.floor((b + period / 2) * fr))
        lo, hi = max(lo, 0), min(hi, e.size - 1)
        if b - period / 2 < 0 or b + period / 2 > 8.0:
            continue
        peak = (lo + int(np.argmax(e[lo:hi + 1]))) / fr
        assert abs((b - peak) - ANTICIPATION) <= 1 / fr + 1e-9


def test_beat_grid():
    assert beat_grid(120, 8.0, 0.0).size == 16
