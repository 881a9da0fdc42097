import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from d2m.codec import AudioClip
from d2m.data import synth_toy_pair
from d2m.rhythm import BeatSeq, extract_beats, match_beats, score_clip, score_corpus


def brute_force_matching(g, r, w):
    """Largest one-to-one matching by exhaustive search over injections of the shorter side."""
    g, r = list(g), list(r)
    if len(g) > len(r):
        g, r = r, g
    best = 0
    for k in range(len(g), 0, -1):
        for rows in itertools.combinations(range(len(g)), k):
            for cols in itertools.permutations(range(len(r)), k):
                if all(abs(g[i] - r[j]) <= w for i, j in zip(rows, cols)):
                    return k
    return best


def click(duration, sr, times, freq=2000.0):
    x = np.zeros(int(duration * sr))
    tc = np.arange(int(0.05 * sr)) / sr
    c = np.exp(-tc / 0.01) * np.sin(2 * np.pi * freq * tc)
    for t in times:
        i = int(round(t * sr))
        x[i:i + c.size] += c[: x.size - i]
    return AudioClip(x[None, :], sr)


def test_beatseq_validation():
    with pytest.raises(ValueError):
        BeatSeq([0.5, 0.5])
    with pytest.raises(ValueError):
        BeatSeq([-0.1, 0.2])
    assert len(BeatSeq([])) == 0


def test_silence_has_no_beats():
    assert len(extract_beats(AudioClip(np.zeros((1, 44100)), 44100))) == 0


def test_single_click():
    b = extract_beats(click(2.0, 44100, [1.0]))
    assert len(b) == 1 and abs(b.times[0] - 1.0) <= 0.03


def test_click_train_120bpm():
    grid = np.arange(16) * 0.5
    b = extract_beats(click(8.0, 44100, grid))
    assert abs(len(b) - 16) <= 1
    d = np.abs(b.times[:, None] - grid[None, :]).min(axis=1)
    assert np.all(d <= 0.03)


def test_toy_pair_beats_recovered():
    rng = np.random.default_rng(0)
    for style in ("house", "hiphop", "techno"):
        p = synth_toy_pair(120.0, style, 8.0, rng)
        b = extract_beats(p.audio, n_fft=256, hop=64)
        assert score_clip(b, p.beats, 0.07).f1 >= 0.95


def test_worked_example():
    gen, ref = [0.5, 1.0, 1.5], [0.5, 1.02, 2.0]
    assert match_beats(gen, ref, 0.07) == brute_force_matching(gen, ref, 0.07) == 2
    s = score_clip(gen, ref, 0.07)
    assert s.bcs == 1.0 and math.isclose(s.bhs, 2 / 3) and math.isclose(s.f1, 2 / 3)


def test_matching_trivial_cases():
    x = [0.1, 0.5, 0.9]
    assert match_beats(x, x) == 3
    assert match_beats(x, [2.0, 3.0]) == 0
    assert match_beats([], x) == 0
    assert match_beats([0.0], [0.5], 0.5) == 1  # the window edge is inclusive
    with pytest.raises(ValueError):
        match_beats(x, x, 0.0)


def test_matching_oracle_1000_instances():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        g = np.sort(rng.uniform(0, 1, rng.integers(0, 7)))
        r = np.sort(rng.uniform(0, 1, rng.integers(0, 7)))
        w = float(rng.uniform(0.01, 0.3))
        assert match_beats(g, r, w) == brute_force_matching(g, r, w)


# times, windows and shifts on a 1/1024 s grid: every sum and difference is exact in float64,
# so pairs sitting exactly on the window edge stay there after a shift
def ticks(lo, hi):
    return st.integers(lo, hi).map(lambda k: k / 1024)


beat_lists = st.lists(ticks(0, 10 * 1024), max_size=8, unique=True).map(sorted)


@settings(max_examples=300, deadline=None)
@given(g=beat_lists, r=beat_lists, w=ticks(10, 1024), shift=ticks(-5 * 1024, 5 * 1024), extra=ticks(0, 1024))
def test_matching_properties(g, r, w, shift, extra):
    g, r = np.array(g), np.array(r)
    assert match_beats(g, r, w) == match_beats(r, g, w)
    assert match_beats(g, r, w + extra) >= match_beats(g, r, w)
    assert score_clip(g + shift, r + shift, w) == score_clip(g, r, w)
    s = score_clip(g, r, w)
    for v in (s.bcs, s.bhs, s.f1, s.precision, s.recall):
        assert 0.0 <= v <= 1.0
    if s.matched == 0 and (g.size or r.size):
        assert s.f1 == 0.0


def test_score_edge_cases():
    assert score_clip([], [], 0.07).f1 == 1.0
    s = score_clip([0.5], [], 0.07)
    assert (s.bcs, s.bhs, s.f1) == (0.0, 0.0, 0.0)
    s = score_clip([], [0.5], 0.07)
    assert (s.bcs, s.bhs, s.f1) == (0.0, 0.0, 0.0)


def test_dense_generation_penalizes_bcs_only():
    ref = np.arange(8) * 0.5
    gen = np.arange(16) * 0.25
    s = score_clip(gen, ref, 0.07)
    assert s.bcs == 0.5 and s.bhs == 1.0


def test_corpus_scores():
    one = score_corpus([([0.5, 1.0], [0.5, 1.0])])
    assert one.csd == 0.0 and one.hsd == 0.0
    assert score_corpus([([0.5, 1.0], [0.5, 1.0])] * 3).as_tuple() == (1.0, 0.0, 1.0, 0.0, 1.0)
    two = score_corpus([([0.5], [0.5]), ([0.5], [0.5, 1.0])])
    assert two.bcs == 0.75 and two.csd == 0.25
    with pytest.raises(ValueError):
        score_corpus([])
    js = two.to_json()
    assert js["bcs"] == 75.0 and len(js["clips"]) == 2
