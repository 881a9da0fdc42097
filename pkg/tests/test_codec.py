import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from d2m import codec
from d2m.codec import AudioClip, CodecConfig, CodecError, LatentSeq, decode, encode
from d2m.io import load_container, pack_container, read_wav, save_container, unpack_container, write_wav


def test_encode_shape_mono():
    z = encode(AudioClip(np.linspace(-1, 1, 32), 16000), CodecConfig(16, 16))
    assert z.data.shape == (16, 2)
    assert z.frame_rate == 1000


def test_lossless_round_trip(rng):
    x = rng.uniform(-1, 1, (1, 1000))
    y = decode(encode(AudioClip(x, 8000)), codec.DESK)
    assert y.num_samples == 992
    np.testing.assert_allclose(y.samples, x[:, :992], atol=1e-6)


def test_stereo_round_trip(rng):
    cfg = CodecConfig(frames_per_step=8, latent_channels=16, channels=2)
    x = rng.uniform(-1, 1, (2, 100))
    np.testing.assert_allclose(decode(encode(AudioClip(x, 100), cfg), cfg).samples, x[:, :96], atol=1e-6)


def test_production_shape():
    n = 351918  # 7.98 s at 44.1 kHz
    assert n == int(7.98 * 44100)
    z = encode(AudioClip(np.zeros((2, n)), 44100), codec.PRODUCTION)
    assert z.data.shape == (64, 171)


def test_too_short():
    with pytest.raises(CodecError, match="too short"):
        encode(AudioClip(np.zeros(15), 100), codec.DESK)


def test_channel_mismatch_on_decode():
    with pytest.raises(CodecError):
        decode(LatentSeq(np.zeros((8, 3)), 10.0), codec.DESK)


def test_zero_latent_decodes_to_silence():
    assert not decode(LatentSeq(np.zeros((16, 5)), 10.0)).samples.any()


def test_latent_identity_in_lossless_mode(rng):
    z = LatentSeq(rng.standard_normal((16, 7)), 500.0)
    np.testing.assert_allclose(encode(decode(z)).data, z.data, atol=1e-6)


def test_lossy_projection_is_idempotent(rng):
    cfg = CodecConfig(frames_per_step=16, latent_channels=6)
    x = AudioClip(rng.uniform(-1, 1, 160), 1600)
    once = decode(encode(x, cfg), cfg)
    twice = decode(encode(once, cfg), cfg)
    np.testing.assert_allclose(twice.samples, once.samples, atol=1e-6)
    assert not np.allclose(once.samples, x.samples)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(16, 5000), a=st.floats(-2, 2), b=st.floats(-2, 2))
def test_shape_law_and_linearity(n, a, b):
    r = np.random.default_rng(n)
    x, y = r.uniform(-0.5, 0.5, n), r.uniform(-0.5, 0.5, n)
    zx, zy = encode(AudioClip(x, 1000)).data, encode(AudioClip(y, 1000)).data
    assert zx.shape[1] == n // 16
    zc = encode(AudioClip(a * x + b * y, 1000)).data
    np.testing.assert_allclose(zc, a * zx + b * zy, atol=1e-6)
    np.testing.assert_allclose(np.linalg.norm(zx), np.linalg.norm(x[: (n // 16) * 16]), atol=1e-6)


def test_mixing_matrix_deterministic():
    a = codec._mixing_matrix.__wrapped__(32, 5)
    b = codec._mixing_matrix.__wrapped__(32, 5)
    assert np.array_equal(a, b)
    np.testing.assert_allclose(a @ a.T, np.eye(32), atol=1e-12)


def test_container_round_trip(tmp_path, rng):
    arrs = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.float32)}
    save_container(tmp_path / "x.d2m", arrs, {"k": 1}, {"a": "base"})
    t, meta, groups = load_container(tmp_path / "x.d2m")
    assert meta == {"k": 1} and groups == {"a": "base", "b": ""}
    for k in arrs:
        assert np.array_equal(t[k], arrs[k])
    raw = pack_container(arrs)
    assert raw[:8] == b"D2MCONT\0"
    with pytest.raises(ValueError):
        unpack_container(b"nope" + raw[4:])


@pytest.mark.parametrize("subtype,tol", [("float", 1e-7), ("pcm16", 0.5 / 32768)])
def test_wav_round_trip(tmp_path, rng, subtype, tol):
    clip = AudioClip(rng.uniform(-0.9, 0.9, (2, 300)), 22050)
    write_wav(tmp_path / "a.wav", clip, subtype)
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 22050 and back.samples.shape == (2, 300)
    np.testing.assert_allclose(back.samples, clip.samples, atol=tol)
