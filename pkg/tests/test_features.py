import math
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dft_power
from vap.features import (
    LOG_FLOOR,
    DialogueRecording,
    StreamingFramer,
    frame_audio,
    intervals_from_frames,
    read_vad_csv,
    read_wav,
    vad_frames,
    write_vad_csv,
    write_wav,
)


def tone(freq, seconds, sr, amp=0.5):
    t = np.arange(int(seconds * sr)) / sr
    return amp * np.sin(2 * np.pi * freq * t)


def test_two_seconds_gives_100_frames():
    rec = DialogueRecording(16000, np.zeros((2, 32000)))
    f = frame_audio(rec)
    assert f.shape == (100, 2, 9)


def test_silence_features():
    f = frame_audio(DialogueRecording(8000, np.zeros((2, 8000))))
    assert np.all(f[..., -1] == 0)
    np.testing.assert_array_equal(f[..., :-1], np.log(LOG_FLOOR))


@settings(max_examples=40, deadline=None)
@given(st.integers(160, 40000), st.sampled_from([8000, 11025, 16000, 22050]))
def test_frame_count_law(n, sr):
    if n * 50 < sr:
        return
    rec = DialogueRecording(sr, np.zeros((2, n)))
    assert frame_audio(rec).shape[0] == math.floor(n / sr * 50 + 1e-12)


def _oracle_band_logs(x, sr, n_bands=8):
    n = len(x)
    taper = [0.5 - 0.5 * math.cos(2 * math.pi * i / (n - 1)) for i in range(n)]
    freqs, power = dft_power([x[i] * taper[i] for i in range(n)], sr)
    step = (sr / 2) / (n_bands + 1)
    logs = []
    for k in range(n_bands):
        lo, mid, hi = k * step, (k + 1) * step, (k + 2) * step
        e = 0.0
        for f, p in zip(freqs, power):
            if lo < f < hi:
                e += p * ((f - lo) / (mid - lo) if f <= mid else (hi - f) / (hi - mid))
        logs.append(math.log(max(e, LOG_FLOOR)))
    return np.array(logs)


@pytest.mark.parametrize("freq", [440.0, 1333.0, 2900.0])
def test_sinusoid_band_matches_direct_dft(freq):
    sr = 8000
    left = tone(freq, 0.5, sr)
    rec = DialogueRecording(sr, np.stack([left, np.zeros_like(left)]))
    f = frame_audio(rec)
    t = 10  # interior frame: window is samples [t*160 - 160, (t+1)*160)
    window = left[(t + 1) * 160 - 320:(t + 1) * 160]
    oracle = _oracle_band_logs(window.tolist(), sr)
    np.testing.assert_allclose(f[t, 0, :8], oracle, rtol=1e-6, atol=1e-6)
    for t in range(2, f.shape[0]):
        assert np.argmax(f[t, 0, :8]) == np.argmax(oracle)
    nearest = min(range(8), key=lambda k: abs((k + 1) * 4000 / 9 - freq))
    assert np.argmax(oracle) == nearest


def test_features_are_causal(rng):
    x = rng.standard_normal((2, 8000)) * 0.1
    base = frame_audio(DialogueRecording(8000, x))
    y = x.copy()
    y[:, 4000:] = rng.standard_normal((2, 4000))  # samples from frame 25 on
    mutated = frame_audio(DialogueRecording(8000, y))
    np.testing.assert_array_equal(mutated[:25], base[:25])
    assert not np.array_equal(mutated[25], base[25])


def test_deterministic(rng):
    x = rng.standard_normal((2, 4000)) * 0.1
    a = frame_audio(DialogueRecording(8000, x))
    b = frame_audio(DialogueRecording(8000, x.copy()))
    assert a.tobytes() == b.tobytes()


def test_errors():
    with pytest.raises(ValueError):
        frame_audio(DialogueRecording(8000, np.zeros((2, 0))))
    with pytest.raises(ValueError):
        DialogueRecording.from_channels(8000, np.zeros(100), np.zeros(101))
    with pytest.raises(ValueError):
        DialogueRecording(4000, np.zeros((2, 100)))


@pytest.mark.parametrize("chunk", [1, 37, 160, 1000])
def test_streaming_framer_matches_batch(rng, chunk):
    x = rng.standard_normal((2, 5 * 1600 + 77)) * 0.1
    batch = frame_audio(DialogueRecording(8000, x))
    fr = StreamingFramer(8000)
    got = [fr.push(x[:, i:i + chunk]) for i in range(0, x.shape[1], chunk)]
    got = np.concatenate(got)
    np.testing.assert_allclose(got, batch, rtol=0, atol=1e-12)
    assert fr.buffered_samples <= 320 + chunk


def test_vad_examples():
    assert not vad_frames([[], []], 20).any()
    v = vad_frames([[(0.0, 1.0)], []], 60)
    np.testing.assert_array_equal(np.flatnonzero(v[0]), np.arange(50))
    assert not v[1].any()
    v = vad_frames([[(0.015, 0.025)], []], 5)  # 5 ms in frame 0, 5 ms in frame 1
    assert not v.any()
    v = vad_frames([[(0.010, 0.020)], []], 5)  # exactly half of frame 0
    np.testing.assert_array_equal(v[0], [1, 0, 0, 0, 0])


def test_vad_roundtrip_aligned():
    iv = [[(0.2, 0.6), (1.0, 1.04)], [(0.6, 0.9)]]
    v = vad_frames(iv, 100)
    back = intervals_from_frames(v)
    for a, b in zip(iv, back):
        np.testing.assert_allclose(a, b)


def test_vad_validation_and_clipping():
    with pytest.raises(ValueError):
        vad_frames([[(0.5, 0.2)], []], 10)
    with pytest.raises(ValueError):
        vad_frames([[(0.0, 0.5), (0.4, 0.8)], []], 50)
    with pytest.warns(UserWarning):
        v = vad_frames([[(0.0, 5.0)], []], 10)
    assert v[0].all()


def test_wav_roundtrip(tmp_path, rng):
    x = np.clip(rng.standard_normal((2, 1234)) * 0.2, -1, 0.99)
    write_wav(tmp_path / "a.wav", DialogueRecording(16000, x))
    rec = read_wav(tmp_path / "a.wav")
    assert rec.sample_rate == 16000
    np.testing.assert_allclose(rec.channels, x, atol=1 / 32768)


def test_wav_rejects_mono(tmp_path):
    with wave.open(str(tmp_path / "m.wav"), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(8000)
        w.writeframes(b"\0\0" * 100)
    with pytest.raises(ValueError, match="2 channels"):
        read_wav(tmp_path / "m.wav")


def test_vad_csv_roundtrip(tmp_path):
    iv = [[(0.0, 1.5), (2.0, 2.5)], [(1.6, 1.9)]]
    write_vad_csv(tmp_path / "v.csv", iv)
    text = (tmp_path / "v.csv").read_text()
    assert text.splitlines()[0] == "speaker,start_s,end_s"
    assert read_vad_csv(tmp_path / "v.csv") == iv
    with pytest.raises(ValueError):
        read_vad_csv("spk,a,b\n0,1,2\n")
    with pytest.raises(ValueError):
        read_vad_csv("speaker,start_s,end_s\n2,0.1,0.2\n")
