import struct
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fskws import audio
from fskws.audio import LogMelConfig, Waveform, WavFormatError


def write_raw_wav(path, pcm, channels=1, rate=16000, width=2):
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(rate)
        w.writeframes(pcm.tobytes())


def test_load_silence_and_scaling(tmp_path):
    write_raw_wav(tmp_path / "z.wav", np.zeros(16000, dtype="<i2"))
    w = audio.load_wav(tmp_path / "z.wav")
    assert w.samples.shape == (16000,) and not w.samples.any()
    write_raw_wav(tmp_path / "h.wav", np.array([16384, -32768], dtype="<i2"))
    assert audio.load_wav(tmp_path / "h.wav").samples.tolist() == [0.5, -1.0]


@pytest.mark.parametrize("kw,msg", [({"channels": 2}, "channels=2, expected 1"),
                                    ({"rate": 8000}, "sample_rate=8000"),
                                    ({"width": 1}, "sample_width=8")])
def test_load_rejects_wrong_format(tmp_path, kw, msg):
    pcm = np.zeros(64, dtype="<i2" if kw.get("width", 2) == 2 else "u1")
    write_raw_wav(tmp_path / "bad.wav", pcm, **kw)
    with pytest.raises(WavFormatError, match=msg):
        audio.load_wav(tmp_path / "bad.wav")


def test_wav_round_trip(tmp_path):
    x = np.round(np.random.default_rng(0).uniform(-1, 1, 500) * 32768).clip(-32768, 32767) / 32768
    audio.save_wav(tmp_path / "a.wav", x)
    assert np.array_equal(audio.load_wav(tmp_path / "a.wav").samples, x)


def test_waveform_validation():
    with pytest.raises(ValueError, match="sample_rate"):
        Waveform(np.zeros(10), 8000)
    with pytest.raises(ValueError):
        Waveform(np.zeros(0))


def test_one_second_gives_98_frames():
    fm = audio.logmel(Waveform(np.random.default_rng(0).normal(size=16000) * 0.1))
    assert (fm.frames, fm.bins) == (98, 40)
    assert fm.frames == (16000 - 480) // 160 + 1


def test_zero_signal_hits_floor():
    fm = audio.logmel(Waveform(np.zeros(16000)))
    assert np.all(fm.values == np.log(1e-10))


def test_too_short_input_rejected():
    with pytest.raises(ValueError, match="shorter"):
        audio.logmel_array(np.zeros(479))


def nearest_bin_oracle(freq):
    # independent mel table: HTK formula, 42 equally spaced mel points between 20 Hz and 8 kHz
    lo, hi = 2595 * np.log10(1 + 20 / 700), 2595 * np.log10(1 + 8000 / 700)
    mels = [lo + (hi - lo) * i / 41 for i in range(42)]
    centres = [700 * (10 ** (m / 2595) - 1) for m in mels[1:-1]]
    return int(np.argmin([abs(c - freq) for c in centres]))


def test_pure_tone_peaks_at_nearest_centre():
    t = np.arange(16000) / 16000
    values = audio.logmel_array(0.5 * np.sin(2 * np.pi * 1000 * t))
    peaks = values.argmax(axis=1)
    assert np.all(peaks == peaks[0])
    assert peaks[0] == nearest_bin_oracle(1000.0)
    assert np.allclose(audio.mel_center_frequencies()[peaks[0]], 1000.0, atol=60)


def test_filterbank_is_unit_peak_triangles():
    fb = audio.mel_filterbank()
    assert fb.shape == (40, 257)
    assert np.all(fb >= 0) and np.all(fb.max(axis=1) <= 1.0)
    assert not fb.flags.writeable


def test_hop_shift_consistency():
    x = np.random.default_rng(1).normal(size=8000)
    a = audio.logmel_array(x[160:])
    b = audio.logmel_array(x)
    assert np.allclose(a[:-1], b[1:a.shape[0]], atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(480, 32000))
def test_frame_count_formula(n):
    x = np.random.default_rng(n).normal(size=n) * 0.1
    assert audio.logmel_array(x).shape == ((n - 480) // 160 + 1, 40)


def test_fix_frames_and_normalize():
    v = np.arange(200 * 40, dtype=float).reshape(200, 40)
    assert np.array_equal(audio.fix_frames(v, 98), v[51:149])
    short = audio.fix_frames(np.ones((10, 40)), 98)
    assert short.shape == (98, 40) and short.sum() == 400
    n = audio.normalize(np.random.default_rng(0).normal(3, 2, size=(98, 40)))
    assert abs(n.mean()) < 1e-12 and abs(n.std() - 1) < 1e-12
    assert not audio.normalize(np.full((5, 5), 7.0)).any()


def test_mix_noise_probability_zero_is_identity():
    rng = np.random.default_rng(0)
    w = Waveform(rng.uniform(-0.5, 0.5, 1000))
    nz = Waveform(rng.normal(size=3000))
    out = audio.mix_noise(w, nz, 0.0, np.random.default_rng(1))
    assert np.array_equal(out.samples, w.samples)


def test_mix_noise_zero_gain_is_identity():
    rng = np.random.default_rng(0)
    w = Waveform(rng.uniform(-0.5, 0.5, 1000))
    nz = Waveform(rng.normal(size=3000))
    out = audio.mix_noise(w, nz, 1.0, np.random.default_rng(1), max_gain=0.0)
    assert np.array_equal(out.samples, w.samples)


def test_mix_noise_consumes_same_draws_either_way():
    w, nz = Waveform(np.zeros(100)), Waveform(np.ones(50))
    r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
    audio.mix_noise(w, nz, 0.0, r1)
    audio.mix_noise(w, nz, 1.0, r2)
    assert r1.random() == r2.random()


def test_mix_noise_application_rate():
    rng = np.random.default_rng(123)
    w, nz = Waveform(np.zeros(200)), Waveform(np.ones(400))
    applied = sum(audio.mix_noise(w, nz, 0.8, rng).samples.any() for _ in range(10_000))
    # gain is U(0, 0.1) so an applied mix is nonzero almost surely
    assert abs(applied - 8000) <= 120


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_mix_noise_stays_in_range(seed):
    rng = np.random.default_rng(seed)
    w = Waveform(rng.uniform(-1, 1, 800))
    nz = Waveform(rng.uniform(-5, 5, 300))
    out = audio.mix_noise(w, nz, 1.0, rng, max_gain=0.1)
    assert out.samples.min() >= -1 and out.samples.max() <= 1


def test_featuremap_cache_format(tmp_path):
    fm = audio.logmel(Waveform(np.random.default_rng(0).normal(size=4000) * 0.1))
    audio.write_featuremap(tmp_path / "f.bin", fm)
    raw = (tmp_path / "f.bin").read_bytes()
    assert raw[:4] == b"PKWF"
    bins, frames = struct.unpack("<II", raw[4:12])
    assert (bins, frames) == (40, fm.frames)
    assert np.array_equal(np.frombuffer(raw[12:], "<f8").reshape(frames, bins), fm.values)
    assert np.array_equal(audio.read_featuremap(tmp_path / "f.bin").values, fm.values)


def test_logmel_meta_records_configuration():
    fm = audio.logmel(Waveform(np.zeros(480)), LogMelConfig())
    assert fm.meta["window"] == 480 and fm.meta["hop"] == 160 and fm.meta["n_fft"] == 512
