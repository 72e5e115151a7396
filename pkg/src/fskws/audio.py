"""Waveform I/O, 40-bin log-mel features and background-noise augmentation."""
from __future__ import annotations

import io
import struct
import wave
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

SAMPLE_RATE = 16000
FEATURE_MAGIC = b"PKWF"


class WavFormatError(ValueError):
    """A WAV file is not PCM16 mono 16 kHz."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError(f"waveform {self.source_id!r}: expected non-empty 1-D samples")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"waveform {self.source_id!r}: sample_rate={self.sample_rate}, expected {SAMPLE_RATE}")

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True)
class LogMelConfig:
    window: int = 480
    hop: int = 160
    n_fft: int = 512
    mel_bins: int = 40
    fmin: float = 20.0
    fmax: float = 8000.0
    floor: float = 1e-10


@dataclass
class FeatureMap:
    """Log-mel energies, shape (frames, bins)."""

    values: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]


# wav io ----------------------------------------------------------------------

def load_wav(path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate = w.getnchannels(), w.getsampwidth(), w.getframerate()
            if channels != 1:
                raise WavFormatError(f"{path}: channels={channels}, expected 1")
            if width != 2:
                raise WavFormatError(f"{path}: sample_width={width * 8} bits, expected 16 (PCM16)")
            if rate != SAMPLE_RATE:
                raise WavFormatError(f"{path}: sample_rate={rate}, expected {SAMPLE_RATE}")
            raw = w.readframes(w.getnframes())
    except wave.Error as exc:
        raise WavFormatError(f"{path}: encoding not PCM ({exc})") from None
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, SAMPLE_RATE, str(path))


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")


def wav_bytes(samples: np.ndarray) -> bytes:
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(to_pcm16(samples).tobytes())
    return buf.getvalue()


def save_wav(path, samples: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(wav_bytes(samples))


# features ----------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(config: LogMelConfig = LogMelConfig()) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.mel_bins + 2))
    return edges[1:-1]


@lru_cache(maxsize=8)
def mel_filterbank(config: LogMelConfig = LogMelConfig()) -> np.ndarray:
    """Unit-peak triangular filters, shape (mel_bins, n_fft // 2 + 1)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.mel_bins + 2))
    freqs = np.arange(config.n_fft // 2 + 1) * SAMPLE_RATE / config.n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def num_frames(n_samples: int, config: LogMelConfig = LogMelConfig()) -> int:
    return (n_samples - config.window) // config.hop + 1


def logmel_array(samples: np.ndarray, config: LogMelConfig = LogMelConfig()) -> np.ndarray:
    """Log-mel matrix (frames, bins) for a 1-D sample array."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < config.window:
        raise ValueError(f"logmel: {samples.size} samples is shorter than the {config.window}-sample window")
    frames = sliding_window_view(samples, config.window)[::config.hop]
    win = get_window("hann", config.window)
    mag = np.abs(np.fft.rfft(frames * win, n=config.n_fft, axis=-1))
    energy = mag @ mel_filterbank(config).T
    return np.log(np.maximum(energy, config.floor))


def logmel(wave: Waveform, config: LogMelConfig = LogMelConfig()) -> FeatureMap:
    values = logmel_array(wave.samples, config)
    meta = {"window": config.window, "hop": config.hop, "n_fft": config.n_fft,
            "mel_bins": config.mel_bins, "source_id": wave.source_id}
    return FeatureMap(values, meta)


def normalize(values: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance over the whole map (constant maps map to zeros)."""
    centred = values - values.mean()
    sd = centred.std()
    return centred / sd if sd > 1e-12 else centred


def fix_frames(values: np.ndarray, frames: int = 98) -> np.ndarray:
    """Center-crop or zero-pad along time to exactly ``frames`` rows."""
    n = values.shape[0]
    if n == frames:
        return values
    if n > frames:
        start = (n - frames) // 2
        return values[start:start + frames]
    out = np.zeros((frames,) + values.shape[1:], dtype=values.dtype)
    start = (frames - n) // 2
    out[start:start + n] = values
    return out


def encoder_input(samples: np.ndarray, frames: int = 98, config: LogMelConfig = LogMelConfig()) -> np.ndarray:
    """Waveform -> normalised, fixed-length log-mel map ready for the encoder."""
    return fix_frames(normalize(logmel_array(samples, config)), frames)


# augmentation --------------------------------------------------------------------

def mix_noise(wave: Waveform, noise: Waveform, apply_prob: float, rng: np.random.Generator,
              max_gain: float = 0.1) -> Waveform:
    """Add a random crop of ``noise`` with probability ``apply_prob``.

    Three draws are taken from ``rng`` on every call (apply flag, gain, crop
    offset) so the stream advances identically whether or not noise is added.
    """
    if not 0.0 <= apply_prob <= 1.0:
        raise ValueError(f"mix_noise: apply_prob={apply_prob} outside [0, 1]")
    n = len(wave)
    u = rng.random()
    gain = rng.uniform(0.0, max_gain)
    src = noise.samples
    if src.size < n:
        src = np.tile(src, -(-n // src.size))
    offset = int(rng.integers(0, src.size - n + 1))
    if u >= apply_prob:
        return wave
    mixed = np.clip(wave.samples + gain * src[offset:offset + n], -1.0, 1.0)
    return Waveform(mixed, wave.sample_rate, wave.source_id)


# feature cache -------------------------------------------------------------------

def write_featuremap(path, fmap: FeatureMap) -> None:
    """Little-endian: magic, u32 bins, u32 frames, then (frames, bins) float64 row-major."""
    vals = np.ascontiguousarray(fmap.values, dtype="<f8")
    header = FEATURE_MAGIC + struct.pack("<II", fmap.bins, fmap.frames)
    Path(path).write_bytes(header + vals.tobytes())


def read_featuremap(path) -> FeatureMap:
    data = Path(path).read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: bad feature-map magic {data[:4]!r}")
    bins, frames = struct.unpack("<II", data[4:12])
    payload = data[12:]
    if len(payload) != 8 * bins * frames:
        raise ValueError(f"{path}: truncated feature map ({len(payload)} payload bytes, "
                         f"expected {8 * bins * frames})")
    return FeatureMap(np.frombuffer(payload, dtype="<f8").reshape(frames, bins).copy())
