"""Deterministic synthetic keyword corpus.

Keywords are sequences of sub-word "units" drawn from a shared inventory.
Each unit is a seeded spectral template (harmonic with formant peaks, or a
noise band).  In-domain command clips (1 s, channel filter A) and auxiliary
read-speech utterances (several words in a row, channel filter B, word-level
manifest) are rendered from the same inventory, which reproduces the
vocabulary overlap and channel gap between a command corpus and audiobooks.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import butter, lfilter, sosfilt

from .audio import SAMPLE_RATE, Waveform, save_wav
from .data import (AUXILIARY, IN_DOMAIN, SILENCE, ClipDataset, ManifestEntry, dataset_from_arrays,
                   update_index, write_manifest, write_split)

CONSONANTS = "kmtsnprlvzgdfhbjw"
VOWELS = "aeiou"
AFFIXES = {"s": "plural", "ed": "past", "un": "negative"}


@dataclass(frozen=True)
class SynthSpec:
    phoneme_inventory_size: int = 20
    units_per_keyword: tuple[int, int] = (3, 5)
    unit_ms: tuple[int, int] = (60, 120)
    in_domain_filter: str = "A"
    aux_filter: str = "B"
    n_train: int = 15
    n_val: int = 10
    n_test: int = 10
    clips_train: int = 100
    clips_val: int = 40
    clips_test: int = 60
    n_aux: int = 130
    n_aux_variants: int = 12
    aux_max_count: int = 500
    aux_zipf: float = 0.55
    aux_min_count: int = 10
    formant_scale: tuple[float, float] = (0.85, 1.15)
    rate: tuple[float, float] = (0.8, 1.25)
    unit_jitter: float = 0.08
    background_level: tuple[float, float] = (0.002, 0.004)
    minimal_pair_prob: float = 0.5
    train_speakers: int = 0
    train_unit_fraction: float = 1.0
    noise_files: int = 4
    noise_seconds: float = 3.0
    seed: int = 0
    train_keywords: tuple[str, ...] = ()
    val_keywords: tuple[str, ...] = ()
    test_keywords: tuple[str, ...] = ()
    aux_keywords: tuple[str, ...] = ()

    def __post_init__(self):
        if self.phoneme_inventory_size < len(AFFIXES) + 2:
            raise ValueError("phoneme inventory too small")
        sets = {"train": set(self.train_keywords), "val": set(self.val_keywords),
                "test": set(self.test_keywords), "aux": set(self.aux_keywords)}
        for (a, sa), (b, sb) in itertools.combinations(sets.items(), 2):
            common = sa & sb
            if common:
                raise ValueError(f"keyword sets {a} and {b} overlap: {sorted(common)}")


@dataclass
class UnitTemplate:
    name: str
    voiced: bool
    formants: list[float] = field(default_factory=list)
    bandwidths: list[float] = field(default_factory=list)
    amps: list[float] = field(default_factory=list)
    band: tuple[float, float] = (0.0, 0.0)
    f0_slope: float = 0.0
    base_ms: float = 90.0
    level: float = 1.0


def unit_names(size: int) -> list[str]:
    """``size - 3`` CV syllables followed by the affix units ``s``, ``ed``, ``un``."""
    core = size - len(AFFIXES)
    if core > len(CONSONANTS) * len(VOWELS):
        raise ValueError(f"inventory of {size} exceeds available syllables")
    nc = len(CONSONANTS)
    cv = [CONSONANTS[i % nc] + VOWELS[(i + i // nc) % len(VOWELS)] for i in range(core)]
    return cv + list(AFFIXES)


def make_inventory(spec: SynthSpec, rng: np.random.Generator) -> dict[str, UnitTemplate]:
    names = unit_names(spec.phoneme_inventory_size)
    lo_ms, hi_ms = spec.unit_ms
    inv = {}
    for name in names:
        if name == "s":
            inv[name] = UnitTemplate(name, False, band=(5200.0, 1400.0), base_ms=lo_ms + 10, level=0.6)
            continue
        if name == "ed":
            inv[name] = UnitTemplate(name, True, [450.0, 1700.0, 2600.0], [90, 120, 160], [1.0, 0.6, 0.3],
                                     base_ms=lo_ms, level=0.9)
            continue
        if name == "un":
            inv[name] = UnitTemplate(name, True, [300.0, 1100.0, 2300.0], [70, 110, 150], [1.0, 0.35, 0.15],
                                     base_ms=(lo_ms + hi_ms) / 2, level=0.8)
            continue
        voiced = rng.random() < 0.75
        base = float(rng.uniform(lo_ms, hi_ms))
        if voiced:
            f1 = rng.uniform(250, 900)
            f2 = rng.uniform(max(f1 + 300, 900), 2500)
            f3 = rng.uniform(max(f2 + 300, 2200), 3800)
            inv[name] = UnitTemplate(name, True, [f1, f2, f3], list(rng.uniform(60, 180, 3)),
                                     [1.0, float(rng.uniform(0.3, 0.9)), float(rng.uniform(0.1, 0.5))],
                                     f0_slope=float(rng.uniform(-0.25, 0.25)), base_ms=base,
                                     level=float(rng.uniform(0.7, 1.0)))
        else:
            inv[name] = UnitTemplate(name, False, band=(float(rng.uniform(1800, 7000)), float(rng.uniform(400, 1800))),
                                     base_ms=base, level=float(rng.uniform(0.4, 0.8)))
    return inv


def _envelope(n: int) -> np.ndarray:
    ramp = min(n // 4, int(0.01 * SAMPLE_RATE))
    env = np.ones(n)
    if ramp > 0:
        r = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = r
        env[n - ramp:] = r[::-1]
    return env


def _resonator(f: float, bw: float) -> tuple[np.ndarray, np.ndarray]:
    r = np.exp(-np.pi * bw / SAMPLE_RATE)
    theta = 2 * np.pi * f / SAMPLE_RATE
    return np.array([1.0 - r]), np.array([1.0, -2.0 * r * np.cos(theta), r * r])


def render_unit(t: UnitTemplate, n: int, pitch: float, rng: np.random.Generator, formant_scale: float = 1.0,
                jitter: float = 0.0) -> np.ndarray:
    if t.voiced:
        # glottal pulse train through parallel formant resonators
        f0 = 125.0 * pitch * (1.0 + t.f0_slope * np.linspace(-0.5, 0.5, n))
        cycles = rng.random() + np.cumsum(f0) / SAMPLE_RATE
        exc = np.zeros(n)
        exc[1:][np.diff(np.floor(cycles)) > 0] = 1.0
        exc += 0.01 * rng.standard_normal(n)
        sig = np.zeros(n)
        for f, bw, a in zip(t.formants, t.bandwidths, t.amps):
            f = f * formant_scale * (1.0 + jitter * rng.standard_normal())
            b, den = _resonator(float(np.clip(f, 100.0, 7600.0)), bw)
            sig += a * lfilter(b, den, exc)
    else:
        white = rng.standard_normal(n)
        spec = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
        centre = t.band[0] * formant_scale * (1.0 + jitter * rng.standard_normal())
        width = t.band[1]
        spec *= np.exp(-0.5 * ((freqs - centre) / width) ** 2)
        sig = np.fft.irfft(spec, n)
    rms = np.sqrt(np.mean(sig ** 2)) or 1.0
    return t.level * sig / rms * _envelope(n)


@dataclass(frozen=True)
class Voice:
    """Per-clip speaker traits."""

    pitch: float = 1.0
    formant_scale: float = 1.0
    rate: float = 1.0


def draw_voice(spec: SynthSpec, rng: np.random.Generator) -> Voice:
    return Voice(float(rng.uniform(0.9, 1.1)), float(rng.uniform(*spec.formant_scale)), float(rng.uniform(*spec.rate)))


def render_word(units: list[str], inventory: dict[str, UnitTemplate], voice: Voice,
                rng: np.random.Generator, jitter: float = 0.0) -> np.ndarray:
    parts = []
    for u in units:
        t = inventory[u]
        n = int(round(t.base_ms / voice.rate * rng.uniform(0.85, 1.15) * SAMPLE_RATE / 1000.0))
        parts.append(render_unit(t, n, voice.pitch, rng, voice.formant_scale, jitter))
    word = np.concatenate(parts)
    return word / np.abs(word).max()


def channel_filter(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "A":
        sos = butter(2, 150.0, "highpass", fs=SAMPLE_RATE, output="sos")
        y = sosfilt(sos, x)
        return y + 0.3 * np.concatenate([[0.0], np.diff(y)])
    if kind == "B":
        sos = butter(4, [250.0, 4000.0], "bandpass", fs=SAMPLE_RATE, output="sos")
        return sosfilt(sos, x)
    raise ValueError(f"unknown channel filter {kind!r}")


def background(n: int, level: float, rng: np.random.Generator) -> np.ndarray:
    return level * rng.standard_normal(n)


def make_noise(kind: int, seconds: float, rng: np.random.Generator) -> np.ndarray:
    """Seeded stand-ins for recorded background noise, RMS 0.2."""
    n = int(seconds * SAMPLE_RATE)
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.maximum(np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE), 20.0)
    shape = [f ** -0.5, f ** -1.0, np.exp(-0.5 * ((f - 1500.0) / 900.0) ** 2) + 0.05,
             np.ones_like(f)][kind % 4]
    x = np.fft.irfft(spec * shape, n)
    if kind % 4 == 3:
        t = np.arange(n) / SAMPLE_RATE
        x = 0.3 * x + np.sin(2 * np.pi * 60.0 * t) + 0.5 * np.sin(2 * np.pi * 180.0 * t)
    return 0.2 * x / np.sqrt(np.mean(x ** 2))


# vocabulary ------------------------------------------------------------------

def _draw_keywords(count: int, core: list[str], spec: SynthSpec, taken: set[tuple[str, ...]],
                   rng: np.random.Generator) -> list[tuple[str, ...]]:
    out = []
    lo, hi = spec.units_per_keyword
    while len(out) < count:
        if out and rng.random() < spec.minimal_pair_prob:
            # a near neighbour of an earlier word: one unit substituted
            seq = list(out[int(rng.integers(len(out)))])
            seq[int(rng.integers(len(seq)))] = core[int(rng.integers(len(core)))]
            seq = tuple(seq)
        else:
            n = int(rng.integers(lo, hi + 1))
            seq = tuple(core[i] for i in rng.choice(len(core), size=n, replace=True))
        if seq in taken or any(a == b for a, b in zip(seq, seq[1:])):
            continue
        taken.add(seq)
        out.append(seq)
    return out


def spell(units) -> str:
    return "".join(units)


def parse_units(word: str, inventory_names: list[str]) -> tuple[str, ...]:
    """Greedy longest-match split of a spelling into inventory units."""
    names = sorted(inventory_names, key=len, reverse=True)
    units, i = [], 0
    while i < len(word):
        for nm in names:
            if word.startswith(nm, i):
                units.append(nm)
                i += len(nm)
                break
        else:
            raise ValueError(f"cannot spell {word!r} from the unit inventory")
    return tuple(units)


@dataclass
class SynthCorpus:
    spec: SynthSpec
    inventory: dict[str, UnitTemplate]
    vocab: dict[str, list[str]]
    units: dict[str, tuple[str, ...]]
    in_domain: dict[str, ClipDataset]
    noises: list[Waveform]
    manifest: list[ManifestEntry]
    utterances: dict[str, np.ndarray]
    aux_counts: dict[str, int]


def synth_build(spec: SynthSpec = SynthSpec(), out_dir=None) -> SynthCorpus:
    """Render the corpus; when ``out_dir`` is given also write WAVs, manifest and index."""
    rng = np.random.default_rng(spec.seed)
    inv_rng, vocab_rng, clip_rng, aux_rng, noise_rng = (np.random.default_rng(s)
                                                        for s in np.random.SeedSequence(spec.seed).spawn(5))
    del rng
    inventory = make_inventory(spec, inv_rng)
    names = list(inventory)
    core = [n for n in names if n not in AFFIXES]

    taken: set[tuple[str, ...]] = set()
    explicit = {"train": spec.train_keywords, "val": spec.val_keywords, "test": spec.test_keywords,
                "aux": spec.aux_keywords}
    counts = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test, "aux": spec.n_aux}
    seqs: dict[str, list[tuple[str, ...]]] = {}
    for part in ("train", "val", "test", "aux"):
        if explicit[part]:
            seqs[part] = [parse_units(w, names) for w in explicit[part]]
            taken.update(seqs[part])
    # command words may cover only part of the unit inventory; the other parts see all of it
    n_sub = max(2, int(round(spec.train_unit_fraction * len(core))))
    train_core = sorted(vocab_rng.choice(core, size=n_sub, replace=False).tolist()) if n_sub < len(core) else core
    for part in ("train", "val", "test", "aux"):
        if part not in seqs:
            pool = train_core if part == "train" else core
            seqs[part] = _draw_keywords(counts[part], pool, spec, taken, vocab_rng)

    # morphological variants of some auxiliary words, kept as separate words
    variants = []
    for base in vocab_rng.permutation(len(seqs["aux"]))[:spec.n_aux_variants]:
        w = seqs["aux"][base]
        affix = list(AFFIXES)[int(vocab_rng.integers(len(AFFIXES)))]
        v = ("un",) + w if affix == "un" else w + (affix,)
        if v not in taken:
            taken.add(v)
            variants.append(v)
    aux_seqs = seqs["aux"] + variants

    units = {spell(s): s for part in seqs.values() for s in part}
    units.update({spell(s): s for s in variants})
    vocab = {part: [spell(s) for s in seqs[part]] for part in ("train", "val", "test")}
    vocab["aux"] = [spell(s) for s in aux_seqs]
    for part in vocab:
        if len(set(vocab[part])) != len(vocab[part]):
            raise ValueError(f"duplicate spellings in the {part} vocabulary")

    # in-domain command clips
    n_clip = int(SAMPLE_RATE * 1.0)
    splits = {"train": spec.clips_train, "val": spec.clips_val, "test": spec.clips_test}
    raw: dict[str, dict[str, list[np.ndarray]]] = {}
    # a command corpus has few speakers per training word; 0 means a fresh voice per clip
    pool = [draw_voice(spec, clip_rng) for _ in range(spec.train_speakers)]
    for split, per_kw in splits.items():
        raw[split] = {}
        for word in vocab[split] + [SILENCE]:
            clips = []
            for _ in range(per_kw):
                x = background(n_clip, float(clip_rng.uniform(*spec.background_level)), clip_rng)
                if word == SILENCE:
                    x = x * float(clip_rng.uniform(1.0, 3.0))
                else:
                    if split == "train" and pool:
                        voice = pool[int(clip_rng.integers(len(pool)))]
                    else:
                        voice = draw_voice(spec, clip_rng)
                    gain = float(clip_rng.uniform(0.7, 1.0))
                    w = render_word(list(units[word]), inventory, voice, clip_rng, spec.unit_jitter) * 0.5 * gain
                    if w.size > n_clip - 800:
                        w = w[:n_clip - 800]
                    start = int(clip_rng.integers(400, n_clip - w.size - 400 + 1))
                    x[start:start + w.size] += w
                x = np.clip(channel_filter(spec.in_domain_filter, x), -1.0, 1.0)
                clips.append(_quantize(x))
            raw[split][word] = clips

    # auxiliary read-speech utterances with word alignments
    ranks = aux_rng.permutation(len(aux_seqs))
    aux_counts = {}
    for r, i in enumerate(ranks, start=1):
        aux_counts[vocab["aux"][i]] = max(spec.aux_min_count, int(round(spec.aux_max_count * r ** -spec.aux_zipf)))
    bag = [w for w in vocab["aux"] for _ in range(aux_counts[w])]
    bag = [bag[i] for i in aux_rng.permutation(len(bag))]
    manifest, utterances = [], {}
    pos, u = 0, 0
    while pos < len(bag):
        n_words = int(aux_rng.integers(6, 13))
        words = bag[pos:pos + n_words]
        pos += n_words
        uid = f"utt{u:05d}"
        u += 1
        voice = draw_voice(spec, aux_rng)
        pieces, t = [np.zeros(int(0.1 * SAMPLE_RATE))], int(0.1 * SAMPLE_RATE)
        spans = []
        for w in words:
            sig = render_word(list(units[w]), inventory, voice, aux_rng, spec.unit_jitter)
            sig = sig * 0.5 * float(aux_rng.uniform(0.7, 1.0))
            spans.append((w, t, t + sig.size))
            gap = np.zeros(int(aux_rng.uniform(0.05, 0.25) * SAMPLE_RATE))
            pieces += [sig, gap]
            t += sig.size + gap.size
        pieces.append(np.zeros(int(0.1 * SAMPLE_RATE)))
        x = np.concatenate(pieces)
        x = x + background(x.size, float(aux_rng.uniform(*spec.background_level)), aux_rng)
        x = np.clip(channel_filter(spec.aux_filter, x), -1.0, 1.0)
        utterances[uid] = _quantize(x)
        rel = f"aux_corpus/{uid}.wav"
        manifest += [ManifestEntry(uid, rel, w, a / SAMPLE_RATE, b / SAMPLE_RATE) for w, a, b in spans]

    noises = [Waveform(_quantize(make_noise(k, spec.noise_seconds, noise_rng)), SAMPLE_RATE, f"noise{k}")
              for k in range(spec.noise_files)]

    in_domain = {split: dataset_from_arrays(raw[split], IN_DOMAIN, split) for split in splits}
    corpus = SynthCorpus(spec, inventory, vocab, units, in_domain, noises, manifest, utterances, aux_counts)
    if out_dir is not None:
        write_corpus(corpus, raw, out_dir)
    return corpus


def _quantize(x: np.ndarray) -> np.ndarray:
    """Round to the PCM16 grid so in-memory and on-disk corpora agree exactly."""
    return np.clip(np.round(x * 32768.0), -32768, 32767) / 32768.0


def write_corpus(corpus: SynthCorpus, raw, out_dir) -> None:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for split, clips in raw.items():
        listing = write_split(root, IN_DOMAIN, split, clips)
        update_index(root, IN_DOMAIN, split, listing)
    for uid, x in corpus.utterances.items():
        save_wav(root / "aux_corpus" / f"{uid}.wav", x)
    write_manifest(root / "aux_corpus" / "manifest.csv",
                   [ManifestEntry(e.utterance_id, Path(e.audio_path).name, e.word, e.start_s, e.end_s)
                    for e in corpus.manifest])
    for k, nz in enumerate(corpus.noises):
        save_wav(root / "noise" / f"noise{k}.wav", nz.samples)
    meta = {"spec": asdict(corpus.spec), "vocab": corpus.vocab, "aux_counts": corpus.aux_counts}
    (root / "synth.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_noises(root) -> list[Waveform]:
    from .audio import load_wav
    return [load_wav(p) for p in sorted((Path(root) / "noise").glob("*.wav"))]


__all__ = ["SynthSpec", "SynthCorpus", "synth_build", "load_noises", "AUXILIARY"]
