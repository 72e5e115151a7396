"""Clip datasets, open-set episode sampling, auxiliary batches and manifests."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .audio import LogMelConfig, Waveform, encoder_input, load_wav, mix_noise, save_wav

SILENCE = "_silence_"
IN_DOMAIN = "in_domain"
AUXILIARY = "auxiliary"


@dataclass
class LabeledClip:
    samples: np.ndarray
    keyword: str
    keyword_id: int
    domain: str = IN_DOMAIN
    split: str = "train"
    path: str = ""


class ClipDataset:
    """An immutable pool of clips with integer keyword ids 0..len(vocabulary)-1.

    Waveforms are kept as float32, which is exact for PCM16-sourced audio.
    Encoder inputs (normalised, 98-frame log-mel maps) are computed on first
    use and cached.
    """

    def __init__(self, clips: list[LabeledClip], vocabulary: list[str], name: str = ""):
        self.name = name
        self.vocabulary = list(vocabulary)
        self.waves = [np.asarray(c.samples, dtype=np.float32) for c in clips]
        self.labels = np.array([c.keyword_id for c in clips], dtype=np.int64)
        self.domains = [c.domain for c in clips]
        self.splits = [c.split for c in clips]
        self.paths = [c.path for c in clips]
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.vocabulary)):
            raise ValueError(f"dataset {name!r}: keyword id outside vocabulary of {len(self.vocabulary)}")
        self._features: np.ndarray | None = None
        self._by_class = [np.flatnonzero(self.labels == k) for k in range(len(self.vocabulary))]

    def __len__(self):
        return self.labels.size

    @property
    def num_classes(self) -> int:
        return len(self.vocabulary)

    def class_members(self, k: int) -> np.ndarray:
        return self._by_class[k]

    def class_sizes(self) -> np.ndarray:
        return np.array([m.size for m in self._by_class])

    def keywords(self, include_silence: bool = True) -> set[str]:
        return {w for w in self.vocabulary if include_silence or w != SILENCE}

    def features(self, indices=None) -> np.ndarray:
        if self._features is None:
            feats = np.empty((len(self), 98, 40), dtype=np.float32)
            for i, w in enumerate(self.waves):
                feats[i] = encoder_input(w.astype(np.float64))
            self._features = feats
        if indices is None:
            return self._features.astype(np.float64)
        return self._features[np.asarray(indices)].astype(np.float64)

    def augmented_features(self, indices, noises: list[Waveform], apply_prob: float,
                           rng: np.random.Generator) -> np.ndarray:
        """Encoder inputs after background-noise mixing (one noise choice per clip)."""
        out = np.empty((len(indices), 98, 40))
        for row, i in enumerate(indices):
            pick = int(rng.integers(len(noises)))
            wave = Waveform(self.waves[i].astype(np.float64), source_id=self.paths[i])
            out[row] = encoder_input(mix_noise(wave, noises[pick], apply_prob, rng).samples)
        return out

    def union(self, other: "ClipDataset", name: str = "") -> "ClipDataset":
        """Concatenate two datasets; ``other``'s ids are shifted past ours."""
        merged = ClipDataset.__new__(ClipDataset)
        merged.name = name or f"{self.name}+{other.name}"
        merged.vocabulary = self.vocabulary + other.vocabulary
        merged.waves = self.waves + other.waves
        merged.labels = np.concatenate([self.labels, other.labels + self.num_classes])
        merged.domains = self.domains + other.domains
        merged.splits = self.splits + other.splits
        merged.paths = self.paths + other.paths
        merged._features = None
        if self._features is not None and other._features is not None:
            merged._features = np.concatenate([self._features, other._features])
        merged._by_class = [np.flatnonzero(merged.labels == k) for k in range(merged.num_classes)]
        return merged


# episodes --------------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeSpec:
    n_closed: int = 5
    n_open: int = 5
    k_shot: int = 5
    m_query: int = 5

    def __post_init__(self):
        if self.n_closed < 2:
            raise ValueError(f"n_closed must be >= 2, got {self.n_closed}")
        if self.n_open < 0 or self.k_shot < 1 or self.m_query < 1:
            raise ValueError(f"invalid episode spec {self}")


@dataclass
class Episode:
    """Indices into a dataset; labels are 1..N for closed classes and N+1 for open ones."""

    spec: EpisodeSpec
    classes: np.ndarray
    support: np.ndarray
    support_labels: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray


class EpisodeError(ValueError):
    pass


def sample_episode(dataset: ClipDataset, spec: EpisodeSpec, rng: np.random.Generator,
                   classes: np.ndarray | None = None) -> Episode:
    """Draw N closed + open classes without replacement, then clips per class without replacement."""
    pool = np.arange(dataset.num_classes) if classes is None else np.asarray(classes)
    need = spec.n_closed + spec.n_open
    if pool.size < need:
        raise EpisodeError(f"episode needs {need} classes, dataset has {pool.size} (short by {need - pool.size})")
    chosen = rng.choice(pool, size=need, replace=False)
    support, support_labels, query, query_labels = [], [], [], []
    for pos, k in enumerate(chosen):
        members = dataset.class_members(int(k))
        is_closed = pos < spec.n_closed
        want = spec.k_shot + spec.m_query if is_closed else spec.m_query
        if members.size < want:
            raise EpisodeError(f"class {dataset.vocabulary[k]!r} has {members.size} clips, "
                               f"episode needs {want} (short by {want - members.size})")
        picked = rng.choice(members, size=want, replace=False)
        if is_closed:
            support.extend(picked[:spec.k_shot])
            support_labels.extend([pos + 1] * spec.k_shot)
            query.extend(picked[spec.k_shot:])
            query_labels.extend([pos + 1] * spec.m_query)
        else:
            query.extend(picked)
            query_labels.extend([spec.n_closed + 1] * spec.m_query)
    as_int = lambda v: np.asarray(v, dtype=np.int64)  # noqa: E731
    return Episode(spec, as_int(chosen), as_int(support), as_int(support_labels), as_int(query), as_int(query_labels))


def sample_aux_batch(dataset: ClipDataset, batch_size: int, rng: np.random.Generator
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Uniform draw with replacement over clips: (indices, keyword ids)."""
    if len(dataset) == 0:
        raise EpisodeError("auxiliary dataset is empty")
    idx = rng.integers(0, len(dataset), size=batch_size)
    return idx, dataset.labels[idx]


# manifests -------------------------------------------------------------------

MANIFEST_HEADER = ["utterance_id", "audio_path", "word", "start_s", "end_s"]


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    audio_path: str
    word: str
    start_s: float
    end_s: float

    @property
    def duration(self) -> float:
        return self.end_s - self.start_s


class ManifestError(ValueError):
    pass


class ManifestRead(NamedTuple):
    entries: list[ManifestEntry]
    rejected: list[tuple[int, str]]


def ingest_manifest(path) -> ManifestRead:
    """Parse a word-alignment CSV; rows with start >= end are rejected, not fatal."""
    entries, rejected = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(f"{path}:1: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 5:
                raise ManifestError(f"{path}:{line}: expected 5 fields, got {len(row)}")
            utt, audio, word, start, end = (x.strip() for x in row)
            try:
                start_s, end_s = float(start), float(end)
            except ValueError:
                raise ManifestError(f"{path}:{line}: non-numeric time in {row}") from None
            if not word or not utt:
                raise ManifestError(f"{path}:{line}: empty utterance id or word")
            if start_s < 0 or start_s >= end_s:
                rejected.append((line, f"start_s={start_s} end_s={end_s}"))
                continue
            entries.append(ManifestEntry(utt, audio, word.lower(), start_s, end_s))
    return ManifestRead(entries, rejected)


def write_manifest(path, entries) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for e in entries:
            w.writerow([e.utterance_id, e.audio_path, e.word, repr(float(e.start_s)), repr(float(e.end_s))])


# directory layout --------------------------------------------------------------

def clip_relpath(domain: str, split: str, keyword: str, clip_name: str) -> str:
    return f"{domain}/{split}/{keyword}/{clip_name}.wav"


def write_split(root, domain: str, split: str, clips: dict[str, list[np.ndarray]]) -> dict[str, list[str]]:
    """Write ``<root>/<domain>/<split>/<keyword>/<nnnn>.wav`` and return keyword -> paths."""
    root = Path(root)
    listing = {}
    for kw in sorted(clips):
        listing[kw] = []
        for n, samples in enumerate(clips[kw]):
            rel = clip_relpath(domain, split, kw, f"{n:04d}")
            save_wav(root / rel, samples)
            listing[kw].append(rel)
    return listing


def update_index(root, domain: str, split: str, listing: dict[str, list[str]]) -> None:
    path = Path(root) / "index.json"
    index = json.loads(path.read_text()) if path.exists() else {}
    index.setdefault(domain, {})[split] = listing
    path.write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")


def load_split(root, domain: str, split: str, name: str = "") -> ClipDataset:
    """Load one split listed in ``<root>/index.json``."""
    root = Path(root)
    index_path = root / "index.json"
    if not index_path.exists():
        raise FileNotFoundError(f"no dataset index at {index_path}")
    index = json.loads(index_path.read_text())
    try:
        listing = index[domain][split]
    except KeyError:
        raise KeyError(f"{index_path}: no {domain}/{split} entry") from None
    vocab = sorted(listing)
    clips = []
    for k, kw in enumerate(vocab):
        for rel in listing[kw]:
            wave = load_wav(root / rel)
            clips.append(LabeledClip(wave.samples, kw, k, domain, split, rel))
    return ClipDataset(clips, vocab, name or f"{domain}/{split}")


def dataset_from_arrays(clips: dict[str, list[np.ndarray]], domain: str, split: str, name: str = "") -> ClipDataset:
    vocab = sorted(clips)
    items = [LabeledClip(s, kw, k, domain, split) for k, kw in enumerate(vocab) for s in clips[kw]]
    return ClipDataset(items, vocab, name or f"{domain}/{split}")
