"""Build a balanced word-clip auxiliary dataset from forced-alignment manifests.

Pipeline: duration filter -> morphological de-duplication -> exclusion of
target-domain keywords -> top-k ranking with S clips per keyword (or the
imbalanced retain-all variant) -> segment cutting.
"""
from __future__ import annotations

import csv
import io
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, load_wav, save_wav
from .data import (AUXILIARY, ClipDataset, ManifestEntry, clip_relpath, dataset_from_arrays, ingest_manifest,
                   update_index, write_manifest)

log = logging.getLogger(__name__)

DEFAULT_SUFFIXES = ("s", "es", "ed", "d", "ing")
DEFAULT_PREFIXES = ("un", "in", "non")
# float subtraction of alignment times may land a hair outside a bound
_EPS = 1e-9


@dataclass
class ForgeConfig:
    top_k: int = 1000
    samples_per_keyword: int = 300
    duration_bounds: tuple[float, float] = (0.3, 2.2)
    exclusion_list: tuple[str, ...] = ()
    suffixes: tuple[str, ...] = DEFAULT_SUFFIXES
    prefixes: tuple[str, ...] = DEFAULT_PREFIXES
    balanced: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.top_k < 1 or self.samples_per_keyword < 1:
            raise ValueError("top_k and samples_per_keyword must be >= 1")
        lo, hi = self.duration_bounds
        if not lo < hi:
            raise ValueError(f"duration bounds must satisfy min < max, got {self.duration_bounds}")

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "ForgeConfig":
        words = lambda s: tuple(w.strip().lower() for w in s.split(",") if w.strip())  # noqa: E731
        cfg = {}
        for key, value in kv.items():
            if key == "top_k":
                cfg["top_k"] = int(value)
            elif key in ("samples_per_keyword", "S"):
                cfg["samples_per_keyword"] = int(value)
            elif key == "min_duration":
                cfg["duration_bounds"] = (float(value), cfg.get("duration_bounds", (0.3, 2.2))[1])
            elif key == "max_duration":
                cfg["duration_bounds"] = (cfg.get("duration_bounds", (0.3, 2.2))[0], float(value))
            elif key == "exclude":
                cfg["exclusion_list"] = words(value)
            elif key == "suffixes":
                cfg["suffixes"] = words(value)
            elif key == "prefixes":
                cfg["prefixes"] = words(value)
            elif key == "balanced":
                cfg["balanced"] = value.strip().lower() in ("1", "true", "yes")
            elif key == "seed":
                cfg["seed"] = int(value)
            else:
                raise KeyError(f"unknown forge option {key!r}")
        return cls(**cfg)


@dataclass
class ForgeReport:
    stages: list[tuple[str, int, int]] = field(default_factory=list)
    keywords: list[str] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)
    dropped: list[tuple[str, str]] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def stage(self, name: str, n_in: int, n_out: int) -> None:
        self.stages.append((name, n_in, n_out))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "input", "output", "dropped"])
        for name, a, b in self.stages:
            w.writerow([name, a, b, a - b])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = ["forge report", ""]
        for name, a, b in self.stages:
            lines.append(f"{name:<28}{a:>10} -> {b:>10}  (dropped {a - b})")
        lines.append("")
        lines.append(f"keywords emitted: {len(self.keywords)}; clips: {sum(self.counts.values())}")
        lines += self.notes
        lines.append("")
        lines.append("dropped words:")
        lines += [f"  {w}: {why}" for w, why in self.dropped]
        return "\n".join(lines) + "\n"


def filter_duration(entries: list[ManifestEntry], bounds: tuple[float, float]) -> list[ManifestEntry]:
    """Keep entries whose duration lies in [min, max], both ends inclusive."""
    lo, hi = bounds
    return [e for e in entries if lo - _EPS <= e.end_s - e.start_s <= hi + _EPS]


def morphological_pairs(vocabulary, suffixes=DEFAULT_SUFFIXES, prefixes=DEFAULT_PREFIXES) -> list[tuple[str, str]]:
    vocab = set(vocabulary)
    pairs = []
    for w in sorted(vocab):
        for suf in suffixes:
            if w + suf in vocab:
                pairs.append((w, w + suf))
        for pre in prefixes:
            if pre + w in vocab:
                pairs.append((w, pre + w))
    return pairs


def remove_morphological_overlaps(vocabulary, rng: np.random.Generator, suffixes=DEFAULT_SUFFIXES,
                                  prefixes=DEFAULT_PREFIXES) -> tuple[list[str], list[tuple[str, str]]]:
    """Randomly keep one side of every related word pair.

    Related words form small graphs (a stem and its inflections).  Each
    component is visited in sorted order and its words in a seeded random
    order; a word is kept unless an already-kept word is related to it.
    Returns (survivors sorted, [(dropped word, reason)]).
    """
    vocab = sorted(set(vocabulary))
    pairs = morphological_pairs(vocab, suffixes, prefixes)
    nbrs: dict[str, set[str]] = defaultdict(set)
    for a, b in pairs:
        nbrs[a].add(b)
        nbrs[b].add(a)
    seen, kept, log_ = set(), set(), []
    for w in vocab:
        if w not in nbrs or w in seen:
            continue
        comp, stack = [], [w]
        seen.add(w)
        while stack:
            x = stack.pop()
            comp.append(x)
            for y in sorted(nbrs[x]):
                if y not in seen:
                    seen.add(y)
                    stack.append(y)
        comp.sort()
        for i in rng.permutation(len(comp)):
            x = comp[i]
            blocker = sorted(nbrs[x] & kept)
            if blocker:
                log_.append((x, f"morphological overlap with {blocker[0]!r}"))
            else:
                kept.add(x)
    survivors = [w for w in vocab if w not in nbrs or w in kept]
    return survivors, sorted(log_)


def exclude_keywords(vocabulary, exclusion_list) -> tuple[list[str], list[str], list[str]]:
    """Set difference; returns (survivors, excluded-and-present, excluded-but-absent)."""
    vocab = set(vocabulary)
    excl = {w.lower() for w in exclusion_list}
    present = sorted(vocab & excl)
    absent = sorted(excl - vocab)
    if absent:
        log.info("exclusion list words not in vocabulary: %s", ", ".join(absent))
    return sorted(vocab - excl), present, absent


def rank_keywords(counts: dict[str, int], top_k: int, min_count: int = 1) -> list[str]:
    """Most frequent first, ties broken lexicographically, then keep those with >= min_count."""
    ranked = sorted(counts, key=lambda w: (-counts[w], w))
    return [w for w in ranked if counts[w] >= min_count][:top_k]


def balance_topk(entries: list[ManifestEntry], top_k: int, samples: int, rng: np.random.Generator,
                 report: ForgeReport | None = None) -> list[ManifestEntry]:
    """Exactly ``samples`` uniformly chosen entries for each of the top_k qualifying keywords."""
    if not entries:
        raise ValueError("balance_topk: no entries")
    by_word = _group(entries)
    chosen = rank_keywords({w: len(v) for w, v in by_word.items()}, top_k, samples)
    if not chosen:
        raise ValueError(f"balance_topk: no keyword has >= {samples} samples")
    out = []
    for w in chosen:
        pool = by_word[w]
        pick = np.sort(rng.choice(len(pool), size=samples, replace=False))
        out += [pool[i] for i in pick]
    if report is not None:
        report.keywords = chosen
        report.counts = {w: samples for w in chosen}
        if len(chosen) < top_k:
            report.notes.append(f"shortfall: only {len(chosen)} keywords have >= {samples} samples "
                                f"(requested {top_k})")
    return out


def emit_imbalanced(entries: list[ManifestEntry], top_k: int, rng: np.random.Generator | None = None,
                    min_count: int = 1, report: ForgeReport | None = None) -> list[ManifestEntry]:
    """Same keyword ranking as :func:`balance_topk`, but every surviving sample is kept."""
    if not entries:
        raise ValueError("emit_imbalanced: no entries")
    by_word = _group(entries)
    chosen = rank_keywords({w: len(v) for w, v in by_word.items()}, top_k, min_count)
    if not chosen:
        raise ValueError(f"emit_imbalanced: no keyword has >= {min_count} samples")
    out = [e for w in chosen for e in by_word[w]]
    if report is not None:
        report.keywords = chosen
        report.counts = {w: len(by_word[w]) for w in chosen}
    return out


def _group(entries) -> dict[str, list[ManifestEntry]]:
    by_word: dict[str, list[ManifestEntry]] = defaultdict(list)
    for e in entries:
        by_word[e.word].append(e)
    return by_word


def clip_name(e: ManifestEntry) -> str:
    return f"{e.utterance_id}_{int(round(e.start_s * SAMPLE_RATE)):08d}"


def cut_segments(entries: list[ManifestEntry], audio_root, out_root, domain: str = AUXILIARY,
                 split: str = "train") -> tuple[dict[str, list[str]], list[str]]:
    """Cut ``[round(start*sr), round(end*sr))`` from each source file into its own WAV.

    Problems with one entry are logged and skipped.  Returns (keyword -> clip
    paths, error messages).
    """
    audio_root, out_root = Path(audio_root), Path(out_root)
    listing: dict[str, list[str]] = defaultdict(list)
    errors = []
    cache_path, cache = None, None
    for e in sorted(entries, key=lambda x: (x.audio_path, x.start_s, x.word)):
        src = audio_root / e.audio_path
        if cache_path != src:
            try:
                cache, cache_path = load_wav(src).samples, src
            except (OSError, ValueError) as exc:
                errors.append(f"{e.utterance_id} {e.word}: cannot read {src}: {exc}")
                cache_path, cache = src, None
                continue
        if cache is None:
            errors.append(f"{e.utterance_id} {e.word}: source {src} unavailable")
            continue
        a, b = int(round(e.start_s * SAMPLE_RATE)), int(round(e.end_s * SAMPLE_RATE))
        if b > cache.size or a >= b:
            errors.append(f"{e.utterance_id} {e.word}: segment [{a}, {b}) outside {cache.size} samples")
            continue
        rel = clip_relpath(domain, split, e.word, clip_name(e))
        save_wav(out_root / rel, cache[a:b])
        listing[e.word].append(rel)
    listing = {w: sorted(v) for w, v in sorted(listing.items())}
    return listing, errors


def dataset_from_entries(entries: list[ManifestEntry], audio, name: str = "auxiliary") -> ClipDataset:
    """Cut clips in memory; ``audio`` maps an entry's audio_path to its samples."""
    clips: dict[str, list[np.ndarray]] = defaultdict(list)
    for e in entries:
        x = audio[e.audio_path]
        a, b = int(round(e.start_s * SAMPLE_RATE)), int(round(e.end_s * SAMPLE_RATE))
        if b > len(x) or a >= b:
            raise ValueError(f"{e.utterance_id} {e.word}: segment [{a}, {b}) outside {len(x)} samples")
        clips[e.word].append(x[a:b])
    return dataset_from_arrays(dict(clips), AUXILIARY, "train", name)


def forge(entries: list[ManifestEntry], config: ForgeConfig) -> tuple[list[ManifestEntry], ForgeReport]:
    """Run the metadata stages; returns the selected entries and the stage report."""
    rng = np.random.default_rng(config.seed)
    report = ForgeReport()
    n0 = len(entries)
    kept = filter_duration(entries, config.duration_bounds)
    report.stage("duration filter", n0, len(kept))

    vocab = sorted({e.word for e in kept})
    survivors, dropped = remove_morphological_overlaps(vocab, rng, config.suffixes, config.prefixes)
    report.dropped += dropped
    keep_words = set(survivors)
    n1 = len(kept)
    kept = [e for e in kept if e.word in keep_words]
    report.stage("morphological filter", n1, len(kept))

    survivors, present, absent = exclude_keywords(keep_words, config.exclusion_list)
    report.dropped += [(w, "excluded target keyword") for w in present]
    if absent:
        report.notes.append(f"exclusion words absent from vocabulary: {', '.join(absent)}")
    keep_words = set(survivors)
    n2 = len(kept)
    kept = [e for e in kept if e.word in keep_words]
    report.stage("keyword exclusion", n2, len(kept))

    n3 = len(kept)
    if config.balanced:
        kept = balance_topk(kept, config.top_k, config.samples_per_keyword, rng, report)
        report.stage(f"top-{config.top_k} x {config.samples_per_keyword}", n3, len(kept))
    else:
        kept = emit_imbalanced(kept, config.top_k, rng, config.samples_per_keyword, report)
        report.stage(f"top-{config.top_k} (imbalanced)", n3, len(kept))
    report.notes.append("keywords ranked by frequency after all filters")
    return kept, report


def run_forge(manifest_path, config: ForgeConfig, out_dir, audio_root=None,
              metadata_only: bool = False) -> ForgeReport:
    """Full pipeline from a manifest CSV to ``<out>/auxiliary/train/...`` plus reports."""
    manifest_path, out_dir = Path(manifest_path), Path(out_dir)
    read = ingest_manifest(manifest_path)
    entries, report = forge(read.entries, config)
    if read.rejected:
        report.notes.append(f"manifest rows rejected: {len(read.rejected)} "
                            f"(first at line {read.rejected[0][0]}: {read.rejected[0][1]})")
    out_dir.mkdir(parents=True, exist_ok=True)
    if not metadata_only:
        listing, errors = cut_segments(entries, audio_root or manifest_path.parent, out_dir)
        report.notes += [f"cut error: {m}" for m in errors]
        update_index(out_dir, AUXILIARY, "train", listing)
        n = sum(len(v) for v in listing.values())
        report.stage("segment cutting", len(entries), n)
    write_manifest(out_dir / "forge_selected.csv", entries)
    (out_dir / "forge_report.txt").write_text(report.to_text())
    (out_dir / "forge_report.csv").write_text(report.to_csv())
    counts = Counter(e.word for e in entries)
    with open(out_dir / "forge_keywords.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["keyword", "samples"])
        for kw in report.keywords:
            w.writerow([kw, counts[kw]])
    return report
