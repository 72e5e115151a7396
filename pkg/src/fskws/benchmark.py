"""The desk-scale synthetic benchmark shared by the acceptance suite and the demos.

One corpus, one auxiliary word set forged from its read-speech manifest
(balanced and imbalanced variants), and a memoised train-then-evaluate
helper so several comparisons can reuse the same trained models.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .data import ClipDataset
from .forge import ForgeConfig, dataset_from_entries, forge
from .models import NAMED_CONFIGS
from .synth import SynthCorpus, SynthSpec, synth_build
from .trainer import EvalConfig, TrainConfig, evaluate, train

SPEC = SynthSpec()
AUX_TOP_K = 100
AUX_SAMPLES = 30
AUX_DURATION = (0.15, 2.2)
EPISODES_PER_EPOCH = 100


@dataclass
class Outcome:
    strategy: str
    width: str
    seed: int
    acc: dict[int, float]
    auroc: dict[int, float]
    best_epoch: int
    seconds: float


@lru_cache(maxsize=1)
def corpus() -> SynthCorpus:
    return synth_build(SPEC)


@lru_cache(maxsize=2)
def aux_words(balanced: bool = True) -> ClipDataset:
    """Forge the read-speech manifest into word clips; test keywords are excluded."""
    c = corpus()
    audio = {e.audio_path: c.utterances[e.utterance_id] for e in c.manifest}
    cfg = ForgeConfig(top_k=AUX_TOP_K, samples_per_keyword=AUX_SAMPLES, duration_bounds=AUX_DURATION,
                      exclusion_list=tuple(c.vocab["test"]), balanced=balanced)
    entries, _ = forge(c.manifest, cfg)
    return dataset_from_entries(entries, audio, "aux-balanced" if balanced else "aux-imbalanced")


@lru_cache(maxsize=None)
def run(strategy: str, width: str = "base", seed: int = 0, epochs: int = 30, balanced: bool = True,
        n_episodes: int = 1000, lam: float = 1.0) -> Outcome:
    """Train one model on the benchmark and evaluate it on the unseen test keywords."""
    c = corpus()
    cfg = TrainConfig(strategy=strategy, epochs=epochs, episodes_per_epoch=EPISODES_PER_EPOCH,
                      encoder=NAMED_CONFIGS[width], lam=lam, pret_epochs=10, pret_steps_per_epoch=EPISODES_PER_EPOCH)
    aux = aux_words(balanced) if cfg.needs_aux else None
    t0 = time.time()
    res = train(cfg, c.in_domain["train"], c.in_domain["val"], aux, c.noises, seed=seed)
    reports = evaluate(res.checkpoint, c.in_domain["test"], EvalConfig(n_episodes=n_episodes, seeds=(seed,)),
                       strategy)
    return Outcome(strategy, width, seed, {r.shots: r.accuracy[0] for r in reports},
                   {r.shots: r.auroc[0] for r in reports}, res.best_epoch, time.time() - t0)


def mean_over_seeds(outcomes: list[Outcome], shots: int = 5) -> tuple[float, float]:
    return (float(np.mean([o.acc[shots] for o in outcomes])), float(np.mean([o.auroc[shots] for o in outcomes])))
