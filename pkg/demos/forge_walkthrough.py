"""Forge the synthetic read-speech manifest into a balanced word-clip set.

Builds a small corpus in memory, runs the four forge stages and prints the
stage report, then shows how the imbalanced variant differs.

    python demos/forge_walkthrough.py
"""
from collections import Counter

from fskws.forge import ForgeConfig, forge
from fskws.synth import SynthSpec, synth_build

corpus = synth_build(SynthSpec(n_aux=120, seed=7))
print(f"manifest: {len(corpus.manifest)} word occurrences, "
      f"{len({e.word for e in corpus.manifest})} distinct words")

cfg = ForgeConfig(top_k=40, samples_per_keyword=20, duration_bounds=(0.15, 2.2),
                  exclusion_list=tuple(corpus.vocab["test"]))
entries, report = forge(corpus.manifest, cfg)
print(report.to_text())

# the imbalanced variant keeps every clip of the same keywords
imb, _ = forge(corpus.manifest, ForgeConfig(top_k=40, samples_per_keyword=20, duration_bounds=(0.15, 2.2),
                                            exclusion_list=tuple(corpus.vocab["test"]), balanced=False))
counts = Counter(e.word for e in imb)
print(f"balanced: {len(entries)} clips; imbalanced: {len(imb)} clips, "
      f"per keyword {min(counts.values())}..{max(counts.values())}")
