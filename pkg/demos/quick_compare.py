"""A reduced Baseline vs ALL vs AuxSL comparison on the synthetic benchmark.

Trains the tiny encoder for a few epochs per strategy and evaluates on the
unseen test keywords. Numbers are noisy at this size; the acceptance suite
runs the full-length version.

    python demos/quick_compare.py [epochs]
"""
import sys

from fskws import benchmark as B
from fskws.trainer import EvalConfig, TrainConfig, compare_strategies
from fskws.models import NAMED_CONFIGS

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 4
c = B.corpus()
aux = B.aux_words(True)
configs = []
for name in ("baseline", "all", "auxsl"):
    cfg = TrainConfig(strategy=name, epochs=epochs, episodes_per_epoch=50, encoder=NAMED_CONFIGS["tiny"],
                      val_episodes=20)
    configs.append((name, cfg, aux if cfg.needs_aux else None))
comp = compare_strategies(configs, c.in_domain, EvalConfig(n_episodes=200, seeds=(0,)), c.noises, log_fn=print)
print(comp.table)
