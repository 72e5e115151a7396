"""Finite-difference checks of the three training losses through the encoder."""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .data import EpisodeSpec
from .models import EncoderConfig, INPUT_BINS, INPUT_FRAMES, classify_aux, encode, init
from .objectives import PrototypeSet, compute_prototypes, cross_entropy_aux, dummy_proto_loss, query_logits

MICRO = EncoderConfig(width=2, blocks=2, embed_dim=8, param_budget_label="micro")
LOSSES = ("dummy_proto", "aux_ce", "auxsl")
_EXTRA = {"dummy_proto": {"dummy"}, "aux_ce": {"cls.w", "cls.b"}, "auxsl": {"dummy", "cls.w", "cls.b"}}


def _episode(rng, spec: EpisodeSpec):
    n_sup = spec.n_closed * spec.k_shot
    n_q = (spec.n_closed + spec.n_open) * spec.m_query
    x = rng.normal(size=(n_sup + n_q, INPUT_FRAMES, INPUT_BINS))
    sup_labels = np.repeat(np.arange(1, spec.n_closed + 1), spec.k_shot)
    q_labels = np.minimum(np.repeat(np.arange(1, spec.n_closed + spec.n_open + 1), spec.m_query), spec.n_closed + 1)
    return x, sup_labels, q_labels


def _losses(config, spec, x, sup_labels, q_labels, aux_x, aux_labels, lam):
    n_sup = sup_labels.size

    def fsl(p):
        emb = encode(config, p, x)
        proto = compute_prototypes(nx.take_rows(emb, np.arange(n_sup)), sup_labels, spec.k_shot, spec.n_closed)
        q = nx.take_rows(emb, np.arange(n_sup, emb.shape[0]))
        return dummy_proto_loss(query_logits(PrototypeSet(proto, p["dummy"]), q), q_labels)

    def sl(p):
        return cross_entropy_aux(classify_aux(p, encode(config, p, aux_x)), aux_labels)

    return {"dummy_proto": lambda t, p: fsl(p), "aux_ce": lambda t, p: sl(p),
            "auxsl": lambda t, p: fsl(p) + lam * sl(p)}


def run_gradcheck(n_episodes: int = 100, seed: int = 0, config: EncoderConfig = MICRO,
                  spec: EpisodeSpec = EpisodeSpec(3, 1, 2, 1), n_aux_classes: int = 5, aux_batch: int = 4,
                  coords_per_tensor: int = 2, h: float = 1e-6, lam: float = 1.0) -> dict[str, float]:
    """Max relative error per loss over ``n_episodes`` random episodes.

    Each episode draws fresh parameters and inputs; a few random coordinates
    of every parameter tensor are perturbed by +-h.  Biases start non-zero so
    their gradients are exercised away from the initial symmetric point.
    """
    rng = np.random.default_rng(seed)
    worst = {name: 0.0 for name in LOSSES}
    for _ in range(n_episodes):
        params = init(config, int(rng.integers(2 ** 31)), n_aux_classes)
        for k in params:
            if k.endswith(".b") or k == "dummy":
                params[k] = 0.1 * rng.normal(size=params[k].shape)
        x, sup_labels, q_labels = _episode(rng, spec)
        aux_x = rng.normal(size=(aux_batch, INPUT_FRAMES, INPUT_BINS))
        aux_labels = rng.integers(0, n_aux_classes, size=aux_batch)
        losses = _losses(config, spec, x, sup_labels, q_labels, aux_x, aux_labels, lam)
        for name, fn in losses.items():
            used = {k: v for k, v in params.items() if k.startswith("enc.") or k in _EXTRA[name]}
            tape = nx.Tape()
            analytic = tape.backward(fn(tape, {k: tape.param(k, v) for k, v in used.items()}))
            # the largest-gradient coordinate anchors the error scale, the rest are random
            coords = {k: np.unique(np.concatenate([[np.argmax(np.abs(analytic[k]))],
                                                   rng.choice(v.size, size=min(coords_per_tensor, v.size),
                                                              replace=False)]))
                      for k, v in used.items()}
            rep = nx.finite_diff_check(fn, used, h=h, coords=coords)
            worst[name] = max(worst[name], max(r["max_rel_error"] for r in rep.values()))
    return worst
