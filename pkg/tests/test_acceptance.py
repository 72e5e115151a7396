"""Acceptance criteria 1-10, one test each; every test prints a PASS/FAIL line.

The training criteria (7-9) share trained models through ``benchmark.run``'s
cache, so each (strategy, width, seed) model is trained once per session.
"""
import csv
import time

import numpy as np

from fskws import benchmark as B
from fskws import data, forge
from fskws.data import IN_DOMAIN, EpisodeSpec, dataset_from_arrays, sample_episode
from fskws.forge import ForgeConfig
from fskws.gradcheck import run_gradcheck
from fskws.models import NAMED_CONFIGS, Checkpoint, embed_numpy, init
from fskws.numerics import Tensor
from fskws.objectives import PrototypeSet, auroc_counts, query_probabilities, reports_to_table, roc_sweep_auc
from fskws.trainer import EvalConfig, TrainConfig, episodic_metrics, evaluate, train

from conftest import acceptance_line

EPOCHS_ORDERING = 20
SEEDS = (0, 1, 2)


def verdict(n, ok, detail):
    acceptance_line(n, ok, detail)
    assert ok, f"criterion {n}: {detail}"


def test_c01_gradient_suite():
    t0 = time.time()
    worst = run_gradcheck(n_episodes=100, seed=0)
    dt = time.time() - t0
    ok = all(v < 1e-4 for v in worst.values()) and dt < 60
    verdict(1, ok, ", ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f"; {dt:.0f}s")


def test_c02_auroc_oracle():
    rng = np.random.default_rng(0)
    exact = sweep = True
    for _ in range(1000):
        pos = rng.integers(0, 20, size=rng.integers(1, 51)) / 20.0
        neg = rng.integers(0, 20, size=rng.integers(1, 51)) / 20.0
        wins = (pos[:, None] > neg[None]).sum()
        ties = (pos[:, None] == neg[None]).sum()
        num, den = auroc_counts(pos, neg)
        exact &= num == 2 * wins + ties and den == 2 * pos.size * neg.size
        sweep &= abs(roc_sweep_auc(pos, neg) - num / den) <= 1e-9
    verdict(2, bool(exact and sweep), f"pair-count exact={bool(exact)}, sweep within 1e-9={bool(sweep)}")


def test_c03_probability_checks():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        ps = PrototypeSet(Tensor(rng.normal(size=(5, 8)) * 3), Tensor(rng.normal(size=8)))
        p = query_probabilities(ps, rng.normal(size=(20, 8)) * 3).value
        worst = max(worst, float(np.abs(p.sum(axis=1) - 1).max()))
    eq = PrototypeSet(Tensor(np.array([[1.0, 0], [0, 1.0], [-1.0, 0], [0, -1.0]])), Tensor(np.array([0.6, 0.8])))
    uni = query_probabilities(eq, np.zeros((1, 2))).value
    two = query_probabilities(PrototypeSet(Tensor(np.zeros((1, 1))), Tensor(np.array([np.sqrt(np.log(2))]))),
                              np.zeros((1, 1))).value[0]
    ok = worst <= 1e-9 and np.abs(uni - 0.2).max() <= 1e-12 and abs(two[0] - 2 / 3) <= 1e-12 \
        and abs(two[1] - 1 / 3) <= 1e-12
    verdict(3, bool(ok), f"row-sum error {worst:.1e}, uniform {uni.ravel().round(12).tolist()}, two={two.tolist()}")


def test_c04_lambda_zero_is_baseline():
    c = B.corpus()
    aux = B.aux_words(True)
    common = dict(epochs=5, episodes_per_epoch=20, encoder=NAMED_CONFIGS["tiny"], val_episodes=10)
    a = train(TrainConfig("baseline", **common), c.in_domain["train"], c.in_domain["val"], None, c.noises, seed=3)
    b = train(TrainConfig("auxsl", lam=0.0, **common), c.in_domain["train"], c.in_domain["val"], aux, c.noises,
              seed=3)
    same = [x["param_digest"] == y["param_digest"] for x, y in zip(a.history, b.history)]
    ok = len(same) == 5 and all(same) and a.log_lines == b.log_lines
    verdict(4, ok, f"per-epoch parameter digests identical: {same}")


def test_c05_protocol_fidelity():
    c = B.corpus()
    ep = sample_episode(c.in_domain["train"], EpisodeSpec(5, 5, 5, 5), np.random.default_rng(0))
    shape_ok = ep.support.size == 25 and ep.query.size == 50 and int((ep.query_labels == 6).sum()) == 25
    cfg = NAMED_CONFIGS["tiny"]
    ckpt = Checkpoint(init(cfg, 0), cfg, None, {"strategy": "untrained"})
    ec = EvalConfig()
    reports = evaluate(ckpt, c.in_domain["test"], ec)
    table = reports_to_table(reports)
    proto_ok = (ec.n_episodes == 1000 and ec.m_query == 15 and ec.seeds == (0, 1, 2)
                and [r.shots for r in reports] == [1, 5] and all(len(r.accuracy) == 3 for r in reports)
                and "±" in table)
    verdict(5, bool(shape_ok and proto_ok),
            f"episode 25+50 with open label 6: {shape_ok}; 1000 ep x {{1,5}} x 15 q x 3 seeds mean±std: {proto_ok}")


def null_corpus() -> data.ClipDataset:
    """Test clips with labels shuffled across clips: audio carries no label information."""
    ds = B.corpus().in_domain["test"]
    perm = np.random.default_rng(0).permutation(len(ds))
    clips = {}
    for i, j in enumerate(perm):
        clips.setdefault(ds.vocabulary[ds.labels[i]], []).append(ds.waves[j].astype(np.float64))
    return dataset_from_arrays(clips, IN_DOMAIN, "test")


def test_c06_chance_level():
    ds = null_corpus()
    cfg = NAMED_CONFIGS["base"]
    params = init(cfg, 0)
    emb = embed_numpy(cfg, params, ds.features())
    acc, auc = episodic_metrics(emb, ds, params["dummy"], EpisodeSpec(5, 5, 5, 15), 1000, np.random.default_rng(0))
    sigma = np.sqrt(0.2 * 0.8 / (1000 * 75))
    ok = abs(acc - 0.2) <= 3 * sigma and 0.47 <= auc <= 0.53
    verdict(6, bool(ok), f"acc={acc:.4f} (0.2 +- {3 * sigma:.4f}), auroc={auc:.4f}")


def test_c07_baseline_learns():
    out = B.run("baseline", "base", 0, epochs=30)
    ok = out.acc[5] >= 0.90 and out.auroc[5] >= 0.85 and out.seconds <= 15 * 60
    verdict(7, ok, f"5-shot acc={out.acc[5]:.4f} auroc={out.auroc[5]:.4f} in {out.seconds / 60:.1f} min")


def test_c08_strategy_ordering():
    t0 = time.time()
    res = {}
    for name, strategy, balanced in (("baseline", "baseline", True), ("all", "all", True), ("auxsl", "auxsl", True),
                                     ("auxsl-imb", "auxsl", False)):
        res[name] = B.mean_over_seeds([B.run(strategy, "base", s, EPOCHS_ORDERING, balanced) for s in SEEDS])
    dt = time.time() - t0
    (ab, ub), (aa, _), (ax, ux), (ai, _) = res["baseline"], res["all"], res["auxsl"], res["auxsl-imb"]
    checks = {"a": ax >= aa + 0.01, "b": aa >= ab + 0.01, "c": ux >= ub + 0.02, "d": ax >= ai}
    ok = all(checks.values()) and dt <= 90 * 60
    summary = ", ".join(f"{k} acc={a:.4f} auroc={u:.4f}" for k, (a, u) in res.items())
    verdict(8, ok, f"{summary}; checks {checks}; {dt / 60:.1f} min")


def test_c09_width_sweep():
    widths = ("tiny", "base", "large")
    res = {s: [B.run(s, w, 0, EPOCHS_ORDERING).acc[5] for w in widths] for s in ("baseline", "auxsl")}
    mono = {s: all(b >= a - 0.01 for a, b in zip(v, v[1:])) for s, v in res.items()}
    small_beats_large = res["auxsl"][0] > res["baseline"][2]
    ok = all(mono.values()) and small_beats_large
    detail = "; ".join(f"{s} " + "/".join(f"{a:.4f}" for a in v) for s, v in res.items())
    verdict(9, ok, f"{detail}; monotone {mono}; auxsl-tiny > baseline-large: {small_beats_large}")


def engineered_manifest(path, rng):
    """1,200 keywords: 1,050 frequent bases, 100 affixed variants, 8 target words and 42 rare words."""
    bases = [f"w{i:04d}x" for i in range(1050)]
    counts = {w: int(300 + 2700 * (r + 1) ** -0.9) for r, w in enumerate(bases)}
    counts.update({bases[i] + "ing": 400 + i for i in range(0, 200, 2)})  # morphological variants
    targets = ["yes", "no", "up", "down", "left", "right", "on", "off"]
    counts.update({w: 5000 for w in targets})
    counts.update({f"r{i:03d}z": int(rng.integers(1, 300)) for i in range(42)})
    assert len(counts) == 1200
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["utterance_id", "audio_path", "word", "start_s", "end_s"])
        u = outside = 0
        for word, n in counts.items():
            # every 20th occurrence is a boundary case, cycling on, on, just off, just off the bounds
            for k in range(n + 20):
                dur = (0.3, 2.2, 0.29, 2.21)[(k // 20) % 4] if k % 20 == 0 else 0.35 + (k % 17) * 0.1
                outside += dur in (0.29, 2.21)
                w.writerow([f"u{u}", "a.wav", word, "1.0", f"{1.0 + dur:.2f}"])
                u += 1
    return counts, targets, u, outside


def test_c10_forge_fidelity(tmp_path):
    rng = np.random.default_rng(0)
    counts, targets, rows, outside = engineered_manifest(tmp_path / "m.csv", rng)
    t0 = time.time()
    rep = forge.run_forge(tmp_path / "m.csv", ForgeConfig(top_k=1000, samples_per_keyword=300,
                                                          exclusion_list=tuple(targets)),
                          tmp_path / "out", metadata_only=True)
    dt = time.time() - t0
    sel = data.ingest_manifest(tmp_path / "out" / "forge_selected.csv").entries
    per_kw = {}
    for e in sel:
        per_kw[e.word] = per_kw.get(e.word, 0) + 1
    shape = len(rep.keywords) == 1000 and len(sel) == 300_000 and set(per_kw.values()) == {300}
    durations = [round(e.end_s - e.start_s, 2) for e in sel]
    inclusive = (rep.stages[0] == ("duration filter", rows, rows - outside) and 0.3 in durations
                 and 2.2 in durations and min(durations) >= 0.3 and max(durations) <= 2.2)
    morph = not forge.morphological_pairs(set(per_kw))
    excl = not set(per_kw) & set(targets)
    ok = shape and inclusive and morph and excl and dt < 120
    verdict(10, bool(ok), f"{len(rep.keywords)} keywords x {sorted(set(per_kw.values()))} = {len(sel)} entries; "
                          f"inclusive bounds {inclusive}; no morphological pair {morph}; targets excluded {excl}; "
                          f"{dt:.0f}s")
