"""Training strategies, the evaluation protocol and strategy comparison.

Strategies:

* ``baseline``: dummy-prototype loss on in-domain episodes.
* ``pret``: cross-entropy pre-training on auxiliary words, then baseline.
* ``all``: baseline episodes drawn from the union of both class pools.
* ``auxsl``: in-domain episode loss plus lambda times auxiliary cross-entropy
  on one auxiliary batch per step, in a single update.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .audio import Waveform
from .data import IN_DOMAIN, SILENCE, ClipDataset, EpisodeSpec, sample_aux_batch, sample_episode
from .kvconfig import ConfigError, int_list
from .models import NAMED_CONFIGS, Checkpoint, EncoderConfig, classify_aux, embed_numpy, encode, init, save_checkpoint
from .objectives import (EvalReport, PrototypeSet, auroc_counts, closed_counts, compute_prototypes, cross_entropy_aux,
                         dummy_proto_loss, query_logits, query_probabilities, reports_to_csv, reports_to_table)

log = logging.getLogger(__name__)

STRATEGIES = ("baseline", "pret", "all", "auxsl")
LOG_HEADER = "epoch,lr,train_loss,val_acc,val_auroc"
# documentation only; these come from full-scale speech corpora and large backbones
PAPER_REFERENCE = {"baseline": (82.0, 82.9), "auxsl": (95.6, 95.2)}


class TrainingError(RuntimeError):
    pass


class EvaluationError(ValueError):
    pass


@dataclass
class TrainConfig:
    strategy: str = "baseline"
    epochs: int = 100
    episodes_per_epoch: int = 500
    episode: EpisodeSpec = EpisodeSpec(5, 5, 5, 5)
    base_lr: float = 1e-3
    lr_decay: float = 0.5
    lr_every: int = 20
    lam: float = 1.0
    aux_batch: int = 64
    seeds: tuple[int, ...] = (0,)
    encoder: EncoderConfig = NAMED_CONFIGS["base"]
    noise_prob: float = 0.8
    pret_epochs: int = 30
    pret_steps_per_epoch: int | None = None
    val_episodes: int = 100
    val_queries: int = 15

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {', '.join(STRATEGIES)}")
        for name in ("epochs", "episodes_per_epoch", "lr_every", "aux_batch", "pret_epochs", "val_episodes",
                     "val_queries"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.base_lr <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("base_lr must be > 0 and lr_decay in (0, 1]")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if not 0 <= self.noise_prob <= 1:
            raise ConfigError(f"noise_prob must lie in [0, 1], got {self.noise_prob}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    @property
    def needs_aux(self) -> bool:
        return self.strategy in ("pret", "all") or (self.strategy == "auxsl" and self.lam > 0)

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "TrainConfig":
        kv = dict(kv)
        ep = {k: int(kv.pop(k)) for k in ("n_closed", "n_open", "k_shot", "m_query") if k in kv}
        enc = {k: int(kv.pop(k)) for k in ("width", "blocks", "embed_dim") if k in kv}
        encoder = NAMED_CONFIGS[kv.pop("encoder", "base")]
        if enc:
            encoder = replace(encoder, param_budget_label="custom", **enc)
        cfg: dict = {"episode": replace(EpisodeSpec(), **ep), "encoder": encoder}
        casts = {"strategy": str, "epochs": int, "episodes_per_epoch": int, "base_lr": float, "lr_decay": float,
                 "lr_every": int, "lambda": float, "aux_batch": int, "noise_prob": float, "pret_epochs": int,
                 "pret_steps_per_epoch": int, "val_episodes": int, "val_queries": int}
        for key, value in kv.items():
            if key == "seeds":
                cfg["seeds"] = tuple(int_list(value))
            elif key in casts:
                cfg["lam" if key == "lambda" else key] = casts[key](value)
            elif key in ("data", "aux", "out"):
                continue
            else:
                raise ConfigError(f"unknown training option {key!r}")
        return cls(**cfg)


@dataclass
class EvalConfig:
    n_episodes: int = 1000
    shots: tuple[int, ...] = (1, 5)
    n_closed: int = 5
    n_open: int = 5
    m_query: int = 15
    seeds: tuple[int, ...] = (0, 1, 2)
    threshold: float | None = None

    def __post_init__(self):
        if self.n_episodes < 1 or self.m_query < 1 or not self.shots or not self.seeds:
            raise ConfigError(f"invalid evaluation config {self}")
        if self.threshold is not None and not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "EvalConfig":
        cfg: dict = {}
        for key, value in kv.items():
            if key in ("n_episodes", "n_closed", "n_open", "m_query"):
                cfg[key] = int(value)
            elif key in ("shots", "seeds"):
                cfg[key] = tuple(int_list(value))
            elif key == "threshold":
                cfg[key] = float(value)
            elif key in ("data", "checkpoint", "out"):
                continue
            else:
                raise ConfigError(f"unknown evaluation option {key!r}")
        return cls(**cfg)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    final_params: dict[str, np.ndarray]
    log_lines: list[str]
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1


# episode arithmetic ----------------------------------------------------------------

def _episode_loss(config: EncoderConfig, leaves, feats: np.ndarray, ep) -> nx.Tensor:
    emb = encode(config, leaves, feats)
    ns = ep.support.size
    proto = compute_prototypes(nx.take_rows(emb, np.arange(ns)), ep.support_labels, ep.spec.k_shot,
                               ep.spec.n_closed)
    q = nx.take_rows(emb, np.arange(ns, ns + ep.query.size))
    return dummy_proto_loss(query_logits(PrototypeSet(proto, leaves["dummy"]), q), ep.query_labels)


def episode_scores(embeddings: np.ndarray, dummy: np.ndarray, ep) -> tuple[int, int, int, int]:
    """(closed correct, closed total, AUROC numerator, AUROC denominator) for one episode."""
    proto = compute_prototypes(embeddings[ep.support], ep.support_labels, ep.spec.k_shot, ep.spec.n_closed)
    prob = query_probabilities(PrototypeSet(proto, nx.Tensor(dummy)), embeddings[ep.query]).value
    correct, total = closed_counts(prob, ep.query_labels)
    is_open = ep.query_labels == ep.spec.n_closed + 1
    score = prob[:, -1]
    num, den = auroc_counts(score[is_open], score[~is_open]) if is_open.any() else (0, 0)
    return correct, total, num, den


def episodic_metrics(embeddings: np.ndarray, dataset: ClipDataset, dummy: np.ndarray, spec: EpisodeSpec,
                     n_episodes: int, rng: np.random.Generator) -> tuple[float, float]:
    """Closed accuracy and AUROC over ``n_episodes`` episodes.

    Both are ratios of integer totals, so the result does not depend on the
    order episodes are visited.  Every episode has the same query counts, so
    the pooled AUROC equals the mean per-episode AUROC.
    """
    totals = np.zeros(4, dtype=np.int64)
    for _ in range(n_episodes):
        totals += episode_scores(embeddings, dummy, sample_episode(dataset, spec, rng))
    correct, total, num, den = (int(v) for v in totals)
    return correct / total, (num / den if den else float("nan"))


# training ----------------------------------------------------------------------------

def param_digest(params: dict[str, np.ndarray]) -> str:
    """SHA-256 over names and raw float64 bytes, in sorted name order."""
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype=np.float64).tobytes())
    return h.hexdigest()


def _features(pool: ClipDataset, idx: np.ndarray, noises, prob: float, rng) -> np.ndarray:
    feats = pool.features(idx)
    if noises:
        # background noise is a property of the command corpus only
        mask = np.array([pool.domains[i] == IN_DOMAIN for i in idx])
        if mask.any():
            feats[mask] = pool.augmented_features(idx[mask], noises, prob, rng)
    return feats


def train(config: TrainConfig, in_domain: ClipDataset, val: ClipDataset | None = None,
          aux: ClipDataset | None = None, noises: list[Waveform] | None = None, seed: int | None = None,
          out_dir=None, log_fn=None) -> TrainResult:
    """Train one model; returns the best-validation checkpoint and the epoch log.

    Independent rng streams drive episodes, noise mixing and auxiliary
    batches, so turning the auxiliary term off (lambda = 0) leaves the
    episode and noise draws, and hence the trajectory, untouched.
    """
    seed = config.seeds[0] if seed is None else seed
    if config.needs_aux and (aux is None or len(aux) == 0):
        raise ConfigError(f"strategy {config.strategy!r} requires an auxiliary dataset")
    ep_rng, noise_rng, aux_rng, pret_rng = (np.random.default_rng(s)
                                            for s in np.random.SeedSequence(seed).spawn(4))
    enc = config.encoder
    use_cls = config.strategy in ("pret",) or (config.strategy == "auxsl" and config.lam > 0)
    params = init(enc, seed, aux.num_classes if use_cls else 0)
    lines = [LOG_HEADER]
    emit = log_fn or (lambda line: None)
    emit(LOG_HEADER)

    if config.strategy == "pret":
        params = _pretrain(config, params, aux, pret_rng, emit, lines)
        params = {k: v for k, v in params.items() if not k.startswith("cls.")}

    pool = in_domain.union(aux, "all") if config.strategy == "all" else in_domain
    pool.features()
    if aux is not None and use_cls:
        aux.features()
    val_spec = replace(config.episode, m_query=config.val_queries)
    opt = nx.AdamState(base_lr=config.base_lr)
    best = (-1.0, -1, dict(params))
    history = []
    with_aux = config.strategy == "auxsl" and config.lam > 0

    for epoch in range(config.epochs):
        lr = nx.lr_at_epoch(config.base_lr, epoch, config.lr_decay, config.lr_every)
        losses = []
        for step in range(config.episodes_per_epoch):
            ep = sample_episode(pool, config.episode, ep_rng)
            feats = _features(pool, np.concatenate([ep.support, ep.query]), noises, config.noise_prob, noise_rng)
            tape = nx.Tape()
            leaves = {k: tape.param(k, v) for k, v in params.items()}
            try:
                loss = _episode_loss(enc, leaves, feats, ep)
                if with_aux:
                    idx, labels = sample_aux_batch(aux, config.aux_batch, aux_rng)
                    logits = classify_aux(leaves, encode(enc, leaves, aux.features(idx)))
                    loss = loss + config.lam * cross_entropy_aux(logits, labels)
                grads = tape.backward(loss)
            except FloatingPointError as exc:
                raise TrainingError(f"non-finite value at epoch {epoch} step {step}: {exc}") from exc
            params = nx.adam_step(opt, params, grads, lr)
            losses.append(float(loss.value))
        train_loss = float(np.mean(losses))
        val_acc = val_auroc = float("nan")
        if val is not None:
            emb = embed_numpy(enc, params, val.features())
            val_acc, val_auroc = episodic_metrics(emb, val, params["dummy"], val_spec, config.val_episodes,
                                                  np.random.default_rng(seed))
        line = f"{epoch},{lr:.6g},{train_loss:.6f},{val_acc:.6f},{val_auroc:.6f}"
        lines.append(line)
        emit(line)
        history.append({"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_acc": val_acc,
                        "val_auroc": val_auroc, "param_digest": param_digest(params)})
        score = val_acc if val is not None else float(epoch)
        if score > best[0]:
            best = (score, epoch, dict(params))

    meta = {"strategy": config.strategy, "seed": seed, "best_epoch": best[1],
            "train_keywords": sorted(in_domain.keywords(include_silence=False)),
            "encoder_digest": enc.digest()}
    ckpt = Checkpoint(best[2], enc, None, meta)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "best.ckpt", ckpt)
        save_checkpoint(out / "last.ckpt", Checkpoint(params, enc, opt, dict(meta, epoch=config.epochs - 1)))
        (out / "train_log.csv").write_text("\n".join(lines) + "\n")
    return TrainResult(ckpt, params, lines, history, best[1])


def _pretrain(config: TrainConfig, params, aux: ClipDataset, rng, emit, lines) -> dict[str, np.ndarray]:
    """Stage 1 of ``pret``: mini-batch cross-entropy on auxiliary words."""
    enc = config.encoder
    aux.features()
    opt = nx.AdamState(base_lr=config.base_lr)
    steps = config.pret_steps_per_epoch or config.episodes_per_epoch
    for epoch in range(config.pret_epochs):
        lr = nx.lr_at_epoch(config.base_lr, epoch, config.lr_decay, config.lr_every)
        losses = []
        for step in range(steps):
            idx, labels = sample_aux_batch(aux, config.aux_batch, rng)
            tape = nx.Tape()
            leaves = {k: tape.param(k, v) for k, v in params.items()}
            try:
                loss = cross_entropy_aux(classify_aux(leaves, encode(enc, leaves, aux.features(idx))), labels)
                grads = tape.backward(loss)
            except FloatingPointError as exc:
                raise TrainingError(f"non-finite value in pre-training epoch {epoch} step {step}: {exc}") from exc
            params = nx.adam_step(opt, params, grads, lr)
            losses.append(float(loss.value))
        line = f"# pretrain {epoch},{lr:.6g},{np.mean(losses):.6f}"
        lines.append(line)
        emit(line)
    return params


# evaluation -----------------------------------------------------------------------------

def check_disjoint(train_keywords, dataset: ClipDataset) -> None:
    overlap = (set(train_keywords) - {SILENCE}) & dataset.keywords(include_silence=False)
    if overlap:
        raise EvaluationError(f"test keywords overlap training keywords: {', '.join(sorted(overlap))}")


def evaluate_embeddings(embeddings: np.ndarray, dummy: np.ndarray, dataset: ClipDataset, config: EvalConfig,
                        seed: int, shots: int) -> tuple[float, float]:
    spec = EpisodeSpec(config.n_closed, config.n_open, shots, config.m_query)
    rng = np.random.default_rng(np.random.SeedSequence([seed, shots]))
    return episodic_metrics(embeddings, dataset, dummy, spec, config.n_episodes, rng)


def evaluate(checkpoint: Checkpoint, dataset: ClipDataset, config: EvalConfig, strategy: str = "",
             seeds=None) -> list[EvalReport]:
    """One report per shot count; mean and std are taken across seeds."""
    check_disjoint(checkpoint.meta.get("train_keywords", ()), dataset)
    seeds = list(config.seeds if seeds is None else seeds)
    emb = embed_numpy(checkpoint.config, checkpoint.params, dataset.features())
    reports = []
    for k in config.shots:
        accs, aucs = [], []
        for s in seeds:
            a, u = evaluate_embeddings(emb, checkpoint.params["dummy"], dataset, config, s, k)
            accs.append(a)
            aucs.append(u)
        reports.append(EvalReport(k, accs, aucs, config.n_episodes, seeds,
                                  strategy or checkpoint.meta.get("strategy", "")))
    return reports


# comparison -------------------------------------------------------------------------------

@dataclass
class Comparison:
    reports: list[EvalReport]
    csv: str
    table: str


def relative_improvement(value: float, reference: float) -> float:
    return 100.0 * (value - reference) / reference


def comparison_table(reports: list[EvalReport], reference: str = "baseline") -> str:
    base = {r.shots: r.acc_mean for r in reports if r.strategy == reference}
    lines = reports_to_table(reports).splitlines()
    lines[0] += f"{'rel. vs ' + reference:>18}"
    for i, r in enumerate(reports, start=1):
        rel = f"{relative_improvement(r.acc_mean, base[r.shots]):+.1f}%" if r.shots in base else "n/a"
        lines[i] += f"{rel:>18}"
    ref = ", ".join(f"{k} {a}/{b}" for k, (a, b) in PAPER_REFERENCE.items())
    lines += ["", f"# reference values from full-scale speech corpora (5-shot acc/AUROC %): {ref}; "
                  "not reproducible at desk scale"]
    return "\n".join(lines) + "\n"


def compare_strategies(configs: list[tuple[str, TrainConfig, ClipDataset | None]], splits: dict[str, ClipDataset],
                       eval_config: EvalConfig, noises=None, log_fn=None) -> Comparison:
    """Train every (name, config, aux) per seed and evaluate on the test split.

    The seed list is taken from ``eval_config``; each seed retrains the model
    and evaluates it with the same seed.
    """
    reports = []
    for name, cfg, aux in configs:
        per_shot = {k: ([], []) for k in eval_config.shots}
        for s in eval_config.seeds:
            res = train(cfg, splits["train"], splits.get("val"), aux, noises, seed=s)
            if log_fn:
                log_fn(f"# {name} seed {s}: best epoch {res.best_epoch}")
            for r in evaluate(res.checkpoint, splits["test"], eval_config, name, seeds=[s]):
                per_shot[r.shots][0].append(r.accuracy[0])
                per_shot[r.shots][1].append(r.auroc[0])
        for k, (accs, aucs) in per_shot.items():
            reports.append(EvalReport(k, accs, aucs, eval_config.n_episodes, list(eval_config.seeds), name))
    return Comparison(reports, reports_to_csv(reports), comparison_table(reports))
