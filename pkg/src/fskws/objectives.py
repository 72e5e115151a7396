"""Prototypes, N+1-way query probabilities, training losses and open-set metrics.

Episode labels are 1-based: closed classes are 1..N and every open-set query
carries N+1, which is also the column of the dummy prototype.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass
class PrototypeSet:
    closed: Tensor
    dummy: Tensor
    metric: str = "sqeuclidean"

    @property
    def n_closed(self) -> int:
        return self.closed.shape[0]

    def stacked(self) -> Tensor:
        return nx.concat([self.closed, nx.reshape(self.dummy, (1, -1))], axis=0)


def compute_prototypes(support_embeddings, labels, k_shot: int, n_closed: int | None = None) -> Tensor:
    """Mean support embedding per class, rows ordered 1..N."""
    labels = np.asarray(labels)
    n = int(labels.max()) if n_closed is None else n_closed
    groups = []
    for c in range(1, n + 1):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            raise ValueError(f"compute_prototypes: class {c} has no support samples")
        if idx.size != k_shot:
            raise ValueError(f"compute_prototypes: class {c} has {idx.size} supports, expected {k_shot}")
        groups.append(idx)
    return nx.group_mean(support_embeddings, groups)


def query_logits(proto: PrototypeSet, query_embeddings) -> Tensor:
    """Negative squared distances to the N closed prototypes and the dummy."""
    if proto.metric != "sqeuclidean":
        raise ValueError(f"unsupported metric {proto.metric!r}")
    q = nx.as_tensor(query_embeddings)
    if q.value.ndim != 2 or q.shape[1] != proto.closed.shape[1]:
        raise ValueError(f"query embeddings {q.shape} do not match prototypes {proto.closed.shape}")
    return nx.neg(nx.sqdist(q, proto.stacked()))


def query_probabilities(proto: PrototypeSet, query_embeddings) -> Tensor:
    """(Q, N+1) softmax over negative squared distances; last column is open-set."""
    return nx.softmax(query_logits(proto, query_embeddings))


def dummy_proto_loss(logits, query_labels) -> Tensor:
    """Mean -log p(label) over all queries, from the N+1 query logits.

    Working from logits keeps the log-sum-exp stable, so a vanishing
    probability at the true label never becomes log(0).
    """
    logits = nx.as_tensor(logits)
    labels = np.asarray(query_labels)
    if labels.size and (labels.min() < 1 or labels.max() > logits.shape[1]):
        raise ValueError(f"dummy_proto_loss: labels must lie in 1..{logits.shape[1]}")
    return nx.cross_entropy(logits, labels - 1)


def cross_entropy_aux(logits, labels) -> Tensor:
    """Mean cross-entropy of 0-based auxiliary keyword ids."""
    logits = nx.as_tensor(logits)
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"cross_entropy_aux: label outside 0..{logits.shape[1] - 1}")
    return nx.cross_entropy(logits, labels)


@dataclass
class LossBundle:
    l_fsl: Tensor
    l_sl: Tensor | None
    lam: float
    l_total: Tensor


def auxsl_combine(l_fsl, l_sl, lam: float = 1.0) -> LossBundle:
    """total = l_fsl + lam * l_sl (or l_fsl alone when no auxiliary term)."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    l_fsl = nx.as_tensor(l_fsl)
    if l_sl is None:
        return LossBundle(l_fsl, None, lam, l_fsl)
    l_sl = nx.as_tensor(l_sl)
    return LossBundle(l_fsl, l_sl, lam, l_fsl + lam * l_sl)


# metrics ---------------------------------------------------------------------

def _argmax_lowest(prob: np.ndarray) -> np.ndarray:
    # np.argmax already returns the first (lowest) index on ties
    return np.argmax(prob, axis=1)


def closed_counts(probabilities, labels, include_open: bool = False) -> tuple[int, int]:
    """(correct, total) with argmax over all N+1 columns."""
    prob = np.asarray(getattr(probabilities, "value", probabilities))
    labels = np.asarray(labels)
    n_plus = prob.shape[1]
    keep = np.ones(labels.size, bool) if include_open else labels < n_plus
    pred = _argmax_lowest(prob[keep]) + 1
    return int((pred == labels[keep]).sum()), int(keep.sum())


def closed_accuracy(probabilities, labels, include_open: bool = False) -> float:
    """Accuracy over closed-label queries (or all queries when ``include_open``)."""
    correct, total = closed_counts(probabilities, labels, include_open)
    return correct / total if total else float("nan")


def auroc_counts(open_scores, closed_scores) -> tuple[int, int]:
    """(2*wins + ties, 2*pairs): integer Mann-Whitney numerator/denominator."""
    pos = np.asarray(open_scores, dtype=np.float64).ravel()
    neg = np.asarray(closed_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auroc: both open and closed score sets must be non-empty")
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    not_above = np.searchsorted(neg_sorted, pos, side="right")
    wins = int(below.sum())
    ties = int((not_above - below).sum())
    return 2 * wins + ties, 2 * pos.size * neg.size


def auroc(open_scores, closed_scores) -> float:
    """Mann-Whitney AUROC with open-set queries as positives, ties counted half."""
    num, den = auroc_counts(open_scores, closed_scores)
    return num / den


def verify_open(probability_row, threshold: float) -> str:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return "open" if float(np.asarray(probability_row)[-1]) > threshold else "closed"


def roc_sweep_auc(open_scores, closed_scores) -> float:
    """AUROC from thresholding at every distinct score and trapezoidal integration.

    Scores are treated as the last column of a probability row, so each
    threshold decision goes through :func:`verify_open`.
    """
    pos = np.asarray(open_scores, dtype=np.float64)
    neg = np.asarray(closed_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("roc_sweep_auc: both score sets must be non-empty")
    points = [(0.0, 0.0)]
    for t in np.unique(np.concatenate([pos, neg]))[::-1]:
        if not 0.0 < t < 1.0:
            # verify_open only accepts thresholds inside (0, 1)
            tpr, fpr = np.mean(pos > t), np.mean(neg > t)
        else:
            tpr = np.mean([verify_open([s], t) == "open" for s in pos])
            fpr = np.mean([verify_open([s], t) == "open" for s in neg])
        points.append((fpr, tpr))
    points.append((1.0, 1.0))
    xs, ys = np.array(points).T
    return float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))


# reports ---------------------------------------------------------------------

CSV_HEADER = ["strategy", "shots", "acc_mean", "acc_std", "auroc_mean", "auroc_std", "n_episodes", "seed_list"]


@dataclass
class EvalReport:
    shots: int
    accuracy: list[float]
    auroc: list[float]
    n_episodes: int
    seeds: list[int]
    strategy: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def acc_mean(self) -> float:
        return float(np.mean(self.accuracy))

    @property
    def acc_std(self) -> float:
        return float(np.std(self.accuracy))

    @property
    def auroc_mean(self) -> float:
        return float(np.mean(self.auroc))

    @property
    def auroc_std(self) -> float:
        return float(np.std(self.auroc))

    def row(self) -> list[str]:
        return [self.strategy, str(self.shots), f"{self.acc_mean:.6f}", f"{self.acc_std:.6f}",
                f"{self.auroc_mean:.6f}", f"{self.auroc_std:.6f}", str(self.n_episodes),
                " ".join(str(s) for s in self.seeds)]


def reports_to_csv(reports: list[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


def reports_to_table(reports: list[EvalReport]) -> str:
    lines = [f"{'strategy':<14}{'shots':>6}{'acc (%)':>18}{'AUROC (%)':>18}{'episodes':>10}"]
    for r in reports:
        acc = f"{100 * r.acc_mean:.2f} ± {100 * r.acc_std:.2f}"
        auc = f"{100 * r.auroc_mean:.2f} ± {100 * r.auroc_std:.2f}"
        lines.append(f"{r.strategy:<14}{r.shots:>6}{acc:>18}{auc:>18}{r.n_episodes:>10}")
    return "\n".join(lines)
