"""Losses and evaluation metrics.

Cross-entropy and the Cox negative partial log-likelihood (Breslow tie
handling, optional l2 penalty) are built from differentiable primitives;
the evaluation metrics (accuracy, AUC, concordance index) are plain
numpy.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigError, DimensionError, UndefinedMetricError
from .numerics import Tensor


class DegenerateCohortWarning(UserWarning):
    """Raised when a Cox batch carries no observed events."""


@dataclass(frozen=True)
class SurvivalRecord:
    """Time-to-event supervision: follow-up time and event indicator
    (True = event observed, False = censored)."""

    time: float
    event: bool

    def __post_init__(self):
        if self.time <= 0:
            raise ConfigError(f"survival time must be positive, got {self.time}")


@dataclass
class CoxBatch:
    risks: Tensor                  # (n,)
    records: list[SurvivalRecord]

    def __post_init__(self):
        if self.risks.data.ndim != 1 or self.risks.shape[0] != len(self.records):
            raise DimensionError(
                f"risks shape {self.risks.shape} does not match "
                f"{len(self.records)} records")


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label], in stable log-sum-exp form."""
    if logits.data.ndim != 1:
        raise DimensionError(f"logits must be 1-D, got {logits.shape}")
    n_classes = logits.shape[0]
    if not 0 <= label < n_classes:
        raise ConfigError(f"label {label} out of range for {n_classes} classes")
    shift = float(logits.data.max())
    lse = nm.add_scalar(
        nm.log(nm.tsum(nm.exp(nm.add_scalar(logits, -shift)))), shift)
    onehot = Tensor(np.eye(n_classes)[label])
    picked = nm.dot(logits, onehot)
    return nm.add(lse, nm.scale(picked, -1.0))


def cox_loss(batch: CoxBatch, lam: float = 0.0,
             theta_sq_norm: Tensor | float = 0.0) -> Tensor:
    """Negative partial log-likelihood with Breslow tie handling.

    The at-risk set for an event at t_i is {j : t_j >= t_i} (ties share
    one denominator). With zero observed events the partial likelihood is
    empty: the penalty alone is returned and a DegenerateCohortWarning is
    issued.
    """
    if lam < 0:
        raise ConfigError(f"penalty weight must be non-negative, got {lam}")
    times = np.asarray([r.time for r in batch.records])
    events = [i for i, r in enumerate(batch.records) if r.event]
    n = len(batch.records)

    if isinstance(theta_sq_norm, Tensor):
        penalty = nm.scale(theta_sq_norm, lam)
    else:
        penalty = Tensor(lam * float(theta_sq_norm))

    if not events:
        warnings.warn("Cox batch has no observed events; loss is penalty only",
                      DegenerateCohortWarning)
        return penalty

    risks2 = nm.reshape(batch.risks, (n, 1))
    loss: Tensor | None = None
    for i in events:
        at_risk = np.nonzero(times >= times[i])[0]
        sub = nm.gather_rows(risks2, at_risk)
        shift = float(sub.data.max())
        lse = nm.add_scalar(
            nm.log(nm.tsum(nm.exp(nm.add_scalar(sub, -shift)))), shift)
        r_i = nm.dot(batch.risks, Tensor(np.eye(n)[i]))
        term = nm.add(lse, nm.scale(r_i, -1.0))
        loss = term if loss is None else nm.add(loss, term)
    return nm.add(loss, penalty)


def c_index(risks, records: list[SurvivalRecord]) -> float:
    """Concordance over comparable pairs (t_i < t_j, event at i).

    Higher risk for the earlier event counts 1, tied risks count 0.5.
    Pairs with tied times are incomparable and skipped.
    """
    r = np.asarray(risks.data if isinstance(risks, Tensor) else risks,
                   dtype=np.float64)
    if r.ndim != 1 or len(records) != r.shape[0]:
        raise DimensionError("risks and records must align")
    if len(records) < 2:
        raise UndefinedMetricError("need at least 2 subjects")
    t = np.asarray([rec.time for rec in records])
    e = np.asarray([rec.event for rec in records])
    comparable = (t[:, None] < t[None, :]) & e[:, None]
    n_pairs = int(comparable.sum())
    if n_pairs == 0:
        raise UndefinedMetricError("no comparable pairs in cohort")
    concordant = (r[:, None] > r[None, :]) & comparable
    tied = (r[:, None] == r[None, :]) & comparable
    return float((concordant.sum() + 0.5 * tied.sum()) / n_pairs)


def auc_binary(scores, labels) -> float:
    """Rank-based (Mann-Whitney) AUC; tied scores contribute 0.5."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise DimensionError("scores and labels must be equal 1-D arrays")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC undefined with a single class")
    order = np.argsort(s, kind="stable")
    ranks = np.empty_like(s)
    ranks[order] = np.arange(1, len(s) + 1)
    # average ranks over tied scores
    for value in np.unique(s):
        mask = s == value
        if mask.sum() > 1:
            ranks[mask] = ranks[mask].mean()
    rank_sum = ranks[y == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_macro_ovr(scores, labels) -> float:
    """Macro one-vs-rest AUC for multi-class scores (n, C); classes not
    present in the labels are skipped."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 2 or s.shape[0] != y.shape[0]:
        raise DimensionError("scores must be (n, C) aligned with labels")
    values = []
    for c in range(s.shape[1]):
        binary = (y == c).astype(int)
        if 0 < binary.sum() < len(binary):
            values.append(auc_binary(s[:, c], binary))
    if not values:
        raise UndefinedMetricError("no class with both positives and negatives")
    return float(np.mean(values))


def accuracy(predicted, actual) -> float:
    p = np.asarray(predicted)
    a = np.asarray(actual)
    if p.shape != a.shape:
        raise DimensionError(f"length mismatch: {p.shape} vs {a.shape}")
    if p.size == 0:
        raise DimensionError("empty prediction vector")
    return float((p == a).mean())
