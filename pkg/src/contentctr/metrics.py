"""Kendall's tau-b with tie components, and mean average precision."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


class UndefinedTauError(ValueError):
    """Tau has a zero denominator (one of the vectors is constant)."""


@dataclass(frozen=True)
class TauComponents:
    P: int  # concordant
    Q: int  # discordant
    T: int  # tied only in s
    U: int  # tied only in y

    def __add__(self, other: "TauComponents") -> "TauComponents":
        return TauComponents(self.P + other.P, self.Q + other.Q, self.T + other.T, self.U + other.U)


def tau_components(s, y) -> TauComponents:
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"s and y lengths differ: {s.size} vs {y.size}")
    iu = np.triu_indices(s.size, k=1)
    ds = np.sign(s[:, None] - s[None, :])[iu]
    dy = np.sign(y[:, None] - y[None, :])[iu]
    prod = ds * dy
    return TauComponents(
        P=int(np.count_nonzero(prod > 0)),
        Q=int(np.count_nonzero(prod < 0)),
        T=int(np.count_nonzero((ds == 0) & (dy != 0))),
        U=int(np.count_nonzero((dy == 0) & (ds != 0))),
    )


def kendall_tau(s, y) -> tuple[float, TauComponents]:
    """``(P - Q) / sqrt((P + Q + T)(P + Q + U))`` by exact pair counting."""
    if np.size(s) < 2:
        raise UndefinedTauError("kendall tau needs at least two observations")
    c = tau_components(s, y)
    den = (c.P + c.Q + c.T) * (c.P + c.Q + c.U)
    if den == 0:
        raise UndefinedTauError(f"zero denominator in kendall tau: {c}")
    return (c.P - c.Q) / math.sqrt(den), c


def average_precision(scores, labels) -> float:
    """Ranked-retrieval AP; descending scores, ties kept in original order."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if not labels.any():
        raise ValueError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, ranks.size + 1) / ranks))


def mean_average_precision(scores, labels, groups=None) -> tuple[float, int]:
    """Mean of per-group AP.  Returns ``(mAP, skipped)``; groups without
    positives are skipped and counted.

    ``scores``/``labels`` are either flat arrays with a parallel ``groups``
    array, or sequences of per-group arrays when ``groups`` is None.
    """
    if groups is None:
        pairs = list(zip(scores, labels))
    else:
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        labels = np.asarray(labels).reshape(-1)
        groups = np.asarray(groups).reshape(-1)
        _, first = np.unique(groups, return_index=True)
        pairs = [(scores[groups == g], labels[groups == g]) for g in groups[np.sort(first)]]
    aps, skipped = [], 0
    for sc, lb in pairs:
        if not np.asarray(lb).astype(bool).any():
            skipped += 1
            continue
        aps.append(average_precision(sc, lb))
    if skipped:
        logger.warning("mAP: skipped %d group(s) without positives", skipped)
    if not aps:
        return float("nan"), skipped
    return float(np.mean(aps)), skipped


@dataclass
class MetricsReport:
    tau: float | None
    components: TauComponents
    map: float | None = None
    windows_evaluated: int = 0
    windows_skipped: int = 0
    aggregation: str = "per_window_mean"

    def to_dict(self) -> dict:
        c = self.components
        return {
            "tau": self.tau,
            "P": c.P, "Q": c.Q, "T": c.T, "U": c.U,
            "map": self.map,
            "aggregation": self.aggregation,
            "windows_evaluated": self.windows_evaluated,
            "windows_skipped": self.windows_skipped,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)


def window_tau(s, y) -> MetricsReport:
    """Tau per window (rows of ``s``/``y``), averaged over windows where it is defined.

    Components are summed over the evaluated windows.
    """
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    taus = []
    total = TauComponents(0, 0, 0, 0)
    skipped = 0
    for si, yi in zip(s, y):
        try:
            t, c = kendall_tau(si, yi)
        except UndefinedTauError:
            skipped += 1
            continue
        taus.append(t)
        total = total + c
    tau = float(np.mean(taus)) if taus else None
    return MetricsReport(tau=tau, components=total, windows_evaluated=len(taus), windows_skipped=skipped)
