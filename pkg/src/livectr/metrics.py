"""Evaluation: AUC, GAUC, fast/slow label consistency, highlight detection lag."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .labels import TrainingSample
from .sim import TASKS


@dataclass
class ScoredExample:
    user_id: int
    score: float
    label: int
    task: str = "click"


def auc(scores: Sequence[float], labels: Sequence[int]) -> Optional[float]:
    """Probability that a random positive outranks a random negative (ties count half).

    ``None`` when either class is absent.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def gauc(users: Sequence, scores: Sequence[float], labels: Sequence[int]) -> Optional[float]:
    """Per-user AUC averaged with example-count weights over users that have both classes."""
    users = np.asarray(users)
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    order = np.argsort(users, kind="stable")
    users, scores, labels = users[order], scores[order], labels[order]
    cuts = np.flatnonzero(users[1:] != users[:-1]) + 1
    num = den = 0.0
    for s, y in zip(np.split(scores, cuts), np.split(labels, cuts)):
        if len(s) == 0:
            continue
        a = auc(s, y)
        if a is None:
            continue
        num += len(s) * a
        den += len(s)
    return num / den if den > 0 else None


def auc_examples(examples: Iterable[ScoredExample]) -> Optional[float]:
    ex = list(examples)
    return auc([e.score for e in ex], [e.label for e in ex])


def gauc_examples(examples: Iterable[ScoredExample]) -> Optional[float]:
    ex = list(examples)
    return gauc([e.user_id for e in ex], [e.score for e in ex], [e.label for e in ex])


@dataclass
class ConsistencyRow:
    task: str
    fast_positive_count: int
    slow_window_positive_count: int

    @property
    def consistency(self) -> Optional[float]:
        if self.slow_window_positive_count == 0:
            return None
        return self.fast_positive_count / self.slow_window_positive_count


def consistency_table(samples: Iterable[TrainingSample]) -> List[ConsistencyRow]:
    """Share of slow-window positives already present in the fast samples, per task.

    ``samples`` is a fast/slow stream: every positive inside the slow window
    appears either in the session's fast sample or in exactly one slow sample.
    """
    fast = dict.fromkeys(TASKS, 0)
    slow = dict.fromkeys(TASKS, 0)
    for s in samples:
        if s.flow == "fast":
            for t in TASKS:
                fast[t] += s.labels[t] == 1
        elif s.flow == "slow":
            for t in TASKS:
                slow[t] += bool(s.mask[t]) and s.labels[t] == 1
    return [ConsistencyRow(t, fast[t], fast[t] + slow[t]) for t in TASKS]


def detection_lag(times: Sequence[float], predicted: Sequence[float], truth: Optional[Sequence[float]] = None,
                  onsets: Optional[Sequence[float]] = None, k: float = 2.0, baseline: float = 300.0,
                  max_lag: Optional[float] = None) -> float:
    """Mean delay between highlight onsets and the predicted series breaking out of its baseline.

    The baseline is the ``baseline`` seconds before each onset; detection is
    the first grid time at or after the onset where the prediction exceeds
    baseline mean + ``k`` standard deviations. Undetected onsets count as the
    penalty ``min(max_lag, last grid time - onset)``. Onsets default to the
    rising edges of ``truth``.
    """
    t = np.asarray(times, dtype=float)
    p = np.asarray(predicted, dtype=float)
    if len(t) == 0 or len(p) == 0:
        raise ValueError("empty series")
    if len(t) != len(p) or (truth is not None and len(truth) != len(t)):
        raise ValueError("series must share one time grid")
    if onsets is None:
        if truth is None:
            raise ValueError("need onsets or a ground-truth series")
        tr = np.asarray(truth, dtype=float)
        onsets = t[1:][np.diff(tr) > 0]
    onsets = list(onsets)
    if not onsets:
        raise ValueError("no highlight onsets")
    lags = [onset_lag(t, p, o, k, baseline, max_lag) for o in onsets]
    return float(np.mean(lags))


def onset_lag(t: np.ndarray, p: np.ndarray, onset: float, k: float = 2.0, baseline: float = 300.0,
              max_lag: Optional[float] = None) -> float:
    cap = t[-1] - onset
    if max_lag is not None:
        cap = min(cap, max_lag)
    base = p[(t >= onset - baseline) & (t < onset)]
    if len(base) == 0:
        return float(cap)
    thresh = base.mean() + k * base.std()
    window = (t >= onset) & (t <= onset + cap)
    hit = np.flatnonzero(window & (p > thresh))
    if len(hit) == 0:
        return float(cap)
    return float(t[hit[0]] - onset)


def calibration_bias(prob: np.ndarray, labels: np.ndarray) -> Dict[str, Optional[float]]:
    """Mean prediction minus observed rate, per task.

    Used as the "interaction beyond" diagnostic: positive bias on the later,
    sparser tasks would indicate early positives inflating their predictions.
    """
    out = {}
    for i, t in enumerate(TASKS):
        out[t] = float(prob[:, i].mean() - labels[:, i].mean()) if len(labels) else None
    return out
