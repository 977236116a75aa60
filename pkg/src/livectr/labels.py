"""Training-sample assembly under the three label-reporting policies.

``exit_report``
    One sample per session when the user leaves, every label observed.
``fast_slow``
    A fast sample after ``fast_window`` seconds (or at exit, if earlier) with
    every label observed so far, then one slow sample per positive that the
    fast sample missed but which lands before ``slow_window``. Later
    positives fall into the ignored window and are never reported.
``realtime``
    At every session-relative tick boundary, one sample carrying exactly the
    tasks whose first positive landed in the closing tick; at exit, one
    sample carrying the never-positive tasks as negatives. Repeat positives
    are suppressed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .sim import TASKS, InteractionEvent, SessionRecord, group_sessions

FLOWS = ("exit", "fast", "slow", "rt_first", "rt_exit")
_FLOW_RANK = {f: i for i, f in enumerate(("fast", "rt_first", "slow", "exit", "rt_exit"))}


class MalformedLogError(ValueError):
    pass


@dataclass(frozen=True)
class ReportPolicy:
    kind: str = "realtime"
    fast_window: float = 300.0
    slow_window: float = 3600.0
    tick: float = 30.0
    # realtime reporting cap in seconds after enter; None reports up to exit
    realtime_cap: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("exit_report", "fast_slow", "realtime"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if not self.fast_window < self.slow_window:
            raise ValueError("fast_window must be shorter than slow_window")
        if not 0 < self.tick <= self.fast_window:
            raise ValueError("tick must be in (0, fast_window]")


@dataclass
class TrainingSample:
    session_id: int
    user_id: int
    item_id: int
    report_ts: float
    flow: str
    labels: Dict[str, int]
    mask: Dict[str, bool]  # True = learn
    enter_ts: float = 0.0

    @property
    def feature_ref(self) -> Tuple[int, int, float]:
        """(user, item, time) at which features and history are materialised."""
        return self.user_id, self.item_id, self.enter_ts

    def learned(self) -> List[str]:
        return [t for t in TASKS if self.mask.get(t, False)]

    def to_json(self) -> str:
        return json.dumps({
            "session_id": self.session_id, "user_id": self.user_id, "item_id": self.item_id,
            "report_ts": self.report_ts, "flow": self.flow, "enter_ts": self.enter_ts,
            "labels": {t: int(self.labels[t]) for t in TASKS},
            "mask": {t: bool(self.mask[t]) for t in TASKS},
        })

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingSample":
        if d["flow"] not in FLOWS:
            raise ValueError(f"unknown flow {d['flow']!r}")
        return cls(int(d["session_id"]), int(d["user_id"]), int(d["item_id"]), float(d["report_ts"]),
                   d["flow"], {t: int(d["labels"][t]) for t in TASKS},
                   {t: bool(d["mask"][t]) for t in TASKS}, float(d.get("enter_ts", 0.0)))


class LabelLedger:
    """Per (session, task) first-positive time and reported flag.

    A first positive can only be recorded once and a task can only be marked
    reported once; both transitions raise on repetition.
    """

    def __init__(self):
        self._first: Dict[Tuple[int, str], float] = {}
        self._reported: set = set()

    def observe(self, session_id: int, task: str, ts: float) -> bool:
        """Record a positive; returns True if it is the first one for the pair."""
        key = (session_id, task)
        if key in self._first:
            return False
        self._first[key] = ts
        return True

    def first_positive_ts(self, session_id: int, task: str) -> Optional[float]:
        return self._first.get((session_id, task))

    def mark_reported(self, session_id: int, task: str) -> None:
        key = (session_id, task)
        if key in self._reported:
            raise RuntimeError(f"task {task} of session {session_id} reported twice")
        self._reported.add(key)

    def reported(self, session_id: int, task: str) -> bool:
        return (session_id, task) in self._reported


def first_only_filter(events: Sequence[InteractionEvent]) -> Dict[str, Optional[float]]:
    """Earliest occurrence time of every task in a session's events (None if absent)."""
    first: Dict[str, Optional[float]] = {t: None for t in TASKS}
    for e in events:
        if e.behavior in first:
            cur = first[e.behavior]
            if cur is None or e.timestamp < cur:
                first[e.behavior] = e.timestamp
    return first


def _sample(rec: SessionRecord, ts: float, flow: str, labels: Dict[str, int], learn: Iterable[str]) -> TrainingSample:
    learn = set(learn)
    return TrainingSample(rec.session_id, rec.user_id, rec.room_id, ts, flow,
                          {t: int(labels.get(t, 0)) for t in TASKS},
                          {t: t in learn for t in TASKS}, rec.enter)


def _assemble_session(rec: SessionRecord, policy: ReportPolicy, ledger: LabelLedger) -> List[TrainingSample]:
    first = first_only_filter(rec.events)
    for t, ts in first.items():
        if ts is not None:
            ledger.observe(rec.session_id, t, ts)

    if policy.kind == "exit_report":
        labels = {t: int(first[t] is not None) for t in TASKS}
        return [_sample(rec, rec.exit, "exit", labels, TASKS)]

    if policy.kind == "fast_slow":
        fast_ts = min(rec.enter + policy.fast_window, rec.exit)
        labels = {t: int(first[t] is not None and first[t] <= fast_ts) for t in TASKS}
        out = [_sample(rec, fast_ts, "fast", labels, TASKS)]
        slow_end = rec.enter + policy.slow_window
        for t in TASKS:
            ts = first[t]
            if ts is not None and fast_ts < ts <= slow_end:
                out.append(_sample(rec, ts, "slow", {t: 1}, [t]))
        return out

    # realtime
    cap = rec.exit if policy.realtime_cap is None else min(rec.exit, rec.enter + policy.realtime_cap)
    by_tick: Dict[float, List[str]] = {}
    for t in TASKS:
        ts = first[t]
        if ts is None or ts > cap:
            continue
        k = max(1, math.ceil((ts - rec.enter) / policy.tick - 1e-12))
        report = min(rec.enter + k * policy.tick, rec.exit)
        by_tick.setdefault(report, []).append(t)
    out = []
    for report in sorted(by_tick):
        tasks = by_tick[report]
        for t in tasks:
            ledger.mark_reported(rec.session_id, t)
        out.append(_sample(rec, report, "rt_first", {t: 1 for t in tasks}, tasks))
    negatives = [t for t in TASKS if first[t] is None]
    if negatives:
        for t in negatives:
            ledger.mark_reported(rec.session_id, t)
        out.append(_sample(rec, rec.exit, "rt_exit", {}, negatives))
    return out


def assemble(events: Sequence[InteractionEvent], policy: ReportPolicy,
             ledger: Optional[LabelLedger] = None) -> List[TrainingSample]:
    """Turn a live event log into a report_ts-ordered stream of samples."""
    sessions = group_sessions(events)
    ledger = ledger if ledger is not None else LabelLedger()
    out: List[TrainingSample] = []
    for sid in sorted(sessions):
        out.extend(_assemble_session(sessions[sid], policy, ledger))
    out.sort(key=lambda s: (s.report_ts, _FLOW_RANK[s.flow], s.session_id))
    return out


def sample_volume_ratio(samples_a: Sequence[TrainingSample], samples_b: Sequence[TrainingSample]) -> float:
    if len(samples_b) == 0:
        raise ValueError("denominator sample stream is empty")
    return len(samples_a) / len(samples_b)


def positive_pairs(samples: Iterable[TrainingSample]) -> set:
    """{(session, task)} unmasked at label 1 somewhere in the stream."""
    return {(s.session_id, t) for s in samples for t in TASKS if s.mask[t] and s.labels[t] == 1}


def write_samples(samples: Iterable[TrainingSample], path) -> None:
    with open(path, "w") as f:
        for s in samples:
            f.write(s.to_json())
            f.write("\n")


def read_samples(path) -> List[TrainingSample]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(TrainingSample.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise MalformedLogError(f"{path}:{lineno}: bad sample record ({exc})") from exc
    return out
