"""Discrete-event simulator for live rooms with highlight moments.

Each room carries a latent attractiveness process (a flat base level plus
disjoint additive boosts). Users receive live impressions at Poisson times;
every behavior of a session is drawn with probability proportional to the
room's attractiveness at the moment of entry and occurs after a shifted
exponential delay. Behaviors falling after the session exit are dropped.

Short-video watches are simulated alongside so that every user owns a long
interaction history for the cross-domain sequence features.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

TASKS: Tuple[str, ...] = ("click", "effective_view", "long_view", "like", "comment", "gift")
SAMPLED_BEHAVIORS: Tuple[str, ...] = ("click", "like", "comment", "gift")
BEHAVIORS: Tuple[str, ...] = ("impression",) + TASKS + ("exit",)
CATEGORIES: Tuple[str, ...] = ("talent_show", "game_play", "other")
DOMAINS: Tuple[str, ...] = ("live", "short_video")

# within-session ordering for events sharing a timestamp
_BEHAVIOR_ORDER = {b: i for i, b in enumerate(BEHAVIORS)}


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class Highlight:
    start: float
    end: float
    boost: float


@dataclass
class RoomState:
    room_id: int
    author_id: int
    category: str
    start_time: float
    end_time: float
    highlight_schedule: List[Highlight] = field(default_factory=list)
    base_attractiveness: float = 0.2
    topic: int = 0

    def __post_init__(self):
        self.highlight_schedule = [h if isinstance(h, Highlight) else Highlight(*h)
                                   for h in self.highlight_schedule]
        if not self.end_time > self.start_time:
            raise SimulationError(f"room {self.room_id}: end_time must exceed start_time")
        if not 0.0 <= self.base_attractiveness <= 1.0:
            raise SimulationError(f"room {self.room_id}: base_attractiveness outside [0, 1]")
        if self.category not in CATEGORIES:
            raise SimulationError(f"room {self.room_id}: unknown category {self.category!r}")
        prev_end = self.start_time
        for h in self.highlight_schedule:
            if h.boost < 0:
                raise SimulationError(f"room {self.room_id}: negative boost")
            if h.start < prev_end or h.end <= h.start or h.end > self.end_time:
                raise SimulationError(
                    f"room {self.room_id}: highlights must be sorted, disjoint and inside the room lifetime")
            prev_end = h.end

    @property
    def onsets(self) -> List[float]:
        return [h.start for h in self.highlight_schedule]


def attractiveness(room: RoomState, t: float) -> float:
    """Attractiveness of ``room`` at time ``t``: base plus the covering boost, clamped to [0, 1]."""
    if not room.start_time <= t <= room.end_time:
        raise SimulationError(
            f"t={t} outside lifetime [{room.start_time}, {room.end_time}] of room {room.room_id}")
    boost = 0.0
    for h in room.highlight_schedule:
        if h.start <= t < h.end:
            boost = h.boost
            break
    return min(max(room.base_attractiveness + boost, 0.0), 1.0)


def attractiveness_many(room: RoomState, ts: np.ndarray) -> np.ndarray:
    """Vectorised :func:`attractiveness` without the lifetime check."""
    ts = np.asarray(ts, dtype=float)
    a = np.full(ts.shape, room.base_attractiveness)
    for h in room.highlight_schedule:
        a = np.where((ts >= h.start) & (ts < h.end), room.base_attractiveness + h.boost, a)
    return np.clip(a, 0.0, 1.0)


@dataclass
class InteractionEvent:
    event_id: int
    user_id: int
    item_id: int
    domain: str
    behavior: str
    timestamp: float
    session_id: int
    value: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps({
            "event_id": self.event_id, "user_id": self.user_id, "item_id": self.item_id,
            "domain": self.domain, "behavior": self.behavior, "ts": self.timestamp,
            "session_id": self.session_id, "value": self.value,
        })

    @classmethod
    def from_dict(cls, d: dict) -> "InteractionEvent":
        return cls(int(d["event_id"]), int(d["user_id"]), int(d["item_id"]), d["domain"],
                   d["behavior"], float(d["ts"]), int(d["session_id"]),
                   None if d.get("value") is None else float(d["value"]))


@dataclass
class SessionRecord:
    session_id: int
    user_id: int
    room_id: int
    enter: float
    exit: float
    events: List[InteractionEvent]

    @property
    def duration(self) -> float:
        return self.exit - self.enter


@dataclass
class DelaySpec:
    """Shifted exponential: ``shift + Exp(scale)`` seconds. ``scale=0`` gives a fixed delay."""
    shift: float
    scale: float

    @property
    def mean(self) -> float:
        return self.shift + self.scale


def _default_delays() -> Dict[str, DelaySpec]:
    return {
        "click": DelaySpec(2.0, 88.0),
        "like": DelaySpec(5.0, 215.0),
        "comment": DelaySpec(5.0, 225.0),
        "gift": DelaySpec(10.0, 590.0),
    }


def _default_sparsity() -> Dict[str, float]:
    return {"click": 0.5, "like": 0.3, "comment": 0.25, "gift": 0.1}


@dataclass
class SimConfig:
    num_users: int = 2000
    num_rooms: int = 20
    num_short_videos: int = 2000
    horizon: float = 6 * 3600.0
    seed: int = 42
    behavior_delay_distributions: Dict[str, DelaySpec] = field(default_factory=_default_delays)
    sparsity: Dict[str, float] = field(default_factory=_default_sparsity)
    effective_view_threshold: float = 10.0
    long_view_threshold: float = 60.0
    # live impressions per user per hour
    live_rate: float = 3.0
    noclick_watch: DelaySpec = field(default_factory=lambda: DelaySpec(1.0, 8.0))
    post_click_watch: DelaySpec = field(default_factory=lambda: DelaySpec(30.0, 900.0))
    # room generation
    base_range: Tuple[float, float] = (0.1, 0.3)
    boost_range: Tuple[float, float] = (0.35, 0.6)
    highlight_duration: Tuple[float, float] = (600.0, 1200.0)
    highlight_gap: DelaySpec = field(default_factory=lambda: DelaySpec(1200.0, 2400.0))
    room_stagger: float = 0.1
    # user interests; affinity_strength=0 makes behavior rates depend on attractiveness only
    num_topics: int = 6
    favorite_topics: int = 2
    topic_dwell: float = 2400.0
    affinity_strength: float = 1.0
    # short-video side
    short_video_rate: float = 27.0
    lifelong_history: int = 100
    lifelong_span: float = 7 * 86400.0
    num_authors: Optional[int] = None
    # explicit overrides, mostly for scripted runs
    rooms: Optional[List[RoomState]] = None
    arrivals: Optional[List[Tuple[int, int, float]]] = None
    ground_truth_step: float = 30.0

    def __post_init__(self):
        self.behavior_delay_distributions = {
            k: v if isinstance(v, DelaySpec) else DelaySpec(*_pair(v))
            for k, v in self.behavior_delay_distributions.items()}
        for name in ("noclick_watch", "post_click_watch", "highlight_gap"):
            v = getattr(self, name)
            if not isinstance(v, DelaySpec):
                setattr(self, name, DelaySpec(*_pair(v)))
        if self.rooms is not None:
            self.rooms = [r if isinstance(r, RoomState) else RoomState(**r) for r in self.rooms]
        if self.arrivals is not None:
            self.arrivals = [(int(u), int(r), float(t)) for u, r, t in self.arrivals]
        self.validate()

    def validate(self) -> None:
        if self.horizon <= 0:
            raise SimulationError("horizon must be positive")
        if not self.effective_view_threshold < self.long_view_threshold:
            raise SimulationError("effective_view_threshold must be below long_view_threshold")
        for b in SAMPLED_BEHAVIORS:
            if b not in self.sparsity or b not in self.behavior_delay_distributions:
                raise SimulationError(f"missing sparsity/delay for behavior {b!r}")
        for b, r in self.sparsity.items():
            if not 0.0 <= r <= 1.0:
                raise SimulationError(f"sparsity[{b}]={r} outside [0, 1]")
        if min(self.num_users, self.num_rooms, self.num_short_videos) < 0:
            raise SimulationError("counts must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        for key in ("base_range", "boost_range", "highlight_duration"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _pair(v) -> Tuple[float, float]:
    if isinstance(v, dict):
        return float(v["shift"]), float(v["scale"])
    return float(v[0]), float(v[1])


@dataclass
class History:
    """Column store of one user's interactions, sorted by timestamp.

    ``item_id`` is domain-local; ``domain`` is 0 for live and 1 for short video.
    """
    item_id: np.ndarray
    domain: np.ndarray
    author_id: np.ndarray
    topic: np.ndarray
    timestamp: np.ndarray
    long_view: np.ndarray
    like: np.ndarray

    def __len__(self) -> int:
        return len(self.item_id)

    @classmethod
    def empty(cls) -> "History":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), z.copy(), np.zeros(0), np.zeros(0, bool), np.zeros(0, bool))

    def before(self, t: float) -> "History":
        """Snapshot of the items logged strictly before ``t``."""
        n = int(np.searchsorted(self.timestamp, t, side="left"))
        return History(*(getattr(self, f)[:n] for f in _HISTORY_FIELDS))

    def behaviors(self, i: int) -> List[str]:
        out = []
        if self.long_view[i]:
            out.append("long_view")
        if self.like[i]:
            out.append("like")
        return out


_HISTORY_FIELDS = ("item_id", "domain", "author_id", "topic", "timestamp", "long_view", "like")


@dataclass
class SimResult:
    events: List[InteractionEvent]
    rooms: List[RoomState]
    ground_truth: Dict[int, Tuple[np.ndarray, np.ndarray]]
    histories: Dict[int, History]
    video_topic: np.ndarray
    video_author: np.ndarray
    config: SimConfig

    @property
    def room_topic(self) -> np.ndarray:
        return np.array([r.topic for r in self.rooms], dtype=np.int64)


def _make_rooms(cfg: SimConfig, rng: np.random.Generator) -> List[RoomState]:
    rooms = []
    for r in range(cfg.num_rooms):
        start = float(rng.uniform(0, cfg.room_stagger * cfg.horizon))
        end = float(cfg.horizon - rng.uniform(0, cfg.room_stagger * cfg.horizon))
        base = float(rng.uniform(*cfg.base_range))
        category = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
        topic = int(rng.integers(max(cfg.num_topics, 1)))
        highlights = []
        t = start + cfg.highlight_gap.shift / 2 + rng.exponential(cfg.highlight_gap.scale / 2)
        while True:
            dur = rng.uniform(*cfg.highlight_duration)
            boost = rng.uniform(*cfg.boost_range)
            if t + dur > end:
                break
            highlights.append(Highlight(float(t), float(t + dur), float(min(boost, 1.0 - base))))
            t = t + dur + cfg.highlight_gap.shift + rng.exponential(cfg.highlight_gap.scale)
        rooms.append(RoomState(r, r, category, start, end, highlights, base, topic))
    return rooms


def _topic_processes(cfg: SimConfig, rng: np.random.Generator):
    """Piecewise-constant current topic for each user over [-lifelong_span, horizon)."""
    k = max(cfg.num_topics, 1)
    span = cfg.lifelong_span + cfg.horizon
    procs = []
    for _ in range(cfg.num_users):
        favs = rng.choice(k, size=min(cfg.favorite_topics, k), replace=False)
        n = rng.poisson(span / cfg.topic_dwell) + 1
        times = np.sort(rng.uniform(-cfg.lifelong_span, cfg.horizon, size=n))
        times[0] = -cfg.lifelong_span
        wander = rng.random(n) < 0.2
        topics = np.where(wander, rng.integers(k, size=n), favs[rng.integers(len(favs), size=n)])
        procs.append((times, topics.astype(np.int64)))
    return procs


def current_topic(proc, t: np.ndarray) -> np.ndarray:
    times, topics = proc
    idx = np.searchsorted(times, t, side="right") - 1
    return topics[np.clip(idx, 0, len(topics) - 1)]


def _affinity(cfg: SimConfig, match: np.ndarray) -> np.ndarray:
    k = max(cfg.num_topics, 1)
    s = cfg.affinity_strength
    if k == 1 or s == 0:
        return np.ones(match.shape)
    return np.where(match, 1.0 + s, 1.0 - s / (k - 1))


def _sample_arrivals(cfg: SimConfig, rooms: List[RoomState], rng: np.random.Generator):
    if cfg.arrivals is not None:
        arr = sorted(cfg.arrivals, key=lambda a: (a[2], a[0]))
        users = np.array([a[0] for a in arr], dtype=np.int64)
        rids = np.array([a[1] for a in arr], dtype=np.int64)
        times = np.array([a[2] for a in arr], dtype=float)
        return users, rids, times
    counts = rng.poisson(cfg.live_rate * cfg.horizon / 3600.0, size=cfg.num_users)
    users = np.repeat(np.arange(cfg.num_users), counts)
    times = rng.uniform(0, cfg.horizon, size=len(users))
    pick = rng.random(len(users))
    if not rooms or len(users) == 0:
        return users[:0], users[:0], times[:0]
    starts = np.array([r.start_time for r in rooms])
    ends = np.array([r.end_time for r in rooms])
    alive = (times[:, None] >= starts[None, :]) & (times[:, None] < ends[None, :])
    n_alive = alive.sum(axis=1)
    keep = n_alive > 0
    choice = np.floor(pick * np.maximum(n_alive, 1)).astype(np.int64)
    # index of the choice-th alive room per row
    cum = np.cumsum(alive, axis=1)
    rids = np.argmax(cum > choice[:, None], axis=1)
    order = np.lexsort((users[keep], times[keep]))
    return users[keep][order], rids[keep][order], times[keep][order]


def simulate(config: SimConfig) -> SimResult:
    """Run the simulator. Identical config (including seed) gives an identical result."""
    cfg = config
    ss = np.random.SeedSequence(cfg.seed)
    rng_rooms, rng_users, rng_arr, rng_beh, rng_hist = (np.random.default_rng(s) for s in ss.spawn(5))

    rooms = list(cfg.rooms) if cfg.rooms is not None else _make_rooms(cfg, rng_rooms)
    room_by_id = {r.room_id: r for r in rooms}
    procs = _topic_processes(cfg, rng_users)
    users, rids, enters = _sample_arrivals(cfg, rooms, rng_arr)
    n = len(users)

    # fixed-size draw block per session keeps draws paired across configs
    nb = len(SAMPLED_BEHAVIORS)
    unif = rng_beh.random((n, nb))
    expo = rng_beh.exponential(size=(n, nb))
    watch = rng_beh.exponential(size=(n, 2))
    price = rng_beh.lognormal(1.0, 1.0, size=n)

    att = np.empty(n)
    room_end = np.empty(n)
    room_topic = np.empty(n, dtype=np.int64)
    for rid in np.unique(rids):
        sel = rids == rid
        room = room_by_id[int(rid)]
        att[sel] = attractiveness_many(room, enters[sel])
        room_end[sel] = room.end_time
        room_topic[sel] = room.topic
    if cfg.num_users and n:
        utopic = np.empty(n, dtype=np.int64)
        for u in np.unique(users):
            sel = users == u
            utopic[sel] = current_topic(procs[u], enters[sel]) if u < len(procs) else -1
        aff = _affinity(cfg, utopic == room_topic)
    else:
        aff = np.ones(n)

    occur = {}
    when = {}
    for j, b in enumerate(SAMPLED_BEHAVIORS):
        p = np.clip(cfg.sparsity[b] * att * aff, 0.0, 1.0)
        d = cfg.behavior_delay_distributions[b]
        occur[b] = unif[:, j] < p
        when[b] = enters + d.shift + d.scale * expo[:, j]
    click_delay = when["click"] - enters
    duration = np.where(
        occur["click"],
        click_delay + cfg.post_click_watch.shift + cfg.post_click_watch.scale * watch[:, 1],
        cfg.noclick_watch.shift + cfg.noclick_watch.scale * watch[:, 0])
    exits = np.minimum(enters + duration, room_end)

    rows = []
    for s in range(n):
        t0, t1 = float(enters[s]), float(exits[s])
        rows.append((t0, s, "impression", None))
        for b in SAMPLED_BEHAVIORS:
            tb = float(when[b][s])
            if occur[b][s] and tb <= t1:
                rows.append((tb, s, b, float(price[s]) if b == "gift" else None))
        if t1 - t0 >= cfg.effective_view_threshold:
            rows.append((t0 + cfg.effective_view_threshold, s, "effective_view", None))
        if t1 - t0 >= cfg.long_view_threshold:
            rows.append((t0 + cfg.long_view_threshold, s, "long_view", None))
        rows.append((t1, s, "exit", None))
    rows.sort(key=lambda x: (x[0], x[1], _BEHAVIOR_ORDER[x[2]]))
    events = [InteractionEvent(i, int(users[s]), int(rids[s]), "live", b, ts, s, v)
              for i, (ts, s, b, v) in enumerate(rows)]

    ground_truth = {}
    for room in rooms:
        grid = np.arange(room.start_time, room.end_time, cfg.ground_truth_step)
        ground_truth[room.room_id] = (grid, attractiveness_many(room, grid))

    video_topic, video_author, histories = _short_video_histories(
        cfg, rooms, procs, rng_hist, users, rids, enters, exits, events)
    return SimResult(events, rooms, ground_truth, histories, video_topic, video_author, cfg)


def _short_video_histories(cfg, rooms, procs, rng, users, rids, enters, exits, events):
    k = max(cfg.num_topics, 1)
    nv = cfg.num_short_videos
    n_authors = cfg.num_authors or max(3 * len(rooms), 1)
    video_topic = rng.integers(k, size=nv)
    video_author = rng.integers(n_authors, size=nv)
    by_topic = [np.flatnonzero(video_topic == t) for t in range(k)]

    session_beh: Dict[int, set] = {}
    for e in events:
        session_beh.setdefault(e.session_id, set()).add(e.behavior)
    room_by_id = {r.room_id: r for r in rooms}

    histories: Dict[int, History] = {}
    live_by_user: Dict[int, List[int]] = {}
    for s, u in enumerate(users):
        live_by_user.setdefault(int(u), []).append(s)

    for u in range(cfg.num_users):
        n_life = cfg.lifelong_history if nv else 0
        n_now = rng.poisson(cfg.short_video_rate * cfg.horizon / 3600.0) if nv else 0
        ts = np.sort(np.concatenate([
            rng.uniform(-cfg.lifelong_span, 0, size=n_life), rng.uniform(0, cfg.horizon, size=n_now)]))
        m = len(ts)
        cur = current_topic(procs[u], ts) if m else np.zeros(0, dtype=np.int64)
        on_topic = rng.random(m) < 0.7
        topic = np.where(on_topic, cur, rng.integers(k, size=m))
        vid = np.empty(m, dtype=np.int64)
        pick = rng.random(m)
        for t in range(k):
            sel = topic == t
            if sel.any():
                pool = by_topic[t]
                if len(pool) == 0:
                    pool = np.arange(nv)
                vid[sel] = pool[np.floor(pick[sel] * len(pool)).astype(np.int64)]
        topic = video_topic[vid] if m else topic
        match = topic == cur
        lv = rng.random(m) < np.where(match, 0.5, 0.08)
        lk = rng.random(m) < np.where(match, 0.12, 0.02)

        sids = live_by_user.get(u, [])
        l_item = np.array([rids[s] for s in sids], dtype=np.int64)
        l_ts = np.array([exits[s] for s in sids], dtype=float)
        l_lv = np.array(["long_view" in session_beh.get(s, ()) for s in sids], dtype=bool)
        l_lk = np.array(["like" in session_beh.get(s, ()) for s in sids], dtype=bool)
        l_author = np.array([room_by_id[int(r)].author_id for r in l_item], dtype=np.int64)
        l_topic = np.array([room_by_id[int(r)].topic for r in l_item], dtype=np.int64)

        h = History(
            np.concatenate([vid, l_item]),
            np.concatenate([np.ones(m, np.int64), np.zeros(len(sids), np.int64)]),
            np.concatenate([video_author[vid] if m else vid, l_author]),
            np.concatenate([topic, l_topic]).astype(np.int64),
            np.concatenate([ts, l_ts]),
            np.concatenate([lv, l_lv]),
            np.concatenate([lk, l_lk]),
        )
        order = np.argsort(h.timestamp, kind="stable")
        histories[u] = History(*(getattr(h, f)[order] for f in _HISTORY_FIELDS))
    return video_topic, video_author, histories


def group_sessions(events: Iterable[InteractionEvent]) -> Dict[int, SessionRecord]:
    """Group a live event log into sessions; raises on malformed sessions."""
    from .labels import MalformedLogError

    sessions: Dict[int, SessionRecord] = {}
    for e in events:
        if e.domain != "live":
            continue
        rec = sessions.get(e.session_id)
        if rec is None:
            rec = sessions[e.session_id] = SessionRecord(e.session_id, e.user_id, e.item_id,
                                                         float("inf"), float("nan"), [])
        rec.events.append(e)
    for sid, rec in sessions.items():
        rec.events.sort(key=lambda e: (e.timestamp, e.event_id))
        exits = [e for e in rec.events if e.behavior == "exit"]
        if len(exits) != 1:
            raise MalformedLogError(f"session {sid}: expected exactly one exit event, found {len(exits)}")
        imps = [e for e in rec.events if e.behavior == "impression"]
        rec.enter = imps[0].timestamp if imps else rec.events[0].timestamp
        rec.exit = exits[0].timestamp
        for e in rec.events:
            if not rec.enter <= e.timestamp <= rec.exit:
                raise MalformedLogError(
                    f"session {sid}: event {e.event_id} at {e.timestamp} outside [{rec.enter}, {rec.exit}]")
    return sessions


def empirical_ctr(events: Sequence[InteractionEvent], room_id: int, window: float,
                  start: float = 0.0, end: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Clicks over impressions per window, bucketed by impression time.

    Returns ``(window_starts, ctr)``; windows without impressions hold NaN.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    imp_t: Dict[int, float] = {}
    clicked = set()
    for e in events:
        if e.item_id != room_id or e.domain != "live":
            continue
        if e.behavior == "impression":
            imp_t[e.session_id] = e.timestamp
        elif e.behavior == "click":
            clicked.add(e.session_id)
    if end is None:
        end = max(imp_t.values(), default=start) + window
    edges = np.arange(start, end, window)
    imps = np.zeros(len(edges))
    clicks = np.zeros(len(edges))
    for sid, t in imp_t.items():
        i = int((t - start) // window)
        if 0 <= i < len(edges):
            imps[i] += 1
            clicks[i] += sid in clicked
    with np.errstate(invalid="ignore", divide="ignore"):
        ctr = np.where(imps > 0, clicks / np.maximum(imps, 1), np.nan)
    return edges, ctr


# ---------------------------------------------------------------------------
# serialization

def write_events(events: Iterable[InteractionEvent], path) -> None:
    with open(path, "w") as f:
        for e in events:
            f.write(e.to_json())
            f.write("\n")


def read_events(path) -> List[InteractionEvent]:
    from .labels import MalformedLogError

    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(InteractionEvent.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise MalformedLogError(f"{path}:{lineno}: bad event record ({exc})") from exc
    return out


def write_ground_truth(ground_truth: Dict[int, Tuple[np.ndarray, np.ndarray]], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["room_id", "t", "attractiveness"])
        for rid in sorted(ground_truth):
            grid, a = ground_truth[rid]
            for t, v in zip(grid, a):
                w.writerow([rid, repr(float(t)), repr(float(v))])


def read_ground_truth(path) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
    acc: Dict[int, Tuple[list, list]] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            ts, vs = acc.setdefault(int(row["room_id"]), ([], []))
            ts.append(float(row["t"]))
            vs.append(float(row["attractiveness"]))
    return {k: (np.array(t), np.array(v)) for k, (t, v) in acc.items()}


def write_histories(histories: Dict[int, History], path) -> None:
    """One HistoryItem per line, keyed by user_id."""
    buf = io.StringIO()
    for u in sorted(histories):
        h = histories[u]
        for i in range(len(h)):
            buf.write(json.dumps({
                "user_id": u, "item_id": int(h.item_id[i]), "domain": DOMAINS[int(h.domain[i])],
                "author_id": int(h.author_id[i]), "tag": int(h.topic[i]),
                "timestamp": float(h.timestamp[i]), "behaviors": h.behaviors(i)}))
            buf.write("\n")
    Path(path).write_text(buf.getvalue())


def read_histories(path) -> Dict[int, History]:
    cols: Dict[int, List[tuple]] = {}
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            d = json.loads(line)
            beh = set(d.get("behaviors", ()))
            cols.setdefault(int(d["user_id"]), []).append((
                int(d["item_id"]), DOMAINS.index(d["domain"]), int(d["author_id"]), int(d.get("tag", 0)),
                float(d["timestamp"]), "long_view" in beh, "like" in beh))
    out = {}
    for u, rows in cols.items():
        rows.sort(key=lambda r: r[4])
        arr = list(zip(*rows))
        out[u] = History(np.array(arr[0], np.int64), np.array(arr[1], np.int64), np.array(arr[2], np.int64),
                         np.array(arr[3], np.int64), np.array(arr[4], float), np.array(arr[5], bool),
                         np.array(arr[6], bool))
    return out
