"""End-to-end drivers: policy comparison, cross-domain ablation, alignment study."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import crossseq as cs
from .labels import ReportPolicy, TrainingSample, assemble, sample_volume_ratio
from .metrics import auc, calibration_bias, consistency_table, gauc, onset_lag
from .model import (Catalog, Featurizer, ModelConfig, ModelParams, default_model_config, init_params,
                    predict_samples, probe_ctr, train_stream)
from .sim import TASKS, SimConfig, SimResult, group_sessions, simulate

MODES = {"exit_report": "moment", "realtime": "moment", "fast_slow": "fast_slow"}


@dataclass
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    policies: Tuple[str, ...] = ("exit_report", "fast_slow", "realtime")
    fast_window: float = 300.0
    slow_window: float = 3600.0
    tick: float = 30.0
    realtime_cap: Optional[float] = None
    # trainer and cross-sequence overrides passed to ModelConfig
    model: Dict[str, object] = field(default_factory=lambda: {"n_dense": 0})
    batch_size: int = 1
    snapshot_every: float = 30.0
    probe_users: int = 64
    k: float = 2.0
    baseline: float = 300.0
    max_lag: Optional[float] = 1800.0
    seed: Optional[int] = None

    def __post_init__(self):
        if isinstance(self.sim, dict):
            self.sim = SimConfig.from_dict(self.sim)
        self.policies = tuple(self.policies)
        if self.seed is not None:
            self.sim.seed = int(self.seed)
        for p in self.policies:
            if p not in MODES:
                raise ValueError(f"unknown policy {p!r}")
        if self.snapshot_every <= 0:
            raise ValueError("snapshot_every must be positive")

    def policy(self, kind: str) -> ReportPolicy:
        return ReportPolicy(kind, self.fast_window, self.slow_window, self.tick, self.realtime_cap)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sim"] = self.sim.to_dict()
        d["policies"] = list(self.policies)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return config_hash(self.to_dict())


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def model_config(rc: RunConfig, sim: SimResult, catalog: Catalog) -> ModelConfig:
    overrides = dict(rc.model)
    overrides.setdefault("seed", sim.config.seed)
    return default_model_config(sim.config, catalog, **overrides)


@dataclass
class Holdout:
    """Sessions scored progressively: each with the parameters current at its enter time."""
    users: np.ndarray
    rooms: np.ndarray
    enters: np.ndarray
    labels: np.ndarray  # (N, T) final session labels

    @classmethod
    def from_events(cls, events) -> "Holdout":
        sessions = group_sessions(events)
        recs = sorted(sessions.values(), key=lambda r: (r.enter, r.session_id))
        labels = np.zeros((len(recs), len(TASKS)))
        for i, r in enumerate(recs):
            seen = {e.behavior for e in r.events}
            labels[i] = [t in seen for t in TASKS]
        return cls(np.array([r.user_id for r in recs], dtype=np.int64),
                   np.array([r.room_id for r in recs], dtype=np.int64),
                   np.array([r.enter for r in recs], dtype=float), labels)


@dataclass
class PolicyRun:
    policy: str
    samples: int
    detection_lag: float
    onset_lags: List[float]
    auc: Dict[str, Optional[float]]
    gauc: Dict[str, Optional[float]]
    calibration_bias: Dict[str, Optional[float]]
    series_t: np.ndarray
    series: np.ndarray  # (snapshots, rooms)
    params: ModelParams

    def summary(self) -> dict:
        return {
            "samples": self.samples,
            "detection_lag": _round(self.detection_lag),
            "auc": {t: _round(v) for t, v in self.auc.items()},
            "gauc": {t: _round(v) for t, v in self.gauc.items()},
            "calibration_bias": {t: _round(v) for t, v in self.calibration_bias.items()},
        }


def _round(v, nd=6):
    return None if v is None else round(float(v), nd)


def run_policy(rc: RunConfig, sim: SimResult, kind: str, samples: Optional[List[TrainingSample]] = None,
               holdout: Optional[Holdout] = None) -> PolicyRun:
    """Train one model on ``kind``'s stream, tracking room CTR series and progressive validation."""
    catalog = Catalog.from_sim(sim)
    cfg = model_config(rc, sim, catalog)
    fz = Featurizer(cfg, catalog, sim.histories if cfg.sequences else None)
    params = init_params(cfg)
    if samples is None:
        samples = assemble(sim.events, rc.policy(kind))
    holdout = holdout or Holdout.from_events(sim.events)
    rooms = [r.room_id for r in sim.rooms]
    probes = list(range(min(rc.probe_users, sim.config.num_users)))
    snaps_t: List[float] = []
    snaps: List[np.ndarray] = []
    preds = np.zeros((len(holdout.enters), len(TASKS)))

    def on_snapshot(t: float, p: ModelParams) -> None:
        snaps_t.append(t)
        snaps.append(probe_ctr(p, rooms, probes, t, cfg, fz) if probes else np.zeros(len(rooms)))
        lo, hi = np.searchsorted(holdout.enters, [t, t + rc.snapshot_every], side="left")
        if hi > lo:
            preds[lo:hi] = predict_samples(p, holdout.users[lo:hi], holdout.rooms[lo:hi],
                                           holdout.enters[lo:hi], cfg, fz)

    train_stream(params, samples, MODES[kind], cfg, fz, batch_size=rc.batch_size,
                 snapshot_every=rc.snapshot_every, on_snapshot=on_snapshot,
                 snapshot_until=max(sim.config.horizon, float(holdout.enters.max(initial=0.0))))
    T = np.array(snaps_t)
    M = np.array(snaps).reshape(len(snaps_t), len(rooms))
    lags = [onset_lag(T, M[:, j], o, rc.k, rc.baseline, rc.max_lag)
            for j, room in enumerate(sim.rooms) for o in room.onsets]
    y = holdout.labels
    return PolicyRun(
        kind, len(samples), float(np.mean(lags)) if lags else float("nan"), lags,
        {t: auc(preds[:, i], y[:, i]) for i, t in enumerate(TASKS)},
        {t: gauc(holdout.users, preds[:, i], y[:, i]) for i, t in enumerate(TASKS)},
        calibration_bias(preds, y), T, M, params)


def compare_policies(rc: RunConfig, sim: Optional[SimResult] = None) -> Tuple[dict, Dict[str, PolicyRun]]:
    """Run every policy on the same event log; returns a JSON-ready report and the raw runs."""
    sim = sim or simulate(rc.sim)
    holdout = Holdout.from_events(sim.events)
    runs: Dict[str, PolicyRun] = {}
    streams: Dict[str, List[TrainingSample]] = {}
    for kind in rc.policies:
        if kind not in streams:
            streams[kind] = assemble(sim.events, rc.policy(kind))
        runs[kind] = run_policy(rc, sim, kind, streams[kind], holdout)
    fs = streams.get("fast_slow") or assemble(sim.events, rc.policy("fast_slow"))
    report = {
        "config_hash": rc.digest(),
        "seed": rc.sim.seed,
        "sessions": int(len(holdout.enters)),
        "highlight_onsets": int(sum(len(r.onsets) for r in sim.rooms)),
        "policies": {k: runs[k].summary() for k in rc.policies},
        "sample_volume_ratio": _volume_ratio(streams),
        "consistency": [{"task": r.task, "fast_positive_count": r.fast_positive_count,
                         "slow_window_positive_count": r.slow_window_positive_count,
                         "consistency": _round(r.consistency)} for r in consistency_table(fs)],
    }
    if "realtime" in runs and "fast_slow" in runs:
        report["lag_gap"] = _round(runs["fast_slow"].detection_lag - runs["realtime"].detection_lag)
    return report, runs


def _volume_ratio(streams: Dict[str, List[TrainingSample]]) -> Optional[float]:
    """Realtime samples per fast/slow sample (falls back to the first two policies present)."""
    if "realtime" in streams and "fast_slow" in streams:
        a, b = streams["realtime"], streams["fast_slow"]
    elif len(streams) >= 2:
        a, b = list(streams.values())[:2]
    else:
        return None
    return _round(sample_volume_ratio(a, b)) if b else None


def write_report(report: dict, path) -> None:
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")


def write_series(run: PolicyRun, rooms: Sequence[int], path) -> None:
    with open(path, "w") as f:
        f.write("t," + ",".join(f"room_{r}" for r in rooms) + "\n")
        for t, row in zip(run.series_t, run.series):
            f.write(repr(float(t)) + "," + ",".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# cross-domain ablation

ABLATION_SIM = dict(num_users=500, num_rooms=12, num_short_videos=600, horizon=3 * 3600.0,
                    lifelong_history=60, short_video_rate=20.0, affinity_strength=4.0)


def cross_ablation(seed: int, drop: str = "short", split: float = 2 / 3, seq_len: int = 20,
                   batch_size: int = 64, sim_overrides: Optional[dict] = None,
                   model_overrides: Optional[dict] = None) -> Dict[str, float]:
    """Click AUC on later sessions for the full cross-domain model and the one without ``drop``.

    Both models train on the realtime stream reported before ``split`` of the
    horizon and score every session entering after it.
    """
    sim_kw = dict(ABLATION_SIM, seed=seed, **(sim_overrides or {}))
    sim = simulate(SimConfig(**sim_kw))
    cut = split * sim.config.horizon
    stream = [s for s in assemble(sim.events, ReportPolicy("realtime")) if s.report_ts < cut]
    hold = Holdout.from_events(sim.events)
    later = hold.enters >= cut
    catalog = Catalog.from_sim(sim)
    click = TASKS.index("click")
    out = {}
    kw = dict(n_dense=0, sequences=cs.SEQUENCES, seq_len=seq_len, seed=seed)
    kw.update(model_overrides or {})
    cfg = default_model_config(sim.config, catalog, **kw)
    # the ablated model sees an all-padding sequence, so both start from identical parameters
    for name, blank in (("full", ()), (f"without_{drop}", (drop,))):
        fz = Featurizer(cfg, catalog, sim.histories, blank=blank)
        params = init_params(cfg)
        train_stream(params, stream, "moment", cfg, fz, batch_size=batch_size)
        prob = predict_samples(params, hold.users[later], hold.rooms[later], hold.enters[later], cfg, fz)
        out[name] = auc(prob[:, click], hold.labels[later, click])
    return out


# ---------------------------------------------------------------------------
# alignment study

@dataclass
class AlignmentCorpus:
    """Users whose mixed and short sequences are drawn from the same latent topics."""
    mixed: np.ndarray  # (U, L) item indices
    short: np.ndarray
    n_items: int


def alignment_corpus(seed: int, users: int = 256, items: int = 400, topics: int = 8, L: int = 10,
                     purity: float = 0.8) -> AlignmentCorpus:
    rng = np.random.default_rng(seed)
    item_topic = rng.integers(topics, size=items)
    by_topic = [np.flatnonzero(item_topic == t) for t in range(topics)]
    user_topic = rng.integers(topics, size=users)

    def draw():
        seq = np.empty((users, L), dtype=np.int64)
        for u in range(users):
            on = rng.random(L) < purity
            pool = by_topic[user_topic[u]]
            seq[u] = np.where(on, pool[rng.integers(len(pool), size=L)], rng.integers(items, size=L))
        return seq

    return AlignmentCorpus(draw(), draw(), items)


def mean_pair_cosine(emb: np.ndarray, corpus: AlignmentCorpus) -> float:
    mask = np.ones(corpus.mixed.shape, dtype=bool)
    a, va = cs.pool_l2(emb[corpus.mixed], mask)
    b, vb = cs.pool_l2(emb[corpus.short], mask)
    ok = va & vb
    return float((a[ok] * b[ok]).sum(axis=1).mean())


def alignment_experiment(seed: int = 0, dim: int = 16, epochs: int = 30, batch: int = 64, lr: float = 0.5,
                         temperature: float = 0.1, corpus: Optional[AlignmentCorpus] = None) -> Tuple[float, float]:
    """Train an item table on the mixed/short contrastive term alone; returns cosine before and after."""
    corpus = corpus or alignment_corpus(seed)
    rng = np.random.default_rng(seed + 1)
    emb = rng.normal(0.0, 0.1, size=(corpus.n_items, dim))
    before = mean_pair_cosine(emb, corpus)
    U, L = corpus.mixed.shape
    mask = np.ones((batch, L), dtype=bool)
    for _ in range(epochs):
        order = rng.permutation(U)
        for lo in range(0, U - batch + 1, batch):
            idx = order[lo:lo + batch]
            sm, ss = emb[corpus.mixed[idx]], emb[corpus.short[idx]]
            pm, _ = cs.pool_l2(sm, mask)
            ps, _ = cs.pool_l2(ss, mask)
            _, gA, gO = cs.contrastive_align_grad(pm, ps, temperature)
            g = np.zeros_like(emb)
            np.add.at(g, corpus.mixed[idx], cs.pool_l2_backward(sm, mask, gA))
            np.add.at(g, corpus.short[idx], cs.pool_l2_backward(ss, mask, gO))
            emb -= lr * g
    return before, mean_pair_cosine(emb, corpus)
