"""Multi-task CTR model, its three objectives and the streaming trainer.

The network is a shared one-hidden-layer trunk over concatenated field
embeddings, dense features and (optionally) target-attention summaries of
the five retrieved history sequences, followed by one linear tower per task.
Gradients are derived by hand; everything is plain numpy.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import crossseq as cs
from .labels import TrainingSample
from .sim import TASKS, History, SimResult

FIELDS: Tuple[str, ...] = ("user", "room", "author", "category", "tag")


class NumericError(ArithmeticError):
    pass


class RoutingError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab: Dict[str, int]
    n_dense: int = 1
    dim: int = 16
    hidden: int = 32
    lr: float = 0.05
    # learning rate multiplier for trunk/tower/attention weights (embeddings use lr as is)
    dense_lr_scale: float = 1.0
    clip_norm: Optional[float] = 10.0
    logit_clip: float = 15.0
    init_scale: float = 0.1
    optimizer: str = "sgd"
    seed: int = 0
    # cross-domain part; empty tuple disables it
    sequences: Tuple[str, ...] = ()
    seq_len: int = 50
    attn_dim: int = 16
    heads: int = 1
    num_short_videos: int = 0
    contrastive_weight: float = 0.1
    temperature: float = 0.1

    def __post_init__(self):
        self.sequences = tuple(self.sequences)
        unknown = set(self.sequences) - set(cs.SEQUENCES)
        if unknown:
            raise ValueError(f"unknown sequences {sorted(unknown)}")
        if self.optimizer not in ("sgd", "adagrad"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def input_dim(self) -> int:
        return len(FIELDS) * self.dim + self.n_dense + len(self.sequences) * self.attn_dim

    def to_dict(self) -> dict:
        return asdict(self)


ModelParams = Dict[str, np.ndarray]


def init_params(cfg: ModelConfig) -> ModelParams:
    """Random embeddings and trunk; zero towers, so every initial prediction is 0.5."""
    rng = np.random.default_rng(cfg.seed)
    p: ModelParams = {}
    for f in FIELDS:
        # last row is the shared out-of-vocabulary entry
        p[f"emb/{f}"] = rng.normal(0.0, cfg.init_scale, size=(cfg.vocab[f] + 1, cfg.dim))
    p["trunk/W"] = rng.normal(0.0, 1.0 / math.sqrt(cfg.input_dim), size=(cfg.input_dim, cfg.hidden))
    p["trunk/b"] = np.zeros(cfg.hidden)
    p["tower/W"] = np.zeros((len(TASKS), cfg.hidden))
    p["tower/b"] = np.zeros(len(TASKS))
    if cfg.sequences:
        p["emb/video"] = rng.normal(0.0, cfg.init_scale, size=(cfg.num_short_videos + 1, cfg.dim))
        q_in = 3 * cfg.dim
        for s in cfg.sequences:
            p[f"esu/{s}/Wq"] = rng.normal(0.0, 1.0 / math.sqrt(q_in), size=(q_in, cfg.attn_dim))
            p[f"esu/{s}/Wk"] = rng.normal(0.0, 1.0 / math.sqrt(cfg.dim), size=(cfg.dim, cfg.attn_dim))
            p[f"esu/{s}/Wv"] = rng.normal(0.0, 1.0 / math.sqrt(cfg.dim), size=(cfg.dim, cfg.attn_dim))
    return p


def copy_params(p: ModelParams) -> ModelParams:
    return {k: v.copy() for k, v in p.items()}


def params_digest(p: ModelParams) -> str:
    h = hashlib.sha256()
    for k in sorted(p):
        h.update(k.encode())
        h.update(np.ascontiguousarray(p[k], dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# features

@dataclass
class FeatureVector:
    ids: Dict[str, int]
    dense: Sequence[float]
    bundle: Optional[Dict[str, np.ndarray]] = None  # sequence name -> global item ids (-1 = pad)


@dataclass
class Batch:
    ids: np.ndarray                      # (B, F) row indices already OOV-mapped
    dense: np.ndarray                    # (B, n_dense)
    seq: Optional[np.ndarray] = None     # (B, S, L) global item ids, -1 padding
    seq_tag: Optional[np.ndarray] = None  # (B, S, L) tag row per item

    def __len__(self) -> int:
        return len(self.ids)


class Catalog:
    """Static item side information: authors, categories and tags of rooms and videos.

    Items share one global id space: rooms ``[0, R)``, short videos ``[R, R + V)``.
    """

    def __init__(self, room_author, room_category, room_tag, room_start, video_author, video_tag):
        self.room_author = np.asarray(room_author, dtype=np.int64)
        self.room_category = np.asarray(room_category, dtype=np.int64)
        self.room_tag = np.asarray(room_tag, dtype=np.int64)
        self.room_start = np.asarray(room_start, dtype=float)
        self.video_author = np.asarray(video_author, dtype=np.int64)
        self.video_tag = np.asarray(video_tag, dtype=np.int64)

    @property
    def num_rooms(self) -> int:
        return len(self.room_tag)

    @classmethod
    def from_sim(cls, sim: SimResult) -> "Catalog":
        from .sim import CATEGORIES

        rooms = sorted(sim.rooms, key=lambda r: r.room_id)
        return cls([r.author_id for r in rooms], [CATEGORIES.index(r.category) for r in rooms],
                   [r.topic for r in rooms], [r.start_time for r in rooms],
                   sim.video_author, sim.video_topic)

    def global_ids(self, h: History) -> np.ndarray:
        return np.where(h.domain == cs.LIVE, h.item_id, self.num_rooms + h.item_id)

    def item_tags(self, gid: np.ndarray) -> np.ndarray:
        R = self.num_rooms
        live = gid < R
        out = np.zeros(gid.shape, dtype=np.int64)
        out[live & (gid >= 0)] = self.room_tag[gid[live & (gid >= 0)]]
        vid = ~live
        out[vid] = self.video_tag[gid[vid] - R]
        return out

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in
                ("room_author", "room_category", "room_tag", "room_start", "video_author", "video_tag")}

    @classmethod
    def from_dict(cls, d: dict) -> "Catalog":
        return cls(**d)


def default_model_config(sim_cfg, catalog: Catalog, **overrides) -> ModelConfig:
    vocab = {
        "user": sim_cfg.num_users,
        "room": catalog.num_rooms,
        "author": int(max(catalog.room_author.max(initial=0), catalog.video_author.max(initial=0))) + 1,
        "category": 3,
        "tag": max(sim_cfg.num_topics, 1),
    }
    overrides.setdefault("num_short_videos", len(catalog.video_tag))
    return ModelConfig(vocab=vocab, **overrides)


def _oov(cfg: ModelConfig, field_name: str, ids: np.ndarray) -> np.ndarray:
    n = cfg.vocab[field_name]
    ids = np.asarray(ids, dtype=np.int64)
    return np.where((ids >= 0) & (ids < n), ids, n)


class Featurizer:
    """Materialises samples (user, room, time) into model batches."""

    def __init__(self, cfg: ModelConfig, catalog: Catalog, histories: Optional[Mapping[int, History]] = None,
                 blank: Sequence[str] = ()):
        self.cfg = cfg
        self.catalog = catalog
        self.histories = histories or {}
        # sequences forced to all-padding (ablations keep the parameter layout intact)
        self.blank = tuple(blank)
        if cfg.sequences and histories is None:
            raise ValueError("sequence features need user histories")

    def static(self, users, rooms, times) -> Batch:
        users = np.asarray(users, dtype=np.int64)
        rooms = np.asarray(rooms, dtype=np.int64)
        times = np.asarray(times, dtype=float)
        cat = self.catalog
        known = (rooms >= 0) & (rooms < cat.num_rooms)
        r = np.where(known, rooms, 0)
        cols = {
            "user": users,
            "room": rooms,
            "author": np.where(known, cat.room_author[r], -1),
            "category": np.where(known, cat.room_category[r], -1),
            "tag": np.where(known, cat.room_tag[r], -1),
        }
        ids = np.stack([_oov(self.cfg, f, cols[f]) for f in FIELDS], axis=1)
        elapsed = np.where(known, times - cat.room_start[r], 0.0) / 3600.0
        dense = elapsed[:, None][:, : self.cfg.n_dense]
        if self.cfg.n_dense > 1:
            dense = np.concatenate([dense, np.zeros((len(users), self.cfg.n_dense - 1))], axis=1)
        return Batch(ids, dense)

    def from_samples(self, samples: Sequence[TrainingSample]) -> Batch:
        return self.static([s.user_id for s in samples], [s.item_id for s in samples],
                           [s.enter_ts for s in samples])

    def attach_sequences(self, batch: Batch, params: ModelParams, users, times) -> Batch:
        """Run the GSUs for every row with current embeddings (retrieval is not differentiated)."""
        cfg = self.cfg
        if not cfg.sequences:
            return batch
        B, S, L = len(batch), len(cfg.sequences), cfg.seq_len
        seq = np.full((B, S, L), cs.PAD, dtype=np.int64)
        cand = item_candidate_embedding(params, batch)
        author = batch.ids[:, FIELDS.index("author")]
        for b in range(B):
            h = self.histories.get(int(users[b]))
            if h is None or len(h) == 0:
                continue
            h = h.before(float(times[b]))
            if len(h) == 0:
                continue
            gid = self.catalog.global_ids(h)
            emb = item_embeddings(params, gid, self.catalog.item_tags(gid), cfg)
            bundle = cs.retrieve_bundle(h, cand[b], int(author[b]), L, emb, cfg.sequences)
            for j, name in enumerate(cfg.sequences):
                if name in self.blank:
                    continue
                idx = bundle[name]
                seq[b, j] = np.where(idx == cs.PAD, cs.PAD, gid[np.maximum(idx, 0)])
        batch.seq = seq
        batch.seq_tag = np.where(seq == cs.PAD, 0, self.catalog.item_tags(np.maximum(seq, 0)))
        return batch

    def batch(self, samples: Sequence[TrainingSample], params: ModelParams) -> Batch:
        b = self.from_samples(samples)
        if self.cfg.sequences:
            self.attach_sequences(b, params, [s.user_id for s in samples], [s.enter_ts for s in samples])
        return b


def item_embeddings(params: ModelParams, gid: np.ndarray, tags: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Embedding of global items: id row (room or video table) plus tag row; zero for padding."""
    gid = np.asarray(gid)
    R = cfg.vocab["room"]
    pad = gid == cs.PAD
    live = (gid < R) & ~pad
    vid = gid >= R
    out = np.zeros(gid.shape + (cfg.dim,))
    out[live] = params["emb/room"][gid[live]]
    if vid.any():
        out[vid] = params["emb/video"][np.minimum(gid[vid] - R, cfg.num_short_videos)]
    t = _oov(cfg, "tag", tags)
    out[~pad] += params["emb/tag"][t[~pad]]
    return out


def item_candidate_embedding(params: ModelParams, batch: Batch) -> np.ndarray:
    room = batch.ids[:, FIELDS.index("room")]
    tag = batch.ids[:, FIELDS.index("tag")]
    return params["emb/room"][room] + params["emb/tag"][tag]


# ---------------------------------------------------------------------------
# forward / backward

@dataclass
class Forward:
    x: np.ndarray
    h: np.ndarray
    raw: np.ndarray
    logits: np.ndarray
    prob: np.ndarray
    esu: Dict[str, tuple] = field(default_factory=dict)
    pools: Dict[str, tuple] = field(default_factory=dict)


def forward(params: ModelParams, batch: Batch, cfg: ModelConfig, with_pools: bool = False) -> Forward:
    parts = [params[f"emb/{f}"][batch.ids[:, i]] for i, f in enumerate(FIELDS)]
    parts.append(np.asarray(batch.dense, dtype=float))
    esu = {}
    pools = {}
    if cfg.sequences:
        if batch.seq is None:
            raise ValueError("batch lacks sequence features")
        Q = np.concatenate([parts[FIELDS.index("room")], parts[FIELDS.index("author")],
                            parts[FIELDS.index("tag")]], axis=1)
        for j, name in enumerate(cfg.sequences):
            idx = batch.seq[:, j]
            S = item_embeddings(params, idx, batch.seq_tag[:, j], cfg)
            mask = idx != cs.PAD
            Wq, Wk, Wv = (params[f"esu/{name}/{w}"] for w in ("Wq", "Wk", "Wv"))
            out, valid, cache = cs.esu_forward(Q, S, mask, Wq, Wk, Wv, cfg.heads)
            parts.append(out)
            esu[name] = (cache, S, mask)
            if with_pools:
                pools[name] = cs.pool_l2(S, mask)
    x = np.concatenate(parts, axis=1)
    h = np.tanh(x @ params["trunk/W"] + params["trunk/b"])
    raw = h @ params["tower/W"].T + params["tower/b"]
    if not np.all(np.isfinite(raw)):
        bad = [TASKS[t] for t in np.flatnonzero(~np.isfinite(raw).all(axis=0))]
        raise NumericError(f"non-finite logits in tower(s) {bad}")
    logits = np.clip(raw, -cfg.logit_clip, cfg.logit_clip)
    prob = 1.0 / (1.0 + np.exp(-logits))
    return Forward(x, h, raw, logits, prob, esu, pools)


@dataclass
class Targets:
    """Per (row, task) supervision: cross-entropy weight, PU weight and label."""
    y: np.ndarray
    ce: np.ndarray
    pu: np.ndarray


FAST_SLOW_FLOWS = {"fast", "slow", "exit"}
MOMENT_FLOWS = {"rt_first", "rt_exit", "exit"}


def route(samples: Sequence[TrainingSample], mode: str) -> Targets:
    """Build loss weights from flow tags; fast/exit and first/exit samples use log loss, slow uses PU."""
    if mode not in ("fast_slow", "moment"):
        raise RoutingError(f"unknown objective mode {mode!r}")
    allowed = FAST_SLOW_FLOWS if mode == "fast_slow" else MOMENT_FLOWS
    B, T = len(samples), len(TASKS)
    y = np.zeros((B, T))
    ce = np.zeros((B, T))
    pu = np.zeros((B, T))
    for i, s in enumerate(samples):
        if s.flow not in allowed:
            raise RoutingError(f"{s.flow} sample (session {s.session_id}) cannot train in {mode} mode")
        m = np.array([s.mask[t] for t in TASKS], dtype=float)
        y[i] = [s.labels[t] for t in TASKS]
        if s.flow == "slow":
            pu[i] = m
        else:
            ce[i] = m
    return Targets(y, ce, pu)


def batch_loss(fw: Forward, tg: Targets) -> Tuple[float, np.ndarray]:
    p = fw.prob
    ce = -(tg.y * np.log(p) + (1.0 - tg.y) * np.log1p(-p))
    pu = -(np.log(p) - np.log1p(-p))
    per_task = (tg.ce * ce + tg.pu * pu).sum(axis=0)
    return float(per_task.sum()), per_task


def backward(params: ModelParams, batch: Batch, fw: Forward, tg: Targets, cfg: ModelConfig,
             contrastive: bool = True) -> Tuple[float, Dict[str, np.ndarray], Dict[str, Tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Loss and gradients. Returns ``(loss, dense_grads, sparse_grads, per_task_loss)``.

    Sparse gradients map an embedding table name to ``(unique_rows, row_grads)``.
    """
    loss, per_task = batch_loss(fw, tg)
    g_logit = tg.ce * (fw.prob - tg.y) - tg.pu
    g_logit = np.where(np.abs(fw.raw) > cfg.logit_clip, 0.0, g_logit)
    dense: Dict[str, np.ndarray] = {}
    dense["tower/W"] = g_logit.T @ fw.h
    dense["tower/b"] = g_logit.sum(axis=0)
    g_h = g_logit @ params["tower/W"]
    g_z = g_h * (1.0 - fw.h ** 2)
    dense["trunk/W"] = fw.x.T @ g_z
    dense["trunk/b"] = g_z.sum(axis=0)
    g_x = g_z @ params["trunk/W"].T

    rows: Dict[str, List[np.ndarray]] = {}
    grads: Dict[str, List[np.ndarray]] = {}

    def push(table, idx, g):
        rows.setdefault(table, []).append(np.asarray(idx).reshape(-1))
        grads.setdefault(table, []).append(np.asarray(g).reshape(-1, g.shape[-1]))

    D = cfg.dim
    g_field = {}
    for i, f in enumerate(FIELDS):
        g_field[f] = g_x[:, i * D:(i + 1) * D].copy()
    off = len(FIELDS) * D + cfg.n_dense

    if cfg.sequences:
        g_seq_items: Dict[str, np.ndarray] = {}
        g_Q = 0.0
        for j, name in enumerate(cfg.sequences):
            g_out = g_x[:, off + j * cfg.attn_dim: off + (j + 1) * cfg.attn_dim]
            cache, S, mask = fw.esu[name]
            Wq, Wk, Wv = (params[f"esu/{name}/{w}"] for w in ("Wq", "Wk", "Wv"))
            dQ, dS, dWq, dWk, dWv = cs.esu_backward(cache, g_out, Wq, Wk, Wv)
            dense[f"esu/{name}/Wq"] = dWq
            dense[f"esu/{name}/Wk"] = dWk
            dense[f"esu/{name}/Wv"] = dWv
            g_Q = g_Q + dQ
            g_seq_items[name] = dS * mask[..., None]
        g_field["room"] += g_Q[:, :D]
        g_field["author"] += g_Q[:, D:2 * D]
        g_field["tag"] += g_Q[:, 2 * D:]

        if contrastive and cfg.contrastive_weight and "mixed" in cfg.sequences:
            extra, cl_loss = _contrastive_grads(params, batch, fw, cfg)
            loss += cl_loss
            for name, g in extra.items():
                g_seq_items[name] = g_seq_items[name] + g
        for j, name in enumerate(cfg.sequences):
            _push_items(push, batch.seq[:, j], batch.seq_tag[:, j], g_seq_items[name], cfg)

    for i, f in enumerate(FIELDS):
        push(f"emb/{f}", batch.ids[:, i], g_field[f])

    sparse = {}
    for table in rows:
        idx = np.concatenate(rows[table])
        g = np.concatenate(grads[table])
        uniq, inv = np.unique(idx, return_inverse=True)
        acc = np.zeros((len(uniq), g.shape[1]))
        np.add.at(acc, inv, g)
        sparse[table] = (uniq, acc)
    return loss, dense, sparse, per_task


def _push_items(push, gid, tags, g, cfg: ModelConfig):
    R = cfg.vocab["room"]
    gid = gid.reshape(-1)
    tags = _oov(cfg, "tag", tags.reshape(-1))
    g = g.reshape(-1, cfg.dim)
    real = gid != cs.PAD
    live = real & (gid < R)
    vid = real & (gid >= R)
    if live.any():
        push("emb/room", gid[live], g[live])
    if vid.any():
        push("emb/video", np.minimum(gid[vid] - R, cfg.num_short_videos), g[vid])
    if real.any():
        push("emb/tag", tags[real], g[real])


def _contrastive_grads(params, batch, fw, cfg):
    """Weighted sum of the four pool alignments anchored on the mixed sequence."""
    _, S_mix, m_mix = fw.esu["mixed"]
    A, va = cs.pool_l2(S_mix, m_mix)
    g_items = {"mixed": np.zeros_like(S_mix)}
    gA_total = np.zeros_like(A)
    loss = 0.0
    for name in cs.ALIGNED:
        if name not in cfg.sequences:
            continue
        _, S, m = fw.esu[name]
        O, vo = cs.pool_l2(S, m)
        keep = np.flatnonzero(va & vo)
        g_items[name] = np.zeros_like(S)
        if len(keep) < 2:
            continue
        l, gA, gO = cs.contrastive_align_grad(A[keep], O[keep], cfg.temperature)
        w = cfg.contrastive_weight
        loss += w * l
        gA_total[keep] += w * gA
        gOf = np.zeros_like(O)
        gOf[keep] = w * gO
        g_items[name] = cs.pool_l2_backward(S, m, gOf)
    g_items["mixed"] = cs.pool_l2_backward(S_mix, m_mix, gA_total)
    return g_items, loss


def contrastive_loss(params: ModelParams, batch: Batch, cfg: ModelConfig) -> float:
    fw = forward(params, batch, cfg)
    return _contrastive_grads(params, batch, fw, cfg)[1]


# ---------------------------------------------------------------------------
# single-example API

Prediction = Dict[str, float]


def _single_batch(cfg: ModelConfig, fv: FeatureVector) -> Batch:
    ids = np.array([[_oov(cfg, f, fv.ids.get(f, -1)) for f in FIELDS]], dtype=np.int64)
    dense = np.asarray(fv.dense, dtype=float).reshape(1, -1)
    if not np.all(np.isfinite(dense)):
        raise NumericError("dense features must be finite")
    b = Batch(ids, dense)
    if cfg.sequences:
        L = cfg.seq_len
        seq = np.full((1, len(cfg.sequences), L), cs.PAD, dtype=np.int64)
        tags = np.zeros_like(seq)
        for j, name in enumerate(cfg.sequences):
            if fv.bundle and name in fv.bundle:
                ids_ = np.asarray(fv.bundle[name], dtype=np.int64)[:L]
                seq[0, j, : len(ids_)] = ids_
                if fv.bundle.get(f"{name}_tag") is not None:
                    tags[0, j, : len(ids_)] = np.asarray(fv.bundle[f"{name}_tag"])[:L]
        b.seq, b.seq_tag = seq, tags
    return b


def predict(params: ModelParams, features: FeatureVector, cfg: ModelConfig) -> Prediction:
    fw = forward(params, _single_batch(cfg, features), cfg)
    return {t: float(fw.prob[0, i]) for i, t in enumerate(TASKS)}


def _probs(prediction) -> Dict[str, float]:
    if isinstance(prediction, Mapping):
        pred = dict(prediction)
    else:
        pred = dict(zip(TASKS, np.atleast_1d(prediction)))
    for t, v in pred.items():
        if not 0.0 < v < 1.0:
            raise NumericError(f"prediction for {t} is {v}, outside (0, 1)")
    return pred


def _bce(y: float, p: float) -> float:
    return -(y * math.log(p) + (1.0 - y) * math.log1p(-p))


def loss_fast(prediction, labels: Mapping[str, int]) -> float:
    """Summed log loss over every task in ``labels``."""
    pred = _probs(prediction)
    return sum(_bce(labels[t], pred[t]) for t in labels)


def loss_slow_pu(prediction, missing_tasks: Iterable[str]) -> float:
    """Positive-unlabeled correction for positives a fast sample reported as negatives."""
    pred = _probs(prediction)
    return sum(-(math.log(pred[t]) - math.log1p(-pred[t])) for t in missing_tasks)


def loss_moment(prediction, labels: Mapping[str, int], mask: Mapping[str, bool]) -> float:
    """Log loss over unmasked tasks only."""
    pred = _probs(prediction)
    return sum(_bce(labels[t], pred[t]) for t in labels if mask.get(t, False))


def ranking_score(prediction, weights: Optional[Mapping[str, float]] = None) -> float:
    """Product over tasks of ``(1 + p) ** w``; default weights are 1."""
    pred = dict(prediction) if isinstance(prediction, Mapping) else dict(zip(TASKS, prediction))
    weights = weights or {}
    score = 1.0
    for t, p in pred.items():
        w = float(weights.get(t, 1.0))
        if not math.isfinite(w):
            raise ValueError(f"weight for {t} is not finite")
        score *= (1.0 + p) ** w
    return score


# ---------------------------------------------------------------------------
# optimisation

class Optimizer:
    def __init__(self, cfg: ModelConfig, params: ModelParams):
        self.cfg = cfg
        self.acc = {k: np.zeros_like(v) for k, v in params.items()} if cfg.optimizer == "adagrad" else None

    def step(self, params: ModelParams, dense: Dict[str, np.ndarray], sparse: Dict[str, tuple]) -> None:
        lr = self.cfg.lr
        scale = 1.0
        if self.cfg.clip_norm:
            sq = sum(float((g * g).sum()) for g in dense.values())
            sq += sum(float((g * g).sum()) for _, g in sparse.values())
            norm = math.sqrt(sq)
            if norm > self.cfg.clip_norm:
                scale = self.cfg.clip_norm / norm
        for k, g in dense.items():
            params[k] -= self._delta(k, None, g * scale, lr * self.cfg.dense_lr_scale)
        for k, (rows, g) in sparse.items():
            params[k][rows] -= self._delta(k, rows, g * scale, lr)

    def _delta(self, name, rows, g, lr):
        if self.acc is None:
            return lr * g
        acc = self.acc[name]
        if rows is None:
            acc += g * g
            return lr * g / (np.sqrt(acc) + 1e-8)
        acc[rows] += g * g
        return lr * g / (np.sqrt(acc[rows]) + 1e-8)


@dataclass
class TraceRow:
    step: int
    report_ts: float
    loss: float
    per_task: np.ndarray
    n: int


def _batches(samples: Sequence[TrainingSample], batch_size: int, bucket: Optional[float]):
    """Consecutive groups in stream order: by report_ts bucket, capped at batch_size rows."""
    start = 0
    n = len(samples)
    while start < n:
        end = start + 1
        if bucket:
            key = math.floor(samples[start].report_ts / bucket)
            while end < n and end - start < batch_size and math.floor(samples[end].report_ts / bucket) == key:
                end += 1
        else:
            end = min(start + batch_size, n)
        yield start, end
        start = end


def train_stream(params: ModelParams, samples: Sequence[TrainingSample], mode: str, cfg: ModelConfig,
                 featurizer: Featurizer, batch_size: int = 1, bucket: Optional[float] = None,
                 snapshot_every: Optional[float] = None,
                 on_snapshot: Optional[Callable[[float, ModelParams], None]] = None,
                 snapshot_until: Optional[float] = None,
                 optimizer: Optional[Optimizer] = None) -> Tuple[ModelParams, List[TraceRow]]:
    """One SGD step per sample (or per report_ts bucket) in report_ts order.

    ``on_snapshot(t, params)`` fires for every grid time ``t = k * snapshot_every``
    before the first sample reported after ``t`` is applied.
    Params are updated in place and also returned.
    """
    for a, b in zip(samples, samples[1:]):
        if b.report_ts < a.report_ts:
            raise ValueError("sample stream must be sorted by report_ts")
    targets = route(samples, mode)
    opt = optimizer or Optimizer(cfg, params)
    trace: List[TraceRow] = []
    static = featurizer.from_samples(samples) if samples else None
    next_snap = 0.0
    step = 0

    def fire(upto: float):
        nonlocal next_snap
        while snapshot_every and on_snapshot and next_snap <= upto:
            on_snapshot(next_snap, params)
            next_snap += snapshot_every

    for start, end in _batches(samples, batch_size, bucket):
        fire(samples[start].report_ts - 1e-9)
        batch = Batch(static.ids[start:end], static.dense[start:end])
        if cfg.sequences:
            chunk = samples[start:end]
            featurizer.attach_sequences(batch, params, [s.user_id for s in chunk], [s.enter_ts for s in chunk])
        tg = Targets(targets.y[start:end], targets.ce[start:end], targets.pu[start:end])
        fw = forward(params, batch, cfg)
        loss, dense, sparse, per_task = backward(params, batch, fw, tg, cfg)
        opt.step(params, dense, sparse)
        trace.append(TraceRow(step, samples[end - 1].report_ts, loss, per_task, end - start))
        step += 1
    if snapshot_until is not None:
        fire(snapshot_until)
    return params, trace


def predict_ctr_series(snapshots: Iterable[Tuple[float, ModelParams]], room: int, probe_users: Sequence[int],
                       cfg: ModelConfig, featurizer: Featurizer) -> Tuple[np.ndarray, np.ndarray]:
    """Mean predicted click probability of ``room`` over ``probe_users`` at each snapshot time."""
    ts, vals = [], []
    for t, p in snapshots:
        ts.append(t)
        vals.append(probe_ctr(p, [room], probe_users, t, cfg, featurizer)[0])
    return np.array(ts), np.array(vals)


def probe_ctr(params: ModelParams, rooms: Sequence[int], probe_users: Sequence[int], t: float,
              cfg: ModelConfig, featurizer: Featurizer) -> np.ndarray:
    """Mean predicted click probability per room over the probe users at time ``t``."""
    users = np.tile(np.asarray(probe_users, dtype=np.int64), len(rooms))
    rr = np.repeat(np.asarray(rooms, dtype=np.int64), len(probe_users))
    times = np.full(len(users), float(t))
    b = featurizer.static(users, rr, times)
    if cfg.sequences:
        featurizer.attach_sequences(b, params, users, times)
    prob = forward(params, b, cfg).prob[:, TASKS.index("click")]
    return prob.reshape(len(rooms), len(probe_users)).mean(axis=1)


def predict_samples(params: ModelParams, users, rooms, times, cfg: ModelConfig, featurizer: Featurizer,
                    chunk: int = 512) -> np.ndarray:
    """Predicted probabilities (N, T) for arbitrary (user, room, time) triples."""
    users = np.asarray(users)
    out = []
    for i in range(0, len(users), chunk):
        b = featurizer.static(users[i:i + chunk], np.asarray(rooms)[i:i + chunk], np.asarray(times)[i:i + chunk])
        if cfg.sequences:
            featurizer.attach_sequences(b, params, users[i:i + chunk], np.asarray(times)[i:i + chunk])
        out.append(forward(params, b, cfg).prob)
    return np.concatenate(out) if out else np.zeros((0, len(TASKS)))


# ---------------------------------------------------------------------------
# persistence

_MAGIC = b"LCTRCKPT1\n"


def save_checkpoint(params: ModelParams, cfg: ModelConfig, path, extra: Optional[dict] = None) -> None:
    """JSON header line (names, shapes, offsets, config) followed by little-endian float64 blobs."""
    names = sorted(params)
    entries, offset = [], 0
    for k in names:
        n = int(params[k].size)
        entries.append({"name": k, "shape": list(params[k].shape), "offset": offset, "count": n})
        offset += n
    header = json.dumps({"tensors": entries, "config": cfg.to_dict(), "extra": extra or {}},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for k in names:
            f.write(np.ascontiguousarray(params[k], dtype="<f8").tobytes())


def load_checkpoint(path) -> Tuple[ModelParams, ModelConfig, dict]:
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not a checkpoint")
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n))
        blob = np.frombuffer(f.read(), dtype="<f8")
    params = {e["name"]: blob[e["offset"]: e["offset"] + e["count"]].reshape(e["shape"]).copy()
              for e in header["tensors"]}
    return params, ModelConfig(**header["config"]), header["extra"]


def write_trace(trace: Sequence[TraceRow], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "report_ts", "loss", "n"] + [f"loss_{t}" for t in TASKS])
        for r in trace:
            w.writerow([r.step, repr(float(r.report_ts)), repr(float(r.loss)), r.n]
                       + [repr(float(v)) for v in r.per_task])
