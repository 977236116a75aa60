"""Cross-domain sequence features: GSU retrieval, pooled contrastive alignment, target attention.

Retrieval functions return index arrays into a :class:`~livectr.sim.History`
(length ``L``, ``-1`` marking padding). Embeddings live outside the history
(they are model parameters) and are passed in as an ``(N, D)`` matrix aligned
with the history rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .sim import History

PAD = -1
SEQUENCES: Tuple[str, ...] = ("short", "long", "aidhard", "livelong", "mixed")
ALIGNED: Tuple[str, ...] = ("short", "long", "aidhard", "livelong")
LIVE, SHORT_VIDEO = 0, 1


class DimensionError(ValueError):
    pass


@dataclass
class HistoryItem:
    item_id: int
    domain: str
    author_id: int
    timestamp: float
    behaviors: frozenset = frozenset()
    embedding: Optional[np.ndarray] = None
    tag: int = 0


def history_from_items(items: List[HistoryItem]) -> Tuple[History, Optional[np.ndarray]]:
    """Column-store a list of items; returns the history and stacked embeddings (if all present)."""
    order = sorted(range(len(items)), key=lambda i: items[i].timestamp)
    items = [items[i] for i in order]
    h = History(
        np.array([it.item_id for it in items], dtype=np.int64),
        np.array([LIVE if it.domain == "live" else SHORT_VIDEO for it in items], dtype=np.int64),
        np.array([it.author_id for it in items], dtype=np.int64),
        np.array([it.tag for it in items], dtype=np.int64),
        np.array([it.timestamp for it in items], dtype=float),
        np.array(["long_view" in it.behaviors for it in items], dtype=bool),
        np.array(["like" in it.behaviors for it in items], dtype=bool),
    )
    if items and all(it.embedding is not None for it in items):
        return h, np.stack([np.asarray(it.embedding, dtype=float) for it in items])
    return h, None


def _pad(idx: np.ndarray, L: int) -> np.ndarray:
    out = np.full(L, PAD, dtype=np.int64)
    out[: min(L, len(idx))] = idx[:L]
    return out


def _most_recent(history: History, keep: np.ndarray, L: int) -> np.ndarray:
    cand = np.flatnonzero(keep)
    # stable sort on -timestamp keeps later rows first among equal timestamps
    order = np.lexsort((-cand, -history.timestamp[cand]))
    return _pad(cand[order], L)


def gsu_recent(history: History, L: int) -> np.ndarray:
    """The L most recent short-video rows, newest first."""
    return _most_recent(history, history.domain == SHORT_VIDEO, L)


def gsu_hard_author(history: History, author_id: int, L: int) -> np.ndarray:
    """The L most recent short-video rows by ``author_id``."""
    return _most_recent(history, (history.domain == SHORT_VIDEO) & (history.author_id == author_id), L)


def gsu_mixed_longview(history: History, L: int) -> np.ndarray:
    """The L most recent rows of either domain carrying a long view."""
    return _most_recent(history, history.long_view, L)


def gsu_dot_topk(history: History, domain: int, candidate: np.ndarray, L: int,
                 embeddings: np.ndarray) -> np.ndarray:
    """Top-L rows of ``domain`` by dot product with ``candidate``.

    Ties go to the more recent row, then the smaller item id.
    """
    candidate = np.asarray(candidate, dtype=float)
    if len(history) == 0:
        return _pad(np.empty(0, dtype=np.int64), L)
    embeddings = np.asarray(embeddings, dtype=float).reshape(len(history), -1)
    if embeddings.shape[1] != candidate.shape[-1]:
        raise DimensionError(f"item dim {embeddings.shape[1]} != candidate dim {candidate.shape[-1]}")
    cand = np.flatnonzero(history.domain == domain)
    scores = embeddings[cand] @ candidate
    order = np.lexsort((history.item_id[cand], -history.timestamp[cand], -scores))
    return _pad(cand[order], L)


def retrieve_bundle(history: History, candidate: np.ndarray, author_id: int, L: int,
                    embeddings: np.ndarray, which=SEQUENCES) -> Dict[str, np.ndarray]:
    """Run every requested GSU for one (user history, candidate) pair."""
    out = {}
    for name in which:
        if name == "short":
            out[name] = gsu_recent(history, L)
        elif name == "long":
            out[name] = gsu_dot_topk(history, SHORT_VIDEO, candidate, L, embeddings)
        elif name == "aidhard":
            out[name] = gsu_hard_author(history, author_id, L)
        elif name == "livelong":
            out[name] = gsu_dot_topk(history, LIVE, candidate, L, embeddings)
        elif name == "mixed":
            out[name] = gsu_mixed_longview(history, L)
        else:
            raise KeyError(name)
    return out


def gather(idx: np.ndarray, embeddings: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Stack embeddings for an index array; padding rows are zero. Returns (seq, mask)."""
    mask = idx != PAD
    seq = np.zeros(idx.shape + (embeddings.shape[-1],))
    seq[mask] = embeddings[idx[mask]]
    return seq, mask


# ---------------------------------------------------------------------------
# pooling

def pool_l2(seq: np.ndarray, mask: np.ndarray, eps: float = 1e-12):
    """Mean of the unmasked rows, L2-normalised.

    Works on ``(L, D)`` or batched ``(B, L, D)`` input. Returns
    ``(vectors, valid)``; invalid pools (no rows, or a zero mean) are zero.
    """
    seq = np.asarray(seq, dtype=float)
    m = np.asarray(mask, dtype=float)
    cnt = m.sum(axis=-1, keepdims=True)
    mean = (seq * m[..., None]).sum(axis=-2) / np.maximum(cnt, 1.0)
    norm = np.linalg.norm(mean, axis=-1, keepdims=True)
    valid = (cnt[..., 0] > 0) & (norm[..., 0] > eps)
    out = np.where(valid[..., None], mean / np.where(norm > eps, norm, 1.0), 0.0)
    return out, valid


def pool_l2_backward(seq: np.ndarray, mask: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of ``pool_l2`` with respect to ``seq`` (zero for invalid pools and padding)."""
    m = np.asarray(mask, dtype=float)
    cnt = m.sum(axis=-1, keepdims=True)
    mean = (seq * m[..., None]).sum(axis=-2) / np.maximum(cnt, 1.0)
    norm = np.linalg.norm(mean, axis=-1, keepdims=True)
    valid = (cnt[..., 0] > 0) & (norm[..., 0] > 1e-12)
    safe = np.where(norm > 1e-12, norm, 1.0)
    u = mean / safe
    g_mean = (grad_out - u * (u * grad_out).sum(axis=-1, keepdims=True)) / safe
    g_mean = np.where(valid[..., None], g_mean, 0.0)
    return g_mean[..., None, :] * (m / np.maximum(cnt, 1.0))[..., None]


# ---------------------------------------------------------------------------
# contrastive alignment

def _log_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    x = x - x.max(axis=axis, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=axis, keepdims=True))


def contrastive_align(anchors: np.ndarray, others: np.ndarray, temperature: float = 0.1) -> float:
    """Symmetric in-batch InfoNCE between paired rows of ``anchors`` and ``others``."""
    return contrastive_align_grad(anchors, others, temperature)[0]


def contrastive_align_grad(anchors: np.ndarray, others: np.ndarray, temperature: float = 0.1):
    """Loss and gradients ``(loss, d_anchors, d_others)``."""
    A = np.asarray(anchors, dtype=float)
    O = np.asarray(others, dtype=float)
    B = A.shape[0]
    if B < 2 or O.shape[0] != B:
        raise ValueError(f"contrastive alignment needs a paired batch of at least 2 rows, got {B}")
    S = A @ O.T / temperature
    lr = _log_softmax(S, axis=1)
    lc = _log_softmax(S, axis=0)
    diag = np.arange(B)
    loss = -0.5 * (lr[diag, diag].mean() + lc[diag, diag].mean())
    eye = np.eye(B)
    gS = 0.5 / B * ((np.exp(lr) - eye) + (np.exp(lc) - eye))
    gA = gS @ O / temperature
    gO = gS.T @ A / temperature
    return float(loss), gA, gO


# ---------------------------------------------------------------------------
# target attention

@dataclass
class AttentionCache:
    Q: np.ndarray
    S: np.ndarray
    mask: np.ndarray
    q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    attn: np.ndarray
    heads: int
    scale: float


def esu_forward(Q: np.ndarray, S: np.ndarray, mask: np.ndarray, Wq: np.ndarray, Wk: np.ndarray,
                Wv: np.ndarray, heads: int = 1):
    """Batched target attention. ``Q``: (B, Dq), ``S``: (B, L, D), ``mask``: (B, L).

    Returns ``(out (B, d), valid (B,), cache)``.
    """
    B, L, _ = S.shape
    d = Wq.shape[1]
    if Wk.shape[1] != d or Wv.shape[1] != d or d % heads:
        raise DimensionError("projection widths must agree and divide evenly into heads")
    if Q.shape[1] != Wq.shape[0] or S.shape[2] != Wk.shape[0] or S.shape[2] != Wv.shape[0]:
        raise DimensionError("input and projection dimensions disagree")
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    q = (Q @ Wq).reshape(B, heads, dh)
    K = (S @ Wk).reshape(B, L, heads, dh)
    V = (S @ Wv).reshape(B, L, heads, dh)
    logits = np.einsum("bhc,blhc->bhl", q, K) * scale
    m = mask[:, None, :]
    logits = np.where(m, logits, -np.inf)
    top = np.max(logits, axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    w = np.where(m, np.exp(logits - top), 0.0)
    z = w.sum(axis=-1, keepdims=True)
    attn = w / np.where(z > 0, z, 1.0)
    out = np.einsum("bhl,blhc->bhc", attn, V).reshape(B, d)
    valid = mask.any(axis=1)
    return out, valid, AttentionCache(Q, S, mask, q, K, V, attn, heads, scale)


def esu_backward(cache: AttentionCache, g_out: np.ndarray, Wq: np.ndarray, Wk: np.ndarray, Wv: np.ndarray):
    """Gradients ``(dQ, dS, dWq, dWk, dWv)`` for :func:`esu_forward`."""
    c = cache
    B, L, H, dh = c.K.shape
    go = g_out.reshape(B, H, dh)
    gV = np.einsum("bhl,bhc->blhc", c.attn, go)
    ga = np.einsum("bhc,blhc->bhl", go, c.V)
    gs = c.attn * (ga - (c.attn * ga).sum(axis=-1, keepdims=True))
    gq = np.einsum("bhl,blhc->bhc", gs, c.K) * c.scale
    gK = np.einsum("bhl,bhc->blhc", gs, c.q) * c.scale
    gq = gq.reshape(B, H * dh)
    gK = gK.reshape(B, L, H * dh)
    gV = gV.reshape(B, L, H * dh)
    dWq = c.Q.T @ gq
    dQ = gq @ Wq.T
    S2 = c.S.reshape(B * L, -1)
    dWk = S2.T @ gK.reshape(B * L, -1)
    dWv = S2.T @ gV.reshape(B * L, -1)
    dS = gK @ Wk.T + gV @ Wv.T
    return dQ, dS, dWq, dWk, dWv


def esu_target_attention(candidate: np.ndarray, seq: np.ndarray, mask: np.ndarray,
                         Wq: np.ndarray, Wk: np.ndarray, Wv: np.ndarray, heads: int = 1):
    """Single-sequence target attention; returns ``(vector, weights, valid)``.

    ``weights`` has shape (heads, L). An all-padding sequence yields a zero
    vector with ``valid=False``.
    """
    out, valid, cache = esu_forward(np.asarray(candidate, float)[None], np.asarray(seq, float)[None],
                                    np.asarray(mask, bool)[None], Wq, Wk, Wv, heads)
    return out[0], cache.attn[0], bool(valid[0])
