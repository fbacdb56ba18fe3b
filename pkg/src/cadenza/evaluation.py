"""Retrieval ranks, AUC/F1, track aggregation, similarity contrasts and top-k reports."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .dataio import EmbeddingTable, Manifest, SegmentId
from .nn import l2_normalize_rows

log = logging.getLogger(__name__)

TIE_RULE = "rank = 1 + #candidates with strictly greater cosine (ties favour the true item)"
MEDIAN_RULE = "even count: mean of the two central ranks"


class NotEvaluableError(ValueError):
    """A label has only one class present, so AUC is undefined."""


@dataclass
class RankResult:
    per_query_rank: np.ndarray
    median_rank: float
    direction: str
    pool_size: int
    tie_rule: str = TIE_RULE
    median_rule: str = MEDIAN_RULE

    def to_dict(self) -> dict:
        return {
            "direction": self.direction,
            "median_rank": self.median_rank,
            "pool_size": self.pool_size,
            "tie_rule": self.tie_rule,
            "median_rule": self.median_rule,
        }


def median_rank(
    queries: EmbeddingTable,
    candidates: EmbeddingTable,
    truth: Mapping[SegmentId, SegmentId] | None = None,
    direction: str = "a->v",
    chunk: int = 2048,
) -> RankResult:
    """Rank of each query's true candidate by cosine similarity.

    ``truth`` maps query ids to candidate ids; by default a query's true
    candidate carries the same id.
    """
    cand_index = candidates.index()
    target = np.empty(queries.count, dtype=np.int64)
    for i, qid in enumerate(queries.ids):
        cid = qid if truth is None else truth.get(qid)
        if cid is None or cid not in cand_index:
            raise KeyError(f"no true candidate for query {qid}")
        target[i] = cand_index[cid]
    if truth is not None and len(set(target.tolist())) != len(target):
        raise ValueError("truth pairing is not a bijection")

    q = l2_normalize_rows(queries.data)
    c = l2_normalize_rows(candidates.data)
    ranks = np.empty(queries.count, dtype=np.int64)
    for lo in range(0, queries.count, chunk):
        sims = q[lo : lo + chunk] @ c.T
        true = sims[np.arange(sims.shape[0]), target[lo : lo + chunk]]
        ranks[lo : lo + chunk] = 1 + (sims > true[:, None]).sum(axis=1)
    return RankResult(ranks, float(np.median(ranks)) if ranks.size else float("nan"), direction, candidates.count)


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney estimate of P(score+ > score-) + P(tie)/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have the same length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise NotEvaluableError("AUC needs both classes present")
    ranks = rankdata(s)  # midranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f1_macro(probs: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> float:
    """Per-label F1 at ``threshold``, averaged; a label with tp=fp=fn=0 scores 0."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if p.ndim == 1:
        p, y = p[:, None], y[:, None]
    if p.shape != y.shape:
        raise ValueError(f"probs {p.shape} and labels {y.shape} differ in shape")
    pred = p >= threshold
    tp = (pred & y).sum(axis=0)
    fp = (pred & ~y).sum(axis=0)
    fn = (~pred & y).sum(axis=0)
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    return float(f1.mean())


@dataclass
class ProbeMetrics:
    per_label_auc: dict[str, float]
    macro_auc: float
    macro_f1: float
    threshold: float = 0.5
    excluded_labels: list[str] = field(default_factory=list)
    accuracy: float | None = None

    def to_dict(self) -> dict:
        return {
            "macro_auc": self.macro_auc,
            "macro_f1": self.macro_f1,
            "threshold": self.threshold,
            "accuracy": self.accuracy,
            "per_label_auc": self.per_label_auc,
            "excluded_labels": self.excluded_labels,
        }


def probe_metrics(
    probs: np.ndarray, labels: np.ndarray, names: Sequence[str], threshold: float = 0.5
) -> ProbeMetrics:
    """Macro AUC over evaluable labels and macro F1. ``labels`` is a 0/1 matrix."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    per_label, excluded = {}, []
    for j, name in enumerate(names):
        try:
            per_label[name] = roc_auc(probs[:, j], labels[:, j])
        except NotEvaluableError:
            excluded.append(name)
    if excluded:
        log.warning("labels without both classes, excluded from macro AUC: %s", excluded)
    macro = float(np.mean(list(per_label.values()))) if per_label else float("nan")
    return ProbeMetrics(per_label, macro, f1_macro(probs, labels, threshold), threshold, excluded)


def group_mean(values: np.ndarray, groups: Sequence[str]) -> tuple[list[str], np.ndarray]:
    """Mean of ``values`` rows per group, groups in first-seen order."""
    order: dict[str, int] = {}
    idx = np.array([order.setdefault(g, len(order)) for g in groups], dtype=np.int64)
    sums = np.zeros((len(order), values.shape[1]))
    np.add.at(sums, idx, values)
    return list(order), sums / np.bincount(idx, minlength=len(order))[:, None]


@dataclass
class TrackEmbedding:
    video_id: str
    vector: np.ndarray


def aggregate_tracks(segments: EmbeddingTable) -> list[TrackEmbedding]:
    """Mean of each video's segment embeddings, L2-normalized."""
    names, means = group_mean(segments.data.astype(np.float64), [v for v, _ in segments.ids])
    norms = np.linalg.norm(means, axis=1)
    bad = np.flatnonzero(norms <= 1e-12)
    if bad.size:
        raise ValueError(f"video {names[bad[0]]!r} has a zero mean embedding")
    return [TrackEmbedding(n, m / z) for n, m, z in zip(names, means, norms)]


def aggregate_multimodal(audio: Sequence[TrackEmbedding], video: Sequence[TrackEmbedding]) -> list[TrackEmbedding]:
    vmap = {t.video_id: t.vector for t in video}
    out = []
    for t in audio:
        v = np.concatenate([t.vector, vmap[t.video_id]])
        out.append(TrackEmbedding(t.video_id, v / np.linalg.norm(v)))
    return out


def tracks_to_table(tracks: Sequence[TrackEmbedding]) -> EmbeddingTable:
    return EmbeddingTable(np.array([t.vector for t in tracks]), [(t.video_id, 0) for t in tracks])


@dataclass
class ContrastResult:
    grouping: str
    mean_within: float
    mean_between: float
    gap: float
    n_items: int
    n_groups: int
    within_pairs: int
    between_pairs: int
    ci_low: float | None = None
    ci_high: float | None = None
    confidence: float | None = None
    bootstrap_reps: int | None = None
    bootstrap_seed: int | None = None
    exact: bool = True
    skipped_groups: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _contrast_from_sums(sums: np.ndarray, sq: np.ndarray, counts: np.ndarray, w: np.ndarray):
    # within: sum_g w_g (||s_g||^2 - n_g) / sum_g w_g n_g (n_g - 1)
    within = (w * (sq - counts)).sum() / (w * counts * (counts - 1)).sum()
    total = w @ sums
    cross = total @ total - (w**2 * sq).sum()
    cross_pairs = (w @ counts) ** 2 - (w**2 * counts**2).sum()
    return within, cross / cross_pairs


def similarity_contrast(
    segments: EmbeddingTable,
    manifest: Manifest,
    grouping: str = "same_song_vs_different",
    bootstrap: int = 2000,
    confidence: float = 0.99,
    seed: int = 0,
) -> ContrastResult:
    """Mean pairwise cosine within groups versus across groups.

    Songs group segment embeddings by video; genres group track aggregates.
    Pair sums come from per-group sums of unit vectors, so every pair is
    counted exactly without materializing the similarity matrix. The
    confidence interval on the gap uses a Bayesian bootstrap over groups.
    """
    if grouping not in ("same_song_vs_different", "same_genre_vs_different"):
        raise ValueError(f"unknown grouping {grouping!r}")
    if grouping == "same_song_vs_different":
        x = l2_normalize_rows(segments.data)
        keys = [v for v, _ in segments.ids]
    else:
        tracks = aggregate_tracks(segments)
        genre_of = {e.video_id: e.genre for e in manifest.entries}
        missing = [t.video_id for t in tracks if genre_of.get(t.video_id) is None]
        if missing:
            raise ValueError(f"{len(missing)} videos lack a genre label, e.g. {missing[0]!r}")
        x = np.array([t.vector for t in tracks])
        keys = [genre_of[t.video_id] for t in tracks]

    names, means = group_mean(x, keys)
    counts = np.bincount(_group_index(keys, names), minlength=len(names)).astype(np.float64)
    sums = means * counts[:, None]
    keep = counts >= 2
    skipped = int((~keep).sum())
    if skipped:
        log.warning("%d group(s) with fewer than 2 members skipped", skipped)
    sums, counts = sums[keep], counts[keep]
    if len(counts) < 2:
        raise ValueError("need at least two groups with two or more members")
    sq = np.einsum("ij,ij->i", sums, sums)
    w = np.ones(len(counts))
    within, between = _contrast_from_sums(sums, sq, counts, w)
    within_pairs = int((counts * (counts - 1) / 2).sum())
    n = counts.sum()
    result = ContrastResult(
        grouping, float(within), float(between), float(within - between), int(n), len(counts),
        within_pairs, int(n * (n - 1) / 2) - within_pairs, skipped_groups=skipped,
    )
    if bootstrap:
        gen = np.random.default_rng(seed)
        gaps = np.empty(bootstrap)
        for b in range(bootstrap):
            wb = gen.dirichlet(np.ones(len(counts))) * len(counts)
            wi, be = _contrast_from_sums(sums, sq, counts, wb)
            gaps[b] = wi - be
        alpha = (1 - confidence) / 2
        result.ci_low, result.ci_high = (float(v) for v in np.quantile(gaps, [alpha, 1 - alpha]))
        result.confidence, result.bootstrap_reps, result.bootstrap_seed = confidence, bootstrap, seed
    return result


def _group_index(keys: Sequence[str], names: Sequence[str]) -> np.ndarray:
    pos = {n: i for i, n in enumerate(names)}
    return np.array([pos[k] for k in keys], dtype=np.int64)


@dataclass
class Neighbor:
    id: SegmentId
    similarity: float


@dataclass
class RetrievalEntry:
    seed: SegmentId
    neighbors: list[Neighbor]


def retrieve_topk(
    seeds: Sequence[SegmentId], pool: EmbeddingTable, k: int = 3, level: str = "track"
) -> list[RetrievalEntry]:
    """Top-k cosine neighbours per seed, excluding the seed itself.

    At segment level, other segments of the seed's own video are excluded as
    well. Ties are broken by ascending id.
    """
    if level not in ("segment", "track"):
        raise ValueError("level must be 'segment' or 'track'")
    if k >= pool.count:
        raise ValueError(f"k={k} must be smaller than the pool size {pool.count}")
    index = pool.index()
    unit = l2_normalize_rows(pool.data)
    order_ids = sorted(range(pool.count), key=lambda i: pool.ids[i])
    id_rank = np.empty(pool.count, dtype=np.int64)
    id_rank[order_ids] = np.arange(pool.count)
    videos = np.array([v for v, _ in pool.ids])
    out = []
    for sid in seeds:
        sid = (str(sid[0]), int(sid[1]))
        if sid not in index:
            raise KeyError(f"seed {sid} is not in the pool")
        i = index[sid]
        sims = unit @ unit[i]
        excluded = videos == sid[0] if level == "segment" else np.zeros(pool.count, dtype=bool)
        excluded[i] = True
        cand = np.flatnonzero(~excluded)
        if cand.size < k:
            raise ValueError(f"only {cand.size} candidates left for seed {sid}")
        ordered = cand[np.lexsort((id_rank[cand], -sims[cand]))][:k]
        out.append(RetrievalEntry(sid, [Neighbor(pool.ids[j], float(sims[j])) for j in ordered]))
    return out


def retrieval_to_dict(entries: Sequence[RetrievalEntry], level: str) -> dict:
    return {
        "level": level,
        "results": [
            {
                "seed": list(e.seed),
                "neighbors": [{"id": list(n.id), "similarity": round(n.similarity, 4)} for n in e.neighbors],
            }
            for e in entries
        ],
    }


def retrieval_to_text(entries: Sequence[RetrievalEntry], level: str) -> str:
    def fmt(sid):
        return sid[0] if level == "track" else f"{sid[0]}#{sid[1]}"

    rows = [("seed", "rank", "neighbor", "similarity")]
    for e in entries:
        for r, n in enumerate(e.neighbors, 1):
            rows.append((fmt(e.seed), str(r), fmt(n.id), f"{n.similarity:.4f}"))
    return format_table(rows)


def format_table(rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows) + "\n"
