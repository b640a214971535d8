"""Set-to-set retrieval and its evaluation metrics.

Each database instance carries K embedding vectors; a query carries its
own K. The score between a query and an instance is the minimum cosine
distance over all embedding pairs, so one well-matched pair suffices.
Scoring runs as blocked matrix products over the normalized vectors,
which keeps it exact (no approximation) but cache-friendly.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import numerics as nm
from .errors import DomainError, MissingGroundTruthError, RetrievalError, ShapeError

_BLOCK_INSTANCES = 256
_RECALL_KS = (1, 5, 10)


@dataclass
class RetrievalIndex:
    """Immutable database of M instances with K x H embeddings each."""

    ids: list
    embeddings: np.ndarray               # (M, K, H)
    _flat_normalized: np.ndarray = field(repr=False, default=None)
    _tie_rank: np.ndarray = field(repr=False, default=None)

    @property
    def size(self):
        return len(self.ids)

    @property
    def num_heads(self):
        return self.embeddings.shape[1]

    @property
    def embed_dim(self):
        return self.embeddings.shape[2]


def build_index(ids, embeddings):
    """Validate and preprocess a database; ids must be unique."""
    ids = [str(i) for i in ids]
    embeddings = np.ascontiguousarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 3:
        raise ShapeError("index embeddings must be (M, K, H)")
    if len(ids) != embeddings.shape[0]:
        raise ShapeError("id count does not match embedding count")
    if len(set(ids)) != len(ids):
        raise RetrievalError("index ids must be unique")
    if embeddings.shape[0] == 0:
        raise RetrievalError("cannot build an empty index")
    nm.check_finite(embeddings, "index embeddings")
    m, k, h = embeddings.shape
    flat, norms = nm.l2_normalize_rows_fwd(embeddings.reshape(m * k, h))
    if np.any(norms < nm.EPS_NORM):
        raise DomainError("index contains a near-zero-norm embedding row")
    tie = np.empty(m, dtype=np.int64)
    tie[sorted(range(m), key=lambda i: ids[i])] = np.arange(m)
    return RetrievalIndex(ids=ids, embeddings=embeddings,
                          _flat_normalized=flat, _tie_rank=tie)


def scores(index, queries):
    """Min-over-pairs cosine distance of each query to each instance.

    ``queries`` is (nq, Kq, H); Kq may differ from the index's K. Returns
    an (nq, M) array.
    """
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    if queries.ndim == 2:
        queries = queries[None, :, :]
    nq, kq, h = queries.shape
    if h != index.embed_dim:
        raise ShapeError(
            f"query embedding dim {h} != index dim {index.embed_dim}"
        )
    qflat, qnorms = nm.l2_normalize_rows_fwd(queries.reshape(nq * kq, h))
    if np.any(qnorms < nm.EPS_NORM):
        raise DomainError("query contains a near-zero-norm embedding row")
    m, k = index.size, index.num_heads
    out = np.empty((nq, m))
    for start in range(0, m, _BLOCK_INSTANCES):
        stop = min(start + _BLOCK_INSTANCES, m)
        chunk = index._flat_normalized[start * k:stop * k]
        dist = 1.0 - _kernels.matmul(qflat, np.ascontiguousarray(chunk.T))
        out[:, start:stop] = dist.reshape(nq, kq, stop - start, k).min(axis=(1, 3))
    return out


def _full_ranking(index, score_row):
    """Positions of all instances sorted ascending by score, ties broken
    by id order."""
    return np.lexsort((index._tie_rank, score_row))


def query(index, q, top_k=None):
    """Ranked (id, distance) list for one K x H query."""
    q = np.ascontiguousarray(q, dtype=np.float64)
    if q.ndim != 2:
        raise ShapeError("query must be a K x H matrix")
    row = scores(index, q[None, :, :])[0]
    order = _full_ranking(index, row)
    if top_k is not None:
        order = order[:top_k]
    return [(index.ids[i], float(row[i])) for i in order]


@dataclass
class MetricsReport:
    """Retrieval metrics for one direction."""

    direction: str
    r_at: dict            # {1: ..., 5: ..., 10: ...}, fractions in [0, 1]
    med_r: float
    nmr: float
    rsum_contribution: float  # 100 * (R@1 + R@5 + R@10)
    num_queries: int
    db_size: int

    def to_dict(self):
        return {
            "direction": self.direction,
            "r_at": {str(k): v for k, v in self.r_at.items()},
            "med_r": self.med_r,
            "nmr": self.nmr,
            "rsum_contribution": self.rsum_contribution,
            "num_queries": self.num_queries,
            "db_size": self.db_size,
        }


def metrics_from_ranks(ranks, db_size, direction="x->y"):
    """Metrics from 1-based best-ground-truth ranks. The median of an
    even-length list is the lower of the two middle values, so Med R is
    always an attained rank."""
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise RetrievalError("no ranks to evaluate")
    if np.any(ranks < 1):
        raise RetrievalError("ranks are 1-based")
    r_at = {k: float(np.mean(ranks <= k)) for k in _RECALL_KS}
    med = float(np.sort(ranks)[(ranks.size - 1) // 2])
    return MetricsReport(
        direction=direction,
        r_at=r_at,
        med_r=med,
        nmr=med / db_size,
        rsum_contribution=100.0 * sum(r_at.values()),
        num_queries=int(ranks.size),
        db_size=int(db_size),
    )


def evaluate(index, queries, ground_truth, direction="x->y"):
    """Rank queries against the index and report metrics.

    ``ground_truth[i]`` is an iterable of ids; a query's rank is the best
    rank among its ground-truth ids. Queries whose ground truth is absent
    from the index are collected and reported together, never ignored.
    """
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    if len(ground_truth) != queries.shape[0]:
        raise ShapeError("one ground-truth set per query required")
    id_pos = {id_: i for i, id_ in enumerate(index.ids)}
    missing = []
    gt_positions = []
    for qi, gts in enumerate(ground_truth):
        gts = [str(g) for g in gts]
        absent = [g for g in gts if g not in id_pos]
        if absent or not gts:
            missing.extend((qi, g) for g in (absent or [None]))
            gt_positions.append(None)
        else:
            gt_positions.append([id_pos[g] for g in gts])
    if missing:
        raise MissingGroundTruthError(missing)

    score_mat = scores(index, queries)
    ranks = np.empty(queries.shape[0], dtype=np.int64)
    for qi in range(queries.shape[0]):
        order = _full_ranking(index, score_mat[qi])
        position = np.empty(index.size, dtype=np.int64)
        position[order] = np.arange(1, index.size + 1)
        ranks[qi] = position[gt_positions[qi]].min()
    return metrics_from_ranks(ranks, index.size, direction)


@dataclass
class BidirectionalReport:
    x_to_y: MetricsReport
    y_to_x: MetricsReport
    rsum: float

    def to_dict(self):
        return {
            "x_to_y": self.x_to_y.to_dict(),
            "y_to_x": self.y_to_x.to_dict(),
            "rsum": self.rsum,
        }


def evaluate_bidirectional(ids, zx, zy, gt_x_to_y=None, gt_y_to_x=None):
    """Evaluate both retrieval directions over paired embeddings.

    ``ids[i]`` names pair i on both sides; by default the i-th x instance's
    ground truth is the i-th y instance and vice versa. ``rsum`` is the sum
    of the six recalls, in percent (600 = perfect).
    """
    ids = [str(i) for i in ids]
    if gt_x_to_y is None:
        gt_x_to_y = [[i] for i in ids]
    if gt_y_to_x is None:
        gt_y_to_x = [[i] for i in ids]
    index_y = build_index(ids, zy)
    index_x = build_index(ids, zx)
    rep_xy = evaluate(index_y, zx, gt_x_to_y, direction="x->y")
    rep_yx = evaluate(index_x, zy, gt_y_to_x, direction="y->x")
    return BidirectionalReport(
        x_to_y=rep_xy, y_to_x=rep_yx,
        rsum=rep_xy.rsum_contribution + rep_yx.rsum_contribution,
    )


def format_table(report):
    """Aligned human-readable table for a bidirectional report."""
    header = (f"{'direction':<10}{'R@1':>8}{'R@5':>8}{'R@10':>8}"
              f"{'MedR':>8}{'nMR':>9}{'rsum':>9}")
    lines = [header]
    for rep in (report.x_to_y, report.y_to_x):
        lines.append(
            f"{rep.direction:<10}"
            f"{rep.r_at[1]:>8.4f}{rep.r_at[5]:>8.4f}{rep.r_at[10]:>8.4f}"
            f"{rep.med_r:>8.0f}{rep.nmr:>9.4f}{rep.rsum_contribution:>9.2f}"
        )
    lines.append(f"{'rsum':<10}{report.rsum:>50.2f}")
    return "\n".join(lines)
