"""Evaluation protocols: self-similarity retrieval, kNN classification, k-means clustering, timing.

Retrieval: each query B_q gets a noisy copy B_+; B_+ is ranked among a database D of
other layouts by distance to B_q. Ties are counted against the positive
(rank = 1 + number of database items at distance <= d(B_q, B_+)).
"""
from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .baselines import MEASURES, PointSeqDB
from .bl2vec import BL2Vec, PerturbConfig, RetrievalIndex, perturb_rows
from .core import GameSpec, Layout, PackedLayouts, TableGeometry, pack_layouts
from .synth import make_rng

LEARNED = ("bl2vec",)


# --------------------------------------------------------------------------- retrieval


@dataclass(frozen=True)
class RetrievalProtocol:
    query_count: int = 100
    db_count: int = 500
    perturb: PerturbConfig = PerturbConfig(0.2, 0.2)
    seed: int = 0


@dataclass
class RetrievalSet:
    queries: PackedLayouts
    positives: PackedLayouts
    database: PackedLayouts


@dataclass
class RetrievalResult:
    measure: str
    hr10: float
    mrr: float
    ranks: np.ndarray

    def to_dict(self) -> dict:
        return {"measure": self.measure, "hr10": self.hr10, "mrr": self.mrr}


def make_retrieval_set(dataset: Sequence[Layout], protocol: RetrievalProtocol = RetrievalProtocol(),
                       geom: TableGeometry = TableGeometry(), spec: GameSpec = GameSpec()) -> RetrievalSet:
    """Disjoint random draws of queries and database items, plus one perturbed positive per query."""
    need = protocol.query_count + protocol.db_count
    if len(dataset) < need:
        raise ValueError(f"dataset has {len(dataset)} layouts; the protocol needs {need}")
    rng = make_rng([protocol.seed, 3])
    pick = rng.permutation(len(dataset))[:need]
    packed = pack_layouts([dataset[i].canonical() for i in pick], spec)
    q = packed.take(np.arange(protocol.query_count))
    db = packed.take(np.arange(protocol.query_count, need))
    pos = np.stack([perturb_rows(q.pos[i], q.present[i], protocol.perturb, rng, geom) for i in range(len(q))])
    positives = PackedLayouts(pos, q.present.copy(), [f"{i}+" for i in q.ids])
    return RetrievalSet(q, positives, db)


def rank_metrics(d_db: np.ndarray, d_pos: np.ndarray, hit_at: int = 10):
    """``d_db`` ``(Q, N)`` query-to-database distances, ``d_pos`` ``(Q,)`` query-to-positive."""
    ranks = 1 + (d_db <= d_pos[:, None]).sum(axis=1)
    return float((ranks <= hit_at).mean()), float((1.0 / ranks).mean()), ranks


def rank_metrics_by_sorting(d_db: np.ndarray, d_pos: np.ndarray, hit_at: int = 10):
    """Second implementation: sort D together with B_+ and read off its position."""
    ranks = []
    for row, dp in zip(d_db, d_pos):
        items = sorted([(float(d), 0) for d in row] + [(float(dp), 1)])  # positive sorts after equal distances
        ranks.append(1 + next(i for i, (_, is_pos) in enumerate(items) if is_pos))
    ranks = np.array(ranks)
    return float((ranks <= hit_at).mean()), float(np.mean([1.0 / r for r in ranks])), ranks


def measure_distances(measure: str, rs: RetrievalSet, model: Optional[BL2Vec] = None, use_numba=None):
    """``(Q, N)`` query-to-database and ``(Q,)`` query-to-positive distances."""
    Q = len(rs.queries)
    if measure in LEARNED:
        if model is None:
            raise ValueError(f"measure {measure!r} needs a trained model")
        vq, vp, vd = (model.embed_packed(p) for p in (rs.queries, rs.positives, rs.database))
        index = RetrievalIndex(list(rs.database.ids), vd)
        d_db = np.stack([index.distances(vq[i], exact=True) for i in range(Q)])
        diff = vq - vp
        d_pos = np.sqrt(np.einsum("ij,ij->i", diff, diff, dtype=np.float64))
        return d_db, d_pos
    if measure not in MEASURES:
        raise KeyError(f"unknown measure {measure!r}")
    db = PointSeqDB.from_packed(rs.database)
    pdb = PointSeqDB.from_packed(rs.positives)
    d_db = np.stack([db.scan(measure, rs.queries, i, use_numba)[0] for i in range(Q)])
    d_pos = np.array([pdb.scan(measure, rs.queries, i, use_numba)[0][i] for i in range(Q)])
    return d_db, d_pos


def self_similarity_eval(measure: str, dataset: Sequence[Layout], protocol: RetrievalProtocol = RetrievalProtocol(),
                         model: Optional[BL2Vec] = None, retrieval_set: Optional[RetrievalSet] = None,
                         geom: TableGeometry = TableGeometry(), spec: GameSpec = GameSpec()) -> RetrievalResult:
    rs = retrieval_set or make_retrieval_set(dataset, protocol, geom, spec)
    d_db, d_pos = measure_distances(measure, rs, model)
    hr, mrr, ranks = rank_metrics(d_db, d_pos)
    return RetrievalResult(measure, hr, mrr, ranks)


# --------------------------------------------------------------------------- classification


def pairwise_distances(measure: str, layouts: Sequence[Layout], model: Optional[BL2Vec] = None,
                       spec: GameSpec = GameSpec(), use_numba=None) -> np.ndarray:
    packed = pack_layouts([l.canonical() for l in layouts], spec)
    if measure in LEARNED:
        if model is None:
            raise ValueError(f"measure {measure!r} needs a trained model")
        v = model.embed_packed(packed).astype(np.float64)
        sq = (v * v).sum(axis=1)
        return np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * v @ v.T, 0.0))
    db = PointSeqDB.from_packed(packed)
    return np.stack([db.query(measure, i, use_numba)[0] for i in range(len(packed))])


def knn_predict(distances: np.ndarray, labels, k: int = 10) -> np.ndarray:
    """Leave-one-out kNN label for every item of a full ``(N, N)`` distance matrix.

    Neighbours are the k nearest other items (ties by index); the vote goes to the
    most frequent label, ties broken by the smaller mean neighbour distance, then by
    the smaller label.
    """
    D = np.asarray(distances, dtype=np.float64)
    y = np.asarray(labels)
    if y.dtype == object and any(v is None for v in y):
        raise ValueError("unlabelled items")
    N = len(y)
    if D.shape != (N, N):
        raise ValueError("distance matrix must be square with one label per row")
    if N < k + 1:
        raise ValueError(f"need at least k + 1 = {k + 1} items")
    pred = np.empty(N, dtype=y.dtype)
    idx = np.arange(N)
    for i in range(N):
        others = idx[idx != i]
        order = np.lexsort((others, D[i, others]))[:k]
        nb = others[order]
        best = None
        for lab in np.unique(y[nb]):
            sel = nb[y[nb] == lab]
            key = (-len(sel), float(D[i, sel].mean()), lab)
            if best is None or key < best:
                best = key
        pred[i] = best[2]
    return pred


def knn_classify(distances: np.ndarray, labels, k: int = 10) -> float:
    """Leave-one-out kNN accuracy (see :func:`knn_predict`)."""
    return float((knn_predict(distances, labels, k) == np.asarray(labels)).mean())


# --------------------------------------------------------------------------- clustering


def normalize_index(x: float) -> float:
    """Map an adjusted index from [-1, 1] to [0, 1]."""
    return (x + 1.0) / 2.0


def cluster_eval(vectors: np.ndarray, labels, k: int = 2, seed: int = 0, restarts: int = 20):
    """k-means (k-means++ seeding, best of ``restarts``) scored by normalised ARI and AMI."""
    from sklearn.cluster import KMeans
    from sklearn.metrics import adjusted_mutual_info_score, adjusted_rand_score

    X = np.asarray(vectors, dtype=np.float64)
    if len(X) < k:
        raise ValueError("need at least k items")
    if len(np.unique(X, axis=0)) < k:
        raise ValueError("fewer than k distinct points; clustering is degenerate")
    km = KMeans(n_clusters=k, init="k-means++", n_init=restarts, random_state=seed).fit(X)
    y = np.asarray(labels)
    return normalize_index(adjusted_rand_score(y, km.labels_)), normalize_index(adjusted_mutual_info_score(y, km.labels_))


# --------------------------------------------------------------------------- timing


def linear_fit(x, y):
    """Least-squares line; returns ``(slope, intercept, r2)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss = ((y - y.mean()) ** 2).sum()
    return float(slope), float(intercept), float(1.0 - (resid**2).sum() / ss) if ss > 0 else 1.0


def _time(fn: Callable[[], object], repeat: int, warmup: int = 1) -> float:
    for _ in range(warmup):
        fn()
    best = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best.append(time.perf_counter() - t0)
    return float(np.mean(best))


def timing_bench(measures: Sequence[str], database: PackedLayouts, queries: PackedLayouts, db_sizes: Sequence[int],
                 repeat: int = 3, model: Optional[BL2Vec] = None, use_numba=None, single_thread: bool = True) -> List[Dict]:
    """Mean wall-clock per query for each measure at each database size.

    Learned measures report the query scan time and, separately, the time to embed
    the database (offline) and one query.
    """
    if list(db_sizes) != sorted(db_sizes):
        raise ValueError("db_sizes must be ascending")
    from threadpoolctl import threadpool_limits

    with threadpool_limits(1) if single_thread else contextlib.nullcontext():
        rows = []
        vec_db = None
        if any(m in LEARNED for m in measures):
            t0 = time.perf_counter()
            vec_db = model.embed_packed(database.take(np.arange(max(db_sizes))))
            embed_db_s = time.perf_counter() - t0
            vq = model.embed_packed(queries)
            embed_q_s = _time(lambda: model.embed_packed(queries.take([0])), repeat)
        for size in db_sizes:
            sub = database.take(np.arange(size))
            for m in measures:
                if m in LEARNED:
                    index = RetrievalIndex([str(i) for i in range(size)], vec_db[:size])
                    t = _time(lambda: [index.distances(v) for v in vq], repeat) / len(queries)
                    rows.append({"measure": m, "db_size": size, "query_s": t, "embed_db_s": embed_db_s,
                                 "embed_query_s": embed_q_s, "ops": None})
                else:
                    db = PointSeqDB.from_packed(sub)
                    ops = [0]

                    def run():
                        ops[0] = 0
                        for i in range(len(queries)):
                            ops[0] += int(db.scan(m, queries, i, use_numba)[1])

                    t = _time(run, repeat) / len(queries)
                    rows.append({"measure": m, "db_size": size, "query_s": t, "ops": ops[0]})
        return rows


def format_table(rows: Sequence[Dict], columns: Optional[Sequence[str]] = None) -> str:
    """Aligned plain-text table."""
    if not rows:
        return ""
    cols = list(columns or rows[0].keys())

    def cell(v):
        if isinstance(v, float):
            return f"{v:.6g}"
        return "" if v is None else str(v)

    body = [[cell(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)
