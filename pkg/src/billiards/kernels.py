"""Query-vs-database scan kernels for the point-matching similarity measures.

Each measure has a numba loop kernel and a numpy implementation vectorised over the
database; :data:`USE_NUMBA` picks the default. Database sequences are packed as
``(N, n, 2)`` with per-row lengths (cue first, then object balls ascending).
Every kernel also returns how many ball-to-ball ground distances it evaluated.
"""
from __future__ import annotations

import math

import numpy as np

from ._accel import USE_NUMBA, njit

# --------------------------------------------------------------------------- numba kernels


@njit
def _ground(a, b, ops):
    m, n = a.shape[0], b.shape[0]
    C = np.empty((m, n))
    for i in range(m):
        for j in range(n):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            C[i, j] = math.sqrt(dx * dx + dy * dy)
    ops[0] += m * n
    return C


@njit
def hausdorff_pair(a, b, ops):
    C = _ground(a, b, ops)
    m, n = C.shape
    h = 0.0
    for i in range(m):
        best = np.inf
        for j in range(n):
            if C[i, j] < best:
                best = C[i, j]
        if best > h:
            h = best
    for j in range(n):
        best = np.inf
        for i in range(m):
            if C[i, j] < best:
                best = C[i, j]
        if best > h:
            h = best
    return h


@njit
def dtw_pair(a, b, ops):
    C = _ground(a, b, ops)
    m, n = C.shape
    D = np.full((m + 1, n + 1), np.inf)
    D[0, 0] = 0.0
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            D[i, j] = C[i - 1, j - 1] + min(D[i - 1, j], D[i, j - 1], D[i - 1, j - 1])
    return D[m, n]


@njit
def frechet_pair(a, b, ops):
    C = _ground(a, b, ops)
    m, n = C.shape
    F = np.full((m + 1, n + 1), np.inf)
    F[0, 0] = 0.0
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            F[i, j] = max(C[i - 1, j - 1], min(F[i - 1, j], F[i, j - 1], F[i - 1, j - 1]))
    return F[m, n]


@njit
def _gcd(a, b):
    while b:
        a, b = b, a % b
    return a


@njit
def emd_pair(a, b, ops):
    """Exact transport cost between uniform masses on ``a`` and ``b``.

    Integer-scaled transportation problem (supply ``|b|/g`` per source, demand
    ``|a|/g`` per sink) solved by successive shortest paths with Dijkstra on
    reduced costs.
    """
    C = _ground(a, b, ops)
    na, nb = C.shape
    g = _gcd(na, nb)
    sup0 = nb // g
    dem0 = na // g
    total = na * sup0
    V = na + nb + 2
    S = na + nb
    T = S + 1
    flow = np.zeros((na, nb), dtype=np.int64)
    sup = np.full(na, sup0, dtype=np.int64)
    dem = np.full(nb, dem0, dtype=np.int64)
    pot = np.zeros(V)
    dist = np.empty(V)
    prev = np.empty(V, dtype=np.int64)
    done = np.empty(V, dtype=np.bool_)
    left = total
    while left > 0:
        dist[:] = np.inf
        prev[:] = -1
        done[:] = False
        dist[S] = 0.0
        for _ in range(V):
            u = -1
            best = np.inf
            for v in range(V):
                if not done[v] and dist[v] < best:
                    best = dist[v]
                    u = v
            if u < 0:
                break
            done[u] = True
            du = dist[u]
            if u == S:
                for i in range(na):
                    if sup[i] > 0:
                        w = max(pot[S] - pot[i], 0.0)
                        if du + w < dist[i]:
                            dist[i] = du + w
                            prev[i] = S
            elif u == T:
                for j in range(nb):
                    if dem[j] < dem0:
                        v = na + j
                        w = max(pot[T] - pot[v], 0.0)
                        if du + w < dist[v]:
                            dist[v] = du + w
                            prev[v] = T
            elif u < na:
                i = u
                for j in range(nb):
                    v = na + j
                    w = max(C[i, j] + pot[u] - pot[v], 0.0)
                    if du + w < dist[v]:
                        dist[v] = du + w
                        prev[v] = u
                if sup[i] < sup0:
                    w = max(pot[u] - pot[S], 0.0)
                    if du + w < dist[S]:
                        dist[S] = du + w
                        prev[S] = u
            else:
                j = u - na
                for i in range(na):
                    if flow[i, j] > 0:
                        w = max(-C[i, j] + pot[u] - pot[i], 0.0)
                        if du + w < dist[i]:
                            dist[i] = du + w
                            prev[i] = u
                if dem[j] > 0:
                    w = max(pot[u] - pot[T], 0.0)
                    if du + w < dist[T]:
                        dist[T] = du + w
                        prev[T] = u
        for v in range(V):
            if dist[v] < np.inf:
                pot[v] += dist[v]
        # bottleneck along T <- ... <- S
        v = T
        delta = left
        while v != S:
            u = prev[v]
            if v == T:
                delta = min(delta, dem[u - na])
            elif u == S:
                delta = min(delta, sup[v])
            elif u >= na and v < na:
                delta = min(delta, flow[v, u - na])
            v = u
        v = T
        while v != S:
            u = prev[v]
            if v == T:
                dem[u - na] -= delta
            elif u == S:
                sup[v] -= delta
            elif u < na:
                flow[u, v - na] += delta
            else:
                flow[v, u - na] -= delta
            v = u
        left -= delta
    cost = 0.0
    for i in range(na):
        for j in range(nb):
            if flow[i, j] > 0:
                cost += flow[i, j] * C[i, j]
    return cost / total


@njit
def pm_pair(apos, apres, bpos, bpres, ops):
    """Peer matching: same numbers first, then leftovers paired in ascending order."""
    n = apos.shape[0]
    s = 0.0
    cnt = 0
    la = np.empty(n, dtype=np.int64)
    lb = np.empty(n, dtype=np.int64)
    na_ = 0
    nb_ = 0
    for k in range(n):
        if apres[k] and bpres[k]:
            dx = apos[k, 0] - bpos[k, 0]
            dy = apos[k, 1] - bpos[k, 1]
            s += math.sqrt(dx * dx + dy * dy)
            cnt += 1
        elif apres[k]:
            la[na_] = k
            na_ += 1
        elif bpres[k]:
            lb[nb_] = k
            nb_ += 1
    for t in range(min(na_, nb_)):
        dx = apos[la[t], 0] - bpos[lb[t], 0]
        dy = apos[la[t], 1] - bpos[lb[t], 1]
        s += math.sqrt(dx * dx + dy * dy)
        cnt += 1
    ops[0] += cnt
    if cnt == 0:
        return 0.0
    return s / cnt


@njit
def _scan_seq(kind, q, db, lens):
    N = db.shape[0]
    out = np.empty(N)
    ops = np.zeros(1, dtype=np.int64)
    for k in range(N):
        b = db[k, : lens[k]]
        if kind == 0:
            out[k] = emd_pair(q, b, ops)
        elif kind == 1:
            out[k] = hausdorff_pair(q, b, ops)
        elif kind == 2:
            out[k] = dtw_pair(q, b, ops)
        else:
            out[k] = frechet_pair(q, b, ops)
    return out, ops[0]


@njit
def _scan_pm(qpos, qpres, dbpos, dbpres):
    N = dbpos.shape[0]
    out = np.empty(N)
    ops = np.zeros(1, dtype=np.int64)
    for k in range(N):
        out[k] = pm_pair(qpos, qpres, dbpos[k], dbpres[k], ops)
    return out, ops[0]


SEQ_KINDS = {"emd": 0, "hausdorff": 1, "dtw": 2, "frechet": 3}


def scan_numba(kind: str, q, db, lens):
    q = np.ascontiguousarray(q, dtype=np.float64)
    db = np.ascontiguousarray(db, dtype=np.float64)
    lens = np.ascontiguousarray(lens, dtype=np.int64)
    return _scan_seq(SEQ_KINDS[kind], q, db, lens)


def scan_pm_numba(qpos, qpres, dbpos, dbpres):
    return _scan_pm(
        np.ascontiguousarray(qpos, dtype=np.float64),
        np.ascontiguousarray(qpres, dtype=np.bool_),
        np.ascontiguousarray(dbpos, dtype=np.float64),
        np.ascontiguousarray(dbpres, dtype=np.bool_),
    )


# --------------------------------------------------------------------------- numpy fallbacks


def _ground_np(q, db, lens):
    """Distances ``(N, m, n)`` plus a validity mask for the padded columns."""
    diff = q[None, :, None, :] - db[:, None, :, :]
    C = np.sqrt((diff**2).sum(-1))
    valid = np.arange(db.shape[1])[None, :] < lens[:, None]  # (N, n)
    return C, valid


def _hausdorff_np(q, db, lens):
    C, valid = _ground_np(q, db, lens)
    v3 = valid[:, None, :]
    a_to_b = np.where(v3, C, np.inf).min(axis=2).max(axis=1)
    b_to_a = np.where(valid, C.min(axis=1), -np.inf).max(axis=1)
    return np.maximum(a_to_b, b_to_a)


def _dp_np(q, db, lens, combine):
    C, _ = _ground_np(q, db, lens)
    N, m, n = C.shape
    D = np.full((N, m + 1, n + 1), np.inf)
    D[:, 0, 0] = 0.0
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            best = np.minimum(np.minimum(D[:, i - 1, j], D[:, i, j - 1]), D[:, i - 1, j - 1])
            D[:, i, j] = combine(C[:, i - 1, j - 1], best)
    return D[np.arange(N), m, lens]


def _emd_np(q, db, lens):
    ops = np.zeros(1, dtype=np.int64)
    fn = getattr(emd_pair, "py_func", emd_pair)
    return np.array([fn(q, db[k, : lens[k]], ops) for k in range(db.shape[0])])


def scan_numpy(kind: str, q, db, lens):
    q = np.asarray(q, dtype=np.float64)
    db = np.asarray(db, dtype=np.float64)
    lens = np.asarray(lens, dtype=np.int64)
    ops = int(q.shape[0] * lens.sum())
    if kind == "hausdorff":
        return _hausdorff_np(q, db, lens), ops
    if kind == "dtw":
        return _dp_np(q, db, lens, np.add), ops
    if kind == "frechet":
        return _dp_np(q, db, lens, np.maximum), ops
    if kind == "emd":
        return _emd_np(q, db, lens), ops
    raise KeyError(kind)


def scan_pm_numpy(qpos, qpres, dbpos, dbpres):
    qpres = np.asarray(qpres, dtype=bool)
    dbpres = np.asarray(dbpres, dtype=bool)
    N, n = dbpres.shape
    both = qpres[None, :] & dbpres
    d_same = np.linalg.norm(dbpos - qpos[None], axis=-1)
    s = np.where(both, d_same, 0.0).sum(axis=1)
    cnt = both.sum(axis=1)
    a_left = qpres[None, :] & ~dbpres  # (N, n)
    b_left = dbpres & ~qpres[None, :]
    # rank of each leftover ball among its side's leftovers (ascending number)
    ra = np.cumsum(a_left, axis=1) - 1
    rb = np.cumsum(b_left, axis=1) - 1
    na_ = a_left.sum(axis=1)
    nb_ = b_left.sum(axis=1)
    pairs = np.minimum(na_, nb_)
    A = np.zeros((N, n, 2))
    B = np.zeros((N, n, 2))
    rows, cols = np.nonzero(a_left)
    A[rows, ra[rows, cols]] = qpos[cols]
    rows, cols = np.nonzero(b_left)
    B[rows, rb[rows, cols]] = dbpos[rows, cols]
    use = np.arange(n)[None, :] < pairs[:, None]
    s += np.where(use, np.linalg.norm(A - B, axis=-1), 0.0).sum(axis=1)
    cnt = cnt + pairs
    out = np.where(cnt > 0, s / np.maximum(cnt, 1), 0.0)
    return out, int(cnt.sum())


# --------------------------------------------------------------------------- dispatch


def scan(kind: str, q, db, lens, use_numba=None):
    """Distances from ``q`` to each database row; ``use_numba=None`` picks the configured backend."""
    use = USE_NUMBA if use_numba is None else use_numba
    return (scan_numba if use else scan_numpy)(kind, q, db, lens)


def scan_pm(qpos, qpres, dbpos, dbpres, use_numba=None):
    use = USE_NUMBA if use_numba is None else use_numba
    return (scan_pm_numba if use else scan_pm_numpy)(qpos, qpres, dbpos, dbpres)
