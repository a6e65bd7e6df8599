"""Classical layout similarity measures: EMD, Hausdorff, DTW, discrete Frechet, peer matching.

Pairwise functions accept point arrays (or :class:`Layout` objects, which are turned
into their point sequence: cue ball first, then object balls by ascending number).
:class:`PointSeqDB` packs a database once so a query can be scanned against it with
the kernels in :mod:`billiards.kernels`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import kernels
from .core import GameSpec, Layout, PackedLayouts, pack_layouts

PointsLike = Union[Layout, np.ndarray, Sequence[Sequence[float]]]

MEASURES = ("emd", "hausdorff", "dtw", "frechet", "pm")


def point_seq(obj: PointsLike) -> np.ndarray:
    if isinstance(obj, Layout):
        return obj.points()
    pts = np.asarray(obj, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("point sequence must be non-empty")
    return pts


def _pair(kind: str, A: PointsLike, B: PointsLike) -> float:
    a, b = point_seq(A), point_seq(B)
    d, _ = kernels.scan(kind, a, b[None], np.array([len(b)]))
    return float(d[0])


def emd(A: PointsLike, B: PointsLike) -> float:
    return _pair("emd", A, B)


def hausdorff(A: PointsLike, B: PointsLike) -> float:
    return _pair("hausdorff", A, B)


def dtw(A: PointsLike, B: PointsLike) -> float:
    return _pair("dtw", A, B)


def frechet(A: PointsLike, B: PointsLike) -> float:
    return _pair("frechet", A, B)


def peer_matching(A: Layout, B: Layout, spec: GameSpec = GameSpec()) -> float:
    pa = pack_layouts([A], spec)
    pb = pack_layouts([B], spec)
    d, _ = kernels.scan_pm(pa.pos[0], pa.present[0], pb.pos, pb.present)
    return float(d[0])


@dataclass
class PointSeqDB:
    """A database of layouts in both packings the kernels need."""

    packed: PackedLayouts
    seqs: np.ndarray  # (N, n, 2) compacted point sequences
    lens: np.ndarray  # (N,)

    @classmethod
    def from_packed(cls, packed: PackedLayouts) -> "PointSeqDB":
        N, n = packed.present.shape
        lens = packed.present.sum(axis=1).astype(np.int64)
        order = np.argsort(~packed.present, axis=1, kind="stable")  # present rows first, ascending number
        seqs = np.take_along_axis(packed.pos, order[..., None].repeat(2, axis=-1), axis=1)
        seqs = np.where((np.arange(n)[None, :] < lens[:, None])[..., None], seqs, 0.0)
        return cls(packed, np.ascontiguousarray(seqs), lens)

    @classmethod
    def from_layouts(cls, layouts: Sequence[Layout], spec: GameSpec = GameSpec()) -> "PointSeqDB":
        return cls.from_packed(pack_layouts(layouts, spec))

    def __len__(self) -> int:
        return len(self.lens)

    def query(self, measure: str, k: int, use_numba=None):
        """Distances from database row ``k`` to every row (``(N,)``) and the ground-distance count."""
        use = kernels.USE_NUMBA if use_numba is None else use_numba
        if measure == "pm":
            return kernels.scan_pm(self.packed.pos[k], self.packed.present[k], self.packed.pos, self.packed.present, use)
        return kernels.scan(measure, self.seqs[k, : self.lens[k]], self.seqs, self.lens, use)

    def scan(self, measure: str, query_packed: PackedLayouts, qi: int, use_numba=None):
        """Distances from row ``qi`` of another packing to every database row."""
        use = kernels.USE_NUMBA if use_numba is None else use_numba
        pos, pres = query_packed.pos[qi], query_packed.present[qi]
        if measure == "pm":
            return kernels.scan_pm(pos, pres, self.packed.pos, self.packed.present, use)
        q = pos[pres]
        return kernels.scan(measure, q, self.seqs, self.lens, use)


def distance_matrix(measure: str, queries: Sequence[Layout], database: Sequence[Layout],
                    spec: GameSpec = GameSpec(), use_numba=None) -> np.ndarray:
    if measure not in MEASURES:
        raise KeyError(f"unknown measure {measure!r}")
    db = PointSeqDB.from_layouts(database, spec)
    qp = pack_layouts(queries, spec)
    out = np.empty((len(queries), len(database)))
    for i in range(len(queries)):
        out[i], _ = db.scan(measure, qp, i, use_numba)
    return out
