"""Ball-self, ball-pocket and ball-ball features.

Per ball there are 27 slots: the location, then for each pocket ``j = 1..6`` the
cushion angle, pocket distance, occlusion flag and pocket index, then the shot
angle and the pocket it is taken towards. The cue ball has no ball-ball slots.

The scalar functions below work on single balls; :func:`extract_batch` computes
the same quantities for many packed layouts at once and is what the models use.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import numpy as np

from .core import Ball, GameSpec, Layout, PackedLayouts, TableGeometry, pack_layouts

N_POCKETS = 6
SLOTS_PER_BALL = 1 + 4 * N_POCKETS + 2
# pockets 3 and 6 sit mid-rail; their two cushion edges are the same line
_MIDDLE = (False, False, True, False, False, True)


class DegenerateGeometryWarning(UserWarning):
    pass


def _line_angle_deg(dx: float, dy: float) -> float:
    """Angle in [0, 90] between the line through (dx, dy) and the x axis."""
    return math.degrees(math.atan2(abs(dy), abs(dx)))


def cushion_angle(ball: Ball, pocket_index: int, geom: TableGeometry = TableGeometry()) -> float:
    px, py = geom.pocket(pocket_index)
    dx, dy = ball.x - px, ball.y - py
    if dx == 0.0 and dy == 0.0:
        warnings.warn(f"ball {ball.number} sits on pocket {pocket_index}", DegenerateGeometryWarning)
        return 0.0
    ax = _line_angle_deg(dx, dy)
    if _MIDDLE[pocket_index - 1]:
        return ax
    return min(ax, 90.0 - ax)


def pocket_distance(ball: Ball, pocket_index: int, geom: TableGeometry = TableGeometry()) -> float:
    px, py = geom.pocket(pocket_index)
    return math.hypot(ball.x - px, ball.y - py)


def occlusion_indicator(ball: Ball, pocket_index: int, others: Sequence[Ball], geom: TableGeometry = TableGeometry()) -> int:
    px, py = geom.pocket(pocket_index)
    sx, sy = px - ball.x, py - ball.y
    seg2 = sx * sx + sy * sy
    if seg2 == 0.0:
        return 0
    corridor = 2.0 * geom.ball_radius
    for o in others:
        ox, oy = o.x - ball.x, o.y - ball.y
        t = (ox * sx + oy * sy) / seg2
        if not 0.0 < t < 1.0:
            continue
        if math.hypot(ox - t * sx, oy - t * sy) < corridor:
            return 1
    return 0


def _vector_angle_deg(ax: float, ay: float, bx: float, by: float) -> float:
    cross = ax * by - ay * bx
    dot = ax * bx + ay * by
    return math.degrees(math.atan2(abs(cross), dot))


def predecessor(layout: Layout, ball_number: int) -> Ball:
    """Largest-numbered ball below ``ball_number``, falling back to the cue ball."""
    best = None
    for b in layout.balls:
        if 0 < b.number < ball_number and (best is None or b.number > best.number):
            best = b
    return best if best is not None else layout.ball(0)


def shot_angle(layout: Layout, ball_number: int, geom: TableGeometry = TableGeometry()) -> Tuple[float, int]:
    if ball_number < 1:
        raise ValueError("shot angle is defined for object balls only")
    target = layout.ball(ball_number)
    pred = predecessor(layout, ball_number)
    ix, iy = target.x - pred.x, target.y - pred.y
    if ix == 0.0 and iy == 0.0:
        raise ValueError("zero-length incoming direction")
    best, best_j = math.inf, 0
    for j in range(1, N_POCKETS + 1):
        px, py = geom.pocket(j)
        ux, uy = px - target.x, py - target.y
        a = 0.0 if (ux == 0.0 and uy == 0.0) else _vector_angle_deg(ix, iy, ux, uy)
        if a < best:
            best, best_j = a, j
    return best, best_j


# --------------------------------------------------------------------------- tables


@dataclass
class FeatureTable:
    """Features of every ball present in one layout, rows in ascending ball number.

    ``shot_angle`` is NaN and ``shot_pocket`` is 0 for the cue ball (not applicable).
    """

    numbers: np.ndarray  # (m,)
    bs: np.ndarray  # (m, 2)
    cushion: np.ndarray  # (m, 6) degrees
    distance: np.ndarray  # (m, 6)
    occlusion: np.ndarray  # (m, 6) int
    shot_angle: np.ndarray  # (m,)
    shot_pocket: np.ndarray  # (m,) int

    def to_records(self) -> list:
        recs = []
        for i, num in enumerate(self.numbers):
            rec: Dict = {
                "num": int(num),
                "bs": [round(float(v), 2) for v in self.bs[i]],
                "bp": [
                    {
                        "pocket": j + 1,
                        "cushion_angle": round(float(self.cushion[i, j]), 2),
                        "pocket_distance": round(float(self.distance[i, j]), 2),
                        "occlusion": int(self.occlusion[i, j]),
                    }
                    for j in range(N_POCKETS)
                ],
            }
            if self.shot_pocket[i] > 0:
                rec["bb"] = {"shot_angle": round(float(self.shot_angle[i]), 2), "pocket": int(self.shot_pocket[i])}
            else:
                rec["bb"] = None
            recs.append(rec)
        return recs


@dataclass
class BatchFeatures:
    """Vectorised features for packed layouts; values in absent rows are meaningless."""

    pos: np.ndarray  # (N, n, 2)
    present: np.ndarray  # (N, n)
    cushion: np.ndarray  # (N, n, 6)
    distance: np.ndarray  # (N, n, 6)
    occlusion: np.ndarray  # (N, n, 6) int8
    shot_angle: np.ndarray  # (N, n)   NaN for cue / absent
    shot_pocket: np.ndarray  # (N, n)  0 for cue / absent


def extract_batch(packed: PackedLayouts, geom: TableGeometry = TableGeometry(), chunk: int = 2048) -> BatchFeatures:
    N = len(packed)
    if N <= chunk:
        return _extract_chunk(packed.pos, packed.present, geom)
    parts = [
        _extract_chunk(packed.pos[i : i + chunk], packed.present[i : i + chunk], geom) for i in range(0, N, chunk)
    ]
    return BatchFeatures(
        *(np.concatenate([getattr(p, f) for p in parts]) for f in BatchFeatures.__dataclass_fields__)
    )


def _extract_chunk(pos: np.ndarray, present: np.ndarray, geom: TableGeometry) -> BatchFeatures:
    N, n, _ = pos.shape
    pockets = geom.pockets  # (6, 2)

    rel = pos[:, :, None, :] - pockets[None, None, :, :]  # ball - pocket, (N, n, 6, 2)
    distance = np.hypot(rel[..., 0], rel[..., 1])
    ax = np.degrees(np.arctan2(np.abs(rel[..., 1]), np.abs(rel[..., 0])))
    middle = np.array(_MIDDLE)
    cushion = np.where(middle, ax, np.minimum(ax, 90.0 - ax))
    cushion = np.where(distance == 0.0, 0.0, cushion)

    # occlusion: other ball o against segment ball->pocket
    seg = -rel  # pocket - ball, (N, n, 6, 2)
    seg2 = np.einsum("...k,...k->...", seg, seg)  # (N, n, 6)
    off = pos[:, None, :, :] - pos[:, :, None, :]  # o - ball, (N, n_ball, n_other, 2)
    dot = np.einsum("nbok,nbpk->nbpo", off, seg)  # (N, n, 6, n)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = dot / seg2[..., None]
    perp = off[:, :, None, :, :] - t[..., None] * seg[:, :, :, None, :]
    pd = np.hypot(perp[..., 0], perp[..., 1])
    other_ok = present[:, None, :] & ~np.eye(n, dtype=bool)[None]  # (N, n, n)
    hit = (t > 0.0) & (t < 1.0) & (pd < 2.0 * geom.ball_radius) & other_ok[:, :, None, :]
    hit &= (seg2 > 0.0)[..., None]
    occlusion = hit.any(axis=-1).astype(np.int8)

    # predecessor of ball k: largest present number in 1..k-1, else cue
    pred = np.zeros((N, n), dtype=np.int64)
    last = np.zeros(N, dtype=np.int64)
    for k in range(1, n):
        pred[:, k] = last
        last = np.where(present[:, k], k, last)
    pred_pos = np.take_along_axis(pos, pred[..., None].repeat(2, axis=-1), axis=1)
    inc = pos - pred_pos  # (N, n, 2)
    cross = inc[:, :, None, 0] * seg[..., 1] - inc[:, :, None, 1] * seg[..., 0]
    dotp = inc[:, :, None, 0] * seg[..., 0] + inc[:, :, None, 1] * seg[..., 1]
    angles = np.degrees(np.arctan2(np.abs(cross), dotp))
    angles = np.where(seg2 == 0.0, 0.0, angles)
    best = np.argmin(angles, axis=-1)
    shot = np.take_along_axis(angles, best[..., None], axis=-1)[..., 0]
    has_bb = present.copy()
    has_bb[:, 0] = False
    degenerate = has_bb & (inc[..., 0] == 0.0) & (inc[..., 1] == 0.0)
    if degenerate.any():
        raise ValueError("zero-length incoming direction")
    shot = np.where(has_bb, shot, np.nan)
    shot_pocket = np.where(has_bb, best + 1, 0)

    return BatchFeatures(pos, present, cushion, distance, occlusion, shot, shot_pocket)


def extract_features(layout: Layout, geom: TableGeometry = TableGeometry(), spec: GameSpec = GameSpec()) -> FeatureTable:
    layout = layout.canonical()
    bf = extract_batch(pack_layouts([layout], spec), geom)
    rows = np.flatnonzero(bf.present[0])
    return FeatureTable(
        numbers=rows,
        bs=bf.pos[0, rows],
        cushion=bf.cushion[0, rows],
        distance=bf.distance[0, rows],
        occlusion=bf.occlusion[0, rows].astype(np.int64),
        shot_angle=bf.shot_angle[0, rows],
        shot_pocket=bf.shot_pocket[0, rows].astype(np.int64),
    )
