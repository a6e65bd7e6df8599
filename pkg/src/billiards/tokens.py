"""Discretise features into per-family tokens and assemble padded ``(n, 27)`` sequences."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from .core import GameSpec, TableGeometry
from .features import N_POCKETS, SLOTS_PER_BALL, BatchFeatures, FeatureTable

FAMILIES = ("position", "cushion", "distance", "occlusion", "pocket", "shot")


@dataclass(frozen=True)
class TokenConfig:
    cell_size: float = 15.0
    angle_granularity: float = 15.0
    distance_granularity: float = 10.0

    def __post_init__(self):
        if min(self.cell_size, self.angle_granularity, self.distance_granularity) <= 0:
            raise ValueError("token granularities must be positive")

    def to_dict(self) -> dict:
        return {
            "cell_size": self.cell_size,
            "angle_granularity": self.angle_granularity,
            "distance_granularity": self.distance_granularity,
        }


def _n_bins(span: float, step: float) -> int:
    return max(1, int(math.ceil(span / step - 1e-12)))


@dataclass(frozen=True)
class Vocabulary:
    """Token ranges per family.

    Inside a family the real bins come first (``0..bins-1``), then ``PAD`` (missing
    ball) and, for the ball-ball families, ``NA`` (cue ball has no predecessor).
    """

    cols: int
    rows: int
    cushion_bins: int
    shot_bins: int
    distance_bins: int

    @classmethod
    def build(cls, cfg: TokenConfig = TokenConfig(), geom: TableGeometry = TableGeometry()) -> "Vocabulary":
        if cfg.cell_size > min(geom.length, geom.width):
            raise ValueError("cell_size must not exceed the table's shorter side")
        return cls(
            cols=_n_bins(geom.length, cfg.cell_size),
            rows=_n_bins(geom.width, cfg.cell_size),
            cushion_bins=_n_bins(90.0, cfg.angle_granularity),
            shot_bins=_n_bins(180.0, cfg.angle_granularity),
            distance_bins=_n_bins(geom.diagonal, cfg.distance_granularity),
        )

    @property
    def n_cells(self) -> int:
        return self.cols * self.rows

    def bins(self, family: str) -> int:
        return {
            "position": self.n_cells,
            "cushion": self.cushion_bins,
            "distance": self.distance_bins,
            "occlusion": 2,
            "pocket": N_POCKETS,
            "shot": self.shot_bins,
        }[family]

    def pad(self, family: str) -> int:
        return self.bins(family)

    def na(self, family: str) -> int:
        if family not in ("pocket", "shot"):
            raise KeyError(f"family {family!r} has no NA token")
        return self.bins(family) + 1

    def size(self, family: str) -> int:
        return self.bins(family) + (2 if family in ("pocket", "shot") else 1)

    def sizes(self) -> Dict[str, int]:
        return {f: self.size(f) for f in FAMILIES}

    def to_dict(self) -> dict:
        return {"cols": self.cols, "rows": self.rows, "cushion_bins": self.cushion_bins,
                "shot_bins": self.shot_bins, "distance_bins": self.distance_bins}


def slot_families() -> Tuple[str, ...]:
    """Family of each of the 27 slots of a ball row."""
    fam: List[str] = ["position"]
    for _ in range(N_POCKETS):
        fam += ["cushion", "distance", "occlusion", "pocket"]
    fam += ["shot", "pocket"]
    assert len(fam) == SLOTS_PER_BALL
    return tuple(fam)


SLOT_FAMILIES = slot_families()


# --------------------------------------------------------------------------- scalar tokenizers


def tokenize_position(x, y, cfg: TokenConfig = TokenConfig(), geom: TableGeometry = TableGeometry()):
    """Row-major cell index from the bottom-left corner; far edges clamp into the last cell."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any((x < 0) | (x > geom.length) | (y < 0) | (y > geom.width)):
        raise ValueError("coordinate out of bounds")
    voc = Vocabulary.build(cfg, geom)
    col = np.minimum(np.floor(x / cfg.cell_size).astype(np.int64), voc.cols - 1)
    row = np.minimum(np.floor(y / cfg.cell_size).astype(np.int64), voc.rows - 1)
    tok = row * voc.cols + col
    return int(tok) if tok.ndim == 0 else tok


def tokenize_angle(angle, cfg: TokenConfig = TokenConfig(), family: str = "cushion"):
    upper = {"cushion": 90.0, "shot": 180.0}[family]
    a = np.asarray(angle, dtype=np.float64)
    if np.any((a < 0) | (a > upper)):
        raise ValueError(f"{family} angle out of range [0, {upper}]")
    nb = _n_bins(upper, cfg.angle_granularity)
    tok = np.minimum(np.floor(a / cfg.angle_granularity).astype(np.int64), nb - 1)
    return int(tok) if tok.ndim == 0 else tok


def tokenize_distance(d, cfg: TokenConfig = TokenConfig(), geom: TableGeometry = TableGeometry()):
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("distance must be non-negative")
    nb = _n_bins(geom.diagonal, cfg.distance_granularity)
    tok = np.minimum(np.floor(d / cfg.distance_granularity).astype(np.int64), nb - 1)
    return int(tok) if tok.ndim == 0 else tok


def cell_centers(cfg: TokenConfig = TokenConfig(), geom: TableGeometry = TableGeometry()) -> np.ndarray:
    """Centre of every position cell, clipped to the table, shape ``(n_cells, 2)``."""
    voc = Vocabulary.build(cfg, geom)
    cs = cfg.cell_size
    cx = np.array([(c * cs + min((c + 1) * cs, geom.length)) / 2 for c in range(voc.cols)])
    cy = np.array([(r * cs + min((r + 1) * cs, geom.width)) / 2 for r in range(voc.rows)])
    yy, xx = np.meshgrid(cy, cx, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


# --------------------------------------------------------------------------- sequences


def tokenize_batch(bf: BatchFeatures, cfg: TokenConfig = TokenConfig(), geom: TableGeometry = TableGeometry()) -> np.ndarray:
    """Token ids ``(N, n, 27)`` (family-local ids) for packed features."""
    voc = Vocabulary.build(cfg, geom)
    N, n = bf.present.shape
    out = np.empty((N, n, SLOTS_PER_BALL), dtype=np.int64)
    x = np.clip(bf.pos[..., 0], 0.0, geom.length)
    y = np.clip(bf.pos[..., 1], 0.0, geom.width)
    col = np.minimum(np.floor(x / cfg.cell_size).astype(np.int64), voc.cols - 1)
    row = np.minimum(np.floor(y / cfg.cell_size).astype(np.int64), voc.rows - 1)
    out[..., 0] = row * voc.cols + col
    cush = np.minimum(np.floor(bf.cushion / cfg.angle_granularity).astype(np.int64), voc.cushion_bins - 1)
    dist = np.minimum(np.floor(bf.distance / cfg.distance_granularity).astype(np.int64), voc.distance_bins - 1)
    for j in range(N_POCKETS):
        out[..., 1 + 4 * j] = cush[..., j]
        out[..., 2 + 4 * j] = dist[..., j]
        out[..., 3 + 4 * j] = bf.occlusion[..., j]
        out[..., 4 + 4 * j] = j
    shot = np.nan_to_num(bf.shot_angle, nan=0.0)
    out[..., 25] = np.minimum(np.floor(shot / cfg.angle_granularity).astype(np.int64), voc.shot_bins - 1)
    out[..., 26] = np.maximum(bf.shot_pocket - 1, 0)
    # cue ball: ball-ball slots are not applicable
    out[:, 0, 25] = voc.na("shot")
    out[:, 0, 26] = voc.na("pocket")
    pads = np.array([voc.pad(f) for f in SLOT_FAMILIES], dtype=np.int64)
    out[~bf.present] = pads
    return out


def tokenize_layout(features: FeatureTable, spec: GameSpec = GameSpec(), cfg: TokenConfig = TokenConfig(),
                    geom: TableGeometry = TableGeometry()) -> np.ndarray:
    """Token sequence ``(spec.n, 27)`` for one layout's feature table."""
    n = spec.n
    if len(features.numbers) and (features.numbers.max() >= n or features.numbers.min() < 0):
        raise ValueError(f"feature table has balls outside a {n}-ball game")
    pos = np.zeros((1, n, 2))
    present = np.zeros((1, n), dtype=bool)
    cushion = np.zeros((1, n, N_POCKETS))
    distance = np.zeros((1, n, N_POCKETS))
    occl = np.zeros((1, n, N_POCKETS), dtype=np.int8)
    shot = np.full((1, n), np.nan)
    shot_p = np.zeros((1, n), dtype=np.int64)
    rows = features.numbers
    pos[0, rows] = features.bs
    present[0, rows] = True
    cushion[0, rows] = features.cushion
    distance[0, rows] = features.distance
    occl[0, rows] = features.occlusion
    shot[0, rows] = features.shot_angle
    shot_p[0, rows] = features.shot_pocket
    bf = BatchFeatures(pos, present, cushion, distance, occl, shot, shot_p)
    return tokenize_batch(bf, cfg, geom)[0]


def global_ids(tokens: np.ndarray, voc: Vocabulary) -> np.ndarray:
    """Map family-local ids to rows of a single stacked embedding table."""
    sizes = voc.sizes()
    offsets = {}
    acc = 0
    for f in FAMILIES:
        offsets[f] = acc
        acc += sizes[f]
    off = np.array([offsets[f] for f in SLOT_FAMILIES], dtype=np.int64)
    lim = np.array([sizes[f] for f in SLOT_FAMILIES], dtype=np.int64)
    if np.any(tokens < 0) or np.any(tokens >= lim):
        raise ValueError("unknown token id for this vocabulary")
    return tokens + off


def total_vocab(voc: Vocabulary) -> int:
    return sum(voc.sizes().values())
