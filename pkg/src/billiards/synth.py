"""Synthetic break-shot layouts with planted outcome labels.

Every layout comes from one of two break regimes: an *open* break that spreads the
balls over the whole table and usually pots more of them, or a *tight* break that
leaves the pack bunched around the foot spot. Labels are then planted from the
layout's own features::

    difficulty = w . z(mean shot angle, mean min pocket distance, occlusion count) + noise
    clear      = difficulty < median(difficulty over the batch)
    win        = clear or Bernoulli(0.2)
    potted     = clip(round(4.5 - 2 z(difficulty) + noise), 0, 9)

where ``z`` standardises over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .core import COORD_DECIMALS, GameLabels, GameSpec, Layout, TableGeometry, pack_layouts, unpack_layout
from .features import extract_batch

FOOT_SPOT = (150.0, 50.0)


class SynthError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    count: int = 500
    seed: int = 0
    clear_weight_vector: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    min_object_balls: int = 1
    max_object_balls: int = 9
    label_noise: float = 0.25
    max_retries: int = 2000

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be non-negative")
        if not 1 <= self.min_object_balls <= self.max_object_balls <= 9:
            raise ValueError("need 1 <= min_object_balls <= max_object_balls <= 9")
        if len(self.clear_weight_vector) != 3:
            raise ValueError("clear_weight_vector has three coefficients")


def make_rng(seed) -> np.random.Generator:
    """The package-wide PRNG: PCG64 seeded through a SeedSequence (splittable via ``spawn``)."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def place_ball(rng: np.random.Generator, placed: List[Tuple[float, float]], sampler, geom: TableGeometry,
               max_retries: int) -> Tuple[float, float]:
    """Rejection-sample a rounded, in-bounds, non-overlapping location."""
    r = geom.ball_radius
    min_sep2 = (2.0 * r) ** 2
    for _ in range(max_retries):
        x, y = sampler()
        x = round(float(np.clip(x, r, geom.length - r)), COORD_DECIMALS)
        y = round(float(np.clip(y, r, geom.width - r)), COORD_DECIMALS)
        if all((x - px) ** 2 + (y - py) ** 2 >= min_sep2 for px, py in placed):
            return x, y
    raise SynthError("could not place a ball without overlap (table too crowded)")


def _sample_positions(rng: np.random.Generator, numbers: List[int], tight: bool, geom: TableGeometry,
                      max_retries: int) -> List[Tuple[float, float]]:
    r = geom.ball_radius
    L, W = geom.length, geom.width

    def uniform():
        return rng.uniform(r, L - r), rng.uniform(r, W - r)

    def pack():
        return rng.normal(FOOT_SPOT[0], 0.125 * L), rng.normal(FOOT_SPOT[1], 0.18 * W)

    def head():
        return rng.uniform(r, L / 2), rng.uniform(r, W - r)

    placed: List[Tuple[float, float]] = []
    for num in numbers:
        if num == 0:
            sampler = head if tight else uniform
        else:
            sampler = pack if tight else uniform
        placed.append(place_ball(rng, placed, sampler, geom, max_retries))
    return placed


def _zscore(v: np.ndarray) -> np.ndarray:
    sd = v.std()
    return (v - v.mean()) / (sd if sd > 0 else 1.0)


def difficulty_components(layouts: List[Layout], geom: TableGeometry = TableGeometry(),
                          spec: GameSpec = GameSpec()) -> np.ndarray:
    """``(N, 3)``: mean shot angle, mean min pocket distance, occlusion count (object balls)."""
    packed = pack_layouts(layouts, spec)
    bf = extract_batch(packed, geom)
    obj = packed.present.copy()
    obj[:, 0] = False
    cnt = np.maximum(obj.sum(axis=1), 1)
    shot = np.where(obj, np.nan_to_num(bf.shot_angle), 0.0).sum(axis=1) / cnt
    mind = np.where(obj, bf.distance.min(axis=2), 0.0).sum(axis=1) / cnt
    occ = np.where(obj[..., None], bf.occlusion, 0).sum(axis=(1, 2)).astype(np.float64)
    return np.stack([shot, mind, occ], axis=1)


def plant_labels(layouts: List[Layout], rng: np.random.Generator, weights=(1.0, 1.0, 1.0), noise: float = 0.25,
                 geom: TableGeometry = TableGeometry(), spec: GameSpec = GameSpec()) -> Tuple[List[Layout], np.ndarray]:
    """Attach planted labels; returns the labelled layouts and their difficulty scores."""
    if not layouts:
        return [], np.zeros(0)
    comp = difficulty_components(layouts, geom, spec)
    z = np.stack([_zscore(comp[:, k]) for k in range(3)], axis=1)
    difficulty = z @ np.asarray(weights, dtype=np.float64) + noise * rng.standard_normal(len(layouts))
    clear = difficulty < np.median(difficulty)
    win = clear | (rng.random(len(layouts)) < 0.2)
    zd = _zscore(difficulty)
    potted = np.clip(np.round(4.5 - 2.0 * zd + 0.5 * rng.standard_normal(len(layouts))), 0, 9).astype(int)
    out = []
    for lay, c, w, p in zip(layouts, clear, win, potted):
        out.append(Layout(lay.id, lay.balls, GameLabels(bool(c), bool(w), int(p)), lay.remarks, lay.video_url))
    return out, difficulty


def generate_synthetic(config: SynthConfig = SynthConfig(), geom: TableGeometry = TableGeometry(),
                       spec: Optional[GameSpec] = None, with_difficulty: bool = False):
    spec = spec or GameSpec()
    if spec.n - 1 < config.max_object_balls:
        raise ValueError("max_object_balls exceeds the game's object balls")
    rng = make_rng(config.seed)
    objects = np.arange(1, spec.n)
    raw: List[Layout] = []
    lo, hi = config.min_object_balls, config.max_object_balls
    for i in range(config.count):
        tight = bool(rng.random() < 0.5)
        a, b = rng.integers(lo, hi + 1, size=2)
        k = int(max(a, b) if tight else min(a, b))
        chosen = sorted(int(v) for v in rng.choice(objects, size=k, replace=False))
        numbers = [0] + chosen
        locs = _sample_positions(rng, numbers, tight, geom, config.max_retries)
        pos = np.zeros((spec.n, 2))
        present = np.zeros(spec.n, dtype=bool)
        for num, (x, y) in zip(numbers, locs):
            pos[num] = (x, y)
            present[num] = True
        raw.append(unpack_layout(pos, present, f"syn-{config.seed}-{i:06d}"))
    labelled, difficulty = plant_labels(raw, rng, config.clear_weight_vector, config.label_noise, geom, spec)
    if with_difficulty:
        return labelled, difficulty
    return labelled
