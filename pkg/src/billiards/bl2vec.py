"""Layout embeddings trained as a triplet network, plus exact kNN retrieval.

Positives and negatives are noisy copies of the anchor: every ball is shifted by
up to ``noise_rate`` times the table's length/width, then ``ceil(drop_rate * n')``
balls are lifted and dropped back at random spots. Negatives use larger rates.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .checkpoint import Checkpoint
from .core import COORD_DECIMALS, GameSpec, Layout, PackedLayouts, TableGeometry, pack_layouts, unpack_layout
from .pipeline import Featurizer
from .synth import make_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PerturbConfig:
    noise_rate: float = 0.2
    drop_rate: float = 0.2
    seed: int = 0
    max_retries: int = 500

    def __post_init__(self):
        if not (0.0 <= self.noise_rate <= 1.0 and 0.0 <= self.drop_rate <= 1.0):
            raise ValueError("noise and drop rates must lie in [0, 1]")


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 1.0
    positive: PerturbConfig = PerturbConfig(0.2, 0.2)
    negative: PerturbConfig = PerturbConfig(0.4, 0.4)
    epochs: int = 200
    batch_size: int = 32
    val_fraction: float = 0.1
    eval_every: int = 200
    patience: int = 10
    val_triplets: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.negative.noise_rate < self.positive.noise_rate or self.negative.drop_rate < self.positive.drop_rate:
            raise ValueError("negative rates must be at least the positive rates")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")

    def to_dict(self) -> dict:
        return {
            "margin": self.margin,
            "positive": [self.positive.noise_rate, self.positive.drop_rate],
            "negative": [self.negative.noise_rate, self.negative.drop_rate],
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "val_fraction": self.val_fraction,
            "eval_every": self.eval_every,
            "patience": self.patience,
            "val_triplets": self.val_triplets,
            "seed": self.seed,
        }


class PerturbError(RuntimeError):
    pass


class TrainingDiverged(nn.NumericalError):
    """Raised when the loss or a gradient goes non-finite; ``last_good`` holds the best model so far."""

    def __init__(self, msg, last_good=None):
        super().__init__(msg)
        self.last_good = last_good


# --------------------------------------------------------------------------- perturbation


def _free(x: float, y: float, others: np.ndarray, min_sep2: float) -> bool:
    if len(others) == 0:
        return True
    d2 = (others[:, 0] - x) ** 2 + (others[:, 1] - y) ** 2
    return bool(np.all(d2 >= min_sep2))


def perturb_rows(pos: np.ndarray, present: np.ndarray, cfg: PerturbConfig, rng: np.random.Generator,
                 geom: TableGeometry = TableGeometry()) -> np.ndarray:
    """Perturbed copy of one packed layout's positions (absent rows untouched)."""
    out = pos.copy()
    nums = np.flatnonzero(present)
    L, W = geom.length, geom.width
    min_sep2 = (2.0 * geom.ball_radius) ** 2
    if cfg.noise_rate > 0:
        ax, ay = cfg.noise_rate * L, cfg.noise_rate * W
        placed: List[int] = []
        for k in nums:
            for _ in range(cfg.max_retries):
                x = round(min(max(pos[k, 0] + rng.uniform(-ax, ax), 0.0), L), COORD_DECIMALS)
                y = round(min(max(pos[k, 1] + rng.uniform(-ay, ay), 0.0), W), COORD_DECIMALS)
                if _free(x, y, out[placed], min_sep2):
                    break
            else:
                raise PerturbError("could not shift a ball without overlap")
            out[k] = (x, y)
            placed.append(k)
    n_drop = math.ceil(cfg.drop_rate * len(nums) - 1e-9)
    if n_drop > 0:
        dropped = rng.choice(nums, size=min(n_drop, len(nums)), replace=False)
        keep = [k for k in nums if k not in set(dropped.tolist())]
        placed = list(keep)
        for k in sorted(dropped.tolist()):
            for _ in range(cfg.max_retries):
                x = round(rng.uniform(0.0, L), COORD_DECIMALS)
                y = round(rng.uniform(0.0, W), COORD_DECIMALS)
                if _free(x, y, out[placed], min_sep2):
                    break
            else:
                raise PerturbError("could not re-place a dropped ball without overlap")
            out[k] = (x, y)
            placed.append(k)
    return out


def perturb_layout(layout: Layout, cfg: PerturbConfig, geom: TableGeometry = TableGeometry(),
                   spec: GameSpec = GameSpec(), rng=None, suffix: str = "+") -> Layout:
    """Noisy copy of ``layout``; seeded from ``cfg.seed`` unless a generator is passed."""
    rng = make_rng(cfg.seed if rng is None else rng)
    p = pack_layouts([layout.canonical()], spec)
    new = perturb_rows(p.pos[0], p.present[0], cfg, rng, geom)
    return unpack_layout(new, p.present[0], layout.id + suffix, labels=layout.labels)


def make_triplet(anchor: Layout, cfg: TripletConfig = TripletConfig(), rng=None,
                 geom: TableGeometry = TableGeometry(), spec: GameSpec = GameSpec()) -> Tuple[Layout, Layout, Layout]:
    rng = make_rng(cfg.seed if rng is None else rng)
    pos = perturb_layout(anchor, cfg.positive, geom, spec, rng, "+")
    neg = perturb_layout(anchor, cfg.negative, geom, spec, rng, "-")
    return anchor.canonical(), pos, neg


def _triplet_batch(packed: PackedLayouts, anchors: np.ndarray, cfg: TripletConfig, rng: np.random.Generator,
                   geom: TableGeometry) -> PackedLayouts:
    """Stack ``[anchors; positives; negatives]`` as one packed batch."""
    a_pos = packed.pos[anchors]
    a_pres = packed.present[anchors]
    p_pos = np.empty_like(a_pos)
    n_pos = np.empty_like(a_pos)
    for i in range(len(anchors)):
        p_pos[i] = perturb_rows(a_pos[i], a_pres[i], cfg.positive, rng, geom)
        n_pos[i] = perturb_rows(a_pos[i], a_pres[i], cfg.negative, rng, geom)
    return PackedLayouts(np.concatenate([a_pos, p_pos, n_pos]), np.concatenate([a_pres, a_pres, a_pres]))


# --------------------------------------------------------------------------- model


@dataclass
class BL2Vec:
    params: nn.Params
    net: nn.NetConfig
    featurizer: Featurizer
    triplet: TripletConfig = TripletConfig()
    curves: dict = field(default_factory=dict)

    def embed_packed(self, packed: PackedLayouts, batch: int = 2048) -> np.ndarray:
        out = []
        for i in range(0, len(packed), batch):
            ids = self.featurizer.ids(packed.take(np.arange(i, min(i + batch, len(packed)))))
            out.append(nn.encode_forward(self.params, ids)[0])
        if not out:
            return np.zeros((0, self.net.K), dtype=np.float32)
        return np.concatenate(out)

    def embed(self, layouts: Sequence[Layout]) -> np.ndarray:
        return self.embed_packed(pack_layouts([l.canonical() for l in layouts], self.featurizer.spec))

    def embed_layout(self, layout: Layout) -> np.ndarray:
        return self.embed([layout])[0]

    def to_checkpoint(self) -> Checkpoint:
        meta = {"net": self.net.to_dict(), "triplet": self.triplet.to_dict(), "curves": self.curves}
        meta.update(self.featurizer.to_meta())
        return Checkpoint("bl2vec", meta, dict(self.params))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "BL2Vec":
        ckpt.expect("bl2vec")
        m = ckpt.meta
        t = m["triplet"]
        tc = TripletConfig(
            margin=t["margin"], positive=PerturbConfig(*t["positive"][:2]), negative=PerturbConfig(*t["negative"][:2]),
            epochs=t["epochs"], batch_size=t["batch_size"], val_fraction=t["val_fraction"],
            eval_every=t["eval_every"], patience=t["patience"], val_triplets=t["val_triplets"], seed=t["seed"],
        )
        return cls(dict(ckpt.arrays), nn.NetConfig.from_dict(m["net"]), Featurizer.from_meta(m), tc, m.get("curves", {}))


def _triplet_step_loss(params, ids, B, margin):
    v, cache = nn.encode_forward(params, ids)
    loss, (gq, gp, gn), dp, dn = nn.triplet_loss(v[:B], v[B : 2 * B], v[2 * B :], margin)
    return loss, cache, np.concatenate([gq, gp, gn]), dp, dn


def train_bl2vec(layouts: Sequence[Layout], cfg: TripletConfig = TripletConfig(), net_cfg: nn.NetConfig = nn.NetConfig(),
                 featurizer: Featurizer = Featurizer(), max_steps: Optional[int] = None) -> BL2Vec:
    """Triplet training with Adam + L2, early-stopped on a held-out triplet loss.

    Anchors are drawn uniformly with replacement; every ``eval_every`` steps the
    loss on a fixed set of validation triplets is checked and training stops after
    ``patience`` evaluations without improvement. The best parameters are kept.
    """
    if len(layouts) < 2:
        raise ValueError("need at least two layouts")
    rng = make_rng([cfg.seed, net_cfg.seed])
    init_rng, split_rng, val_rng, step_rng = rng.spawn(4)
    geom = featurizer.geom
    packed = pack_layouts([l.canonical() for l in layouts], featurizer.spec)
    order = split_rng.permutation(len(packed))
    n_val = max(1, int(round(cfg.val_fraction * len(packed)))) if cfg.val_fraction > 0 else 0
    n_val = min(n_val, len(packed) - 1)
    val_idx, train_idx = order[:n_val], order[n_val:]

    params = nn.init_encoder(net_cfg, featurizer.vocab, featurizer.spec.n, init_rng)
    state = nn.AdamState()
    val_ids = None
    if n_val:
        anchors = val_idx[val_rng.integers(0, n_val, size=cfg.val_triplets)]
        val_ids = featurizer.ids(_triplet_batch(packed, anchors, cfg, val_rng, geom))

    steps_per_epoch = max(1, math.ceil(len(train_idx) / cfg.batch_size))
    budget = cfg.epochs * steps_per_epoch if max_steps is None else max_steps
    stopper = nn.EarlyStopping(cfg.patience)
    curves = {"step": [], "train_loss": [], "val_loss": []}
    run = []
    B = cfg.batch_size
    for step in range(1, budget + 1):
        anchors = train_idx[step_rng.integers(0, len(train_idx), size=B)]
        ids = featurizer.ids(_triplet_batch(packed, anchors, cfg, step_rng, geom))
        try:
            loss, cache, gv, _, _ = _triplet_step_loss(params, ids, B, cfg.margin)
            if not math.isfinite(loss):
                raise nn.NumericalError(f"triplet loss went non-finite at step {step}")
            grads = nn.encode_backward(gv.astype(np.float32), cache)
            nn.adam_step(params, grads, state, net_cfg.learning_rate, net_cfg.l2_lambda)
        except nn.NumericalError as exc:
            good = None if stopper.best_params is None else BL2Vec(stopper.best_params, net_cfg, featurizer, cfg, curves)
            raise TrainingDiverged(str(exc), good) from exc
        run.append(loss)
        if step % cfg.eval_every == 0 or step == budget:
            train_loss = float(np.mean(run))
            run = []
            val_loss = math.nan
            if val_ids is not None:
                nv = len(val_ids) // 3
                v = nn.encode(params, val_ids)
                val_loss = nn.triplet_loss(v[:nv], v[nv : 2 * nv], v[2 * nv :], cfg.margin)[0]
            curves["step"].append(step)
            curves["train_loss"].append(train_loss)
            curves["val_loss"].append(None if math.isnan(val_loss) else val_loss)
            log.info("bl2vec step %d train %.4f val %.4f", step, train_loss, val_loss)
            score = val_loss if val_ids is not None else train_loss
            if stopper.update(score, params):
                break
    best_params = stopper.best_params if stopper.best_params is not None else params
    curves["best"] = stopper.best
    return BL2Vec(best_params, net_cfg, featurizer, cfg, curves)


def embed_layout(model: BL2Vec, layout: Layout) -> np.ndarray:
    return model.embed_layout(layout)


def similarity_op_count(model: BL2Vec, a: Layout, b: Layout) -> int:
    """Arithmetic operations to embed two layouts and compare them (3 per vector component)."""
    ops = [0]
    ids = model.featurizer.ids([a.canonical(), b.canonical()])
    v, _ = nn.encode_forward(model.params, ids, ops)
    return ops[0] + 3 * v.shape[1]


# --------------------------------------------------------------------------- retrieval


class EmptyIndexError(ValueError):
    pass


@dataclass
class RetrievalIndex:
    ids: List[str]
    vectors: np.ndarray  # (N, K) float32
    checkpoint_digest: str = ""
    checkpoint_path: str = ""

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if len(self.ids) != len(self.vectors):
            raise ValueError("one id per vector")
        self._sq = (self.vectors.astype(np.float64) ** 2).sum(axis=1)
        self._order = None

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def build(cls, model: BL2Vec, layouts: Sequence[Layout], **kw) -> "RetrievalIndex":
        return cls([l.id for l in layouts], model.embed(layouts), **kw)

    def distances(self, query: np.ndarray, exact: bool = False) -> np.ndarray:
        """Euclidean distances from ``query`` to every indexed vector (linear scan).

        The default expands ``|x - q|^2`` into norms and one matrix-vector product,
        which is fast but leaves rounding of order 1e-4 on near-zero distances;
        ``exact=True`` sums the squared differences directly.
        """
        q = np.asarray(query, dtype=np.float32)
        if exact:
            diff = self.vectors - q
            return np.sqrt(np.einsum("ij,ij->i", diff, diff, dtype=np.float64))
        return np.sqrt(np.maximum(self._approx_sq(q), 0.0))

    def _approx_sq(self, q: np.ndarray) -> np.ndarray:
        return self._sq - 2.0 * (self.vectors @ q).astype(np.float64) + float(q.astype(np.float64) @ q)

    def _id_rank(self) -> np.ndarray:
        if self._order is None:
            self._order = np.argsort(np.argsort(np.array(self.ids, dtype=object), kind="stable"), kind="stable")
        return self._order

    def knn(self, query: np.ndarray, k: int) -> List[Tuple[str, float]]:
        if len(self) == 0:
            raise EmptyIndexError("index is empty")
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(query, dtype=np.float32)
        k = min(k, len(self))
        if k < len(self):
            # screen with the fast expansion, keeping every item that rounding could move into the top k
            d2 = self._approx_sq(q)
            kth = np.partition(d2, k - 1)[k - 1]
            slack = 1e-4 * (float(self._sq.max()) + float(q.astype(np.float64) @ q)) + 1e-12
            cand = np.flatnonzero(d2 <= kth + slack)
        else:
            cand = np.arange(len(self))
        diff = self.vectors[cand] - q
        d = np.sqrt(np.einsum("ij,ij->i", diff, diff, dtype=np.float64))
        order = np.lexsort((self._id_rank()[cand], d))[:k]
        return [(self.ids[cand[i]], float(d[i])) for i in order]

    def to_checkpoint(self) -> Checkpoint:
        meta = {"ids": list(self.ids), "checkpoint_digest": self.checkpoint_digest,
                "checkpoint_path": self.checkpoint_path}
        return Checkpoint("index", meta, {"vectors": self.vectors})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "RetrievalIndex":
        ckpt.expect("index")
        return cls(ckpt.meta["ids"], ckpt.arrays["vectors"], ckpt.meta.get("checkpoint_digest", ""),
                   ckpt.meta.get("checkpoint_path", ""))


def knn_query(index: RetrievalIndex, query: np.ndarray, k: int) -> List[Tuple[str, float]]:
    return index.knn(query, k)


def knn_bruteforce(index: RetrievalIndex, query: np.ndarray, k: int) -> List[Tuple[str, float]]:
    """Reference ranking: full sort by (distance, id) with direct differences."""
    if len(index) == 0:
        raise EmptyIndexError("index is empty")
    d = np.sqrt(((index.vectors.astype(np.float64) - np.asarray(query, dtype=np.float64)) ** 2).sum(axis=1))
    ranked = sorted(zip(d.tolist(), index.ids), key=lambda t: (t[0], t[1]))
    return [(i, dist) for dist, i in ranked[:k]]
