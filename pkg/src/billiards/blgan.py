"""Layout generation: a recurrent policy over table cells trained with REINFORCE against a CNN discriminator.

A generated layout keeps the break pattern (which object balls are gone) it was
conditioned on. The generator emits one position cell per remaining ball, cue
first and then object balls by number; cells already used are masked out, and
each cell decodes to its centre, so generated balls never overlap.

The discriminator shares the layout encoder architecture and is trained to tell
high-scoring real layouts (G1) from generated ones (G3). Its real-probability is
the episode reward, shared by every step of the episode.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .blcnn import BLCNN
from .checkpoint import Checkpoint
from .core import GameSpec, Layout, PackedLayouts, pack_layouts, unpack_layout
from .pipeline import Featurizer
from .synth import make_rng
from .tokens import cell_centers

log = logging.getLogger(__name__)

N_OBJECT = 9


# --------------------------------------------------------------------------- break patterns


@dataclass(frozen=True, order=True)
class BreakPattern:
    missing: Tuple[int, ...] = ()

    def __post_init__(self):
        m = tuple(sorted(set(int(k) for k in self.missing)))
        if any(not 1 <= k <= N_OBJECT for k in m):
            raise ValueError("break pattern numbers must be object balls 1..9")
        object.__setattr__(self, "missing", m)

    @classmethod
    def of(cls, layout: Layout) -> "BreakPattern":
        return cls(layout.missing)

    @property
    def remaining(self) -> Tuple[int, ...]:
        """Balls to place: cue first, then object balls ascending."""
        return (0,) + tuple(k for k in range(1, N_OBJECT + 1) if k not in self.missing)

    def indicator(self) -> np.ndarray:
        v = np.zeros(N_OBJECT, dtype=np.float32)
        for k in self.missing:
            v[k - 1] = 1.0
        return v


def pattern_distribution(layouts: Sequence[Layout]) -> Tuple[List[BreakPattern], np.ndarray]:
    """Observed break patterns (sorted) with their empirical frequencies."""
    counts = Counter(BreakPattern.of(l) for l in layouts)
    pats = sorted(counts)
    freq = np.array([counts[p] for p in pats], dtype=np.float64)
    return pats, freq / freq.sum()


# --------------------------------------------------------------------------- score split


@dataclass
class ScoreSplit:
    g1: List[Layout]
    g2: List[Layout]
    scores: Dict[str, float]


def split_by_score(layouts: Sequence[Layout], scorer: BLCNN) -> ScoreSplit:
    """Sort by clear score (descending, ties by id); the top floor(N/2) form G1."""
    if not layouts:
        raise ValueError("cannot split an empty layout set")
    for l in layouts:
        if l.labels is None or not l.labels.clear:
            raise ValueError(f"layout {l.id} is not labelled clear")
    s = scorer.clear_scores(layouts)
    order = sorted(range(len(layouts)), key=lambda i: (-s[i], layouts[i].id))
    half = len(layouts) // 2
    return ScoreSplit([layouts[i] for i in order[:half]], [layouts[i] for i in order[half:]],
                      {layouts[i].id: float(s[i]) for i in range(len(layouts))})


# --------------------------------------------------------------------------- GRU


def gru_forward(x, h, Wx, U, b):
    """One gated recurrent step for a batch; gates laid out as ``[update | reset | candidate]``."""
    H = h.shape[1]
    a = x @ Wx + b
    z = nn.sigmoid(a[:, :H] + h @ U[:, :H])
    r = nn.sigmoid(a[:, H : 2 * H] + h @ U[:, H : 2 * H])
    rh = r * h
    n = np.tanh(a[:, 2 * H :] + rh @ U[:, 2 * H :])
    h_new = (1.0 - z) * n + z * h
    return h_new, (x, h, z, r, rh, n, Wx, U)


def gru_backward(dh_new, cache):
    x, h, z, r, rh, n, Wx, U = cache
    H = h.shape[1]
    dz = dh_new * (h - n)
    dn = dh_new * (1.0 - z)
    dh = dh_new * z
    dan = dn * (1.0 - n * n)
    dUn = rh.T @ dan
    drh = dan @ U[:, 2 * H :].T
    dr = drh * h
    dh += drh * r
    daz = dz * z * (1.0 - z)
    dar = dr * r * (1.0 - r)
    dUz = h.T @ daz
    dUr = h.T @ dar
    dh += daz @ U[:, :H].T + dar @ U[:, H : 2 * H].T
    da = np.concatenate([daz, dar, dan], axis=1)
    dWx = x.T @ da
    dx = da @ Wx.T
    return dx, dh, dWx, np.concatenate([dUz, dUr, dUn], axis=1), da.sum(axis=0)


# --------------------------------------------------------------------------- generator


@dataclass(frozen=True)
class GeneratorConfig:
    hidden: int = 64
    token_dim: int = 16
    ball_dim: int = 16
    seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def init_generator(cfg: GeneratorConfig, n_cells: int, n_balls: int = 10, rng=None, dtype=np.float32) -> nn.Params:
    rng = make_rng(cfg.seed if rng is None else rng)
    H, D = cfg.hidden, cfg.token_dim + cfg.ball_dim
    return {
        "pat.W": nn.glorot(rng, (N_OBJECT, H), N_OBJECT, H, dtype),
        "pat.b": np.zeros(H, dtype=dtype),
        "tok.E": rng.uniform(-0.05, 0.05, size=(n_cells + 1, cfg.token_dim)).astype(dtype),  # last row: start token
        "ball.E": rng.uniform(-0.05, 0.05, size=(n_balls, cfg.ball_dim)).astype(dtype),
        "gru.Wx": nn.glorot(rng, (D, 3 * H), D, 3 * H, dtype),
        "gru.U": nn.glorot(rng, (H, 3 * H), H, 3 * H, dtype),
        "gru.b": np.zeros(3 * H, dtype=dtype),
        "out.W": nn.glorot(rng, (H, n_cells), H, n_cells, dtype),
        "out.b": np.zeros(n_cells, dtype=dtype),
    }


@dataclass
class Episode:
    pattern: BreakPattern
    tokens: np.ndarray  # (T,) cell ids
    logp: np.ndarray  # (T,) log-probability of each sampled cell
    reward: Optional[float] = None

    @property
    def length(self) -> int:
        return len(self.tokens)


def _batch_inputs(patterns: Sequence[BreakPattern]):
    B = len(patterns)
    T = max(len(p.remaining) for p in patterns)
    balls = np.zeros((B, T), dtype=np.int64)
    valid = np.zeros((B, T), dtype=bool)
    for i, p in enumerate(patterns):
        rem = p.remaining
        balls[i, : len(rem)] = rem
        valid[i, : len(rem)] = True
    ind = np.stack([p.indicator() for p in patterns])
    return ind, balls, valid


def _masked_log_softmax(logits, used):
    z = np.where(used, -np.inf, logits)
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def policy_forward(gen: nn.Params, patterns: Sequence[BreakPattern], tokens: Optional[np.ndarray] = None, rng=None):
    """Run the policy over a batch of episodes.

    With ``tokens`` ``(B, T)`` given, scores that sequence (teacher forcing); otherwise
    samples one with ``rng``. Returns ``(tokens, logp (B, T), valid (B, T), cache)``.
    """
    ind, balls, valid = _batch_inputs(patterns)
    B, T = balls.shape
    V = gen["out.b"].shape[0]
    sample = tokens is None
    if sample:
        tokens = np.zeros((B, T), dtype=np.int64)
    a0 = ind.astype(gen["pat.W"].dtype) @ gen["pat.W"] + gen["pat.b"]
    h = np.tanh(a0)
    used = np.zeros((B, V), dtype=bool)
    prev = np.full(B, V, dtype=np.int64)
    logp = np.zeros((B, T), dtype=gen["out.b"].dtype)
    steps = []
    for t in range(T):
        x = np.concatenate([gen["tok.E"][prev], gen["ball.E"][balls[:, t]]], axis=1)
        h, gcache = gru_forward(x, h, gen["gru.Wx"], gen["gru.U"], gen["gru.b"])
        logits = h @ gen["out.W"] + gen["out.b"]
        lsm = _masked_log_softmax(logits, used)
        if sample:
            p = np.exp(lsm)
            cdf = np.cumsum(p, axis=1)
            u = rng.random(B) * cdf[:, -1]
            tok = np.minimum((cdf < u[:, None]).sum(axis=1), V - 1)
            while np.any(used[np.arange(B), tok]):  # guard against landing on a masked cell at a cdf plateau
                bad = used[np.arange(B), tok]
                tok[bad] = np.argmax(np.where(used[bad], -np.inf, lsm[bad]), axis=1)
            tokens[:, t] = np.where(valid[:, t], tok, 0)
        tok = tokens[:, t]
        logp[:, t] = np.where(valid[:, t], lsm[np.arange(B), tok], 0.0)
        steps.append((x, prev.copy(), gcache, h, lsm, tok))
        used[np.arange(B)[valid[:, t]], tok[valid[:, t]]] = True
        prev = tok
    return tokens, logp, valid, (ind, a0, balls, valid, steps)


def policy_backward(gen: nn.Params, dlogp: np.ndarray, cache) -> nn.Params:
    """Gradients of ``sum(dlogp * logp)`` with respect to the generator parameters."""
    ind, a0, balls, valid, steps = cache
    grads = {k: np.zeros_like(v) for k, v in gen.items()}
    B = ind.shape[0]
    Dt = gen["tok.E"].shape[1]
    dh = np.zeros((B, gen["gru.U"].shape[0]), dtype=gen["gru.U"].dtype)
    for t in range(len(steps) - 1, -1, -1):
        x, prev, gcache, h, lsm, tok = steps[t]
        g = np.where(valid[:, t], dlogp[:, t], 0.0).astype(dh.dtype)
        p = np.exp(lsm)
        dlogits = -g[:, None] * p
        dlogits[np.arange(B), tok] += g
        grads["out.W"] += h.T @ dlogits
        grads["out.b"] += dlogits.sum(axis=0)
        dh = dh + dlogits @ gen["out.W"].T
        dx, dh, dWx, dU, db = gru_backward(dh, gcache)
        grads["gru.Wx"] += dWx
        grads["gru.U"] += dU
        grads["gru.b"] += db
        np.add.at(grads["tok.E"], prev, dx[:, :Dt])
        np.add.at(grads["ball.E"], balls[:, t], dx[:, Dt:])
    da0 = dh * (1.0 - np.tanh(a0) ** 2)
    grads["pat.W"] += ind.T.astype(da0.dtype) @ da0
    grads["pat.b"] += da0.sum(axis=0)
    return grads


def decode_tokens(tokens: np.ndarray, pattern: BreakPattern, layout_id: str, centers: np.ndarray,
                  spec: GameSpec = GameSpec()) -> Layout:
    rem = pattern.remaining
    pos = np.zeros((spec.n, 2))
    present = np.zeros(spec.n, dtype=bool)
    for num, tok in zip(rem, tokens[: len(rem)]):
        pos[num] = centers[tok]
        present[num] = True
    return unpack_layout(pos, present, layout_id, remarks="generated")


def sample_episodes(gen: nn.Params, patterns: Sequence[BreakPattern], rng) -> List[Episode]:
    tokens, logp, valid, _ = policy_forward(gen, patterns, rng=make_rng(rng))
    return [Episode(p, tokens[i, valid[i]].copy(), logp[i, valid[i]].copy()) for i, p in enumerate(patterns)]


def sample_layout(gen: nn.Params, pattern: BreakPattern, seed, featurizer: Featurizer = Featurizer(),
                  layout_id: Optional[str] = None) -> Tuple[Episode, Layout]:
    ep = sample_episodes(gen, [pattern], seed)[0]
    centers = cell_centers(featurizer.tokens, featurizer.geom)
    lid = layout_id or f"gen-{seed}"
    return ep, decode_tokens(ep.tokens, pattern, lid, centers, featurizer.spec)


@dataclass
class Baseline:
    """Exponential moving average of rewards."""

    decay: float = 0.95
    value: Optional[float] = None

    def update(self, rewards) -> float:
        m = float(np.mean(rewards))
        self.value = m if self.value is None else self.decay * self.value + (1.0 - self.decay) * m
        return self.value


def reinforce_grads(gen: nn.Params, episodes: Sequence[Episode], rewards, baseline: float) -> nn.Params:
    """Gradient of the loss ``-mean_i (r_i - b) * sum_t log pi(c_t | s_t)``; reward shared across steps."""
    r = np.asarray(rewards, dtype=np.float64)
    if not np.all(np.isfinite(r)) or not math.isfinite(baseline):
        raise nn.NumericalError("non-finite reward")
    pats = [e.pattern for e in episodes]
    T = max(e.length for e in episodes)
    tokens = np.zeros((len(episodes), T), dtype=np.int64)
    for i, e in enumerate(episodes):
        tokens[i, : e.length] = e.tokens
    _, _, valid, cache = policy_forward(gen, pats, tokens)
    adv = (r - baseline) / len(episodes)
    dlogp = -np.repeat(adv[:, None], T, axis=1) * valid
    return policy_backward(gen, dlogp, cache)


def reinforce_update(gen: nn.Params, episodes: Sequence[Episode], rewards, baseline: Baseline, state: nn.AdamState,
                     lr: float) -> nn.Params:
    """One policy-gradient step; the baseline used is the EMA before this batch (first batch: its own mean)."""
    b = baseline.value if baseline.value is not None else float(np.mean(rewards))
    grads = reinforce_grads(gen, episodes, rewards, b)
    baseline.update(rewards)
    nn.adam_step(gen, grads, state, lr)
    return gen


# --------------------------------------------------------------------------- discriminator


def init_discriminator(net_cfg: nn.NetConfig, featurizer: Featurizer, rng) -> nn.Params:
    params = nn.init_encoder(net_cfg, featurizer.vocab, featurizer.spec.n, make_rng(rng))
    return nn.init_dense(params, "head", net_cfg.K, 1, make_rng(rng))


def disc_forward(params: nn.Params, ids: np.ndarray):
    v, ecache = nn.encode_forward(params, ids)
    z, dcache = nn.dense_forward(v, params["head.W"], params["head.b"])
    return nn.sigmoid(z[:, 0].astype(np.float64)), (ecache, dcache, z)


def disc_prob(params: nn.Params, featurizer: Featurizer, packed: PackedLayouts) -> np.ndarray:
    return disc_forward(params, featurizer.ids(packed))[0]


def disc_loss_grads(params: nn.Params, ids: np.ndarray, y: np.ndarray):
    prob, (ecache, dcache, z) = disc_forward(params, ids)
    loss, dprob = nn.bce(prob, y)
    dz = (dprob * prob * (1.0 - prob))[:, None].astype(params["head.W"].dtype)
    dv, dW, db = nn.dense_backward(dz, dcache)
    grads = nn.encode_backward(dv, ecache)
    grads["head.W"] = dW
    grads["head.b"] = db
    return loss, grads


def discriminator_update(params: nn.Params, state: nn.AdamState, real_ids: np.ndarray, fake_ids: np.ndarray,
                         lr: float, l2: float = 0.0) -> float:
    """One Adam step on BCE with real -> 1 and fake -> 0; returns the batch loss before the step."""
    if len(real_ids) == 0 or len(fake_ids) == 0:
        raise ValueError("discriminator batches must be non-empty")
    ids = np.concatenate([real_ids, fake_ids])
    y = np.concatenate([np.ones(len(real_ids)), np.zeros(len(fake_ids))])
    loss, grads = disc_loss_grads(params, ids, y)
    nn.adam_step(params, grads, state, lr, l2)
    return loss


# --------------------------------------------------------------------------- training


@dataclass(frozen=True)
class GANConfig:
    steps: int = 5000
    episodes: int = 16
    gen_lr: float = 5e-4
    disc_lr: float = 1e-5
    baseline_decay: float = 0.95
    log_every: int = 50
    seed: int = 0
    generator: GeneratorConfig = GeneratorConfig()

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "generator"}
        d["generator"] = self.generator.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GANConfig":
        d = dict(d)
        d["generator"] = GeneratorConfig(**d["generator"])
        return cls(**d)


@dataclass
class BLGAN:
    generator: nn.Params
    discriminator: nn.Params
    patterns: List[BreakPattern]
    pattern_probs: np.ndarray
    featurizer: Featurizer
    net: nn.NetConfig
    cfg: GANConfig = GANConfig()
    curves: dict = field(default_factory=dict)

    def sample_patterns(self, count: int, rng) -> List[BreakPattern]:
        idx = make_rng(rng).choice(len(self.patterns), size=count, p=self.pattern_probs)
        return [self.patterns[i] for i in idx]

    def generate(self, count: int, seed, prefix: str = "gen") -> List[Layout]:
        rng = make_rng(seed)
        pats = self.sample_patterns(count, rng)
        centers = cell_centers(self.featurizer.tokens, self.featurizer.geom)
        out = []
        for start in range(0, count, 256):
            chunk = pats[start : start + 256]
            for j, ep in enumerate(sample_episodes(self.generator, chunk, rng)):
                out.append(decode_tokens(ep.tokens, ep.pattern, f"{prefix}-{start + j:06d}", centers, self.featurizer.spec))
        return out

    def to_checkpoints(self) -> Tuple[Checkpoint, Checkpoint]:
        meta = {
            "gan": self.cfg.to_dict(),
            "net": self.net.to_dict(),
            "patterns": [list(p.missing) for p in self.patterns],
            "pattern_probs": [float(x) for x in self.pattern_probs],
            "curves": self.curves,
        }
        meta.update(self.featurizer.to_meta())
        arrays = {k: v for k, v in self.generator.items()}
        return Checkpoint("blgan-generator", meta, arrays), Checkpoint("blgan-discriminator", meta, dict(self.discriminator))

    @classmethod
    def from_checkpoints(cls, gen: Checkpoint, disc: Optional[Checkpoint] = None) -> "BLGAN":
        gen.expect("blgan-generator")
        m = gen.meta
        gparams = dict(gen.arrays)
        dparams = {} if disc is None else dict(disc.expect("blgan-discriminator").arrays)
        return cls(gparams, dparams, [BreakPattern(tuple(p)) for p in m["patterns"]], np.array(m["pattern_probs"]),
                   Featurizer.from_meta(m), nn.NetConfig.from_dict(m["net"]), GANConfig.from_dict(m["gan"]),
                   m.get("curves", {}))


class GANDiverged(nn.NumericalError):
    def __init__(self, msg, last_good=None):
        super().__init__(msg)
        self.last_good = last_good


def train_blgan(clear_layouts: Sequence[Layout], scorer: BLCNN, cfg: GANConfig = GANConfig(),
                net_cfg: nn.NetConfig = nn.NetConfig(), featurizer: Optional[Featurizer] = None,
                score_every: int = 0) -> BLGAN:
    """Alternate REINFORCE generator updates with discriminator updates on G1 vs generated layouts.

    Break patterns are drawn from G2's empirical pattern distribution. When
    ``score_every`` > 0 the scorer's mean clear score of each generated batch is
    logged every that many steps. ``net_cfg`` sets the discriminator's shape and
    L2 weight; its learning rate is ``cfg.disc_lr``.
    """
    featurizer = featurizer or scorer.featurizer
    split = split_by_score(clear_layouts, scorer)
    if not split.g1 or not split.g2:
        raise ValueError("need at least two clear layouts to form both score groups")
    rng = make_rng([cfg.seed, 2])
    g_rng, d_rng, pat_rng, real_rng, ep_rng = rng.spawn(5)
    V = featurizer.vocab.n_cells
    gen = init_generator(cfg.generator, V, featurizer.spec.n, g_rng)
    disc = init_discriminator(net_cfg, featurizer, d_rng)
    pats, probs = pattern_distribution(split.g2)
    model = BLGAN(gen, disc, pats, probs, featurizer, net_cfg, cfg, {})
    real_ids = featurizer.ids(pack_layouts([l.canonical() for l in split.g1], featurizer.spec))
    centers = cell_centers(featurizer.tokens, featurizer.geom)
    g_state, d_state = nn.AdamState(), nn.AdamState()
    baseline = Baseline(cfg.baseline_decay)
    curves = {"step": [], "reward": [], "disc_loss": [], "clear_score": []}
    acc_r, acc_d = [], []
    last_good = None
    for step in range(1, cfg.steps + 1):
        batch_pats = model.sample_patterns(cfg.episodes, pat_rng)
        episodes = sample_episodes(gen, batch_pats, ep_rng)
        fake = pack_layouts([decode_tokens(e.tokens, e.pattern, "g", centers, featurizer.spec) for e in episodes],
                            featurizer.spec)
        fake_ids = featurizer.ids(fake)
        rewards = disc_forward(disc, fake_ids)[0]
        try:
            reinforce_update(gen, episodes, rewards, baseline, g_state, cfg.gen_lr)
            ridx = real_rng.integers(0, len(real_ids), size=cfg.episodes)
            dl = discriminator_update(disc, d_state, real_ids[ridx], fake_ids, cfg.disc_lr, net_cfg.l2_lambda)
            if not math.isfinite(dl):
                raise nn.NumericalError(f"discriminator loss went non-finite at step {step}")
        except nn.NumericalError as exc:
            raise GANDiverged(str(exc), last_good) from exc
        acc_r.append(float(rewards.mean()))
        acc_d.append(dl)
        if step % cfg.log_every == 0 or step == cfg.steps:
            curves["step"].append(step)
            curves["reward"].append(float(np.mean(acc_r)))
            curves["disc_loss"].append(float(np.mean(acc_d)))
            cs = None
            if score_every and step % score_every == 0:
                cs = float(scorer.clear_scores_packed(fake).mean())
            curves["clear_score"].append(cs)
            acc_r, acc_d = [], []
            log.info("blgan step %d reward %.4f disc %.4f", step, curves["reward"][-1], curves["disc_loss"][-1])
            last_good = ({k: v.copy() for k, v in gen.items()}, {k: v.copy() for k, v in disc.items()})
    model.curves = curves
    return model


def pattern_consistent(layout: Layout, pattern: BreakPattern) -> bool:
    return tuple(sorted(layout.numbers)) == pattern.remaining
