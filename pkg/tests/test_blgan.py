import math

import numpy as np
import pytest

from billiards import nn
from billiards.blcnn import BLCNN, FitConfig, TaskSpec, init_blcnn
from billiards.blgan import (
    BLGAN, Baseline, BreakPattern, GANConfig, GeneratorConfig, decode_tokens, disc_forward, disc_loss_grads,
    discriminator_update, gru_backward, gru_forward, init_discriminator, init_generator, pattern_consistent,
    pattern_distribution, policy_backward, policy_forward, reinforce_grads, reinforce_update, sample_episodes,
    sample_layout, split_by_score, train_blgan,
)
from billiards.core import GameLabels, Layout, dumps_layouts, validate_layout
from billiards.pipeline import Featurizer
from billiards.synth import SynthConfig, generate_synthetic
from billiards.tokens import cell_centers

from conftest import make_layout

SMALL_NET = nn.NetConfig(embed_dim=4, filters_total=14, learning_rate=1e-3, seed=0)
SMALL_GEN = GeneratorConfig(hidden=12, token_dim=6, ball_dim=4)


def numeric(f, x, idx, step=1e-6):
    out = []
    for i in idx:
        old = x.flat[i]
        x.flat[i] = old + step
        up = f()
        x.flat[i] = old - step
        down = f()
        x.flat[i] = old
        out.append((up - down) / (2 * step))
    return np.array(out)


def close(a, n):
    return np.max(np.abs(a - n)) <= 1e-4 * max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-8)


@pytest.fixture(scope="module")
def scorer():
    fz = Featurizer()
    params = init_blcnn(SMALL_NET, fz, 2, np.random.default_rng(0))
    return BLCNN(params, SMALL_NET, fz, TaskSpec("clear"), FitConfig(), {})


@pytest.fixture(scope="module")
def clear_set():
    return [l for l in generate_synthetic(SynthConfig(count=240, seed=8)) if l.labels.clear]


def test_break_pattern_examples():
    p = BreakPattern((6, 4))
    assert p.missing == (4, 6)
    assert p.remaining == (0, 1, 2, 3, 5, 7, 8, 9) and len(p.remaining) == 8
    assert len(BreakPattern().remaining) == 10
    assert p.indicator().tolist() == [0, 0, 0, 1, 0, 1, 0, 0, 0]
    with pytest.raises(ValueError):
        BreakPattern((0,))
    lay = make_layout([(0, 1, 1), (2, 30, 30)])
    assert BreakPattern.of(lay).missing == (1, 3, 4, 5, 6, 7, 8, 9)


def test_pattern_distribution(clear_set):
    pats, probs = pattern_distribution(clear_set)
    assert probs.sum() == pytest.approx(1.0) and pats == sorted(pats)


@pytest.mark.parametrize("n,g1,g2", [(100, 50, 50), (101, 50, 51)])
def test_split_sizes(scorer, clear_set, n, g1, g2):
    pool = (clear_set * 3)[:n]
    pool = [Layout(f"c{i:03d}", l.balls, l.labels) for i, l in enumerate(pool)]
    sp = split_by_score(pool, scorer)
    assert (len(sp.g1), len(sp.g2)) == (g1, g2)
    assert {l.id for l in sp.g1}.isdisjoint(l.id for l in sp.g2)
    assert min(sp.scores[l.id] for l in sp.g1) >= max(sp.scores[l.id] for l in sp.g2)
    again = split_by_score(sp.g1 + sp.g2, scorer)
    assert [l.id for l in again.g1] == [l.id for l in sp.g1]


def test_split_rejects_unclear_and_empty(scorer, small_corpus):
    with pytest.raises(ValueError):
        split_by_score([], scorer)
    unclear = next(l for l in small_corpus if not l.labels.clear)
    with pytest.raises(ValueError):
        split_by_score([unclear], scorer)


def test_gru_gradient_check(rng):
    B, D, H = 3, 4, 5
    p = {"x": rng.normal(size=(B, D)), "h": rng.normal(size=(B, H)), "Wx": rng.normal(size=(D, 3 * H)),
         "U": rng.normal(size=(H, 3 * H)), "b": rng.normal(size=3 * H)}
    R = rng.normal(size=(B, H))
    f = lambda: float((gru_forward(p["x"], p["h"], p["Wx"], p["U"], p["b"])[0] * R).sum())
    _, cache = gru_forward(p["x"], p["h"], p["Wx"], p["U"], p["b"])
    g = dict(zip(["x", "h", "Wx", "U", "b"], gru_backward(R, cache)))
    for k in p:
        idx = np.arange(p[k].size)
        assert close(g[k].ravel(), numeric(f, p[k], idx)), k


def test_policy_gradient_check(rng):
    gen = init_generator(SMALL_GEN, 20, 10, rng, dtype=np.float64)
    pats = [BreakPattern((4, 6)), BreakPattern(tuple(range(1, 9))), BreakPattern()]
    tokens, _, valid, _ = policy_forward(gen, pats, rng=rng)
    W = rng.normal(size=tokens.shape) * valid

    def f():
        return float((policy_forward(gen, pats, tokens)[1] * W).sum())

    _, _, _, cache = policy_forward(gen, pats, tokens)
    grads = policy_backward(gen, W, cache)
    for k, x in gen.items():
        idx = rng.choice(x.size, size=min(12, x.size), replace=False)
        assert close(grads[k].flat[idx], numeric(f, x, idx)), k


def test_policy_is_normalised_and_masked(rng):
    gen = init_generator(SMALL_GEN, 98, 10, rng)
    pats = [BreakPattern()] * 30
    tokens, logp, valid, cache = policy_forward(gen, pats, rng=rng)
    for row in tokens:
        assert len(set(row.tolist())) == len(row)
    steps = cache[4]
    for (_, _, _, _, lsm, _) in steps:
        assert np.allclose(np.exp(lsm).sum(axis=1), 1.0, atol=1e-5)
    assert np.all(logp <= 0)


def test_reward_equal_to_baseline_gives_zero_gradient(rng):
    gen = init_generator(SMALL_GEN, 20, 10, rng)
    eps = sample_episodes(gen, [BreakPattern((2,))] * 4, rng)
    grads = reinforce_grads(gen, eps, [0.7] * 4, 0.7)
    assert all(not g.any() for g in grads.values())
    with pytest.raises(nn.NumericalError):
        reinforce_grads(gen, eps, [0.7, np.nan, 0.1, 0.2], 0.5)


def test_positive_advantage_raises_sampled_probability(rng):
    # three cells, two balls to place: cue plus ball 9
    gen = init_generator(SMALL_GEN, 3, 10, rng, dtype=np.float64)
    pat = BreakPattern(tuple(range(1, 9)))
    for _ in range(5):
        ep = sample_episodes(gen, [pat], rng)[0]
        before = policy_forward(gen, [pat], ep.tokens[None])[1].sum()
        grads = reinforce_grads(gen, [ep], [1.0], 0.2)
        step = {k: v - 1e-2 * grads[k] for k, v in gen.items()}
        after = policy_forward(step, [pat], ep.tokens[None])[1].sum()
        assert after > before


def test_baseline_is_an_ema():
    b = Baseline(0.95)
    assert b.update([1.0, 0.0]) == 0.5
    assert b.update([1.0]) == pytest.approx(0.95 * 0.5 + 0.05)


def test_reinforce_update_runs_adam(rng):
    gen = init_generator(SMALL_GEN, 20, 10, rng)
    before = {k: v.copy() for k, v in gen.items()}
    eps = sample_episodes(gen, [BreakPattern()] * 4, rng)
    bl = Baseline()
    reinforce_update(gen, eps, [0.1, 0.9, 0.5, 0.3], bl, nn.AdamState(), 1e-2)
    assert bl.value == pytest.approx(0.45)
    assert any(np.any(gen[k] != before[k]) for k in gen)


def test_sampled_layouts_are_valid(rng):
    fz = Featurizer()
    gen = init_generator(GeneratorConfig(), fz.vocab.n_cells, 10, rng)
    for seed in range(40):
        pat = BreakPattern(tuple(sorted(rng.choice(np.arange(1, 10), size=seed % 9, replace=False).tolist())))
        ep, lay = sample_layout(gen, pat, seed, fz)
        assert ep.length == len(pat.remaining)
        assert validate_layout(lay) == [] and pattern_consistent(lay, pat)
        assert lay.remarks == "generated"
    assert sample_layout(gen, BreakPattern((4, 6)), 3, fz)[0].length == 8


def test_decode_uses_cell_centres():
    centers = cell_centers()
    lay = decode_tokens(np.array([0, 97]), BreakPattern(tuple(range(2, 10))), "x", centers)
    assert [(b.number, b.x, b.y) for b in lay.balls] == [(0, 7.5, 7.5), (1, 197.5, 95.0)]


def test_disc_coin_flip_loss(rng):
    fz = Featurizer()
    params = init_discriminator(SMALL_NET, fz, 0)
    params["head.W"][:] = 0
    params["head.b"][:] = 0
    ids = fz.ids(generate_synthetic(SynthConfig(count=6, seed=1)))
    loss, _ = disc_loss_grads(params, ids, np.array([1, 0, 1, 0, 1, 0]))
    assert loss == pytest.approx(math.log(2))


def test_disc_gradient_check(rng):
    fz = Featurizer()
    cfg = nn.NetConfig(embed_dim=2, filter_widths=(1, 2), filters_total=4)
    params = nn.cast_params(init_discriminator(cfg, fz, 0), np.float64)
    ids = fz.ids(generate_synthetic(SynthConfig(count=4, seed=2)))
    y = np.array([1, 0, 0, 1])
    _, grads = disc_loss_grads(params, ids, y)
    f = lambda: disc_loss_grads(params, ids, y)[0]
    for k in ("head.W", "head.b", "conv1.W", "embed"):
        x = params[k]
        idx = np.flatnonzero(grads[k]) if k == "embed" else np.arange(x.size)
        idx = idx[:10]
        assert close(grads[k].flat[idx], numeric(f, x, idx, 1e-5)), k


def test_disc_learns_separable_toy_split():
    fz = Featurizer()
    params = init_discriminator(SMALL_NET, fz, 0)
    left = [make_layout([(0, 10 + 5 * i, 20), (1, 30, 40 + i), (2, 50, 80)], lid=f"l{i}") for i in range(8)]
    right = [make_layout([(0, 190 - 5 * i, 20), (1, 170, 40 + i), (2, 150, 80)], lid=f"r{i}") for i in range(8)]
    real, fake = fz.ids(left), fz.ids(right)
    state = nn.AdamState()
    losses = [discriminator_update(params, state, real, fake, lr=1e-3) for _ in range(50)]
    assert losses[-1] < losses[0]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])
    with pytest.raises(ValueError):
        discriminator_update(params, state, real[:0], fake, lr=1e-3)


@pytest.fixture(scope="module")
def tiny_gan(scorer, clear_set):
    cfg = GANConfig(steps=20, episodes=6, log_every=5, seed=4, generator=SMALL_GEN)
    return train_blgan(clear_set, scorer, cfg, SMALL_NET, score_every=10), cfg


def test_gan_training_is_deterministic(tiny_gan, scorer, clear_set):
    model, cfg = tiny_gan
    again = train_blgan(clear_set, scorer, cfg, SMALL_NET, score_every=10)
    assert again.curves == model.curves
    assert model.curves["step"] == [5, 10, 15, 20]
    assert model.curves["clear_score"][0] is None and model.curves["clear_score"][1] is not None


def test_gan_generates_valid_layouts(tiny_gan):
    model = tiny_gan[0]
    lays = model.generate(50, seed=1)
    assert all(validate_layout(l) == [] for l in lays)
    assert all(BreakPattern.of(l) in model.patterns for l in lays)
    assert dumps_layouts(lays) == dumps_layouts(model.generate(50, seed=1))


def test_gan_checkpoint_round_trip(tiny_gan):
    model = tiny_gan[0]
    g, d = model.to_checkpoints()
    from billiards.checkpoint import Checkpoint
    back = BLGAN.from_checkpoints(Checkpoint.from_bytes(g.to_bytes()), Checkpoint.from_bytes(d.to_bytes()))
    assert dumps_layouts(back.generate(10, 3)) == dumps_layouts(model.generate(10, 3))
    assert back.cfg == model.cfg
