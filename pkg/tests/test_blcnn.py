import numpy as np
import pytest
from scipy.stats import spearmanr

from billiards import nn
from billiards.blcnn import (
    BLCNN, FitConfig, MissingLabelError, SingleClassError, TaskSpec, clear_score, evaluate_accuracy, forward_backward,
    init_blcnn, predict, stratified_split, train_blcnn,
)
from billiards.checkpoint import Checkpoint, CheckpointError
from billiards.core import GameLabels, Layout
from billiards.pipeline import Featurizer
from billiards.synth import SynthConfig, generate_synthetic

from conftest import make_layout

NET = nn.NetConfig(embed_dim=6, filters_total=28, learning_rate=1e-3, seed=1)
FIT = FitConfig(batch_size=32, eval_every=50, patience=4, seed=3)


@pytest.fixture(scope="module")
def data():
    lays, difficulty = generate_synthetic(SynthConfig(count=900, seed=21), with_difficulty=True)
    return lays[:700], lays[700:], difficulty[700:]


@pytest.fixture(scope="module")
def clear_model(data):
    return train_blcnn(data[0], TaskSpec("clear"), NET, fit=FIT, max_steps=600)


@pytest.fixture(scope="module")
def potted_model(data):
    return train_blcnn(data[0], TaskSpec("potted"), NET, fit=FIT, max_steps=600)


def test_task_spec():
    assert [TaskSpec(t).class_count for t in ("clear", "win", "potted")] == [2, 2, 10]
    with pytest.raises(ValueError):
        TaskSpec("speed")
    with pytest.raises(MissingLabelError):
        TaskSpec("clear").label(make_layout([(0, 1, 1)]))


def test_stratified_split_keeps_class_balance(rng):
    y = np.array([0] * 80 + [1] * 20)
    val, train = stratified_split(y, 0.1, rng)
    assert sorted(np.concatenate([val, train]).tolist()) == list(range(100))
    assert (y[val] == 0).sum() == 8 and (y[val] == 1).sum() == 2


def test_single_class_is_refused(small_corpus):
    clear = [l for l in small_corpus if l.labels.clear]
    with pytest.raises(SingleClassError):
        train_blcnn(clear, TaskSpec("clear"), NET, fit=FIT, max_steps=2)


def test_gradient_check_head(rng):
    fz = Featurizer()
    cfg = nn.NetConfig(embed_dim=2, filter_widths=(1, 2), filters_total=4)
    params = nn.cast_params(init_blcnn(cfg, fz, 3, rng), np.float64)
    lays = generate_synthetic(SynthConfig(count=3, seed=1))
    ids = fz.ids(lays)
    y = np.array([0, 2, 1])
    loss, grads = forward_backward(params, ids, y)
    for k in ("head.W", "head.b", "conv2.W"):
        x = params[k]
        for i in rng.choice(x.size, min(5, x.size), replace=False):
            old = x.flat[i]
            x.flat[i] = old + 1e-5
            up = forward_backward(params, ids, y)[0]
            x.flat[i] = old - 1e-5
            down = forward_backward(params, ids, y)[0]
            x.flat[i] = old
            num = (up - down) / 2e-5
            assert abs(num - grads[k].flat[i]) <= 1e-4 * max(abs(num), 1e-6) + 1e-9


def test_outputs_are_simplex(clear_model, potted_model, data):
    test = data[1]
    for model, dim in ((clear_model, 2), (potted_model, 10)):
        p = model.predict(test)
        assert p.shape == (len(test), dim)
        assert np.all(p >= 0) and np.allclose(p.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_array_equal(p, model.predict(test))


def test_clear_score_definition(clear_model, potted_model, data):
    lay = data[1][0]
    assert clear_score(clear_model, lay) == pytest.approx(predict(clear_model, lay)[1])
    twin = Layout("copy", lay.balls, lay.labels)
    assert clear_score(clear_model, twin) == clear_score(clear_model, lay)
    with pytest.raises(CheckpointError):
        potted_model.clear_scores([lay])


def test_clear_scores_follow_planted_rule(clear_model, data):
    test = data[1]
    s = clear_model.clear_scores(test)
    y = np.array([l.labels.clear for l in test])
    assert s[y].mean() > s[~y].mean()
    assert evaluate_accuracy(clear_model, test) > 0.7


def test_potted_expectation_tracks_ease(potted_model, data):
    test, difficulty = data[1], data[2]
    expected = potted_model.predict(test) @ np.arange(10)
    assert spearmanr(expected, -difficulty).correlation > 0


def test_training_is_reproducible(data, clear_model):
    again = train_blcnn(data[0], TaskSpec("clear"), NET, fit=FIT, max_steps=600)
    assert again.to_checkpoint().to_bytes() == clear_model.to_checkpoint().to_bytes()
    assert evaluate_accuracy(again, data[1]) == evaluate_accuracy(clear_model, data[1])


def test_checkpoint_round_trip(clear_model, data):
    back = BLCNN.from_checkpoint(Checkpoint.from_bytes(clear_model.to_checkpoint().to_bytes()))
    assert back.task == clear_model.task
    np.testing.assert_array_equal(back.predict(data[1][:5]), clear_model.predict(data[1][:5]))
    with pytest.raises(CheckpointError):
        BLCNN.from_checkpoint(Checkpoint("bl2vec"))
