import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from milasc.gradcheck import grad_check
from milasc.model import MILNetwork, ModelConfig
from milasc.training import (Adam, ConfusionMatrix, NumericalError, PlateauScheduler, batches,
                             nll, nll_grad, one_hot, train, weighted_bce, weighted_bce_grad)


# ---- loss ----

def test_documented_loss_value():
    scores = np.full((1, 10), 0.5)
    labels = one_hot([3], 10)
    value = weighted_bce(scores, labels)
    # one positive term 9*ln2 plus nine negative terms ln2
    assert value == pytest.approx(9 * math.log(2) + 9 * math.log(2), abs=1e-9)
    assert value == pytest.approx(12.4766, abs=1e-4)


def test_default_alpha_is_c_minus_one():
    s = np.random.default_rng(0).uniform(0.1, 0.9, (3, 10))
    y = one_hot([0, 4, 9], 10)
    assert weighted_bce(s, y) == weighted_bce(s, y, alpha=9)


def test_perfect_prediction_loss_vanishes():
    y = one_hot([1, 0], 3)
    s = np.where(y == 1, 1 - 1e-15, 1e-15)
    # bounded by the 1e-12 clamp: (alpha + C - 1) * 1e-12
    assert weighted_bce(s, y) < 5e-12


def test_balanced_weight_mass():
    # per bag: alpha * 1 positive == (C-1) negatives
    for c in (2, 4, 10):
        y = one_hot(np.arange(c), c)
        alpha = c - 1
        assert alpha * y.sum() == (1 - y).sum()


def test_loss_rejects_non_one_hot():
    with pytest.raises(ValueError, match="one-hot"):
        weighted_bce(np.full((1, 3), 0.5), np.array([[1.0, 1.0, 0.0]]))


def test_loss_clamps_to_finite():
    y = one_hot([0], 2)
    assert np.isfinite(weighted_bce(np.array([[0.0, 1.0]]), y))


@pytest.mark.parametrize("loss,grad", [(weighted_bce, weighted_bce_grad), (nll, nll_grad)])
def test_loss_gradients(loss, grad):
    rng = np.random.default_rng(1)
    s = np.ascontiguousarray(rng.uniform(0.05, 0.95, (4, 5)))
    y = one_hot(rng.integers(0, 5, 4), 5)
    assert grad_check(lambda: loss(s, y), s, grad(s, y)).max_rel_error < 1e-7


# ---- optimiser / schedule ----

def test_adam_first_step_closed_form():
    p = {"w": np.array([0.0])}
    Adam(lr=0.001).step(p, {"w": np.array([1.0])})
    assert abs(p["w"][0] - (-0.001 / (1 + 1e-8))) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.floats(-1e3, 1e3).filter(lambda g: abs(g) > 1e-3))
def test_adam_first_step_is_lr_times_sign(g):
    p = {"w": np.array([0.0])}
    Adam(lr=0.01).step(p, {"w": np.array([g])})
    assert p["w"][0] == pytest.approx(-0.01 * np.sign(g) * abs(g) / (abs(g) + 1e-8), abs=1e-15)


def test_adam_zero_gradient_noop():
    p = {"w": np.array([1.5, -2.0])}
    opt = Adam()
    for _ in range(3):
        opt.step(p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], [1.5, -2.0])


def test_adam_rejects_nonfinite():
    with pytest.raises(NumericalError):
        Adam().step({"w": np.zeros(1)}, {"w": np.array([np.nan])})


def _trace(accs, patience=3):
    opt = Adam(lr=1.0)
    sched = PlateauScheduler(opt, 0.5, patience)
    return [sched.step(a) for a in accs]


def test_plateau_halves_after_three_flat_epochs():
    assert _trace([0.5, 0.5, 0.5, 0.5]) == [1.0, 1.0, 1.0, 0.5]


def test_plateau_strictly_improving_never_decays():
    assert _trace([0.1, 0.2, 0.3, 0.4, 0.5, 0.6]) == [1.0] * 6


def test_plateau_counter_resets_on_improvement():
    assert _trace([0.5, 0.6, 0.5, 0.5, 0.5]) == [1.0, 1.0, 1.0, 1.0, 0.5]


# ---- metrics ----

def test_constant_classifier_confusion():
    y = np.repeat(np.arange(10), 3)
    cm = ConfusionMatrix.from_labels(y, np.zeros_like(y), 10)
    assert cm.accuracy == pytest.approx(0.1)
    assert cm.counts[:, 0].sum() == 30 and cm.counts[:, 1:].sum() == 0
    assert cm.recall[0] == 1.0 and np.all(cm.recall[1:] == 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_confusion_identities(seed):
    rng = np.random.default_rng(seed)
    y, p = rng.integers(0, 4, 50), rng.integers(0, 4, 50)
    cm = ConfusionMatrix.from_labels(y, p, 4)
    assert cm.counts.sum() == 50
    np.testing.assert_array_equal(cm.counts.sum(axis=1), np.bincount(y, minlength=4))
    assert cm.accuracy == pytest.approx(np.mean(y == p))
    for c in range(4):
        if (y == c).any():
            assert cm.recall[c] == pytest.approx(np.mean(p[y == c] == c))


def test_confusion_csv_has_recall_column():
    cm = ConfusionMatrix.from_labels([0, 1, 1], [0, 1, 0], 2, ["a", "b"])
    lines = cm.to_csv().splitlines()
    assert lines[0] == "true\\pred,a,b,recall"
    assert lines[2] == "b,1,1,0.500000"


# ---- loop ----

def test_batches_cover_and_merge_singletons():
    out = batches(9, 4, np.random.default_rng(0))
    assert [len(b) for b in out] == [4, 5]
    assert sorted(np.concatenate(out)) == list(range(9))


def _tiny(seed=0):
    cfg = ModelConfig(channels=(2, 2, 4), instance_dim=4, input_shape=(40, 24), n_classes=3,
                      seed=seed)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((6, 40, 24))
    y = np.arange(6) % 3
    return cfg, X, y


def test_training_is_bit_reproducible():
    cfg, X, y = _tiny()
    runs = []
    for _ in range(2):
        net = MILNetwork(cfg)
        res = train(net, X, y, X, y, epochs=2, batch_size=4, seed=3)
        runs.append((res.log_tsv(), {k: v.tobytes() for k, v in net.state_dict().items()}))
    assert runs[0] == runs[1]


def test_training_clamps_batch_and_rejects_empty():
    cfg, X, y = _tiny()
    with pytest.warns(UserWarning, match="clamped"):
        train(MILNetwork(cfg), X, y, X, y, epochs=1, batch_size=100)
    with pytest.raises(ValueError):
        train(MILNetwork(cfg), X[:0], y[:0], X, y, epochs=1)


def test_training_keeps_best_epoch():
    cfg, X, y = _tiny()
    res = train(MILNetwork(cfg), X, y, X, y, epochs=3, batch_size=3, lr=1e-2)
    best = max(r.val_accuracy for r in res.log)
    assert res.best_accuracy == best
    assert res.log[res.best_epoch - 1].val_accuracy == best
