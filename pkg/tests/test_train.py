import math

import numpy as np
import pytest

from swa_voxel import engine as E
from swa_voxel.checkpoint import load_checkpoint
from swa_voxel.engine import ParamStore, StateError, Tensor
from swa_voxel.grid import DenseLabelVolume
from swa_voxel.synth import synth_scene
from swa_voxel.train import (SGD, Adam, TrainConfig, TrainConfigError, evaluate, masked_cross_entropy,
                             optimizer_step, poly_lr, predict_scene, train)
from swa_voxel.unet import UNetConfig, init_unet


def volume(labels, unknown=None):
    labels = np.asarray(labels).reshape(2, 2, 2)
    return DenseLabelVolume(labels, np.zeros((2, 2, 2), bool) if unknown is None
                            else np.asarray(unknown).reshape(2, 2, 2))


# loss ----------------------------------------------------------------------------

def test_ce_extreme_one_hot_is_zero():
    t = np.array([0, 1, 2, 3, 4, 5, 6, 0])
    logits = np.full((8, 7), -50.0)
    logits[np.arange(8), t] = 50.0
    assert float(masked_cross_entropy(Tensor(logits), volume(t)).data) < 1e-40


def test_ce_uniform_is_log_classes():
    loss = masked_cross_entropy(Tensor(np.zeros((8, 7))), volume(np.arange(8) % 7))
    assert abs(float(loss.data) - math.log(7)) < 1e-15


def test_ce_masked_equals_subset_mean():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(8, 4))
    t = rng.integers(0, 4, 8)
    unk = np.array([1, 0, 1, 0, 1, 0, 1, 0], bool)
    loss = float(masked_cross_entropy(Tensor(logits), volume(t, unk)).data)
    keep = ~unk
    z = logits[keep]
    lse = np.log(np.exp(z - z.max(1, keepdims=True)).sum(1)) + z.max(1)
    assert abs(loss - np.mean(lse - z[np.arange(keep.sum()), t[keep]])) < 1e-14


def test_ce_zero_gradient_at_unknown():
    rng = np.random.default_rng(1)
    st = ParamStore()
    st.add("z", rng.normal(size=(8, 4)))
    unk = np.array([0, 0, 1, 0, 1, 0, 0, 1], bool)
    E.backward(masked_cross_entropy(st.tensor("z"), volume(rng.integers(0, 4, 8), unk)), store=st)
    assert (st.grad("z")[unk] == 0).all() and (st.grad("z")[~unk] != 0).any()


def test_ce_unknown_flip_invariance():
    rng = np.random.default_rng(2)
    logits = Tensor(rng.normal(size=(8, 4)))
    t = rng.integers(0, 4, 8)
    unk = np.array([0, 1, 1, 0, 0, 0, 1, 0], bool)
    t2 = np.where(unk, (t + 1) % 4, t)
    assert masked_cross_entropy(logits, volume(t, unk)).data == masked_cross_entropy(logits, volume(t2, unk)).data


def test_ce_all_unknown_errors():
    with pytest.raises(ValueError):
        masked_cross_entropy(Tensor(np.zeros((8, 3))), volume(np.zeros(8, int), np.ones(8, bool)))


# schedule ---------------------------------------------------------------------------

def test_poly_lr_values():
    assert poly_lr(0, 100) == 0.006
    assert poly_lr(100, 100) == 0.0
    assert poly_lr(50, 100) == 0.006 * 0.5 ** 0.9
    lrs = [poly_lr(i, 100) for i in range(101)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


def test_poly_lr_errors():
    with pytest.raises(TrainConfigError):
        poly_lr(0, 0)
    with pytest.raises(TrainConfigError):
        poly_lr(5, 4)


# optimiser ----------------------------------------------------------------------------

def _store(value):
    st = ParamStore()
    st.add("p", np.asarray(value, float))
    return st


def test_sgd_zero_grad_unchanged():
    st = _store([1.0, -2.0])
    st.accumulate("p", np.zeros(2))
    optimizer_step(st, 0.1)
    assert st.value("p").tolist() == [1.0, -2.0]


def test_sgd_single_step():
    st = _store([1.0])
    st.accumulate("p", np.array([1.0]))
    optimizer_step(st, 0.1)
    assert st.value("p")[0] == 0.9
    assert (st.grad("p") == 0).all()


def test_sgd_two_steps_on_quadratic():
    # loss = p^2, grad 2p; hand iteration with momentum 0.9, lr 0.1
    st = _store([1.0])
    opt = SGD()
    p, v = 1.0, 0.0
    for _ in range(2):
        E.backward(E.sum_(E.mul(st.tensor("p"), st.tensor("p"))), store=st)
        opt.step(st, 0.1)
        v = 0.9 * v + 2 * p
        p = p - 0.1 * v
    assert st.value("p")[0] == p
    assert p == pytest.approx(0.8 - 0.1 * (0.9 * 2 + 1.6), abs=1e-15)


def test_step_without_gradients_is_state_error():
    with pytest.raises(StateError):
        optimizer_step(_store([1.0]), 0.1)
    with pytest.raises(StateError):
        Adam().step(_store([1.0]), 0.1)


def test_adam_moves_against_gradient():
    st = _store([1.0, 1.0])
    st.accumulate("p", np.array([1.0, -1.0]))
    Adam().step(st, 0.01)
    assert np.allclose(st.value("p"), [0.99, 1.01])


def test_train_config_validation():
    with pytest.raises(TrainConfigError):
        TrainConfig(base_lr=0)
    with pytest.raises(TrainConfigError):
        TrainConfig(batch_size=0)


# training loop ----------------------------------------------------------------------------

CFG = UNetConfig(levels=2, dim=8, heads=2)


def scenes(n=2):
    return [synth_scene(100 + i, (8, 8, 8)) for i in range(n)]


def test_zero_epoch_checkpoint_equals_init(tmp_path):
    p = tmp_path / "c.swac"
    res = train(CFG, TrainConfig(epochs=0, seed=3), scenes(), checkpoint_path=p)
    init = init_unet(CFG, 3)
    back, meta = load_checkpoint(p)
    assert res.iterations == 0 and meta["variant"] == "A"
    for n in init.names():
        assert np.array_equal(back.value(n), init.value(n).astype(np.float32))


def test_training_deterministic_and_logs(tmp_path):
    tc = TrainConfig(epochs=2, seed=1, optimizer="adam", base_lr=0.002)
    r1 = train(CFG, tc, scenes(), log_path=tmp_path / "a.csv")
    r2 = train(CFG, tc, scenes(), log_path=tmp_path / "b.csv")
    a = (tmp_path / "a.csv").read_text()
    assert a == (tmp_path / "b.csv").read_text()
    lines = a.splitlines()
    assert len(lines) == 2 and lines[0].startswith("0,")
    assert len(lines[0].split(",")) == 4
    assert float(lines[0].split(",")[1]) == r1.history[0].loss
    assert r1.iterations == 4
    for n in r1.store.names():
        assert np.array_equal(r1.store.value(n), r2.store.value(n))


def test_training_reduces_loss():
    tc = TrainConfig(iterations=30, seed=0, optimizer="adam", base_lr=0.003)
    res = train(CFG, tc, scenes(2))
    assert res.history[-1].loss < res.history[0].loss


def test_iterations_budget_and_batches():
    res = train(CFG, TrainConfig(iterations=3, batch_size=2, seed=0), scenes(3))
    assert res.iterations == 3 and len(res.history) == 2


def test_empty_dataset_rejected():
    with pytest.raises(TrainConfigError):
        train(CFG, TrainConfig(), [])


def test_predict_and_evaluate_shapes():
    st = init_unet(CFG, 0)
    s = scenes(1)[0]
    pred = predict_scene(st, CFG, s)
    assert pred.dims == s.dims and not pred.unknown_mask.any()
    rep = evaluate(st, CFG, [s])
    assert rep.confusion.sum() == int((~s.target.unknown_mask).sum())
