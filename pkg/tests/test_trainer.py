import math

import numpy as np
import pytest

from zfcl import autodiff as ad
from zfcl.autodiff import Tensor
from zfcl.bank import ModulationSpec, apply_record
from zfcl.data import Dataset
from zfcl.errors import EmptyDatasetError, NonFiniteLossError, TrainingError
from zfcl.trainer import (
    OptimState,
    TrainConfig,
    adam_step,
    evaluate,
    fit,
    fresh_head,
    lr_search,
    predict_logits,
    read_config,
    train_task,
)


def halves(n, seed):
    """Two classes: bright left half versus bright right half, plus noise."""
    r = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = r.uniform(0, 0.3, size=(n, 1, 8, 8))
    x[y == 0, :, :, :4] += 0.6
    x[y == 1, :, :, 4:] += 0.6
    return Dataset(x.astype(np.float32), y)


# -- Adam ---------------------------------------------------------------------


def test_adam_zero_gradient_is_fixed_point():
    p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    state = OptimState()
    adam_step({"p": p}, {"p": np.zeros(2)}, state, 0.1)
    assert p.data.tolist() == [1.5, -2.0]
    assert np.all(state.m["p"] == 0) and np.all(state.v["p"] == 0)


def test_adam_first_step_hand_oracle():
    p = Tensor(np.array([0.0]), requires_grad=True)
    adam_step({"p": p}, {"p": np.array([1.0])}, OptimState(), 0.1)
    # m_hat = 1, v_hat = 1, step = lr / (1 + eps)
    assert p.data[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)


def test_adam_two_steps_oracle():
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = OptimState()
    g1, g2, lr = 0.5, -0.2, 0.01
    adam_step({"p": p}, {"p": np.array([g1])}, state, lr)
    adam_step({"p": p}, {"p": np.array([g2])}, state, lr)
    x = 1.0
    m = v = 0.0
    for t, g in enumerate((g1, g2), start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= lr * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert p.data[0] == pytest.approx(x, abs=1e-15)


def test_lr_schedule():
    cfg = TrainConfig(lr=0.1, epochs=30, lr_decay_epoch=15)
    assert cfg.lr_at(14) == 0.1 and cfg.lr_at(15) == pytest.approx(0.01)
    full = TrainConfig.full_scale()
    assert (full.epochs, full.lr_decay_epoch, full.lr_decay_factor) == (30, 15, 0.1)


def test_config_validation_and_files(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1})
    (tmp_path / "c.toml").write_text("[train]\nlr = 0.001\nepochs = 3\n")
    assert TrainConfig.from_file(tmp_path / "c.toml").lr == 0.001
    (tmp_path / "c.json").write_text('{"train": {"epochs": 4}}')
    assert read_config(tmp_path / "c.json")["train"]["epochs"] == 4


# -- training -----------------------------------------------------------------


def test_zero_steps_matches_fresh_head(tiny_base):
    data = halves(64, 0)
    cfg = TrainConfig(seed=7, max_steps=0)
    record = train_task(tiny_base, ModulationSpec(2, 2), data, cfg)
    ref = tiny_base.clone()
    ref.head = fresh_head(ref.head.weight.shape[1], 2, 7, ref.dtype)
    probe = halves(20, 1).x
    assert predict_logits(apply_record(tiny_base, record), probe).tobytes() == predict_logits(ref, probe).tobytes()


def test_separable_toy_task(tiny_base):
    data = halves(200, 0)
    cfg = TrainConfig(epochs=30, lr=1e-2, lr_decay_epoch=15, batch_size=50)
    record = train_task(tiny_base, ModulationSpec(1, 1), data, cfg)
    acc, _ = evaluate(apply_record(tiny_base, record), data)
    assert acc >= 0.99


def test_training_is_deterministic(tiny_base):
    data = halves(96, 2)
    cfg = TrainConfig(epochs=1, batch_size=32, seed=3)
    a = train_task(tiny_base, ModulationSpec(4, 4, "nearest"), data, cfg)
    b = train_task(tiny_base, ModulationSpec(4, 4, "nearest"), data, cfg)
    for k in a.grids:
        assert a.grids[k].tobytes() == b.grids[k].tobytes()
    assert a.head_weight.tobytes() == b.head_weight.tobytes()
    for (_, m1, v1), (_, m2, v2) in zip(a.bn.entries, b.bn.entries):
        assert m1.tobytes() == m2.tobytes() and v1.tobytes() == v2.tobytes()


def test_training_leaves_base_untouched(tiny_base):
    h = tiny_base.content_hash()
    train_task(tiny_base, ModulationSpec(2, 2), halves(64, 0), TrainConfig(epochs=1, batch_size=32))
    assert tiny_base.content_hash() == h and not tiny_base.training


def test_empty_dataset(tiny_base):
    empty = Dataset(np.zeros((0, 1, 8, 8)), np.zeros(0))
    with pytest.raises(EmptyDatasetError):
        train_task(tiny_base, ModulationSpec(2, 2), empty, TrainConfig())
    with pytest.raises(EmptyDatasetError):
        evaluate(tiny_base, empty)


def test_non_finite_loss(tiny_base):
    model = tiny_base.clone()

    def loss_fn(net, x, y):
        return ad.scale(ad.cross_entropy(net(x), y), float("nan"))

    params = {"head.weight": model.head.weight}
    model.head.weight.requires_grad = True
    with pytest.raises(NonFiniteLossError) as exc:
        fit(model, params, halves(8, 0), TrainConfig(epochs=1, batch_size=4), loss_fn)
    assert exc.value.step == 0
    assert not model.training


# -- evaluation ---------------------------------------------------------------


def test_predict_requires_eval_mode(tiny_base):
    model = tiny_base.clone().train(True)
    with pytest.raises(TrainingError):
        predict_logits(model, np.zeros((2, 1, 8, 8), np.float32))


def test_evaluate_random_head_binomial(tiny_base):
    n, c = 2000, 10
    r = np.random.default_rng(9)
    data = Dataset(r.uniform(size=(n, 1, 8, 8)).astype(np.float32), r.integers(0, c, size=n))
    model = tiny_base.clone()
    model.head = fresh_head(model.head.weight.shape[1], c, 11, model.dtype)
    acc, _ = evaluate(model, data)
    sigma = math.sqrt(0.1 * 0.9 / n)
    assert abs(acc - 0.1) <= 3 * sigma
    assert evaluate(model, data) == (acc, evaluate(model, data)[1])


def test_evaluate_memorised_set(tiny_base):
    data = halves(40, 4)
    record = train_task(tiny_base, ModulationSpec(1, 1), data, TrainConfig(epochs=30, batch_size=20))
    assert evaluate(apply_record(tiny_base, record), data)[0] == 1.0


# -- lr search ----------------------------------------------------------------


def test_lr_search_singleton(tiny_base):
    cfg = TrainConfig(epochs=1, batch_size=32, lr_grid=(3e-3,))
    res = lr_search(tiny_base, ModulationSpec(2, 2), halves(80, 0), cfg)
    assert res.config.lr == 3e-3 and list(res.scores) == [3e-3]


def test_lr_search_tie_prefers_smaller(tiny_base):
    calls = []

    def fixed(base, spec, data, cfg, task_id, num_classes):
        calls.append(cfg.lr)
        return train_task(base, spec, data, cfg.replace(lr=1e-3, max_steps=0), task_id, num_classes)

    cfg = TrainConfig(lr_grid=(1e-1, 1e-2, 1e-3))
    res = lr_search(tiny_base, ModulationSpec(2, 2), halves(60, 0), cfg, train_fn=fixed)
    assert len(set(res.scores.values())) == 1
    assert res.config.lr == 1e-3 and sorted(calls) == calls


def test_lr_search_deterministic_and_records_failures(tiny_base):
    data = halves(80, 5)
    cfg = TrainConfig(epochs=2, batch_size=32, lr_grid=(1e-2, 1e-3))
    a = lr_search(tiny_base, ModulationSpec(2, 2), data, cfg)
    b = lr_search(tiny_base, ModulationSpec(2, 2), data, cfg)
    assert a.config.lr == b.config.lr and a.scores == b.scores
    assert a.scores[a.config.lr] == max(a.scores.values())

    def flaky(base, spec, data, cfg, task_id, num_classes):
        if cfg.lr > 0.05:
            raise NonFiniteLossError(0, float("nan"))
        return train_task(base, spec, data, cfg.replace(max_steps=1), task_id, num_classes)

    res = lr_search(tiny_base, ModulationSpec(2, 2), data, TrainConfig(lr_grid=(0.1, 0.01)), train_fn=flaky)
    assert 0.1 in res.failures and res.config.lr == 0.01
