import numpy as np
import pytest

from zfcl import autodiff as ad
from zfcl.autodiff import Tensor, backward, grad_check
from zfcl.bank import apply_record
from zfcl.baselines import (
    AccuracyMatrix,
    LwFConfig,
    MaskConfig,
    TaskData,
    distillation,
    forgetting,
    install_masks,
    lwf_loss,
    mask_forward,
    max_forgetting,
    run_finetune_sequence,
    run_lwf_sequence,
    train_mask_task,
    train_readout_task,
)
from zfcl.data import DatasetSpec, Transform, load_dataset
from zfcl.errors import ZFCLError
from zfcl.nn import ModulatedLinear
from zfcl.trainer import TrainConfig, fresh_head, predict_logits


# -- masking ------------------------------------------------------------------


def test_mask_selects_weights():
    layer = ModulatedLinear(np.array([[5.0, 7.0]]))
    layer.attach_mask(np.array([[-1.0, 1.0]]), tau=0.0)
    assert mask_forward(layer, Tensor([[1.0, 1.0]])).data.tolist() == [[7.0]]


def test_mask_all_above_tau_is_unmasked(rng):
    w = rng.normal(size=(3, 4))
    x = Tensor(rng.normal(size=(2, 4)))
    layer = ModulatedLinear(w)
    plain = layer(x).data
    layer.attach_mask(np.full(w.shape, 5.0), tau=0.0)
    assert mask_forward(layer, x).data.tobytes() == plain.tobytes()
    with pytest.raises(ZFCLError):
        mask_forward(ModulatedLinear(w), x)


def test_straight_through_chain_rule(rng):
    """d loss / d score = d loss / d (effective weight) * W, whatever the mask value."""
    w = rng.normal(size=(3, 4))
    x = rng.normal(size=(5, 4))
    proj = rng.normal(size=(5, 3))
    scores = rng.normal(size=(3, 4))
    layer = ModulatedLinear(w)
    layer.attach_mask(scores, tau=0.0)
    backward(ad.tensor_sum(ad.mul(layer(Tensor(x)), Tensor(proj))))
    mask = (scores > 0).astype(float)
    d_eff = proj.T @ x
    np.testing.assert_allclose(layer.mask_slot.scores.grad, d_eff * w, rtol=1e-12)
    # the surrogate function whose true gradient the estimator returns
    assert grad_check(lambda s: ad.tensor_sum(ad.mul(ad.linear(Tensor(x), ad.mul(Tensor(w), s)), Tensor(proj))), mask) < 1e-4


def test_mask_config_guard():
    with pytest.raises(ValueError):
        MaskConfig(tau=0.1, s0=0.05)


def test_mask_zero_steps_identity(tiny_base, digits_split):
    train, _ = digits_split
    record = train_mask_task(tiny_base, train.head(64), TrainConfig(seed=4, max_steps=0))
    assert all(m.all() for m in record.masks.values())
    ref = tiny_base.clone()
    ref.head = fresh_head(ref.head.weight.shape[1], 10, 4, ref.dtype)
    probe = train.x[:16]
    assert predict_logits(apply_record(tiny_base, record), probe).tobytes() == predict_logits(ref, probe).tobytes()


def test_install_masks_shapes(tiny_base):
    model = tiny_base.clone()
    install_masks(model)
    for _, layer in model.weight_layers():
        assert layer.mask_slot.scores.shape == layer.weight.shape
        assert np.all(layer.mask_slot.realize() == 1)


def test_mask_beats_readout_on_rotated_digits(tiny_base):
    spec = DatasetSpec("rot", transform=Transform("rotate", angle=90))
    train, test = load_dataset(spec)
    cfg = TrainConfig(epochs=3, lr=1e-2, lr_decay_epoch=2)
    from zfcl.trainer import evaluate

    mask_acc = evaluate(apply_record(tiny_base, train_mask_task(tiny_base, train, cfg)), test)[0]
    readout_acc = evaluate(apply_record(tiny_base, train_readout_task(tiny_base, train, cfg)), test)[0]
    assert mask_acc > readout_acc


def test_readout_keeps_base_statistics(tiny_base, digits_split):
    train, _ = digits_split
    record = train_readout_task(tiny_base, train.head(64), TrainConfig(epochs=1, batch_size=32))
    from zfcl.nn import bn_snapshot

    for (_, m1, v1), (_, m2, v2) in zip(record.bn.entries, bn_snapshot(tiny_base).entries):
        assert np.array_equal(m1, m2) and np.array_equal(v1, v2)


# -- LwF loss -----------------------------------------------------------------


def test_lambda_zero_is_plain_ce(rng):
    logits = Tensor(rng.normal(size=(4, 3)))
    old = {"a": Tensor(rng.normal(size=(4, 5)))}
    y = np.array([0, 1, 2, 0])
    got = lwf_loss(logits, old, {"a": rng.normal(size=(4, 5))}, y, LwFConfig(lam=0.0)).item()
    assert got == ad.cross_entropy(logits, y).item()


def test_distillation_fixed_point(rng):
    t = rng.normal(size=(6, 5))
    s = Tensor(t.copy(), requires_grad=True)
    backward(distillation(s, t, 2.0))
    assert np.max(np.abs(s.grad)) < 1e-15
    # value equals the entropy of the softened teacher
    p = np.exp(t / 2) / np.exp(t / 2).sum(axis=1, keepdims=True)
    entropy = -(p * np.log(p)).sum(axis=1).mean()
    assert distillation(Tensor(t), t, 2.0).item() == pytest.approx(entropy, rel=1e-12)


def test_lwf_loss_gradients(rng):
    y = np.array([1, 0, 2])
    new = rng.normal(size=(3, 3))
    teacher = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 2))}
    student_b = rng.normal(size=(3, 2))
    cfg = LwFConfig(lam=0.7, temperature=2.0)

    def f_old(t):
        return lwf_loss(Tensor(new), {"a": t, "b": Tensor(student_b)}, teacher, y, cfg)

    def f_new(t):
        return lwf_loss(t, {"a": Tensor(teacher["a"] + 0.3), "b": Tensor(student_b)}, teacher, y, cfg)

    assert grad_check(f_old, rng.normal(size=(3, 4))) < 1e-4
    assert grad_check(f_new, new) < 1e-4


def test_lwf_missing_teacher(rng):
    with pytest.raises(ZFCLError):
        lwf_loss(Tensor(np.zeros((1, 2))), {"a": Tensor(np.zeros((1, 2)))}, {}, [0], LwFConfig())


def test_lwf_config_guards():
    with pytest.raises(ValueError):
        LwFConfig(lam=-1)
    with pytest.raises(ValueError):
        LwFConfig(temperature=0)


# -- accuracy matrices --------------------------------------------------------


def test_forgetting_known_value():
    m = AccuracyMatrix(["ImageNet"] + [f"t{i}" for i in range(5)])
    for i in range(6):
        m.add_phase([74.78 if i == 0 else 31.17] + [50.0] * i)
    assert forgetting(m)[5][0] == pytest.approx(74.78 - 31.17)
    assert forgetting(m)[5][0] == pytest.approx(43.61)


def test_zero_forgetting_matrix():
    m = AccuracyMatrix(["a", "b"])
    m.add_phase([0.9])
    m.add_phase([0.9, 0.8])
    assert forgetting(m) == [[0.0, None], [0.0, 0.0]]
    assert max_forgetting(m) == 0.0
    with pytest.raises(ValueError):
        m.add_phase([0.1])


def test_matrix_json_and_mean():
    a = AccuracyMatrix(["x", "y"], [[0.5, None], [0.4, 0.6]])
    b = AccuracyMatrix.from_json(a.to_json())
    assert b.rows == a.rows and b[1, 0] == 0.4
    m = AccuracyMatrix.mean([a, AccuracyMatrix(["x", "y"], [[0.7, None], [0.2, 0.8]])])
    assert m.rows == [[pytest.approx(0.6), None], [pytest.approx(0.3), pytest.approx(0.7)]]


# -- sequences ----------------------------------------------------------------


@pytest.fixture(scope="module")
def shifted_tasks():
    base = DatasetSpec("digits", n_train=400)
    specs = [base, base.with_transform("rot90", Transform("rotate", angle=90)), base.with_transform("perm", Transform("permute", seed=1))]
    return [TaskData(s.name, *load_dataset(s)) for s in specs]


def test_single_task_matrix(tiny_base, shifted_tasks):
    m = run_finetune_sequence(tiny_base, shifted_tasks[:1], TrainConfig())
    assert m.phases == 1 and len(m.rows[0]) == 1


def test_finetune_forgets(tiny_base, shifted_tasks):
    cfg = TrainConfig(epochs=3, lr_decay_epoch=2)
    h = tiny_base.content_hash()
    m = run_finetune_sequence(tiny_base, shifted_tasks, cfg)
    assert m[2, 0] < m[0, 0]
    assert max_forgetting(m) > 0
    assert tiny_base.content_hash() == h


def test_lwf_tradeoff(tiny_base, shifted_tasks):
    cfg = TrainConfig(epochs=3, lr_decay_epoch=2)
    weak = run_lwf_sequence(tiny_base, shifted_tasks[:2], cfg, LwFConfig(lam=1.0))
    strong = run_lwf_sequence(tiny_base, shifted_tasks[:2], cfg, LwFConfig(lam=100.0))
    assert weak[1, 0] < weak[0, 0]
    assert strong[1, 0] >= weak[1, 0]
    assert strong[1, 1] <= weak[1, 1]
