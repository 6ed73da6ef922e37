import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathattr.data import Dataset
from pathattr.errors import NumericError
from pathattr.model import LayerSpec, TinyCnnParams, batch_loss, init_params
from pathattr.trainer import (
    EpisodicConfig,
    TrainingConfig,
    class_weights,
    confusion_matrix,
    evaluate,
    inner_adapt,
    meta_update,
    metrics_from_confusion,
    sgdm_step,
    split_counts,
    split_dataset,
    split_indices,
    train,
    zeros_like,
)


def _toy_dataset(per_class=10, classes=3, size=8, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    images = rng.uniform(0, 0.2, size=(len(labels), size, size))
    for i, y in enumerate(labels):
        images[i, y * 2:(y * 2) + 2, :] += 0.7
    return Dataset(images, labels)


# ---------------------------------------------------------------------------
# config


def test_default_hyperparameters():
    c = TrainingConfig()
    assert (c.learning_rate, c.batch_size, c.epochs, c.momentum, c.l2_coefficient) == (1e-3, 32, 20, 0.939, 3e-4)
    assert (c.train_fraction, c.test_fraction, c.optimizer) == (0.7, 0.3, "SGDM")


@pytest.mark.parametrize("bad", [
    {"learning_rate": 0.0},
    {"train_fraction": 1.0, "test_fraction": 0.0},
    {"train_fraction": 0.6},
    {"batch_size": 0},
    {"optimizer": "adam"},
])
def test_config_invariants(bad):
    with pytest.raises(ValueError):
        TrainingConfig(**bad)


def test_config_from_dict_rejects_unknown_keys():
    with pytest.raises(ValueError):
        TrainingConfig.from_dict({"learning_rat": 0.1})


# ---------------------------------------------------------------------------
# splitting


def test_ten_per_class_split_seven_three():
    train_set, test_set = split_dataset(_toy_dataset(10), 0.7, seed=4)
    assert list(train_set.class_counts()) == [7, 7, 7]
    assert list(test_set.class_counts()) == [3, 3, 3]


def test_fraction_one_rejected():
    with pytest.raises(ValueError):
        split_dataset(_toy_dataset(4), 1.0)


def test_split_counts_round_half_up():
    assert split_counts([708, 1426, 930], 0.7) == [496, 998, 651]


def test_singleton_class_cannot_be_stratified():
    with pytest.raises(ValueError):
        split_indices(np.array([0, 0, 0, 1]), 0.7)


def test_split_is_seeded():
    labels = np.repeat([0, 1, 2], 20)
    a = split_indices(labels, 0.7, seed=3)
    b = split_indices(labels, 0.7, seed=3)
    c = split_indices(labels, 0.7, seed=4)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], c[0])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(2, 40), min_size=1, max_size=5), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_partitions_and_stratifies(sizes, fraction, seed):
    labels = np.concatenate([np.full(n, c) for c, n in enumerate(sizes)])
    rng = np.random.default_rng(seed)
    labels = labels[rng.permutation(len(labels))]
    train_idx, test_idx = split_indices(labels, fraction, seed)
    assert not set(train_idx) & set(test_idx)
    assert sorted(np.concatenate([train_idx, test_idx])) == list(range(len(labels)))
    expected = split_counts(sizes, fraction)
    assert list(np.bincount(labels[train_idx], minlength=len(sizes))) == expected
    for n, k in zip(sizes, expected):
        assert 1 <= k <= n - 1
        assert abs(k - fraction * n) <= 0.5 + 1e-9 or k in (1, n - 1)


# ---------------------------------------------------------------------------
# optimiser


def test_zero_gradient_zero_velocity_no_decay_keeps_params():
    theta = {"w": np.array([1.0, -2.0])}
    cfg = TrainingConfig(l2_coefficient=0.0)
    new, v = sgdm_step(theta, {"w": np.zeros(2)}, {"w": np.zeros(2)}, cfg)
    assert np.array_equal(new["w"], theta["w"])
    assert not v["w"].any()


def test_no_momentum_no_decay_is_plain_sgd_bit_exact():
    rng = np.random.default_rng(0)
    theta = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=5)}
    grad = {k: rng.normal(size=v.shape) for k, v in theta.items()}
    cfg = TrainingConfig(momentum=0.0, l2_coefficient=0.0, learning_rate=0.37)
    new, _ = sgdm_step(theta, grad, zeros_like(theta), cfg)
    for k in theta:
        assert np.array_equal(new[k], theta[k] - 0.37 * grad[k])


def test_coupled_l2_and_momentum_formula():
    theta, grad, vel = {"w": np.array([2.0])}, {"w": np.array([0.5])}, {"w": np.array([0.25])}
    cfg = TrainingConfig(learning_rate=0.1, momentum=0.9, l2_coefficient=0.01)
    new, v = sgdm_step(theta, grad, vel, cfg)
    expect_v = 0.9 * 0.25 + (0.5 + 2 * 0.01 * 2.0)
    assert v["w"][0] == pytest.approx(expect_v, abs=1e-15)
    assert new["w"][0] == pytest.approx(2.0 - 0.1 * expect_v, abs=1e-15)


def test_quadratic_bowl_norm_strictly_decreases():
    # loss ||theta||^2, gradient 2 theta; compared with a scalar-per-coordinate simulation
    cfg = TrainingConfig()
    start = np.array([1.5, -0.5, 3.0])
    theta, vel = {"w": start.copy()}, {"w": np.zeros(3)}
    sim_t, sim_v = [float(v) for v in start], [0.0, 0.0, 0.0]
    norms = [np.linalg.norm(start)]
    for _ in range(50):
        theta, vel = sgdm_step(theta, {"w": 2 * theta["w"]}, vel, cfg)
        for i in range(3):
            sim_v[i] = 0.939 * sim_v[i] + (2 * sim_t[i] + 2 * 3e-4 * sim_t[i])
            sim_t[i] -= 1e-3 * sim_v[i]
        norms.append(np.linalg.norm(theta["w"]))
    np.testing.assert_allclose(theta["w"], sim_t, rtol=1e-14)
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_non_finite_update_aborts():
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        sgdm_step({"w": np.array([1e308])}, {"w": np.array([1e308])}, {"w": np.zeros(1)},
                  TrainingConfig(learning_rate=1e10, momentum=0.0, l2_coefficient=0.0))


# ---------------------------------------------------------------------------
# evaluation


def _constant_params(spec, cls):
    tensors = {n: np.zeros(s) for n, s in spec.tensor_shapes().items()}
    last = f"dense{len(spec.dense_widths)}.bias"
    tensors[last][cls] = 1.0
    return TinyCnnParams(spec, tensors)


def test_constant_classifier_on_balanced_set_scores_a_third():
    data = _toy_dataset(5)
    spec = LayerSpec(input_shape=(1, 8, 8), conv_channels=(), dense_widths=())
    m = evaluate(_constant_params(spec, 1), data)
    assert m.accuracy == pytest.approx(1 / 3)
    assert m.confusion == [[0, 5, 0], [0, 5, 0], [0, 5, 0]]


def test_perfect_classifier_metrics():
    cm = confusion_matrix([0, 1, 2, 2, 1], [0, 1, 2, 2, 1], 3)
    stats = metrics_from_confusion(cm)
    assert np.array_equal(cm, np.diag([1, 2, 2]))
    assert stats["accuracy"] == 1.0 and stats["macro_f1"] == 1.0


def test_hand_counted_twelve_samples():
    truth = [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]
    preds = [0, 0, 1, 2, 1, 1, 1, 0, 2, 2, 0, 0]
    # tallied by hand:        pred0 pred1 pred2
    expected = [[2, 1, 1],  # true 0
                [1, 3, 0],  # true 1
                [2, 0, 2]]  # true 2
    stats = metrics_from_confusion(confusion_matrix(truth, preds, 3))
    assert stats["confusion"] == expected
    assert stats["accuracy"] == pytest.approx(7 / 12)
    assert stats["precision"] == pytest.approx([2 / 5, 3 / 4, 2 / 3])
    assert stats["recall"] == pytest.approx([2 / 4, 3 / 4, 2 / 4])
    f1 = [2 * p * r / (p + r) for p, r in zip([2 / 5, 3 / 4, 2 / 3], [1 / 2, 3 / 4, 1 / 2])]
    assert stats["macro_f1"] == pytest.approx(sum(f1) / 3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60))
def test_confusion_conservation(pairs):
    truth, preds = zip(*pairs)
    stats = metrics_from_confusion(confusion_matrix(truth, preds, 4))
    cm = np.array(stats["confusion"])
    assert cm.sum() == len(pairs)
    assert list(cm.sum(axis=1)) == list(np.bincount(truth, minlength=4))
    assert stats["accuracy"] == pytest.approx(np.trace(cm) / cm.sum())
    assert all(0 <= f <= 1 for f in stats["f1"])


# ---------------------------------------------------------------------------
# training


def test_class_weights_average_to_one():
    labels = np.array([0, 0, 0, 0, 0, 0, 1, 1, 2])
    w = class_weights(labels, 3)
    assert w[labels].mean() == pytest.approx(1.0)
    assert w[1] == pytest.approx(3 * w[0])


def test_balanced_class_weighting_leaves_loss_unchanged():
    data = _toy_dataset(6)
    w = class_weights(data.labels, 3)
    for seed in range(3):
        params = init_params(LayerSpec(input_shape=(1, 8, 8), conv_channels=(2,), dense_widths=(4,)), seed)
        assert batch_loss(params, data.images, data.labels, w[data.labels]) == pytest.approx(
            batch_loss(params, data.images, data.labels), abs=1e-14)


def test_zero_epochs_returns_initial_params():
    data = _toy_dataset(10)
    cfg = TrainingConfig(epochs=0, input_shape=(1, 8, 8), conv_channels=(2,), dense_widths=(4,), seed=5)
    params, metrics = train(data, cfg)
    init = init_params(cfg.layer_spec(3), 5)
    assert all(np.array_equal(params[n], init[n]) for n in init.tensors)
    assert metrics.epoch_loss == [] and metrics.epoch_accuracy == []
    assert sum(map(sum, metrics.confusion)) == 9


def test_identical_runs_give_identical_metrics():
    data = _toy_dataset(20)
    cfg = TrainingConfig(epochs=3, input_shape=(1, 8, 8), conv_channels=(2,), dense_widths=(6,),
                         learning_rate=0.05, keep_prob=0.8, class_weighting=True, seed=2)
    (p1, m1), (p2, m2) = train(data, cfg), train(data, cfg)
    assert json.dumps(m1.to_dict(), sort_keys=True) == json.dumps(m2.to_dict(), sort_keys=True)
    assert all(np.array_equal(p1[n], p2[n]) for n in p1.tensors)
    assert "wall_clock" not in m1.to_dict() and "wall_clock" in m1.to_dict(include_timing=True)


def test_linear_model_loss_non_increasing_on_separable_data():
    rng = np.random.default_rng(0)
    labels = np.repeat([0, 1], 40)
    images = rng.uniform(0, 0.3, size=(80, 4, 4))
    images[labels == 1, :2] += 0.6
    data = Dataset(images, labels)
    cfg = TrainingConfig(input_shape=(1, 4, 4), conv_channels=(), dense_widths=(), epochs=15)
    _, metrics = train(data, cfg)
    losses = metrics.epoch_loss
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_confusion_rows_match_test_counts():
    data = _toy_dataset(12)
    cfg = TrainingConfig(epochs=2, input_shape=(1, 8, 8), conv_channels=(2,), dense_widths=(4,))
    _, metrics = train(data, cfg)
    test_labels = data.labels[metrics.test_indices]
    assert [sum(r) for r in metrics.confusion] == list(np.bincount(test_labels, minlength=3))


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train(Dataset(np.zeros((0, 8, 8)), np.zeros(0)), TrainingConfig(input_shape=(1, 8, 8)))


# ---------------------------------------------------------------------------
# episodic updates on a scalar quadratic: loss(theta; d) = (theta - d)^2 / 2


def _quad_grad(params, data):
    return {"w": params["w"] - np.mean(data)}


def test_inner_adapt_identity_cases():
    theta = {"w": np.array([1.0])}
    for cfg in (EpisodicConfig(inner_steps=0), EpisodicConfig(inner_learning_rate=0.0, inner_steps=3)):
        assert inner_adapt(theta, [2.0, 4.0], cfg, _quad_grad)["w"][0] == 1.0


def test_inner_adapt_hand_derived():
    theta = {"w": np.array([1.0])}
    one = inner_adapt(theta, [2.0, 4.0], EpisodicConfig(inner_learning_rate=0.1, inner_steps=1), _quad_grad)
    two = inner_adapt(theta, [2.0, 4.0], EpisodicConfig(inner_learning_rate=0.1, inner_steps=2), _quad_grad)
    assert abs(one["w"][0] - 1.2) <= 1e-12  # 1 - 0.1 * (1 - 3)
    assert abs(two["w"][0] - 1.38) <= 1e-12  # 3 + 0.9^2 * (1 - 3)


def test_inner_adapt_linear_model_closed_form():
    spec = LayerSpec(input_shape=(1, 1, 2), conv_channels=(), dense_widths=(), num_classes=2)
    params = TinyCnnParams(spec, {"dense0.weight": np.array([[0.2, -0.1], [0.4, 0.3]]), "dense0.bias": np.zeros(2)})
    x = np.array([[[1.0, 2.0]]])
    adapted = inner_adapt(params, (x, np.array([1])), EpisodicConfig(inner_learning_rate=0.5, inner_steps=1))
    z = np.array([0.2 + 0.8, -0.1 + 0.6])
    p = np.exp(z) / np.exp(z).sum()
    delta = p - np.array([0.0, 1.0])
    np.testing.assert_allclose(adapted["dense0.weight"], params["dense0.weight"] - 0.5 * np.outer([1.0, 2.0], delta),
                               rtol=0, atol=1e-12)
    np.testing.assert_allclose(adapted["dense0.bias"], -0.5 * delta, rtol=0, atol=1e-12)


def test_meta_update_two_tasks_hand_derived():
    theta = {"w": np.array([1.0])}
    tasks = [([2.0, 4.0], [1.0]), ([0.0], [-1.0, 1.0])]
    cfg = EpisodicConfig(inner_learning_rate=0.1, outer_learning_rate=0.5, inner_steps=1)
    # adapted 1.2 and 0.9; query gradients 0.2 and 0.9; mean 0.55
    assert abs(meta_update(theta, tasks, cfg, _quad_grad)["w"][0] - 0.725) <= 1e-12
    cfg2 = EpisodicConfig(inner_learning_rate=0.1, outer_learning_rate=0.5, inner_steps=2)
    assert abs(meta_update(theta, tasks, cfg2, _quad_grad)["w"][0] - 0.7025) <= 1e-12


def test_meta_update_without_inner_steps_is_sgd_on_query():
    theta = {"w": np.array([1.0])}
    cfg = EpisodicConfig(inner_learning_rate=0.3, outer_learning_rate=0.25, inner_steps=0)
    out = meta_update(theta, [([5.0], [3.0, 5.0])], cfg, _quad_grad)
    assert out["w"][0] == 1.0 - 0.25 * (1.0 - 4.0)


def test_meta_update_fixed_point_and_errors():
    theta = {"w": np.array([2.0])}
    cfg = EpisodicConfig(inner_learning_rate=0.1, outer_learning_rate=0.5, inner_steps=2)
    assert meta_update(theta, [([2.0], [2.0]), ([1.0, 3.0], [2.0])], cfg, _quad_grad)["w"][0] == 2.0
    with pytest.raises(ValueError):
        meta_update(theta, [], cfg, _quad_grad)


def test_per_tensor_rates():
    theta = {"a": np.array([1.0]), "b": np.array([1.0])}
    grad = lambda p, d: {k: v.copy() for k, v in p.items()}  # noqa: E731
    cfg = EpisodicConfig(inner_learning_rate={"a": 0.5, "b": 0.0}, inner_steps=1)
    out = inner_adapt(theta, [0.0], cfg, grad)
    assert out["a"][0] == 0.5 and out["b"][0] == 1.0


def test_episodic_training_runs_end_to_end():
    data = _toy_dataset(12)
    cfg = TrainingConfig(epochs=2, input_shape=(1, 8, 8), conv_channels=(2,), dense_widths=(4,))
    epi = EpisodicConfig(inner_learning_rate=0.05, outer_learning_rate=0.05, tasks_per_meta_batch=2,
                         task_size=9, meta_batches_per_epoch=3)
    _, m1 = train(data, cfg, epi)
    _, m2 = train(data, cfg, epi)
    assert len(m1.epoch_loss) == 2
    assert m1.to_dict() == m2.to_dict()
