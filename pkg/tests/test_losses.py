"""Pair losses: hand-computed cases, reductions between objectives, gradients."""
import numpy as np
import pytest

from relreplay.errors import ConfigError
from relreplay.losses import (
    build_pair_batch,
    derpp_loss,
    er_loss,
    erace_loss,
    inner_loss_gradient,
    kd_upstream,
    kd_values,
    new_class_set,
    outer_loss,
    outer_loss_gradient,
    outer_loss_per_sample_gradients,
    pair_loss_values,
    weighted_inner_loss,
)
from relreplay.mainnet import MainNet, build_main_net, cross_entropy, predict
from relreplay.tensor import ParamVector

RNG = np.random.default_rng


def uniform_net(input_dim=3, hidden=(5,), total=4, num_classes=None):
    """All-zero parameters: every logit is 0, every restricted softmax uniform."""
    net = build_main_net(input_dim, hidden, total, RNG(0))
    return MainNet(ParamVector(net.params.layout, np.zeros(net.params.size)),
                   total if num_classes is None else num_classes)


def random_net(seed=0, input_dim=3, hidden=(5,), total=4):
    return build_main_net(input_dim, hidden, total, RNG(seed))


def batch(seed, n=3, dim=3, classes=(0, 1, 2, 3)):
    rng = RNG(seed)
    return rng.normal(size=(n, dim)), rng.choice(classes, size=n)


def test_new_class_set_switches_on_objective():
    curr = np.array([2, 3])
    seen = np.array([0, 1, 2, 3])
    np.testing.assert_array_equal(new_class_set("er", curr, seen), seen)
    np.testing.assert_array_equal(new_class_set("derpp", curr, seen), seen)
    np.testing.assert_array_equal(new_class_set("er-ace", curr, seen), curr)


def test_er_loss_uniform_hand_value():
    net = uniform_net()
    x_new, y_new = batch(1)
    x_buf, y_buf = batch(2)
    bd = er_loss(net, x_new, y_new, x_buf, y_buf, 1.0, 0.5, range(4))
    # uniform over 4 classes: every term is log 4
    assert bd.total == pytest.approx(1.5 * np.log(4.0), abs=1e-12)
    np.testing.assert_allclose(bd.per_pair_terms[:, 0], np.log(4.0), atol=1e-12)
    np.testing.assert_allclose(bd.per_pair_terms[:, 1], 0.5 * np.log(4.0), atol=1e-12)
    np.testing.assert_array_equal(bd.per_pair_terms[:, 2], np.zeros(3))


def test_er_loss_two_pair_hand_case():
    # bias-only logits [2, 0]; CE(label 0) = log(1+e^-2), CE(label 1) = log(1+e^2)
    net = uniform_net(input_dim=2, hidden=(2,), total=2)
    net.params.values[-2:] = [2.0, 0.0]
    x = np.zeros((2, 2))
    bd = er_loss(net, x, np.array([0, 1]), x, np.array([1, 0]), 1.0, 0.5, [0, 1])
    l0 = np.log(1 + np.exp(-2.0))
    l1 = np.log(1 + np.exp(2.0))
    expected = np.mean([l0 + 0.5 * l1, l1 + 0.5 * l0])
    assert bd.total == pytest.approx(expected, abs=1e-12)


def test_breakdown_total_is_mean_of_row_sums():
    net = random_net(5)
    x_new, y_new = batch(6)
    x_buf, y_buf = batch(7)
    bd = er_loss(net, x_new, y_new, x_buf, y_buf, 0.8, 0.3, range(4))
    assert bd.total == pytest.approx(bd.per_pair_terms.sum(axis=1).mean(), abs=1e-12)
    np.testing.assert_array_equal(bd.weights_used, np.tile([0.8, 0.3], (3, 1)))


def test_negative_weights_rejected():
    net = random_net()
    x_new, y_new = batch(1)
    x_buf, y_buf = batch(2)
    with pytest.raises(ConfigError):
        er_loss(net, x_new, y_new, x_buf, y_buf, -0.1, 0.5, range(4))
    pairs = build_pair_batch(net, x_new, y_new, x_buf, y_buf, None, "er", range(4), range(4))
    with pytest.raises(ConfigError):
        weighted_inner_loss(net, pairs, np.array([1.0, -0.2]))


def test_per_row_weight_matrix_accepted():
    net = random_net(8)
    x_new, y_new = batch(9)
    x_buf, y_buf = batch(10)
    pairs = build_pair_batch(net, x_new, y_new, x_buf, y_buf, None, "er", range(4), range(4))
    w = RNG(11).uniform(0.1, 1.0, size=(3, 2))
    bd = weighted_inner_loss(net, pairs, w)
    l_new, l_buf, _ = pair_loss_values(pairs, False)
    expected = np.mean(w[:, 0] * l_new + w[:, 1] * l_buf)
    assert bd.total == pytest.approx(expected, abs=1e-12)
    with pytest.raises(ConfigError):
        weighted_inner_loss(net, pairs, np.ones((4, 2)))


def test_empty_buffer_pairs():
    net = random_net()
    x_new, y_new = batch(1)
    pairs = build_pair_batch(net, x_new, y_new, None, None, None, "er", range(4), range(4))
    assert not pairs.has_buffer
    l_new, l_buf, l_kd = pair_loss_values(pairs, False)
    np.testing.assert_array_equal(l_buf, np.zeros(3))
    np.testing.assert_array_equal(l_kd, np.zeros(3))
    bd = weighted_inner_loss(net, pairs, np.array([1.0, 0.5]))
    assert bd.total == pytest.approx(l_new.mean(), abs=1e-12)


def test_pair_batch_size_mismatch():
    net = random_net()
    x_new, y_new = batch(1, n=3)
    x_buf, y_buf = batch(2, n=4)
    with pytest.raises(ConfigError):
        build_pair_batch(net, x_new, y_new, x_buf, y_buf, None, "er", range(4), range(4))
    with pytest.raises(ConfigError):
        build_pair_batch(net, x_new, y_new, x_new, y_new, None, "nope", range(4), range(4))


def test_erace_restricts_new_samples_only():
    net = random_net(3)
    x_new, y_new = batch(4, classes=(2, 3))
    x_buf, y_buf = batch(5, classes=(0, 1))
    bd = erace_loss(net, x_new, y_new, x_buf, y_buf, 1.0, 0.5, [2, 3], range(4))
    l_new = cross_entropy(predict(net, x_new), y_new, [2, 3])
    l_buf = cross_entropy(predict(net, x_buf), y_buf, range(4))
    assert bd.total == pytest.approx(np.mean(l_new + 0.5 * l_buf), abs=1e-12)


def test_erace_on_first_task_equals_er():
    # when current classes are all the seen classes the asymmetry vanishes
    net = random_net(6, total=2)
    x_new, y_new = batch(7, classes=(0, 1))
    x_buf, y_buf = batch(8, classes=(0, 1))
    a = erace_loss(net, x_new, y_new, x_buf, y_buf, 1.0, 0.5, [0, 1], [0, 1])
    b = er_loss(net, x_new, y_new, x_buf, y_buf, 1.0, 0.5, [0, 1])
    assert a.total == pytest.approx(b.total, abs=1e-15)


def test_kd_values_hand_case():
    net = uniform_net()
    pred = predict(net, np.zeros((2, 3)))
    stored = np.array([[1.0, -1.0, 0.0, 0.0], [2.0, 0.0, 0.0, 0.0]])
    got = kd_values(pred, stored, n_seen=4)
    # logits are zero: mean squared gap over the first 4 slots
    np.testing.assert_allclose(got, [(1 + 1) / 4, 4 / 4], atol=1e-12)
    # restricting n_seen drops the later slots
    got2 = kd_values(pred, stored, n_seen=2)
    np.testing.assert_allclose(got2, [(1 + 1) / 2, 4 / 2], atol=1e-12)


def test_kd_zero_when_logits_match():
    net = random_net(9)
    x, _ = batch(10)
    pred = predict(net, x)
    assert np.all(kd_values(pred, pred.logits.copy(), n_seen=4) == 0.0)
    up = kd_upstream(pred, pred.logits.copy(), n_seen=4)
    np.testing.assert_array_equal(up, np.zeros_like(pred.logits))


def test_kd_on_probabilities_hand_case():
    net = uniform_net()
    pred = predict(net, np.zeros((1, 3)))
    stored = np.array([[3.0, 0.0, 0.0, 0.0]])
    q = np.exp(stored[0]) / np.exp(stored[0]).sum()
    p = np.full(4, 0.25)
    expected = np.mean((p - q) ** 2)
    got = kd_values(pred, stored, n_seen=4, on_probabilities=True)
    assert got[0] == pytest.approx(expected, abs=1e-12)


def test_derpp_gamma_zero_equals_er():
    net = random_net(12)
    x_new, y_new = batch(13)
    x_buf, y_buf = batch(14)
    stored = RNG(15).normal(size=(3, 4))
    a = derpp_loss(net, x_new, y_new, x_buf, y_buf, stored, 1.0, 0.5, 0.0, range(4))
    b = er_loss(net, x_new, y_new, x_buf, y_buf, 1.0, 0.5, range(4))
    assert a.total == pytest.approx(b.total, abs=1e-15)


def test_derpp_requires_stored_logits():
    net = random_net()
    x_new, y_new = batch(1)
    x_buf, y_buf = batch(2)
    with pytest.raises(ConfigError):
        derpp_loss(net, x_new, y_new, x_buf, y_buf, None, 1.0, 0.5, 0.2, range(4))


def test_derpp_second_batch_carries_distillation():
    net = random_net(16)
    x_new, y_new = batch(17)
    x_buf, y_buf = batch(18)
    x_kd, _ = batch(19)
    stored_kd = RNG(20).normal(size=(3, 4))
    bd = derpp_loss(
        net, x_new, y_new, x_buf, y_buf, None, 1.0, 0.5, 0.7, range(4),
        kd_x=x_kd, kd_stored=stored_kd,
    )
    kd = kd_values(predict(net, x_kd), stored_kd, n_seen=4)
    np.testing.assert_allclose(bd.per_pair_terms[:, 2], 0.7 * kd, atol=1e-12)


def test_out_of_set_logits_do_not_leak():
    net = random_net(21, total=6)
    bumped = MainNet(net.params.copy(), net.num_classes)
    bumped.params.values[-2:] = 80.0  # inflate the two never-seen slots
    x_new, y_new = batch(22)
    x_buf, y_buf = batch(23)
    a = er_loss(net, x_new, y_new, x_buf, y_buf, 1.0, 0.5, range(4))
    b = er_loss(bumped, x_new, y_new, x_buf, y_buf, 1.0, 0.5, range(4))
    assert a.total == pytest.approx(b.total, abs=1e-12)


def theta_fd(net, value_fn, h=1e-5):
    grad = np.zeros(net.params.size)
    for i in range(net.params.size):
        vp = net.params.values.copy(); vp[i] += h
        vm = net.params.values.copy(); vm[i] -= h
        up = value_fn(MainNet(ParamVector(net.params.layout, vp), net.num_classes))
        dn = value_fn(MainNet(ParamVector(net.params.layout, vm), net.num_classes))
        grad[i] = (up - dn) / (2 * h)
    return grad


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-14)


@pytest.mark.parametrize("objective,kd_prob", [("er", False), ("er-ace", False),
                                               ("derpp", False), ("derpp", True)])
def test_inner_gradient_matches_fd(objective, kd_prob):
    net = random_net(30)
    rng = RNG(31)
    x_new = rng.normal(size=(4, 3))
    x_buf = rng.normal(size=(4, 3))
    curr = [2, 3]
    y_new = rng.choice(curr, size=4) if objective == "er-ace" else rng.integers(0, 4, size=4)
    y_buf = rng.integers(0, 4, size=4)
    stored = 0.5 * rng.normal(size=(4, 4)) if objective == "derpp" else None
    weights = rng.uniform(0.2, 0.9, size=(4, 3 if objective == "derpp" else 2))

    def value(m):
        pairs = build_pair_batch(m, x_new, y_new, x_buf, y_buf, stored, objective,
                                 curr, range(4), kd_on_probabilities=kd_prob)
        return weighted_inner_loss(m, pairs, weights, kd_prob).total

    pairs = build_pair_batch(net, x_new, y_new, x_buf, y_buf, stored, objective,
                             curr, range(4), kd_on_probabilities=kd_prob)
    _, grad = inner_loss_gradient(net, pairs, weights, kd_prob)
    assert rel_err(grad, theta_fd(net, value)) <= 1e-6


def test_inner_gradient_two_batch_distillation_fd():
    net = random_net(32)
    rng = RNG(33)
    x_new = rng.normal(size=(3, 3))
    y_new = rng.integers(0, 4, size=3)
    x_buf = rng.normal(size=(3, 3))
    y_buf = rng.integers(0, 4, size=3)
    x_kd = rng.normal(size=(3, 3))
    stored_kd = 0.5 * rng.normal(size=(3, 4))
    weights = np.array([1.0, 0.5, 0.2])

    def value(m):
        pairs = build_pair_batch(m, x_new, y_new, x_buf, y_buf, None, "derpp",
                                 range(4), range(4), kd_x=x_kd, kd_stored=stored_kd)
        return weighted_inner_loss(m, pairs, weights).total

    pairs = build_pair_batch(net, x_new, y_new, x_buf, y_buf, None, "derpp",
                             range(4), range(4), kd_x=x_kd, kd_stored=stored_kd)
    _, grad = inner_loss_gradient(net, pairs, weights)
    assert rel_err(grad, theta_fd(net, value)) <= 1e-6


def test_outer_loss_gradient_matches_fd():
    net = random_net(34)
    rng = RNG(35)
    x = rng.normal(size=(5, 3))
    y = rng.integers(0, 4, size=5)
    stored = 0.5 * rng.normal(size=(5, 4))

    for objective, logits in (("er", None), ("derpp", stored)):
        ol, grad = outer_loss_gradient(net, x, y, logits, objective, range(4))

        def value(m, _objective=objective, _logits=logits):
            return outer_loss(m, x, y, _logits, _objective, range(4)).total

        assert rel_err(grad, theta_fd(net, value)) <= 1e-6
        assert ol.total == pytest.approx(ol.per_sample.mean(), abs=1e-12)


def test_outer_per_sample_gradients_average_to_batch():
    net = random_net(36)
    rng = RNG(37)
    x = rng.normal(size=(6, 3))
    y = rng.integers(0, 4, size=6)
    _, per = outer_loss_per_sample_gradients(net, x, y, None, "er", range(4))
    _, grad = outer_loss_gradient(net, x, y, None, "er", range(4))
    np.testing.assert_allclose(per.mean(axis=0), grad, rtol=1e-12, atol=1e-14)


def test_outer_loss_saturated_net_is_tiny():
    net = uniform_net(input_dim=2, hidden=(2,), total=2)
    net.params.values[-2:] = [80.0, -80.0]
    x = np.zeros((3, 2))
    y = np.zeros(3, dtype=np.int64)
    ol = outer_loss(net, x, y, None, "er", [0, 1])
    assert ol.total <= 1e-20
