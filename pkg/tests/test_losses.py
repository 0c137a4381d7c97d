import numpy as np
import pytest

from robustcf import autodiff as ad
from robustcf.bounds import MultiplicitySpec, build_param_box
from robustcf.losses import (LossWeights, loss_accuracy, loss_f, loss_g, loss_quality, loss_robust,
                             loss_validity)
from robustcf.model import MlpParams, sigmoid
from oracles import central_diff, sampled_worst_logit

LINEAR = MlpParams([[[1.0, -1.0]]], [[-2.0]])
X, X_CF = np.array([[4.0, 1.0]]), np.array([[-4.0, -1.0]])


def value(v):
    return float(ad.value_of(v))


@pytest.mark.parametrize("score,y,expected", [(0.5, 1, 0.25), (1.0, 1, 0.0), (0.0, 1, 1.0)])
def test_accuracy(score, y, expected):
    assert value(loss_accuracy(np.array([score]), [y])) == expected


@pytest.mark.parametrize("score,y,expected", [(0.0, 1, 0.0), (1.0, 1, 1.0), (0.5, 0, 0.25)])
def test_validity(score, y, expected):
    assert value(loss_validity(np.array([score]), [y])) == expected


def test_quality():
    tape = ad.Tape()
    assert value(loss_quality(tape.const([[0.0, 0.0]]), [[0.0, 0.0]])) == 0.0
    assert value(loss_quality(tape.const([[0.0, 0.0]]), [[1.0, 1.0]])) == 1.0
    assert value(loss_quality(tape.const([[0.2, 0.4]]), [[0.2, 0.9]])) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        loss_quality(tape.const([[0.0, 0.0]]), [[1.0, 1.0, 1.0]])


def example_robust(method):
    box = build_param_box(LINEAR, MultiplicitySpec(delta=2.0))
    tape = ad.Tape()
    layers = LINEAR.to_tape(tape, requires_grad=False)
    return value(loss_robust(layers, box.radius_tensors(), X, X_CF, [1], method))


def test_robust_loss_example():
    assert example_robust("simul-crown") == pytest.approx(0.25, abs=1e-12)
    s7 = sigmoid(7.0) ** 2
    assert example_robust("ibp") == pytest.approx(s7, rel=1e-12)
    assert example_robust("crown-ibp") == pytest.approx(s7, rel=1e-12)
    assert s7 == pytest.approx(0.9982, abs=1e-4)


def test_zero_kappa_is_plain_mse():
    rng = np.random.default_rng(0)
    f = MlpParams.init([3, 6, 1], rng, scale=1.5)
    x, x_cf = rng.uniform(size=(10, 3)), rng.uniform(size=(10, 3))
    y_hat = (f.forward(x)[:, 0] >= 0).astype(int)
    plain = np.mean((sigmoid(f.forward(x_cf)[:, 0]) - (1 - y_hat)) ** 2)
    box = build_param_box(f, MultiplicitySpec(kappa=0.0))
    for method in ("ibp", "crown-ibp", "simul-crown"):
        layers = f.to_tape(ad.Tape(), requires_grad=False)
        got = value(loss_robust(layers, box.radius_tensors(), x, x_cf, y_hat, method))
        assert got == pytest.approx(plain, abs=1e-12)


def test_method_ordering_on_random_nets():
    rng = np.random.default_rng(1)
    spec = MultiplicitySpec(kappa=0.05)
    for _ in range(100):
        f = MlpParams.init([2, 5, 1], rng, scale=1.5)
        box = build_param_box(f, spec)
        x, x_cf = rng.uniform(-1, 1, size=(1, 2)), rng.uniform(-1, 1, size=(1, 2))
        y_hat = [int(f.forward(x)[0, 0] >= 0)]
        losses = {}
        for method in ("ibp", "crown-ibp", "simul-crown"):
            layers = f.to_tape(ad.Tape(), requires_grad=False)
            losses[method] = value(loss_robust(layers, box.radius_tensors(), x, x_cf, y_hat, method))
        worst, n = sampled_worst_logit(box, x[0], x_cf[0], y_hat[0], rng, k=2000)
        sampled = (sigmoid(worst) - (1 - y_hat[0])) ** 2
        assert losses["ibp"] >= losses["crown-ibp"] - 1e-12
        assert losses["crown-ibp"] >= losses["simul-crown"] - 1e-12
        assert losses["simul-crown"] >= sampled - 1e-12
        assert min(losses.values()) >= 0


def test_weight_reductions():
    box = build_param_box(LINEAR, MultiplicitySpec(delta=2.0))
    radii = box.radius_tensors()
    y = np.array([1])
    score = sigmoid(LINEAR.forward(X)[:, 0])
    layers = LINEAR.to_tape(ad.Tape(), requires_grad=False)
    w = LossWeights(accuracy=0.7, robust=0.0)
    assert value(loss_f(layers, radii, X, y, X_CF, w)) == pytest.approx(0.7 * np.mean((score - 1) ** 2))
    w = LossWeights(quality=0.0, validity=0.0, robust=2.0)
    got = value(loss_g(layers, radii, X, y, X_CF, w))
    assert got == pytest.approx(2.0 * example_robust("simul-crown"))


def test_component_sum():
    box = build_param_box(LINEAR, MultiplicitySpec(delta=2.0))
    radii = box.radius_tensors()
    y = np.array([1])
    w = LossWeights(1.0, 1.0, 1.0, 1.0)
    layers = LINEAR.to_tape(ad.Tape(), requires_grad=False)
    la = np.mean((sigmoid(LINEAR.forward(X)[:, 0]) - 1) ** 2)
    lv = np.mean((sigmoid(LINEAR.forward(X_CF)[:, 0]) - 0) ** 2)
    lq = np.mean(np.abs(X - X_CF))
    lr = 0.25
    assert value(loss_f(layers, radii, X, y, X_CF, w)) == pytest.approx(la + lr, abs=1e-12)
    assert value(loss_g(layers, radii, X, y, X_CF, w)) == pytest.approx(lq + lv + lr, abs=1e-12)


@pytest.mark.parametrize("which", ["f", "g"])
def test_gradients_match_finite_differences(which):
    rng = np.random.default_rng(2)
    f = MlpParams.init([3, 4, 1], rng, scale=1.5)
    x, x_cf = rng.uniform(size=(6, 3)), rng.uniform(size=(6, 3))
    y = rng.integers(0, 2, size=6)
    w = LossWeights()
    radii = [np.full(t.shape, 0.02) for t in f.tensors()]
    fn = loss_f if which == "f" else loss_g

    def total(theta):
        g = f.unflatten(theta)
        return value(fn(g.to_tape(ad.Tape(), requires_grad=False), radii, x, y, x_cf, w))

    tape = ad.Tape()
    layers = f.to_tape(tape)
    tape.backward(fn(layers, radii, x, y, x_cf, w))
    got = np.concatenate([v.grad.reshape(-1) for pair in layers for v in pair])
    num = central_diff(total, f.flatten(), h=1e-6)
    np.testing.assert_allclose(got, num, rtol=1e-4, atol=1e-7)


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(robust=-1.0)
