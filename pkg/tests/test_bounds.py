import itertools

import numpy as np
import pytest

from robustcf.bounds import (Interval, LinBounds, MultiplicitySpec, ParamBox, build_param_box, concretize,
                             crown_ibp_bounds, ibp_forward)
from robustcf.model import MlpParams
from oracles import relu_mlp_logits

LINEAR = MlpParams([[[1.0, -1.0]]], [[-2.0]])


def example_box():
    return build_param_box(LINEAR, MultiplicitySpec(delta=2.0))


def test_box_example():
    box = example_box()
    assert np.array_equal(box.lo, [-1, -3, -4])
    assert np.array_equal(box.hi, [3, 1, 0])
    assert np.array_equal(0.5 * (box.lo + box.hi), LINEAR.flatten())


def test_kappa_radius_rule():
    f = MlpParams([[[4.0, -1.0]]], [[0.5]])
    r = MultiplicitySpec(kappa=0.1).radii(f)
    assert r[0] == pytest.approx(0.4) and r[1] == pytest.approx(0.05)
    r2 = MultiplicitySpec(kappa=0.1, p=2).radii(f)
    assert r2[0] == pytest.approx(0.1 * np.sqrt(17))
    assert MultiplicitySpec(kappa=0.1, p=2).outer_approximated


def test_invalid_spec():
    with pytest.raises(ValueError):
        MultiplicitySpec(kappa=1.5)
    with pytest.raises(ValueError):
        MultiplicitySpec(kappa=0.1, p=1)
    with pytest.raises(ValueError):
        Interval([1.0], [0.0])


def test_ibp_example_interval():
    iv = ibp_forward(example_box(), [-4.0, -1.0])
    assert (iv.lo, iv.hi) == (-17.0, 7.0)


def test_crown_example_coefficients():
    box = example_box()
    lin = crown_ibp_bounds(box, [-4.0, -1.0])
    assert np.array_equal(lin.alpha_lo, [-4, -1, 1]) and np.array_equal(lin.alpha_hi, [-4, -1, 1])
    assert lin.beta_lo == 0 and lin.beta_hi == 0
    iv = concretize(lin, box)
    assert (iv.lo, iv.hi) == (-17.0, 7.0)
    # the maximiser is the adversarial model W' = (-1, -3), b' = 0
    assert np.array([-4, -1, 1]) @ np.array([-1, -3, 0]) == 7


def random_net(rng, dims=(3, 5, 1)):
    return MlpParams.init(list(dims), rng, scale=1.5)


def test_zero_width_box_is_point_evaluation():
    rng = np.random.default_rng(0)
    f = random_net(rng, (3, 6, 4, 1))
    box = build_param_box(f, MultiplicitySpec(kappa=0.0))
    x = rng.uniform(size=(7, 3))
    logit = f.forward(x)[:, 0]
    iv = ibp_forward(box, x)
    np.testing.assert_allclose(iv.lo, logit, atol=1e-12)
    np.testing.assert_allclose(iv.hi, logit, atol=1e-12)
    lin = crown_ibp_bounds(box, x)
    th = f.flatten()
    np.testing.assert_allclose(lin.alpha_hi @ th + lin.beta_hi, logit, atol=1e-12)
    np.testing.assert_allclose(lin.alpha_lo @ th + lin.beta_lo, logit, atol=1e-12)


def test_ibp_monte_carlo_soundness():
    rng = np.random.default_rng(1)
    for _ in range(5):
        f = random_net(rng)
        box = build_param_box(f, MultiplicitySpec(kappa=0.05))
        x = rng.uniform(size=3)
        iv = ibp_forward(box, x)
        vals = relu_mlp_logits(box.sample(rng, 1000, corner_fraction=0.3), f.dims, x)
        assert np.all(vals >= iv.lo - 1e-12) and np.all(vals <= iv.hi + 1e-12)


def test_crown_sound_and_inside_ibp():
    rng = np.random.default_rng(2)
    for _ in range(100):
        dims = (int(rng.integers(2, 5)), int(rng.integers(2, 8)), 1)
        f = random_net(rng, dims)
        box = build_param_box(f, MultiplicitySpec(kappa=0.05))
        x = rng.uniform(size=dims[0])
        ibp = ibp_forward(box, x)
        lin = crown_ibp_bounds(box, x)
        c = concretize(lin, box)
        assert c.lo >= ibp.lo - 1e-9 and c.hi <= ibp.hi + 1e-9
        th = box.sample(rng, 200, corner_fraction=0.5)
        vals = relu_mlp_logits(th, f.dims, x)
        assert np.all(th @ lin.alpha_lo + lin.beta_lo <= vals + 1e-9)
        assert np.all(th @ lin.alpha_hi + lin.beta_hi >= vals - 1e-9)
        logit = f.forward(x)[0]
        assert c.lo - 1e-12 <= logit <= c.hi + 1e-12


def test_unclipped_crown_is_still_sound_deeper():
    rng = np.random.default_rng(3)
    for _ in range(20):
        f = random_net(rng, (3, 6, 5, 1))
        box = build_param_box(f, MultiplicitySpec(kappa=0.05))
        x = rng.uniform(size=3)
        lin = crown_ibp_bounds(box, x, clip_to_ibp=False)
        th = box.sample(rng, 500, corner_fraction=0.5)
        vals = relu_mlp_logits(th, f.dims, x)
        assert np.all(th @ lin.alpha_lo + lin.beta_lo <= vals + 1e-9)
        assert np.all(th @ lin.alpha_hi + lin.beta_hi >= vals - 1e-9)


def test_concretize_matches_vertex_enumeration():
    rng = np.random.default_rng(4)
    for _ in range(200):
        n = int(rng.integers(1, 13))
        c = rng.normal(size=n)
        r = rng.uniform(0, 1, size=n)
        f = MlpParams([c[:-1].reshape(1, -1) if n > 1 else np.zeros((1, 0))], [c[-1:]])
        box = ParamBox(f, [r[0], r[-1]])
        rad = box.radius_flat()
        a_lo = rng.normal(size=n)
        a_hi = a_lo.copy()
        b_lo = rng.normal()
        b_hi = b_lo + abs(rng.normal())
        iv = concretize(LinBounds(a_lo, b_lo, a_hi, b_hi), box)
        corners = np.array(list(itertools.product((-1.0, 1.0), repeat=n))) * rad + f.flatten()
        assert iv.lo == pytest.approx((corners @ a_lo + b_lo).min(), abs=1e-9)
        assert iv.hi == pytest.approx((corners @ a_hi + b_hi).max(), abs=1e-9)


def test_concretize_zero_alpha_and_length_check():
    box = example_box()
    iv = concretize(LinBounds(np.zeros(3), 1.5, np.zeros(3), 1.5), box)
    assert (iv.lo, iv.hi) == (1.5, 1.5)
    with pytest.raises(ValueError):
        concretize(LinBounds(np.zeros(4), 0.0, np.zeros(4), 0.0), box)


def test_bounds_monotone_in_kappa():
    rng = np.random.default_rng(5)
    for _ in range(20):
        f = random_net(rng)
        x = rng.uniform(size=3)
        prev = None
        for kappa in (0.0, 0.01, 0.03, 0.06, 0.1):
            box = build_param_box(f, MultiplicitySpec(kappa=kappa))
            iv = ibp_forward(box, x)
            cr = concretize(crown_ibp_bounds(box, x), box)
            if prev is not None:
                assert iv.lo <= prev[0].lo + 1e-12 and iv.hi >= prev[0].hi - 1e-12
            prev = (iv, cr)
            logit = f.forward(x)[0]
            assert iv.lo - 1e-12 <= logit <= iv.hi + 1e-12 and cr.lo - 1e-12 <= logit <= cr.hi + 1e-12
