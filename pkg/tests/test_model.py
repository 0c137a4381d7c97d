import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustcf.data import FeatureSchema, FeatureSpec
from robustcf.model import JointModel, MlpParams, hard_label, predict_soft, project_features


def linear_f():
    return MlpParams([[[1.0, -1.0]]], [[-2.0]])


def test_predict_soft_linear_example():
    f = linear_f()
    s = predict_soft(f, [4.0, 1.0])
    assert s == pytest.approx(0.7310585786300049, abs=1e-12)
    assert hard_label(s) == 1
    s2 = predict_soft(f, [-4.0, -1.0])
    assert s2 == pytest.approx(0.0066928509242848554, abs=1e-12)
    assert hard_label(s2) == 0


def test_zero_model_scores_half():
    f = MlpParams([np.zeros((1, 3))], [np.zeros(1)])
    assert predict_soft(f, [0.3, -2.0, 7.0]) == 0.5
    assert hard_label(0.5) == 1  # >= convention


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        predict_soft(linear_f(), [1.0, 2.0, 3.0])


def test_layer_chain_checked():
    with pytest.raises(ValueError):
        MlpParams([np.zeros((3, 2)), np.zeros((1, 4))], [np.zeros(3), np.zeros(1)])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=2, max_size=5), st.integers(0, 10**6))
def test_flatten_roundtrip(dims, seed):
    p = MlpParams.init(dims, np.random.default_rng(seed))
    q = p.unflatten(p.flatten())
    assert all(np.array_equal(a, b) for a, b in zip(p.tensors(), q.tensors()))
    # flattening order: W0 row-major, b0, W1, ...
    assert np.array_equal(p.flatten()[: p.weights[0].size], p.weights[0].reshape(-1))


MIXED = FeatureSchema((FeatureSpec("a"), FeatureSpec("c", "categorical", ("x", "y", "z")), FeatureSpec("b")))


def test_projection_examples():
    two = FeatureSchema.continuous(2)
    assert np.array_equal(project_features([1.7, -0.2], two), [1.0, 0.0])
    grp = FeatureSchema((FeatureSpec("c", "categorical", ("p", "q", "r")),))
    assert np.array_equal(project_features([0.2, 0.9, 0.4], grp), [0, 1, 0])
    tie = FeatureSchema((FeatureSpec("c", "categorical", ("p", "q")),))
    assert np.array_equal(project_features([0.5, 0.5], tie), [1, 0])
    with pytest.raises(ValueError):
        project_features([0.1, 0.2], grp)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=5, max_size=5))
def test_projection_idempotent_and_valid(v):
    once = project_features(v, MIXED)
    assert np.array_equal(project_features(once, MIXED), once)
    assert np.all((once >= 0) & (once <= 1))
    assert once[1:4].sum() == 1


def test_zero_cf_head_is_identity():
    rng = np.random.default_rng(0)
    m = JointModel.init(FeatureSchema.continuous(3), rng)
    m.cf_head = MlpParams([np.zeros_like(w) for w in m.cf_head.weights], [np.zeros_like(b) for b in m.cf_head.biases])
    x = rng.uniform(size=(5, 3))
    assert np.array_equal(m.generate_cf(x), x)


def test_generated_cf_respects_schema():
    rng = np.random.default_rng(1)
    m = JointModel.init(MIXED, rng)
    for w in m.cf_head.weights:
        w *= 20
    x = project_features(rng.uniform(size=(20, 5)), MIXED)
    cf = m.generate_cf(x)
    assert np.all((cf >= 0) & (cf <= 1))
    assert np.all(cf[:, 1:4].sum(axis=1) == 1)
    assert np.array_equal(cf, m.generate_cf(x))


def test_serialization_bit_exact(tmp_path):
    rng = np.random.default_rng(2)
    m = JointModel.init(MIXED, rng)
    path = tmp_path / "m.json"
    m.save(path)
    back = JointModel.load(path)
    for a, b in zip(m.classifier().tensors() + m.cf_head.tensors(),
                    back.classifier().tensors() + back.cf_head.tensors()):
        assert a.tobytes() == b.tobytes()
    assert back.schema == m.schema
    assert back.to_json() == m.to_json()


def test_classifier_roundtrip_through_joint():
    m = JointModel.init(FeatureSchema.continuous(2), np.random.default_rng(4))
    f = m.classifier()
    assert f.dims == [2, 16, 16, 1]
    m2 = m.with_classifier(f)
    x = np.random.default_rng(5).uniform(size=(4, 2))
    assert np.array_equal(m2.logit(x), m.logit(x))
