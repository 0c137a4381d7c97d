import json

import numpy as np
import pytest

from robustcf.bounds import MultiplicitySpec
from robustcf.certify import certificates_json, certify_batch, certify_pair, fingerprint, robustness_rate
from robustcf.data import FeatureSchema
from robustcf.model import JointModel, MlpParams

LINEAR = MlpParams([[[1.0, -1.0]]], [[-2.0]])
X, X_CF = np.array([4.0, 1.0]), np.array([-4.0, -1.0])
DELTA2 = MultiplicitySpec(delta=2.0)


def test_example_simul_boundary_not_certified():
    c = certify_pair(LINEAR, DELTA2, X, X_CF, "simul-crown")
    assert c.y_hat == 1 and c.t == pytest.approx(0.0, abs=1e-12)
    assert not c.robust and c.reason == "bound-not-below-threshold"


@pytest.mark.parametrize("method", ["ibp", "crown-ibp"])
def test_example_loose_methods(method):
    c = certify_pair(LINEAR, DELTA2, X, X_CF, method)
    assert c.t == 7.0 and not c.robust


def test_smaller_box_certifies_example():
    c = certify_pair(LINEAR, MultiplicitySpec(delta=1.0), X, X_CF, "simul-crown")
    assert c.robust and c.t < 0


def test_invalid_cf():
    c = certify_pair(LINEAR, DELTA2, X, X + 0.1, "simul-crown")
    assert not c.robust and c.reason == "invalid-on-f"


def test_zero_kappa_certifies_every_valid_cf():
    rng = np.random.default_rng(0)
    f = MlpParams.init([3, 8, 1], rng, scale=1.5)
    x, x_cf = rng.uniform(-1, 1, size=(200, 3)), rng.uniform(-1, 1, size=(200, 3))
    certs = certify_batch(f, MultiplicitySpec(kappa=0.0), x, x_cf)
    for c in certs:
        assert c.robust == (c.reason != "invalid-on-f")
    assert any(c.robust for c in certs)


def test_label_zero_side():
    # worst agreeing model at delta 0.1: 4(0.9) - 1.1 - 2.1 = 0.4 > 0
    c = certify_pair(LINEAR, MultiplicitySpec(delta=0.1), X_CF, X, "simul-crown")
    assert c.y_hat == 0 and c.robust and c.t > 0


def test_method_monotonicity():
    rng = np.random.default_rng(1)
    spec = MultiplicitySpec(kappa=0.03)
    for _ in range(20):
        f = MlpParams.init([2, 6, 1], rng, scale=1.5)
        x, x_cf = rng.uniform(-2, 2, size=(50, 2)), rng.uniform(-2, 2, size=(50, 2))
        r = {m: np.array([c.robust for c in certify_batch(f, spec, x, x_cf, m)])
             for m in ("ibp", "crown-ibp", "simul-crown")}
        assert np.all(r["ibp"] <= r["crown-ibp"]) and np.all(r["crown-ibp"] <= r["simul-crown"])


def test_certificates_deterministic_and_ordered():
    rng = np.random.default_rng(2)
    f = MlpParams.init([2, 5, 1], rng)
    x, x_cf = rng.uniform(size=(6, 2)), rng.uniform(size=(6, 2))
    ids = [5, 3, 1, 0, 2, 4]
    a = certificates_json(certify_batch(f, MultiplicitySpec(kappa=0.02), x, x_cf, ids=ids))
    b = certificates_json(certify_batch(f, MultiplicitySpec(kappa=0.02), x, x_cf, ids=ids))
    assert a == b
    doc = json.loads(a)
    assert [d["input_id"] for d in doc] == sorted(ids)
    assert doc[0]["model_fingerprint"] == fingerprint(f)
    assert doc[0]["spec"]["kappa"] == 0.02


def test_fingerprint_changes_with_weights():
    g = LINEAR.copy()
    g.biases[0][0] += 1e-12
    assert fingerprint(g) != fingerprint(LINEAR)


def test_robustness_rate():
    rng = np.random.default_rng(3)
    model = JointModel.init(FeatureSchema.continuous(2), rng, (8,), (8,))
    x = rng.uniform(size=(40, 2))
    x_cf = model.generate_cf(x)
    rate0 = robustness_rate(model, MultiplicitySpec(kappa=0.0), x)
    valid = np.mean(model.predict(x_cf) != model.predict(x))
    assert rate0 == pytest.approx(valid)
    assert 0.0 <= robustness_rate(model, MultiplicitySpec(kappa=0.05), x) <= rate0
    with pytest.raises(ValueError):
        robustness_rate(model, MultiplicitySpec(), np.zeros((0, 2)))


def test_l2_spec_is_flagged_in_certificates():
    c = certify_pair(LINEAR, MultiplicitySpec(kappa=0.01, p=2), X, X_CF)
    assert c.spec["outer_approximated"] and c.spec["p"] == 2.0
    assert not certify_pair(LINEAR, DELTA2, X, X_CF).spec["outer_approximated"]
