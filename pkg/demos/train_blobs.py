"""Train on two Gaussian blobs with and without the robustness term, then certify."""
from dataclasses import replace

import numpy as np

from robustcf.bounds import MultiplicitySpec
from robustcf.certify import robustness_rate
from robustcf.data import make_blobs
from robustcf.eval import quality_metrics
from robustcf.losses import LossWeights
from robustcf.train import TrainConfig, train

ds = make_blobs(n=500, seed=0)
print("train", ds.x_train.shape, "test", ds.x_test.shape)

robust_cfg = TrainConfig(epochs=100, lr=1e-2, kappa=0.05)
plain_cfg = replace(robust_cfg, kappa=0.0, weights=LossWeights(robust=0.0))

spec = MultiplicitySpec(kappa=0.05)
for name, cfg in (("plain", plain_cfg), ("robust", robust_cfg)):
    model, log = train(ds, cfg)
    x = ds.x_test
    x_cf = model.generate_cf(x)
    acc = np.mean(model.predict(x) == ds.y_test)
    valid = np.mean(model.predict(x_cf) != model.predict(x))
    q = quality_metrics(x, x_cf, ds.x_train)
    print(f"\n{name}: accuracy {acc:.3f}, validity {valid:.3f}, proximity {q['proximity'].mean():.3f}")
    for method in ("ibp", "crown-ibp", "simul-crown"):
        print(f"  certified at kappa=0.05 with {method:12s}: {robustness_rate(model, spec, x, method, x_cf):.3f}")
    print("  last epoch:", {k: round(v, 4) for k, v in log[-1].items()})
