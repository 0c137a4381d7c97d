"""Why agreement on x matters: three bounds on one toy linear model.

f(x) = x0 - x1 - 2, every parameter allowed to move by 2.
"""
import numpy as np

from robustcf.bounds import MultiplicitySpec, build_param_box, concretize, crown_ibp_bounds, ibp_forward
from robustcf.certify import certify_pair
from robustcf.model import MlpParams
from robustcf.simul import worst_case_logit

f = MlpParams([[[1.0, -1.0]]], [[-2.0]])
spec = MultiplicitySpec(delta=2.0)
box = build_param_box(f, spec)
print("parameter box  lo:", box.lo, " hi:", box.hi)

# The input and its counterfactual.  f says 1 on x and 0 on x_cf.
x = np.array([4.0, 1.0])
x_cf = np.array([-4.0, -1.0])
print("f(x) =", f.forward(x)[0], " f(x_cf) =", f.forward(x_cf)[0])

# IBP and CROWN-IBP only look at the box, so they happily pick a model that
# flips the counterfactual even though it also flips x itself.
print("IBP logit range on x_cf:", ibp_forward(box, x_cf))
lin = crown_ibp_bounds(box, x_cf)
print("linear bound coefficients:", lin.alpha_hi, "+", lin.beta_hi)
print("concretized:", concretize(lin, box))

# Requiring the model to still say 1 on x rules that model out.
for method in ("ibp", "crown-ibp", "simul-crown"):
    t = worst_case_logit(f, spec, x, x_cf, 1, method)
    print(f"{method:12s} worst logit on x_cf: {t:+.3f}")

# t = 0 sits exactly on the boundary, so it does not certify; a smaller box does.
for delta in (2.0, 1.0):
    c = certify_pair(f, MultiplicitySpec(delta=delta), x, x_cf)
    print(f"delta={delta}: t={c.t:+.3f} robust={c.robust} ({c.reason})")
