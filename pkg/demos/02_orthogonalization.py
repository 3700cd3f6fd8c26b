"""Why residualize? Regularization bias in a partial linear model.

Generates q = theta*d + g(z) + u with a confounded treatment d = m(z) + v,
fits ridge nuisances, and compares the residual-on-residual estimate of
theta against the single-learner coefficient that treats the discount like
any other penalized regressor.
"""

import numpy as np

from elastic_dml import residualized_theta, slearner_theta

theta = -2.0
rng = np.random.default_rng(0)
n, p = 5000, 200
Z = rng.standard_normal((n, p))
gamma = np.full(p, 3.0 / np.sqrt(p))
sign = np.concatenate([np.full(p // 2, 1.0), np.full(p - p // 2, -1.0)])
delta = 0.4 * gamma / 3.0 + 0.3 * sign / np.sqrt(p)

d = Z @ delta + 0.5 * rng.standard_normal(n)     # confounded treatment
q = theta * d + Z @ gamma + rng.standard_normal(n)

print(f"true effect: {theta}")
print(f"{'penalty':>10} {'residual-on-residual':>22} {'single learner':>16}")
for lam in (50.0, 150.0, 500.0):
    th_dml = residualized_theta(q, d, Z, l2=lam)
    th_s = slearner_theta(q, d, Z, l2=lam)
    print(f"{lam:10.0f} {th_dml:22.4f} {th_s:16.4f}")

print(
    "\nThe single learner's coefficient is shrunk by its own penalty and "
    "absorbs the confounding the penalized controls fail to soak up; the "
    "orthogonalized estimate is insensitive to both at first order."
)
