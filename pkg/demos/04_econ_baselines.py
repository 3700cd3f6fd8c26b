"""Econometric baselines: elasticity algebra and the fixed-effects fit.

The constant-elasticity demand map, its log-ratio inverse, and the two-way
fixed-effects Poisson regression that identifies a global elasticity from
within-article, within-week discount variation.
"""

import numpy as np

from elastic_dml import SimConfig, elasticity_demand, implied_elasticity, simulate_policy, twfe_poisson_fit
from elastic_dml.econ import naive_forecasts, twfe_forecast

# closed-form algebra
q1 = elasticity_demand(q0=100.0, p0=10.0, p1=5.0, epsilon=-1.0)
print(f"halving the price at elasticity -1 doubles demand: q1 = {q1:.0f}")
print(f"implied elasticity from the two points: {implied_elasticity(100.0, q1, 10.0, 5.0):+.2f}")

# recover a known elasticity from a generated fixed-effects panel
rng = np.random.default_rng(3)
n, t, eps_true = 200, 50, -2.0
u = rng.normal(3.0, 0.4, n)
c = np.concatenate([[0.0], rng.normal(0.0, 0.3, t - 1)])
d = rng.choice([0.0, 0.1, 0.2, 0.3, 0.4], size=(n, t))
mu = np.exp(eps_true * np.log1p(-d) + u[:, None] + c[None, :])
from elastic_dml.econ import _twfe_poisson_arrays

eps_hat, *_ = _twfe_poisson_arrays(rng.poisson(mu).astype(float), np.log1p(-d), tol=1e-8, max_iter=200)
print(f"\ngenerated panel with elasticity {eps_true}; fixed-effects fit: {eps_hat:+.3f}")

# on a simulated panel the elasticity is negative but article-heterogeneous
panel = simulate_policy(SimConfig(n_articles=150, master_seed=4))
fit = twfe_poisson_fit(panel)
print(f"simulated panel global elasticity: {fit.epsilon:+.3f} ({fit.convergence}, {fit.iterations} iterations)")

aid = int(panel.article_ids[0])
step = twfe_forecast(panel, fit.epsilon, aid, t=60, d_t=0.3)
print(f"one-step elasticity forecast for article {aid} at 30% discount: {step:.1f}")
print(f"last-value fallback: {naive_forecasts(panel, aid, 3, 'last_value', origin=59)}")
print(f"seasonal naive:      {np.round(naive_forecasts(panel, aid, 3, 'seasonal_naive', origin=59), 1)}")
