"""Constant-elasticity algebra and the econometric baselines.

The closed-form demand map q1 = q0 * (p1/p0)^eps and its log-ratio inverse,
a two-way fixed-effects Poisson regression that identifies a global (or
per-group) elasticity from within-article, within-week discount variation,
and the naive last-value / seasonal-naive fallback forecasters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .panel import Panel


class DomainError(ValueError):
    """Inputs outside the strictly positive domain of the elasticity algebra."""


class UndefinedElasticityError(ValueError):
    """Implied elasticity is undefined when the two prices coincide."""


class RankDeficientError(ValueError):
    """No treatment variation left after absorbing both fixed effects."""


class HistoryError(ValueError):
    """Forecast requested without the history it needs."""


MEAN_FLOOR = 1e-10  # stabilizes IRLS near zero-demand cells


def elasticity_demand(q0: float, p0: float, p1: float, epsilon: float) -> float:
    """Demand after a price move under constant elasticity: q0 * (p1/p0)^eps."""
    if q0 <= 0 or p0 <= 0 or p1 <= 0:
        raise DomainError("q0, p0 and p1 must be strictly positive")
    return q0 * (p1 / p0) ** epsilon

def implied_elasticity(q0: float, q1: float, p0: float, p1: float) -> float:
    """Elasticity implied by two (price, demand) points: log-ratio slope."""
    if min(q0, q1, p0, p1) <= 0:
        raise DomainError("all inputs must be strictly positive")
    if p1 == p0:
        raise UndefinedElasticityError("prices coincide; elasticity undefined")
    return float(np.log(q1 / q0) / np.log(p1 / p0))


@dataclass
class ElasticityFit:
    """Two-way fixed-effects Poisson fit of log E[q] = eps*log(1-d) + u_i + c_t.

    Normalization: c_0 = 0 with the grand mean absorbed into the article
    effects. `article_effects` maps article_id -> u_i.
    """

    epsilon: float
    article_effects: dict[int, float]
    week_effects: np.ndarray
    convergence: str          # "converged" | "max_iter"
    iterations: int
    final_gradient_norm: float

    def fitted_mean(self, article_id: int, week: int, discount: float) -> float:
        eta = self.epsilon * np.log1p(-discount) + self.article_effects[article_id] + self.week_effects[week]
        return float(np.exp(eta))

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "normalization": "c0_zero_grand_mean_in_u",
            "convergence": self.convergence,
            "iterations": self.iterations,
            "final_gradient_norm": self.final_gradient_norm,
            "article_effects": {str(k): v for k, v in self.article_effects.items()},
            "week_effects": self.week_effects.tolist(),
        }


def _twfe_poisson_arrays(
    y: np.ndarray,
    x: np.ndarray,
    tol: float,
    max_iter: int,
) -> tuple[float, np.ndarray, np.ndarray, str, int, float]:
    """Alternating maximization of the Poisson quasi-likelihood.

    Article and week effects have closed-form updates given the slope; the
    slope takes a Newton step on the within-transformed regressor. Stops when
    both the largest parameter change and the per-observation score drop
    below tol.
    """
    n, t = y.shape
    n_obs = n * t
    u = np.log(np.maximum(y.mean(axis=1), MEAN_FLOOR))
    c = np.zeros(t)
    eps_hat = 0.0

    # identification needs residual variation in x after removing both margins
    x_within = x - x.mean(axis=1, keepdims=True) - x.mean(axis=0, keepdims=True) + x.mean()
    if float((x_within**2).mean()) < 1e-14:
        raise RankDeficientError("log(1-d) has no within variation; elasticity not identified")

    status = "max_iter"
    it = 0
    grad_norm = np.inf
    for it in range(1, max_iter + 1):
        eps_old, u_old, c_old = eps_hat, u.copy(), c.copy()

        mu = np.exp(eps_hat * x + u[:, None] + c[None, :])
        mu = np.maximum(mu, MEAN_FLOOR)
        # weighted within-transform of x, then one Newton step for the slope
        xw = x - (mu * x).sum(axis=1, keepdims=True) / mu.sum(axis=1, keepdims=True)
        xw = xw - (mu * xw).sum(axis=0, keepdims=True) / mu.sum(axis=0, keepdims=True)
        info = float((mu * xw**2).sum())
        if info <= 1e-14:
            raise RankDeficientError("log(1-d) has no weighted within variation")
        eps_hat = eps_hat + float(((y - mu) * xw).sum()) / info

        mu = np.maximum(np.exp(eps_hat * x + u[:, None] + c[None, :]), MEAN_FLOOR)
        u = u + np.log(np.maximum(y.sum(axis=1), MEAN_FLOOR) / mu.sum(axis=1))
        mu = np.maximum(np.exp(eps_hat * x + u[:, None] + c[None, :]), MEAN_FLOOR)
        c = c + np.log(np.maximum(y.sum(axis=0), MEAN_FLOOR) / mu.sum(axis=0))
        # normalization: c_0 = 0, grand level lives in u
        u = u + c[0]
        c = c - c[0]

        mu = np.maximum(np.exp(eps_hat * x + u[:, None] + c[None, :]), MEAN_FLOOR)
        resid = y - mu
        grad_norm = max(
            abs(float((resid * x).sum())),
            float(np.abs(resid.sum(axis=1)).max()),
            float(np.abs(resid.sum(axis=0)[1:]).max()) if t > 1 else 0.0,
        ) / n_obs
        delta = max(
            abs(eps_hat - eps_old),
            float(np.abs(u - u_old).max()),
            float(np.abs(c - c_old).max()),
        )
        if delta < tol and grad_norm < tol:
            status = "converged"
            break
    return eps_hat, u, c, status, it, grad_norm


def twfe_poisson_fit(panel: Panel, tol: float = 1e-8, max_iter: int = 200) -> ElasticityFit:
    """Fit the global elasticity on a panel's demand/discount grid."""
    if panel.n_articles < 2 or panel.n_weeks < 2:
        raise RankDeficientError("need at least 2 articles and 2 weeks")
    y = panel.demand
    x = np.log1p(-panel.discount)
    eps_hat, u, c, status, it, grad = _twfe_poisson_arrays(y, x, tol, max_iter)
    return ElasticityFit(
        epsilon=float(eps_hat),
        article_effects={int(a): float(v) for a, v in zip(panel.article_ids, u)},
        week_effects=c,
        convergence=status,
        iterations=it,
        final_gradient_norm=float(grad),
    )


def twfe_poisson_fit_grouped(panel: Panel, tol: float = 1e-8, max_iter: int = 200) -> dict[int, ElasticityFit]:
    """Separate elasticity per cat_k group of articles."""
    fits: dict[int, ElasticityFit] = {}
    for k in np.unique(panel.cat_k):
        rows = np.flatnonzero(panel.cat_k == k)
        if len(rows) < 2:
            continue
        fits[int(k)] = twfe_poisson_fit(panel.subset(rows), tol=tol, max_iter=max_iter)
    return fits


def twfe_forecast(panel: Panel, epsilon: float, article_id: int, t: int, d_t: float) -> float:
    """One-step elasticity forecast from the previous week's demand."""
    if t < 1 or t >= panel.n_weeks:
        raise HistoryError(f"week {t} has no preceding observation")
    i = panel.row(article_id)
    q_prev = panel.demand[i, t - 1]
    if q_prev == 0.0:
        return 0.0
    d_prev = panel.discount[i, t - 1]
    return float(q_prev * ((1.0 - d_t) / (1.0 - d_prev)) ** epsilon)


def twfe_forecast_path(panel: Panel, epsilon: float, origin: int, discounts: np.ndarray) -> np.ndarray:
    """Multi-week elasticity forecast anchored at the origin week.

    Recursive one-step substitution telescopes to
    q_origin * ((1-d_{origin+k}) / (1-d_origin))^eps.
    """
    if origin < 0 or origin >= panel.n_weeks:
        raise HistoryError(f"origin {origin} outside the panel")
    discounts = np.asarray(discounts, dtype=float)
    q0 = panel.demand[:, origin][:, None]
    d0 = panel.discount[:, origin][:, None]
    return q0 * ((1.0 - discounts) / (1.0 - d0)) ** epsilon


def naive_forecasts(panel: Panel, article_id: int, horizon: int, kind: str, origin: int | None = None) -> np.ndarray:
    """Fallback forecasters: repeat the last value, or the value one season back."""
    i = panel.row(article_id)
    if origin is None:
        origin = panel.n_weeks - 1
    if kind == "last_value":
        if origin < 0:
            raise HistoryError("last-value forecast needs one observed week")
        return np.full(horizon, panel.demand[i, origin])
    if kind == "seasonal_naive":
        period = panel.season_period
        weeks = origin + 1 + np.arange(horizon) - period
        if (weeks < 0).any():
            raise HistoryError(f"seasonal naive needs {period} weeks of history")
        return panel.demand[i, weeks]
    raise ValueError(f"unknown naive forecast kind {kind!r}")
