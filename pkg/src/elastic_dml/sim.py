"""Synthetic article life cycles with confounded clearance discounting.

Weekly base demand combines a noisy linear trend, a sinusoidal season and a
category-driven scale; realized demand falls linearly in price through a
positive per-article price-effect magnitude (so elasticities are negative).
A stock-clearance policy steers discounts toward a target average, which makes
the discount treatment confounded with the seasonal state. Simulated panels
retain the latent base-demand path and the true effect so counterfactual
demand under any forced discount can be answered exactly.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict

import numpy as np

from . import rngstream as rs
from .panel import ArticleStatic, Panel, UnsupportedPanelError


class ConfigError(ValueError):
    """Simulation config violates an invariant."""


class InvalidWeekError(ValueError):
    """Week index outside the simulated horizon."""


class SimulationError(RuntimeError):
    """Article resampling failed to produce a valid article."""


MAX_ARTICLE_ATTEMPTS = 1000
MAX_PRICE_RETRIES = 100
REJECT_CLAMP_FRACTION = 0.05  # articles with more clamped weeks are resampled


@dataclass
class SimConfig:
    """All simulator hyperparameters; a panel is a pure function of this."""

    n_articles: int = 4467
    n_weeks: int = 100
    n_cat_d: int = 45
    n_cat_k: int = 15
    season_period: int = 30
    n_season_types: int = 6
    discount_steps: int = 6
    discount_step_size: float = 0.1
    target_avg_discount: float = 0.14
    # Interpolates the two stated step rules: the policy's uniform draw comes
    # from U[policy_response, 1], so 0.0 is the fully damped probabilistic
    # rule (which responds to the season with a quarter-period lag and washes
    # out contemporaneous discount-seasonality confounding) and 1.0 is the
    # deterministic limit (strong confounding but no exogenous discount
    # noise). The default keeps both: visible confounding plus genuine
    # week-level treatment randomness.
    policy_response: float = 0.5
    master_seed: int = 0
    # distribution hyperparameters
    alpha_mean: float = 10.0
    alpha_sd: float = 3.0
    beta_mean: float = 300.0
    beta_sd: float = 50.0
    eps_sd: float = 1.0
    psi_sd: float = 5.0
    gamma_range: float = 0.02        # trend slope ~ U[-gamma_range, gamma_range]
    sigma_tau_max: float = 0.15      # trend noise sd ~ U[0, sigma_tau_max]
    effect_mu: float = 0.75          # log-scale location of the effect base draw
    effect_sigma: float = 0.125
    effect_floor: float = 1.3
    effect_scale: float = 0.15       # e_i = e_b * effect_scale * mean(a_it)
    price_mean_div: float = 3.0      # p0 ~ N(qbar/3, (qbar/1.5)^2)
    price_sd_div: float = 1.5
    price_floor_frac: float = 0.01   # truncate p0 above this fraction of qbar
    # base-demand weights: (tw*tau + sw*s + 1) * (a2*a^2 + a1*a + b1*b)
    trend_weight: float = 0.15
    season_weight: float = 0.25
    quad_a: float = 0.05
    lin_a: float = 0.25
    lin_b: float = 0.5

    def validate(self) -> None:
        counts = {
            "n_articles": self.n_articles,
            "n_weeks": self.n_weeks,
            "n_cat_d": self.n_cat_d,
            "n_cat_k": self.n_cat_k,
            "season_period": self.season_period,
            "n_season_types": self.n_season_types,
            "discount_steps": self.discount_steps,
        }
        for name, v in counts.items():
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a count >= 1, got {v!r}")
        if self.n_weeks < 5:
            raise ConfigError("n_weeks must be >= 5 (the policy needs 4 warm-up weeks)")
        if self.n_season_types > self.n_cat_k:
            raise ConfigError("n_season_types cannot exceed n_cat_k")
        if self.discount_step_size <= 0:
            raise ConfigError("discount_step_size must be positive")
        max_discount = (self.discount_steps - 1) * self.discount_step_size
        if not 0.0 <= self.target_avg_discount <= max_discount:
            raise ConfigError(
                f"target_avg_discount must lie in [0, {max_discount}], got {self.target_avg_discount}"
            )
        if max_discount >= 1.0:
            raise ConfigError("maximum discount level must stay below 1")
        if not 0.0 <= self.policy_response <= 1.0:
            raise ConfigError("policy_response must lie in [0, 1]")

    @property
    def max_discount(self) -> float:
        return (self.discount_steps - 1) * self.discount_step_size

    @property
    def discount_levels(self) -> np.ndarray:
        return np.arange(self.discount_steps) * self.discount_step_size

    @property
    def initial_discount_step(self) -> int:
        j = int(round(self.target_avg_discount / self.discount_step_size))
        return int(np.clip(j, 0, self.discount_steps - 1))

    def to_dict(self) -> dict:
        return asdict(self)


def season_shift_groups(n_cat_k: int, n_season_types: int) -> np.ndarray:
    """Map 1-based cat_k to a season-type group (contiguous, near-even sizes)."""
    base, rem = divmod(n_cat_k, n_season_types)
    sizes = [base + 1] * rem + [base] * (n_season_types - rem)
    groups = np.repeat(np.arange(n_season_types), sizes)
    return groups


@dataclass
class CategoryTables:
    """Category-level draws shared by all articles of a category."""

    alpha: np.ndarray          # (n_cat_d,) scale draws for the a-component
    beta: np.ndarray           # (n_cat_k,) scale draws for the b-component
    shift_by_cat_k: np.ndarray  # (n_cat_k,) integer season shifts


def category_tables(config: SimConfig) -> CategoryTables:
    alpha = rs.stream(config.master_seed, rs.CATEGORY, 0).normal(
        config.alpha_mean, config.alpha_sd, size=config.n_cat_d
    )
    beta = rs.stream(config.master_seed, rs.CATEGORY, 1).normal(
        config.beta_mean, config.beta_sd, size=config.n_cat_k
    )
    half = config.season_period // 2
    group_shift = rs.stream(config.master_seed, rs.CATEGORY, 2).integers(
        -half, half + 1, size=config.n_season_types
    )
    groups = season_shift_groups(config.n_cat_k, config.n_season_types)
    return CategoryTables(alpha=alpha, beta=beta, shift_by_cat_k=group_shift[groups])


@dataclass
class _ArticleDraw:
    """One realized article: statics plus its latent base-demand path."""

    static: ArticleStatic
    base: np.ndarray  # (n_weeks,)
    policy_uniforms: np.ndarray  # (n_weeks,)
    valid: bool


def _weekly_noise(config: SimConfig, article_id: int, attempt: int):
    t = config.n_weeks
    eps = rs.article_stream(config.master_seed, rs.EPS, article_id, attempt).standard_normal(t)
    psi = rs.article_stream(config.master_seed, rs.PSI, article_id, attempt).standard_normal(t)
    tau = rs.article_stream(config.master_seed, rs.TAU, article_id, attempt).standard_normal(t)
    lam = rs.article_stream(config.master_seed, rs.POLICY, article_id, attempt).uniform(size=t)
    return eps, psi, tau, lam


def _base_from_parts(
    config: SimConfig,
    alpha: float,
    beta: float,
    shift: int,
    gamma: float,
    sigma_tau: float,
    eps: np.ndarray,
    psi: np.ndarray,
    tau_noise: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Return (base demand path, a-component path)."""
    t = np.arange(config.n_weeks)
    a = alpha + config.eps_sd * eps
    b = beta + config.psi_sd * psi
    c = config.quad_a * a**2 + config.lin_a * a + config.lin_b * b
    s = np.sin(2.0 * np.pi * (t + shift) / config.season_period)
    tau = t * gamma + sigma_tau * tau_noise
    base = (config.trend_weight * tau + config.season_weight * s + 1.0) * c
    return base, a


def _realize_article(config: SimConfig, article_id: int, attempt: int, tables: CategoryTables) -> _ArticleDraw:
    """Draw every article-level quantity for one resampling attempt."""
    rng = rs.article_stream(config.master_seed, rs.ARTICLE_STATIC, article_id, attempt)
    cat_d = int(rng.integers(1, config.n_cat_d + 1))
    cat_k = int(rng.integers(1, config.n_cat_k + 1))
    gamma = float(rng.uniform(-config.gamma_range, config.gamma_range))
    sigma_tau = float(rng.uniform(0.0, config.sigma_tau_max))
    e_b = max(config.effect_floor, float(rng.lognormal(config.effect_mu, config.effect_sigma)))
    promo = int(rng.integers(0, 2))

    eps, psi, tau_noise, lam = _weekly_noise(config, article_id, attempt)
    alpha = float(tables.alpha[cat_d - 1])
    beta = float(tables.beta[cat_k - 1])
    shift = int(tables.shift_by_cat_k[cat_k - 1])
    base, a = _base_from_parts(config, alpha, beta, shift, gamma, sigma_tau, eps, psi, tau_noise)

    a_bar = float(a.mean())
    q_bar = float(base.mean())
    effect = e_b * config.effect_scale * a_bar
    valid = effect > 0.0 and q_bar > 0.0

    p0 = 0.0
    if valid:
        floor = config.price_floor_frac * q_bar
        for _ in range(MAX_PRICE_RETRIES):
            p0 = float(rng.normal(q_bar / config.price_mean_div, q_bar / config.price_sd_div))
            if p0 > floor:
                break
        else:
            p0 = floor
    # stock that clears by season end if the discount sat at its target level
    z0 = max(0.0, float(base.sum()) - config.n_weeks * (1.0 - config.target_avg_discount) * p0 * effect)

    static = ArticleStatic(
        article_id=article_id,
        cat_d=cat_d,
        cat_k=cat_k,
        season_shift=shift,
        black_price=p0,
        promo=promo,
        alpha_d=alpha,
        beta_k=beta,
        gamma=gamma,
        sigma_tau=sigma_tau,
        effect_magnitude=effect,
        initial_stock=z0,
        attempt=attempt,
    )
    return _ArticleDraw(static=static, base=base, policy_uniforms=lam, valid=valid)


def sample_article(config: SimConfig, article_id: int, attempt: int = 0) -> ArticleStatic:
    """Sample one article's statics; deterministic in (master_seed, article_id, attempt)."""
    config.validate()
    return _realize_article(config, article_id, attempt, category_tables(config)).static


def base_demand_series(config: SimConfig, article: ArticleStatic) -> np.ndarray:
    """Recompute the article's latent base-demand path from its noise streams."""
    eps, psi, tau_noise, _ = _weekly_noise(config, article.article_id, article.attempt)
    base, _ = _base_from_parts(
        config,
        article.alpha_d,
        article.beta_k,
        article.season_shift,
        article.gamma,
        article.sigma_tau,
        eps,
        psi,
        tau_noise,
    )
    return base


def base_demand(config: SimConfig, article: ArticleStatic, t: int) -> float:
    """Latent base demand of one article-week; repeated calls are identical."""
    if not 0 <= t < config.n_weeks:
        raise InvalidWeekError(f"week {t} outside horizon [0, {config.n_weeks})")
    return float(base_demand_series(config, article)[t])


def demand(config: SimConfig, article: ArticleStatic, price: float, t: int) -> float:
    """Realized demand at a price: base demand minus price times effect, clamped at 0."""
    qb = base_demand(config, article, t)
    return max(0.0, qb - price * article.effect_magnitude)


def stock_coverage(stock: float, last4_demand, t: int, n_weeks: int) -> float:
    """Projected weeks-to-sellout divided by weeks remaining in the season.

    Linear extrapolation from the last four weeks of demand; a non-positive
    demand sum returns +inf (maximally overstocked).
    """
    if t >= n_weeks:
        raise InvalidWeekError(f"week {t} outside horizon [0, {n_weeks})")
    if t < 4:
        raise InvalidWeekError("stock coverage needs 4 warm-up weeks")
    total = float(np.sum(last4_demand))
    if total <= 0.0:
        return math.inf
    m = 4.0 * stock / total
    return m / (n_weeks - t)


def update_discount_step(j_prev: int, w: float, lam: float, n_steps: int = 6) -> int:
    """One probabilistic step of the clearance policy, clamped to [0, n_steps-1].

    Overstocked (w > 1) moves a step deeper with probability 1 - 1/w;
    understocked (w < 1) moves a step shallower with probability 1 - w.
    """
    j = j_prev
    if w > 1.0 and lam > 1.0 / w:
        j = j_prev + 1
    elif w < 1.0 and lam > w:
        j = j_prev - 1
    return int(np.clip(j, 0, n_steps - 1))


def _rollout_policy(config: SimConfig, draws: list[_ArticleDraw]) -> dict[str, np.ndarray]:
    """Run the pricing policy for a wave of articles in lockstep.

    Matches the scalar ops exactly: coverage per `stock_coverage`, step update
    per `update_discount_step`, demand clamped at 0, stock floored at 0.
    """
    n = len(draws)
    t_max = config.n_weeks
    qb = np.stack([d.base for d in draws])
    lam = np.stack([d.policy_uniforms for d in draws])
    e = np.array([d.static.effect_magnitude for d in draws])
    p0 = np.array([d.static.black_price for d in draws])
    z = np.array([d.static.initial_stock for d in draws])

    demand_out = np.zeros((n, t_max))
    discount_out = np.zeros((n, t_max))
    stock_out = np.zeros((n, t_max))
    price_out = np.zeros((n, t_max))
    clamped = np.zeros(n, dtype=int)

    j = np.full(n, config.initial_discount_step)
    step = config.discount_step_size
    lam = config.policy_response + (1.0 - config.policy_response) * lam
    for t in range(t_max):
        if t >= 4:
            last4 = demand_out[:, t - 4 : t].sum(axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                m = 4.0 * z / last4
            w = np.where(last4 <= 0.0, np.inf, m / (t_max - t))
            up = (w > 1.0) & (lam[:, t] > 1.0 / np.maximum(w, 1e-300))
            down = (w < 1.0) & (lam[:, t] > w)
            j = np.clip(j + up.astype(int) - down.astype(int), 0, config.discount_steps - 1)
            d_t = j * step
        else:
            d_t = np.zeros(n)
        p_t = p0 * (1.0 - d_t)
        q_raw = qb[:, t] - p_t * e
        q_t = np.maximum(q_raw, 0.0)
        clamped += (q_raw < 0.0).astype(int)
        discount_out[:, t] = d_t
        price_out[:, t] = p_t
        stock_out[:, t] = z
        demand_out[:, t] = q_t
        z = np.maximum(z - q_t, 0.0)

    return {
        "demand": demand_out,
        "discount": discount_out,
        "stock": stock_out,
        "price": price_out,
        "clamped": clamped,
    }


def _simulate_articles(
    config: SimConfig, article_ids: list[int], tables: CategoryTables
) -> dict[int, tuple[_ArticleDraw, dict[str, np.ndarray], int]]:
    """Simulate a set of articles, resampling rejects until all are accepted."""
    accepted: dict[int, tuple[_ArticleDraw, dict[str, np.ndarray], int]] = {}
    pending = [(article_id, 0) for article_id in article_ids]
    while pending:
        draws = []
        meta = []
        for article_id, attempt in pending:
            if attempt >= MAX_ARTICLE_ATTEMPTS:
                raise SimulationError(f"article {article_id} rejected {attempt} times")
            draw = _realize_article(config, article_id, attempt, tables)
            draws.append(draw)
            meta.append((article_id, attempt))
        series = _rollout_policy(config, draws)
        next_pending = []
        for row, (article_id, attempt) in enumerate(meta):
            clamp_frac = series["clamped"][row] / config.n_weeks
            if draws[row].valid and clamp_frac <= REJECT_CLAMP_FRACTION:
                per_article = {k: series[k][row] for k in ("demand", "discount", "stock", "price")}
                accepted[article_id] = (draws[row], per_article, attempt)
            else:
                next_pending.append((article_id, attempt + 1))
        pending = next_pending
    return accepted


def _simulate_chunk(config: SimConfig, lo: int, hi: int):
    return _simulate_articles(config, list(range(lo, hi)), category_tables(config))


def simulate_policy(config: SimConfig, workers: int = 1) -> Panel:
    """Simulate the full panel; articles with too many clamped weeks are resampled.

    Articles are independent, so chunked parallel execution produces the same
    panel at any worker count.
    """
    config.validate()
    workers = max(1, min(workers, config.n_articles))
    if workers == 1:
        accepted = _simulate_articles(config, list(range(config.n_articles)), category_tables(config))
    else:
        bounds = np.linspace(0, config.n_articles, workers + 1).astype(int)
        accepted = {}
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_simulate_chunk, config, int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:])]
            for fut in futures:
                accepted.update(fut.result())

    order = sorted(accepted)
    statics = [accepted[i][0].static for i in order]
    return Panel(
        article_ids=np.array(order, dtype=int),
        cat_d=np.array([s.cat_d for s in statics], dtype=int),
        cat_k=np.array([s.cat_k for s in statics], dtype=int),
        season_shift=np.array([s.season_shift for s in statics], dtype=int),
        black_price=np.array([s.black_price for s in statics]),
        promo=np.array([s.promo for s in statics], dtype=int),
        demand=np.stack([accepted[i][1]["demand"] for i in order]),
        discount=np.stack([accepted[i][1]["discount"] for i in order]),
        stock=np.stack([accepted[i][1]["stock"] for i in order]),
        price=np.stack([accepted[i][1]["price"] for i in order]),
        base_demand=np.stack([accepted[i][0].base for i in order]),
        effect=np.array([s.effect_magnitude for s in statics]),
        provenance="simulated",
        master_seed=config.master_seed,
        season_period=config.season_period,
        statics=statics,
    )


def counterfactual_demand(panel: Panel, article_id: int, weeks, forced_discounts) -> np.ndarray:
    """Demand the article would have seen under forced discounts.

    Reuses the logged base-demand realization, so the forced price never feeds
    back into the base path; at the realized discount this reproduces the
    logged demand exactly.
    """
    if not panel.is_simulated:
        raise UnsupportedPanelError("counterfactual queries need a simulated panel with truth channels")
    weeks = np.atleast_1d(np.asarray(weeks, dtype=int))
    forced = np.broadcast_to(np.asarray(forced_discounts, dtype=float), weeks.shape)
    i = panel.row(article_id)
    qb = panel.base_demand[i, weeks]
    price = panel.black_price[i] * (1.0 - forced)
    return np.maximum(qb - price * panel.effect[i], 0.0)


def counterfactual_matrix(panel: Panel, weeks, forced_discounts) -> np.ndarray:
    """Counterfactual demand for all articles at once, shape (n_articles, len(weeks))."""
    if not panel.is_simulated:
        raise UnsupportedPanelError("counterfactual queries need a simulated panel with truth channels")
    weeks = np.atleast_1d(np.asarray(weeks, dtype=int))
    forced = np.broadcast_to(np.asarray(forced_discounts, dtype=float), (panel.n_articles, len(weeks)))
    qb = panel.base_demand[:, weeks]
    price = panel.black_price[:, None] * (1.0 - forced)
    return np.maximum(qb - price * panel.effect[:, None], 0.0)
