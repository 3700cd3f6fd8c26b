"""Lag/static feature encoding for the network models.

A feature row at origin week t targeting week t+h concatenates, in order:
log1p demand lags over weeks t-L..t-1, raw discount lags, log1p stock lags,
sin/cos of the target week against the season period, the normalized target
week, one-hot article categories, log black price, the promo flag, and
(only for single-model baselines) the future discount d_{t+h}. Nuisance and
effect models never receive future discounts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .panel import Panel


class WindowError(ValueError):
    """Not enough history (or horizon) for the requested feature row."""


@dataclass(frozen=True)
class FeatureSpec:
    lag_window: int = 16
    season_period: int = 30
    n_cat_d: int = 45
    n_cat_k: int = 15
    include_future_discount: bool = False
    # "full" keeps every lag; "summary" collapses each lag block to its mean
    # (used by the effect model, which conditions on level, not trajectory)
    lag_mode: str = "full"

    def __post_init__(self) -> None:
        if self.lag_mode not in ("full", "summary"):
            raise ValueError("lag_mode must be 'full' or 'summary'")

    @property
    def lag_block(self) -> int:
        return 3 * self.lag_window if self.lag_mode == "full" else 3

    @property
    def length(self) -> int:
        n = self.lag_block + 2 + 1 + self.n_cat_d + self.n_cat_k + 1 + 1
        return n + 1 if self.include_future_discount else n

    def to_dict(self) -> dict:
        return {
            "lag_window": self.lag_window,
            "season_period": self.season_period,
            "n_cat_d": self.n_cat_d,
            "n_cat_k": self.n_cat_k,
            "include_future_discount": self.include_future_discount,
            "lag_mode": self.lag_mode,
        }


def feature_matrix(
    panel: Panel,
    rows: np.ndarray,
    origins: np.ndarray,
    horizon_steps: np.ndarray,
    spec: FeatureSpec,
) -> np.ndarray:
    """Vectorized feature rows for aligned (article row, origin, step) triples."""
    rows = np.asarray(rows, dtype=int)
    origins = np.asarray(origins, dtype=int)
    horizon_steps = np.asarray(horizon_steps, dtype=int)
    if not (rows.shape == origins.shape == horizon_steps.shape):
        raise ValueError("rows, origins and horizon_steps must be aligned")
    lag = spec.lag_window
    n_weeks = panel.n_weeks
    targets = origins + horizon_steps
    if (origins < lag).any():
        raise WindowError(f"origins need at least {lag} weeks of history")
    if (targets >= n_weeks).any() or (targets < 0).any():
        raise WindowError("target week outside the panel horizon")

    # lag windows end at origin-1; sliding window j covers weeks j..j+lag-1
    win = origins - lag
    demand_lags = sliding_window_view(np.log1p(panel.demand), lag, axis=1)[rows, win]
    discount_lags = sliding_window_view(panel.discount, lag, axis=1)[rows, win]
    stock_lags = sliding_window_view(np.log1p(panel.stock), lag, axis=1)[rows, win]
    if spec.lag_mode == "summary":
        demand_lags = demand_lags.mean(axis=1, keepdims=True)
        discount_lags = discount_lags.mean(axis=1, keepdims=True)
        stock_lags = stock_lags.mean(axis=1, keepdims=True)

    angle = 2.0 * np.pi * targets / spec.season_period
    season = np.column_stack([np.sin(angle), np.cos(angle)])
    norm_week = (targets / n_weeks)[:, None]

    cat_d = np.zeros((len(rows), spec.n_cat_d))
    cat_d[np.arange(len(rows)), panel.cat_d[rows] - 1] = 1.0
    cat_k = np.zeros((len(rows), spec.n_cat_k))
    cat_k[np.arange(len(rows)), panel.cat_k[rows] - 1] = 1.0

    blocks = [
        demand_lags,
        discount_lags,
        stock_lags,
        season,
        norm_week,
        cat_d,
        cat_k,
        np.log(panel.black_price[rows])[:, None],
        panel.promo[rows].astype(float)[:, None],
    ]
    if spec.include_future_discount:
        blocks.append(panel.discount[rows, targets][:, None])
    return np.concatenate(blocks, axis=1)


def build_features(
    panel: Panel,
    article_id: int,
    t: int,
    spec: FeatureSpec,
    horizon_step: int,
) -> np.ndarray:
    """One feature row; pure in (panel, article, t, step)."""
    row = panel.row(article_id)
    return feature_matrix(
        panel,
        np.array([row]),
        np.array([t]),
        np.array([horizon_step]),
        spec,
    )[0]


def training_grid(
    panel: Panel,
    rows: np.ndarray,
    origin_lo: int,
    origin_hi: int,
    horizon: int,
    lag_window: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index triples for every legal (row, origin, step) in a training window.

    Origins t satisfy lag_window <= origin_lo <= t and t + h <= origin_hi for
    each step h in 1..horizon. Order is deterministic: step-major, then
    origin, then article row.
    """
    if origin_lo < lag_window:
        raise WindowError("window start leaves no room for the lag block")
    out_rows, out_origins, out_steps = [], [], []
    for h in range(1, horizon + 1):
        origins = np.arange(origin_lo, origin_hi - h + 1)
        if len(origins) == 0:
            continue
        rr, tt = np.meshgrid(rows, origins, indexing="ij")
        out_rows.append(rr.ravel())
        out_origins.append(tt.ravel())
        out_steps.append(np.full(rr.size, h, dtype=int))
    if not out_rows:
        raise WindowError("window too short for any training row")
    return (
        np.concatenate(out_rows),
        np.concatenate(out_origins),
        np.concatenate(out_steps),
    )
