"""Metrics and the on-/off-policy evaluation protocol.

Every (window, seed, model) cell trains on weeks [start, end), forecasts the
next `horizon` weeks under the logged discounts (on-policy) and under forced
alternative discount levels (off-policy, truth from the simulator's
counterfactual channel, metrics averaged over levels), and reports MAE, MSE,
the price-weighted demand error, and per-article effect errors. Aggregates
are mean plus-minus the empirical standard deviation over seeds.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import pandas as pd

from . import dml, econ, rngstream as rs
from .panel import FLOAT_FMT, Panel, UnsupportedPanelError
from .sim import counterfactual_matrix

METRICS_COLUMNS = ["model", "window", "policy", "seed", "metric", "value", "status"]
REPORT_COLUMNS = ["model", "window", "policy", "metric", "mean", "sd", "n_seeds"]
LEVEL_COLUMNS = ["model", "window", "policy", "seed", "level", "metric", "value"]

FORECASTER_KINDS = set(dml.MODEL_KINDS)
BASELINE_KINDS = {"twfe", "naive", "oracle"}


class LengthMismatchError(ValueError):
    """Prediction and truth arrays are not aligned."""


class DegenerateTruthError(ValueError):
    """Demand error undefined: the weighted truth norm is zero."""


class ReplacementError(ValueError):
    """An article is too short for holdout replacement."""


class ProtocolError(ValueError):
    """Protocol configuration inconsistent with the panel."""


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def mae(pred, truth) -> float:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape or pred.size == 0:
        raise LengthMismatchError(f"shapes {pred.shape} vs {truth.shape}")
    return float(np.mean(np.abs(pred - truth)))


def mse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape or pred.size == 0:
        raise LengthMismatchError(f"shapes {pred.shape} vs {truth.shape}")
    return float(np.mean((pred - truth) ** 2))


def demand_error(pred, truth, prices) -> float:
    """Price-weighted relative RMS forecast error.

    sqrt( sum_i sum_T b_i (qhat - q)^2 / sum_i sum_T b_i q^2 ) with b_i the
    undiscounted article price. Scale-invariant in both demand and prices.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    prices = np.asarray(prices, dtype=float)
    if pred.shape != truth.shape or len(prices) != pred.shape[0]:
        raise LengthMismatchError("pred, truth and prices are not aligned")
    if (prices <= 0).any():
        raise ValueError("article prices must be strictly positive")
    denom = float((prices[:, None] * truth**2).sum())
    if denom == 0.0:
        raise DegenerateTruthError("truth is identically zero")
    num = float((prices[:, None] * (pred - truth) ** 2).sum())
    return float(np.sqrt(num / denom))


def effect_error(psi, true_effect) -> tuple[float, float]:
    """Per-article (MAE, MSE) of the fitted head parameter against the truth."""
    psi = np.asarray(psi, dtype=float)
    true_effect = np.asarray(true_effect, dtype=float)
    if psi.shape != true_effect.shape or psi.size == 0:
        raise LengthMismatchError("psi and true effects are not aligned")
    err = psi - true_effect
    return float(np.mean(np.abs(err))), float(np.mean(err**2))


# ---------------------------------------------------------------------------
# holdout replacement
# ---------------------------------------------------------------------------


def holdout_replacement(panel: Panel, target_weeks, seed: int) -> Panel:
    """Overwrite 3 consecutive target weeks with a resampled same-article run.

    Each article independently picks a uniformly random run of 3 consecutive
    non-target weeks and copies its (demand, discount, stock, price) over the
    target rows; week indices (and truth channels) keep their calendar
    positions. Deterministic per (seed, article).
    """
    target = np.sort(np.asarray(target_weeks, dtype=int))
    if len(target) != 3 or not np.array_equal(target, target[0] + np.arange(3)):
        raise ReplacementError("target_weeks must be 3 consecutive weeks")
    t_max = panel.n_weeks
    if target[0] < 0 or target[-1] >= t_max:
        raise ReplacementError("target weeks outside the panel")
    starts = np.array([s for s in range(t_max - 2) if (s + 2 < target[0]) or (s > target[-1])])
    if len(starts) == 0:
        raise ReplacementError("no non-target run of 3 consecutive weeks available")
    out = panel.copy()
    for i, article_id in enumerate(panel.article_ids):
        rng = rs.stream(seed, rs.HOLDOUT, int(article_id))
        s = int(starts[rng.integers(0, len(starts))])
        for channel in ("demand", "discount", "stock", "price"):
            getattr(out, channel)[i, target] = getattr(panel, channel)[i, s : s + 3]
    return out


# ---------------------------------------------------------------------------
# protocol configuration
# ---------------------------------------------------------------------------


@dataclass
class ModelSpec:
    """One entry of the protocol's model roster."""

    kind: str
    name: str = ""
    head_kind: str = "linear"
    loss: str = "l2"
    naive_kind: str = "last_value"
    config: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.name:
            self.name = self.kind if self.kind != "naive" else f"naive-{self.naive_kind}"
        if self.kind not in FORECASTER_KINDS | BASELINE_KINDS:
            raise ProtocolError(f"unknown model kind {self.kind!r}")

    def model_config(self, horizon: int, seed: int) -> dml.ModelConfig:
        overrides = dict(self.config)
        overrides.setdefault("head_kind", self.head_kind)
        overrides.setdefault("loss", self.loss)
        overrides["horizon"] = horizon
        overrides["seed"] = seed
        return dml.ModelConfig.from_dict(overrides)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProtocolConfig:
    models: list[ModelSpec]
    train_windows: tuple[tuple[int, int], ...] = ((20, 65), (30, 75), (40, 85), (50, 95))
    horizon: int = 5
    off_policy_levels: tuple[float, ...] = (0.0, 0.125, 0.25, 0.375, 0.5)
    n_seeds: int = 5
    base_seed: int = 0

    def __post_init__(self) -> None:
        self.train_windows = tuple((int(a), int(b)) for a, b in self.train_windows)
        self.off_policy_levels = tuple(float(x) for x in self.off_policy_levels)
        self.models = [m if isinstance(m, ModelSpec) else ModelSpec(**m) for m in self.models]
        if self.horizon < 1 or self.n_seeds < 1 or not self.models:
            raise ProtocolError("horizon, n_seeds and models must be non-empty/positive")
        for lo, hi in self.train_windows:
            if not 0 <= lo < hi:
                raise ProtocolError(f"bad window ({lo}, {hi})")
        if any(not 0.0 <= x <= 0.5 for x in self.off_policy_levels):
            raise ProtocolError("off-policy levels must lie in [0, 0.5]")

    def validate_against(self, panel: Panel) -> None:
        for lo, hi in self.train_windows:
            if hi + self.horizon > panel.n_weeks:
                raise ProtocolError(f"window ({lo}, {hi}) leaves no room for the horizon")

    def to_dict(self) -> dict:
        return {
            "train_windows": [list(w) for w in self.train_windows],
            "horizon": self.horizon,
            "off_policy_levels": list(self.off_policy_levels),
            "n_seeds": self.n_seeds,
            "base_seed": self.base_seed,
            "models": [m.to_dict() for m in self.models],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ProtocolConfig":
        d = dict(payload)
        d["models"] = [ModelSpec(**m) for m in d.get("models", [])]
        return cls(**d)


# ---------------------------------------------------------------------------
# cell execution
# ---------------------------------------------------------------------------

_WORKER: dict = {}


def _init_worker(panel: Panel, cfg: ProtocolConfig) -> None:
    _WORKER["panel"] = panel
    _WORKER["cfg"] = cfg
    _WORKER["window_data"] = {}


def _window_data(window: tuple[int, int], geometry: dml.ModelConfig) -> dml.WindowTrainingData:
    key = (window, geometry.lag_window, geometry.horizon, geometry.effect_lag_mode)
    cache = _WORKER["window_data"]
    if key not in cache:
        cache[key] = dml.prepare_window(_WORKER["panel"], window, geometry)
    return cache[key]


def _cell_seed(base_seed: int, w_idx: int, seed_idx: int, m_idx: int) -> int:
    return int(
        np.random.SeedSequence(entropy=base_seed, spawn_key=(w_idx, seed_idx, m_idx)).generate_state(1)[0]
    )


@dataclass
class _CellResult:
    rows: list[dict]
    level_rows: list[dict]
    article_rows: list[dict]


def _true_linear_effects(panel: Panel) -> np.ndarray:
    """Signed demand change per unit discount: d q / d discount = p0 * e_i."""
    return panel.black_price * panel.effect


def _run_cell(w_idx: int, seed_idx: int, m_idx: int) -> _CellResult:
    panel: Panel = _WORKER["panel"]
    cfg: ProtocolConfig = _WORKER["cfg"]
    spec = cfg.models[m_idx]
    window = cfg.train_windows[w_idx]
    horizon = cfg.horizon
    weeks = window[1] + np.arange(horizon)
    window_label = f"{window[0]}-{window[1]}"
    seed = _cell_seed(cfg.base_seed, w_idx, seed_idx, m_idx)
    base_row = {"model": spec.name, "window": window_label, "seed": seed_idx}

    rows: list[dict] = []
    level_rows: list[dict] = []
    article_rows: list[dict] = []

    def emit(policy: str, metric: str, value: float, status: str = "ok") -> None:
        rows.append({**base_row, "policy": policy, "metric": metric, "value": value, "status": status})

    try:
        predict_fn, effect_fn = _fit_adapter(panel, spec, window, horizon, seed)

        # on-policy: the logged discount trajectory
        d_logged = panel.discount[:, weeks]
        pred_on = predict_fn(d_logged)
        truth_on = panel.demand[:, weeks]
        emit("on", "MAE", mae(pred_on, truth_on))
        emit("on", "MSE", mse(pred_on, truth_on))
        emit("on", "demand_error", demand_error(pred_on, truth_on, panel.black_price))

        # off-policy: forced constant levels, averaged after per-level scoring
        per_level = {"MAE": [], "MSE": [], "demand_error": []}
        per_article_err = np.zeros(panel.n_articles)
        for level in cfg.off_policy_levels:
            d_forced = np.full((panel.n_articles, horizon), level)
            pred = predict_fn(d_forced)
            truth = counterfactual_matrix(panel, weeks, level)
            values = {
                "MAE": mae(pred, truth),
                "MSE": mse(pred, truth),
                "demand_error": demand_error(pred, truth, panel.black_price),
            }
            per_article_err += np.abs(pred - truth).mean(axis=1) / len(cfg.off_policy_levels)
            for metric, value in values.items():
                per_level[metric].append(value)
                level_rows.append(
                    {**base_row, "policy": "off", "level": level, "metric": metric, "value": value}
                )
        for metric, values in per_level.items():
            emit("off", metric, float(np.mean(values)))

        for i, article_id in enumerate(panel.article_ids):
            article_rows.append(
                {
                    **base_row,
                    "article_id": int(article_id),
                    "off_mae": float(per_article_err[i]),
                }
            )

        if effect_fn is not None:
            psi = effect_fn()
            e_mae, e_mse = effect_error(psi, _true_linear_effects(panel))
            emit("off", "effect_MAE", e_mae)
            emit("off", "effect_MSE", e_mse)
    except Exception:  # noqa: BLE001 - a failed cell must not sink the harness
        rows = []
        failed = {"on": ["MAE", "MSE", "demand_error"], "off": ["MAE", "MSE", "demand_error"]}
        if spec.head_kind == "linear" and spec.kind in FORECASTER_KINDS | {"oracle"}:
            failed["off"] += ["effect_MAE", "effect_MSE"]
        for policy, names in failed.items():
            for metric in names:
                emit(policy, metric, float("nan"), status="failed")
        level_rows = []
        article_rows = []
    return _CellResult(rows=rows, level_rows=level_rows, article_rows=article_rows)


def _fit_adapter(panel: Panel, spec: ModelSpec, window, horizon: int, seed: int):
    """Fit the requested model; return (predict(d_matrix), effect_estimates|None)."""
    origin = window[1] - 1
    weeks = window[1] + np.arange(horizon)

    if spec.kind in FORECASTER_KINDS:
        mcfg = spec.model_config(horizon, seed)
        data = _window_data(window, mcfg)
        model = dml.fit_forecaster(panel, window, mcfg, spec.kind, data=data)

        def predict_fn(d_matrix: np.ndarray) -> np.ndarray:
            request = dml.ForecastRequest(origin=origin, horizon=horizon, discount_scenario=d_matrix)
            return dml.predict(model, panel, request)

        effect_fn = None
        if spec.head_kind == "linear":
            effect_fn = lambda: dml.effect_estimates(model, panel, origin)  # noqa: E731
        return predict_fn, effect_fn

    if spec.kind == "twfe":
        y = panel.demand[:, window[0] : window[1]]
        x = np.log1p(-panel.discount[:, window[0] : window[1]])
        eps_hat, *_ = econ._twfe_poisson_arrays(y, x, tol=1e-8, max_iter=200)

        def predict_fn(d_matrix: np.ndarray) -> np.ndarray:
            return econ.twfe_forecast_path(panel, eps_hat, origin, d_matrix)

        return predict_fn, None

    if spec.kind == "naive":

        def predict_fn(d_matrix: np.ndarray) -> np.ndarray:
            return np.stack(
                [
                    econ.naive_forecasts(panel, a, horizon, spec.naive_kind, origin=origin)
                    for a in panel.article_ids
                ]
            )

        return predict_fn, None

    if spec.kind == "oracle":
        if not panel.is_simulated:
            raise UnsupportedPanelError("oracle model needs truth channels")

        def predict_fn(d_matrix: np.ndarray) -> np.ndarray:
            qb = panel.base_demand[:, weeks]
            price = panel.black_price[:, None] * (1.0 - d_matrix)
            return np.maximum(qb - price * panel.effect[:, None], 0.0)

        return predict_fn, (lambda: _true_linear_effects(panel))

    raise ProtocolError(f"unknown model kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# report assembly
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    metrics: pd.DataFrame
    aggregates: pd.DataFrame
    per_level: pd.DataFrame
    per_article: pd.DataFrame

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "metrics": out / "metrics.csv",
            "report": out / "report.csv",
        }
        self.metrics.to_csv(paths["metrics"], index=False, float_format=FLOAT_FMT)
        self.aggregates.to_csv(paths["report"], index=False, float_format=FLOAT_FMT)
        plotdir = out / "plotdata"
        plotdir.mkdir(exist_ok=True)
        paths["levels"] = plotdir / "off_policy_levels.csv"
        self.per_level.to_csv(paths["levels"], index=False, float_format=FLOAT_FMT)
        improvement = improvement_table(self.per_article)
        if improvement is not None:
            paths["improvement"] = plotdir / "effect_vs_improvement.csv"
            improvement.to_csv(paths["improvement"], index=False, float_format=FLOAT_FMT)
        return paths


def aggregate_metrics(metrics: pd.DataFrame) -> pd.DataFrame:
    """Mean and seed-level sd per (model, window, policy, metric), plus pooled
    rows (window == 'all') that first average each seed across windows."""
    ok = metrics[metrics["status"] == "ok"]
    parts = []
    grouped = ok.groupby(["model", "window", "policy", "metric"])["value"]
    per_window = grouped.agg(["mean", "std", "count"]).reset_index()
    per_window = per_window.rename(columns={"mean": "mean", "std": "sd", "count": "n_seeds"})
    parts.append(per_window)

    pooled = (
        ok.groupby(["model", "policy", "metric", "seed"])["value"]
        .mean()
        .reset_index()
        .groupby(["model", "policy", "metric"])["value"]
        .agg(["mean", "std", "count"])
        .reset_index()
        .rename(columns={"mean": "mean", "std": "sd", "count": "n_seeds"})
    )
    pooled.insert(1, "window", "all")
    parts.append(pooled)
    out = pd.concat(parts, ignore_index=True)[REPORT_COLUMNS]
    out["sd"] = out["sd"].fillna(0.0)
    return out.sort_values(REPORT_COLUMNS[:4]).reset_index(drop=True)


def improvement_table(per_article: pd.DataFrame) -> pd.DataFrame | None:
    """Per-article off-policy error gap between the single-model baseline and
    the forecaster, against the true effect magnitude."""
    models = set(per_article["model"].unique()) if len(per_article) else set()
    if not {"dml", "tf"} <= models:
        return None
    mean_err = per_article.groupby(["model", "article_id"])["off_mae"].mean().unstack(0)
    out = pd.DataFrame(
        {
            "article_id": mean_err.index,
            "err_dml": mean_err["dml"].to_numpy(),
            "err_tf": mean_err["tf"].to_numpy(),
            "improvement": (mean_err["dml"] - mean_err["tf"]).to_numpy(),
        }
    )
    truth = per_article.drop_duplicates("article_id").set_index("article_id")["true_effect"]
    out["true_effect_abs"] = truth.reindex(out["article_id"]).abs().to_numpy()
    return out


DESK_NET_CONFIG = {
    "hidden_dims": [48, 32],
    "epochs": 25,
    "effect_epochs": 20,
    "dropout_rate": 0.1,
}
# the single-model baseline runs at its own (heavier) tuned regularization
DESK_TF_CONFIG = {**DESK_NET_CONFIG, "dropout_rate": 0.4}


def desk_scale_models(head_kind: str = "linear", loss: str = "l2") -> list[ModelSpec]:
    """Default desk-scale roster: forecaster, its ablations, the baseline."""
    return [
        ModelSpec(kind="dml", head_kind=head_kind, loss=loss, config=dict(DESK_NET_CONFIG)),
        ModelSpec(kind="dml-nocf", head_kind=head_kind, loss=loss, config=dict(DESK_NET_CONFIG)),
        ModelSpec(kind="sdml", head_kind=head_kind, loss=loss, config=dict(DESK_NET_CONFIG)),
        ModelSpec(kind="tf", head_kind=head_kind, loss=loss, config=dict(DESK_TF_CONFIG)),
    ]


def default_workers() -> int:
    env = os.environ.get("ELASTIC_DML_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_protocol(panel: Panel, cfg: ProtocolConfig, workers: int | None = None) -> EvalReport:
    """Run every (window, seed, model) cell and assemble the report.

    Cells are independent; results are identical at any worker count because
    all randomness is derived per cell.
    """
    if not panel.is_simulated:
        raise UnsupportedPanelError("the protocol's off-policy truth needs a simulated panel")
    cfg.validate_against(panel)
    if workers is None:
        workers = default_workers()

    cells = [
        (w, s, m)
        for w in range(len(cfg.train_windows))
        for s in range(cfg.n_seeds)
        for m in range(len(cfg.models))
    ]
    results: dict[tuple[int, int, int], _CellResult] = {}
    if workers <= 1:
        _init_worker(panel, cfg)
        for cell in cells:
            results[cell] = _run_cell(*cell)
    else:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_init_worker, initargs=(panel, cfg)
        ) as pool:
            futures = {cell: pool.submit(_run_cell, *cell) for cell in cells}
            for cell, fut in futures.items():
                results[cell] = fut.result()

    true_eff = _true_linear_effects(panel)
    eff_by_id = dict(zip((int(a) for a in panel.article_ids), true_eff))
    rows: list[dict] = []
    level_rows: list[dict] = []
    article_rows: list[dict] = []
    for cell in cells:  # deterministic assembly order
        res = results[cell]
        rows.extend(res.rows)
        level_rows.extend(res.level_rows)
        for r in res.article_rows:
            article_rows.append({**r, "true_effect": eff_by_id[r["article_id"]]})

    metrics = pd.DataFrame(rows, columns=METRICS_COLUMNS)
    per_level = pd.DataFrame(level_rows, columns=LEVEL_COLUMNS)
    per_article = pd.DataFrame(
        article_rows, columns=["model", "window", "seed", "article_id", "off_mae", "true_effect"]
    )
    return EvalReport(
        metrics=metrics,
        aggregates=aggregate_metrics(metrics),
        per_level=per_level,
        per_article=per_article,
    )
