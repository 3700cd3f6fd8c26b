"""The DML forecaster: cross-fitted nuisances, effect head, ensemble inference.

Training runs in two stages. Outcome and treatment nuisance nets are trained
per article-id parity half; their out-of-half (cross-fit) predictions
residualize the realized demand and discount, and a single effect net learns
the per-article price response that best maps those predictions onto realized
demand through a multiplicative constant-elasticity head or an additive
linear head. Inference combines the cross-fit path and the standard
forecasting path with a geometric mean.

Variants: `nocf` scores effect-training rows with same-parity nuisances,
`ss` trains nuisances on the even half and the effect on the odd half, and
sDML drops treatment residualization entirely. A single-model baseline with
the same trunk features plus the future discount is included for comparison.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .features import FeatureSpec, WindowError, feature_matrix, training_grid
from .nnet import (
    Network,
    NetworkSpec,
    TrainConfig,
    TrainResult,
    softplus_inverse,
    train_with_adapter,
)
from .panel import Panel

D_TILDE_CLAMP = 0.95
ENSEMBLE_FLOOR = 1e-9
FORCED_DISCOUNT_MAX = 0.7

MODEL_KINDS = ("dml", "dml-nocf", "dml-ss", "sdml", "sdml-nocf", "tf")
HEAD_KINDS = ("elastic", "linear")
PREDICT_MODES = ("cross_fit", "forecast", "ensemble")


class SplitError(ValueError):
    """Panel cannot be partitioned into non-empty parity halves."""


class InferenceError(ValueError):
    """Prediction requested for articles or weeks the model cannot serve."""


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------


def effect_head_elastic(q_tilde, d, d_tilde, psi):
    """Multiplicative head q_tilde * ((1-d)/(1-d_tilde))^psi.

    d_tilde is clamped at 0.95 to keep the ratio bounded; d == d_tilde returns
    q_tilde exactly for any psi.
    """
    q_tilde = np.asarray(q_tilde, dtype=float)
    d = np.asarray(d, dtype=float)
    d_tilde = np.asarray(d_tilde, dtype=float)
    psi = np.asarray(psi, dtype=float)
    ratio = (1.0 - d) / (1.0 - np.minimum(d_tilde, D_TILDE_CLAMP))
    out = q_tilde * ratio**psi
    return np.where(d == d_tilde, q_tilde * np.ones_like(out), out)


def effect_head_linear(q_tilde, d, d_tilde, psi):
    """Additive head q_tilde + psi * (d - d_tilde), clamped at 0."""
    q_tilde = np.asarray(q_tilde, dtype=float)
    out = q_tilde + np.asarray(psi, dtype=float) * (np.asarray(d, dtype=float) - np.asarray(d_tilde, dtype=float))
    return np.maximum(out, 0.0)


def ensemble_demand(q_cf, q_f):
    """Geometric mean of the two inference paths.

    Operands are floored at a tiny positive value; the result is pinned inside
    [min, max] of the operands and equals them exactly when they coincide.
    """
    a = np.maximum(np.asarray(q_cf, dtype=float), ENSEMBLE_FLOOR)
    b = np.maximum(np.asarray(q_f, dtype=float), ENSEMBLE_FLOOR)
    with np.errstate(divide="ignore"):
        mean = np.exp(0.5 * (np.log(a) + np.log(b)))
    mean = np.clip(mean, np.minimum(a, b), np.maximum(a, b))
    return np.where(a == b, a, mean)


def piecewise_log_basis(d, segments: int, d_max: float = FORCED_DISCOUNT_MAX):
    """Basis of the monotone piecewise-linear head in u = log(1-d).

    Segment k spans [b_k, b_{k-1}] with b_0 = 0 descending to log(1-d_max);
    basis values are non-positive and non-decreasing in u, so non-positive
    slopes make the head demand non-decreasing in the discount. The deepest
    segment extrapolates below its breakpoint.
    """
    u = np.log1p(-np.asarray(d, dtype=float))
    u_min = np.log1p(-d_max)
    bounds = u_min * np.arange(segments + 1) / segments
    cols = []
    for k in range(1, segments + 1):
        lo = bounds[k] if k < segments else -np.inf
        cols.append(np.clip(u, lo, bounds[k - 1]) - bounds[k - 1])
    return np.stack(cols, axis=-1)


def tf_head_elastic(q_tilde, slopes, d, d_max: float = FORCED_DISCOUNT_MAX):
    """Monotone baseline head: q_tilde * exp(sum_k slope_k * basis_k(log(1-d)))."""
    slopes = np.asarray(slopes, dtype=float)
    basis = piecewise_log_basis(d, slopes.shape[-1], d_max)
    return np.asarray(q_tilde, dtype=float) * np.exp((slopes * basis).sum(axis=-1))


def tf_head_linear(q_tilde, psi, d):
    """Baseline linear head with no treatment prediction: max(0, q_tilde + psi*d)."""
    return effect_head_linear(q_tilde, d, 0.0, psi)


# ---------------------------------------------------------------------------
# residuals
# ---------------------------------------------------------------------------


@dataclass
class Residuals:
    """Outcome/treatment residuals in the head's working space.

    The elastic head works in log space: ln(q+1) - ln(q~+1) for the outcome
    and ln(1-d) - ln(1-d~) for the treatment (d~ clamped below 0.95). The
    linear head uses raw differences.
    """

    outcome: np.ndarray
    treatment: np.ndarray


def residuals(q, d, q_tilde, d_tilde, head_kind: str) -> Residuals:
    q = np.asarray(q, dtype=float)
    d = np.asarray(d, dtype=float)
    q_tilde = np.asarray(q_tilde, dtype=float)
    d_tilde = np.asarray(d_tilde, dtype=float)
    if head_kind == "elastic":
        dt = np.minimum(d_tilde, D_TILDE_CLAMP)
        return Residuals(
            outcome=np.log1p(q) - np.log1p(q_tilde),
            treatment=np.log1p(-d) - np.log1p(-dt),
        )
    if head_kind == "linear":
        return Residuals(outcome=q - q_tilde, treatment=d - d_tilde)
    raise ValueError(f"unknown head kind {head_kind!r}")


# ---------------------------------------------------------------------------
# partial linear model estimators (orthogonalization vs single learner)
# ---------------------------------------------------------------------------


def ridge_coefficients(X: np.ndarray, y: np.ndarray, l2: float):
    """Ridge fit with centered data; returns (coef, intercept)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    A = Xc.T @ Xc + l2 * np.eye(X.shape[1])
    coef = np.linalg.solve(A, Xc.T @ (y - y_mean))
    return coef, y_mean - x_mean @ coef


def crossfit_predictions(X: np.ndarray, y: np.ndarray, l2: float, n_folds: int = 2) -> np.ndarray:
    """Out-of-fold ridge predictions; folds split by row index modulo n_folds."""
    n = X.shape[0]
    fold = np.arange(n) % n_folds
    pred = np.empty(n)
    for k in range(n_folds):
        mask = fold == k
        coef, intercept = ridge_coefficients(X[~mask], y[~mask], l2)
        pred[mask] = X[mask] @ coef + intercept
    return pred


def residualized_theta(q, d, Z, l2: float = 1.0, n_folds: int = 2) -> float:
    """Linear treatment effect from residual-on-residual regression.

    Outcome and treatment are cross-fit ridge-residualized against Z; the
    effect is the no-intercept slope of the outcome residual on the treatment
    residual.
    """
    q = np.asarray(q, dtype=float)
    d = np.asarray(d, dtype=float)
    u = q - crossfit_predictions(Z, q, l2, n_folds)
    v = d - crossfit_predictions(Z, d, l2, n_folds)
    return float((v @ u) / (v @ v))


def slearner_theta(q, d, Z, l2: float = 1.0) -> float:
    """Treatment coefficient of one ridge fit on [d, Z]; the penalty that
    regularizes Z also shrinks and confounds this coefficient."""
    X = np.column_stack([np.asarray(d, dtype=float), np.asarray(Z, dtype=float)])
    coef, _ = ridge_coefficients(X, np.asarray(q, dtype=float), l2)
    return float(coef[0])


# ---------------------------------------------------------------------------
# configuration and model containers
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    """Hyperparameters of the forecaster family at desk scale."""

    head_kind: str = "elastic"
    loss: str = "l1"                 # nuisance / joint-baseline loss
    effect_loss: str = "l1"          # the effect model always defaults to L1
    horizon: int = 5
    lag_window: int = 16
    season_period: int = 30
    n_cat_d: int = 45
    n_cat_k: int = 15
    hidden_dims: tuple[int, ...] = (64, 64)
    dropout_rate: float = 0.1
    batch_size: int = 1024
    learning_rate: float = 3e-3
    lr_schedule: str = "exponential"
    lr_gamma: float = 0.999
    epochs: int = 15
    weight_decay: float = 0.0
    effect_learning_rate: float = 2e-3
    effect_epochs: int = 20
    effect_batch_size: int = 2048    # twice the nuisance batch, per the cross-fit doubling
    effect_weight_decay: float = 1e-4
    effect_lag_mode: str = "summary"
    # recenter nuisance predictions per article on the training window (the
    # within-article analog of the econometric baseline); kills the leakage
    # of correlated per-article nuisance biases into the effect head
    calibrate_nuisances: bool = True
    tf_segments: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"head_kind must be one of {HEAD_KINDS}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    def feature_spec(self) -> FeatureSpec:
        return FeatureSpec(
            lag_window=self.lag_window,
            season_period=self.season_period,
            n_cat_d=self.n_cat_d,
            n_cat_k=self.n_cat_k,
        )

    def effect_feature_spec(self) -> FeatureSpec:
        return FeatureSpec(
            lag_window=self.lag_window,
            season_period=self.season_period,
            n_cat_d=self.n_cat_d,
            n_cat_k=self.n_cat_k,
            lag_mode=self.effect_lag_mode,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        d = dict(payload)
        if "hidden_dims" in d:
            d["hidden_dims"] = tuple(d["hidden_dims"])
        return cls(**d)


def _derive_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(tag,)).generate_state(1)[0])


def split_even_odd(panel: Panel) -> tuple[Panel, Panel]:
    """Partition articles by id parity; every article lands wholly in one half."""
    if panel.n_articles < 2:
        raise SplitError("parity split needs at least 2 articles")
    even = np.flatnonzero(panel.article_ids % 2 == 0)
    odd = np.flatnonzero(panel.article_ids % 2 == 1)
    if len(even) == 0 or len(odd) == 0:
        raise SplitError("one parity half is empty")
    return panel.subset(even), panel.subset(odd)


@dataclass
class WindowTrainingData:
    """Feature/target arrays for one training window, shared across models."""

    window: tuple[int, int]
    rows: np.ndarray        # article row per training row
    origins: np.ndarray
    steps: np.ndarray
    X: np.ndarray           # nuisance features (no future discount)
    X_effect: np.ndarray    # effect features at the origin week (step 0)
    y_demand: np.ndarray
    y_discount: np.ndarray
    even_mask: np.ndarray   # rows whose article id is even


def prepare_window(panel: Panel, window: tuple[int, int], cfg: ModelConfig) -> WindowTrainingData:
    """Assemble training rows for weeks [start, end); origins leave room for lags."""
    start, end = window
    if not 0 <= start < end <= panel.n_weeks:
        raise WindowError(f"window {window} outside panel horizon")
    spec = cfg.feature_spec()
    rows = np.arange(panel.n_articles)
    g_rows, g_origins, g_steps = training_grid(
        panel, rows, start + cfg.lag_window, end - 1, cfg.horizon, cfg.lag_window
    )
    X = feature_matrix(panel, g_rows, g_origins, g_steps, spec)
    X_eff = feature_matrix(panel, g_rows, g_origins, np.zeros_like(g_steps), cfg.effect_feature_spec())
    targets = g_origins + g_steps
    return WindowTrainingData(
        window=(start, end),
        rows=g_rows,
        origins=g_origins,
        steps=g_steps,
        X=X,
        X_effect=X_eff,
        y_demand=panel.demand[g_rows, targets],
        y_discount=panel.discount[g_rows, targets],
        even_mask=(panel.article_ids[g_rows] % 2 == 0),
    )


@dataclass
class NuisanceSet:
    """Parity-trained outcome/treatment nets; treatment nets absent for sDML."""

    outcome_even: Network
    outcome_odd: Network | None
    treatment_even: Network | None
    treatment_odd: Network | None
    train_article_ids: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class EffectTrainingData:
    """Cross-fitted inputs of the effect stage, kept for provenance checks."""

    X: np.ndarray
    q_tilde: np.ndarray
    d_tilde: np.ndarray
    d: np.ndarray
    q: np.ndarray
    article_ids: np.ndarray
    even_mask: np.ndarray


@dataclass
class NuisanceCalibration:
    """Per-article recentering of nuisance predictions.

    A small article-specific regression (intercept, trend, and the article's
    own seasonal sin/cos) of the prediction residuals, estimated on the
    training window only and added back at scoring time; the analog of
    article fixed effects plus article trends in the econometric baseline.
    Closes the gap between in-half and out-of-half nuisance quality so the
    effect head sees comparably centered residuals on both paths. The
    treatment part stays zero when treatment residualization is disabled
    (sDML keeps d_tilde identically 0).
    """

    week_center: float
    period: int
    shifts: np.ndarray           # (n_articles,) season shift per training row
    outcome_coef: np.ndarray     # (n_articles, 4)
    treatment_coef: np.ndarray   # (n_articles, 4)

    N_TERMS = 4

    @classmethod
    def zero(cls, n_articles: int) -> "NuisanceCalibration":
        return cls(
            week_center=0.0,
            period=30,
            shifts=np.zeros(n_articles),
            outcome_coef=np.zeros((n_articles, cls.N_TERMS)),
            treatment_coef=np.zeros((n_articles, cls.N_TERMS)),
        )

    def _basis(self, rows: np.ndarray, weeks: np.ndarray) -> np.ndarray:
        angle = 2.0 * np.pi * (weeks + self.shifts[rows]) / self.period
        return np.stack(
            [np.ones_like(weeks), (weeks - self.week_center) / 10.0, np.sin(angle), np.cos(angle)],
            axis=1,
        )

    def outcome_offset(self, rows: np.ndarray, weeks: np.ndarray) -> np.ndarray:
        return (self._basis(rows, weeks) * self.outcome_coef[rows]).sum(axis=1)

    def treatment_offset(self, rows: np.ndarray, weeks: np.ndarray) -> np.ndarray:
        return (self._basis(rows, weeks) * self.treatment_coef[rows]).sum(axis=1)

    def to_dict(self) -> dict:
        return {
            "week_center": self.week_center,
            "period": self.period,
            "shifts": self.shifts.tolist(),
            "outcome_coef": self.outcome_coef.tolist(),
            "treatment_coef": self.treatment_coef.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "NuisanceCalibration":
        return cls(
            week_center=float(payload["week_center"]),
            period=int(payload["period"]),
            shifts=np.array(payload["shifts"], dtype=float),
            outcome_coef=np.array(payload["outcome_coef"], dtype=float),
            treatment_coef=np.array(payload["treatment_coef"], dtype=float),
        )


def _article_basis_fit(
    rows: np.ndarray, basis: np.ndarray, values: np.ndarray, n_articles: int
) -> np.ndarray:
    """Per-article least squares of values on the basis columns, batched."""
    k = basis.shape[1]
    gram = np.zeros((n_articles, k, k))
    moment = np.zeros((n_articles, k))
    for i in range(k):
        moment[:, i] = np.bincount(rows, weights=basis[:, i] * values, minlength=n_articles)
        for j in range(i, k):
            g = np.bincount(rows, weights=basis[:, i] * basis[:, j], minlength=n_articles)
            gram[:, i, j] = g
            gram[:, j, i] = g
    gram += 1e-8 * np.eye(k)
    return np.linalg.solve(gram, moment[..., None])[..., 0]


@dataclass
class DmlModel:
    """Trained bundle: parity nuisances, one effect net, head and variant tags."""

    outcome_even: Network
    outcome_odd: Network | None
    treatment_even: Network | None
    treatment_odd: Network | None
    effect: Network
    head_kind: str
    variant: str                 # cf | nocf | ss
    sdml: bool
    feature_spec: FeatureSpec
    effect_feature_spec: FeatureSpec
    horizon: int
    window: tuple[int, int]
    config: ModelConfig
    article_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    calibration_cf: NuisanceCalibration | None = None
    calibration_f: NuisanceCalibration | None = None
    train_article_ids: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        base = "sdml" if self.sdml else "dml"
        if self.variant == "nocf":
            return f"{base}-nocf"
        if self.variant == "ss":
            return f"{base}-ss"
        return base

    def submodels(self) -> dict[str, Network]:
        nets = {"effect": self.effect, "outcome_even": self.outcome_even}
        if self.outcome_odd is not None:
            nets["outcome_odd"] = self.outcome_odd
        if self.treatment_even is not None:
            nets["treatment_even"] = self.treatment_even
        if self.treatment_odd is not None:
            nets["treatment_odd"] = self.treatment_odd
        return nets


@dataclass
class ForecastRequest:
    """What to forecast: origin week, horizon, discount scenario, path mode."""

    origin: int
    horizon: int = 5
    discount_scenario: str | float | np.ndarray = "logged"
    mode: str = "ensemble"

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise InferenceError("horizon must be >= 1")
        if self.mode not in PREDICT_MODES:
            raise InferenceError(f"mode must be one of {PREDICT_MODES}")
        if not isinstance(self.discount_scenario, str):
            forced = np.asarray(self.discount_scenario, dtype=float)
            if (forced < 0).any() or (forced >= FORCED_DISCOUNT_MAX).any():
                raise InferenceError(f"forced discounts must lie in [0, {FORCED_DISCOUNT_MAX})")


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _network(cfg: ModelConfig, input_dim: int, activation, seed_tag: int) -> Network:
    spec = NetworkSpec(
        input_dim=input_dim,
        hidden_dims=cfg.hidden_dims,
        output_activation=activation,
        dropout_rate=cfg.dropout_rate,
        seed=_derive_seed(cfg.seed, seed_tag),
    )
    return Network(spec)


def _train_regression(
    net: Network,
    X: np.ndarray,
    y: np.ndarray,
    cfg: ModelConfig,
    seed_tag: int,
    positive_target: bool,
) -> Network:
    net.set_input_normalization(X.mean(axis=0), X.std(axis=0))
    # learn in units of the target spread, starting from its mean
    y_mean = float(y.mean())
    y_scale = max(float(y.std()), 1e-3)
    net.set_output_scale(y_scale)
    if positive_target:
        net.set_output_bias(softplus_inverse(max(y_mean, 1e-6) / y_scale))
    else:
        net.set_output_bias(y_mean / y_scale)
    tc = TrainConfig(
        loss=cfg.loss,
        learning_rate=cfg.learning_rate,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        weight_decay=cfg.weight_decay,
        lr_schedule=cfg.lr_schedule,
        lr_gamma=cfg.lr_gamma,
        seed=_derive_seed(cfg.seed, seed_tag),
    )

    def adapter(out, batch_aux):
        err = out[:, 0] - batch_aux["y"]
        n = out.shape[0]
        if tc.loss == "l1":
            return float(np.mean(np.abs(err))), (np.sign(err) / n)[:, None]
        return float(np.mean(err**2)), (2.0 * err / n)[:, None]

    train_with_adapter(net, X, {"y": y}, adapter, tc)
    return net


def fit_nuisances(
    panel: Panel,
    data: WindowTrainingData,
    cfg: ModelConfig,
    sdml: bool = False,
    sample_split: bool = False,
) -> NuisanceSet:
    """Train parity copies of the outcome (and treatment) nets on their halves.

    Outcome nets predict demand at each horizon step without future-discount
    features; treatment nets predict the future discount. With sample
    splitting only the even half trains a single copy of each net.
    """
    split_even_odd(panel)  # validates both halves are non-empty
    even = data.even_mask
    halves = {"even": even, "odd": ~even}
    input_dim = data.X.shape[1]
    nets: dict[str, Network | None] = {
        "outcome_even": None,
        "outcome_odd": None,
        "treatment_even": None,
        "treatment_odd": None,
    }
    train_ids: dict[str, np.ndarray] = {}
    for parity_idx, parity in enumerate(("even", "odd")):
        if sample_split and parity == "odd":
            continue
        mask = halves[parity]
        ids = np.unique(panel.article_ids[data.rows[mask]])
        assert (ids % 2 == parity_idx).all(), "parity hygiene violated"
        net = _network(cfg, input_dim, "softplus", seed_tag=10 + parity_idx)
        nets[f"outcome_{parity}"] = _train_regression(
            net, data.X[mask], data.y_demand[mask], cfg, seed_tag=20 + parity_idx, positive_target=True
        )
        train_ids[f"outcome_{parity}"] = ids
        if not sdml:
            net = _network(cfg, input_dim, "identity", seed_tag=30 + parity_idx)
            nets[f"treatment_{parity}"] = _train_regression(
                net, data.X[mask], data.y_discount[mask], cfg, seed_tag=40 + parity_idx, positive_target=False
            )
            train_ids[f"treatment_{parity}"] = ids
    return NuisanceSet(
        outcome_even=nets["outcome_even"],
        outcome_odd=nets["outcome_odd"],
        treatment_even=nets["treatment_even"],
        treatment_odd=nets["treatment_odd"],
        train_article_ids=train_ids,
    )


def _score_rows(
    nuisances: NuisanceSet,
    X: np.ndarray,
    even_mask: np.ndarray,
    swap: bool,
) -> tuple[np.ndarray, np.ndarray]:
    """Nuisance predictions per row; swap=True scores rows with the opposite half."""
    q_tilde = np.empty(X.shape[0])
    d_tilde = np.zeros(X.shape[0])
    for parity, mask in (("even", even_mask), ("odd", ~even_mask)):
        if not mask.any():
            continue
        source = {"even": "odd", "odd": "even"}[parity] if swap else parity
        outcome = getattr(nuisances, f"outcome_{source}")
        q_tilde[mask] = outcome.predict(X[mask])[:, 0]
        treatment = getattr(nuisances, f"treatment_{source}")
        if treatment is not None:
            d_tilde[mask] = treatment.predict(X[mask])[:, 0]
    return q_tilde, d_tilde


def _raw_path_predictions(
    data: WindowTrainingData, nuisances: NuisanceSet, variant: str
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(keep mask, q_tilde, d_tilde) for the variant's scoring path."""
    even = data.even_mask
    if variant == "cf":
        keep = np.ones(len(even), dtype=bool)
        q_tilde, d_tilde = _score_rows(nuisances, data.X, even, swap=True)
    elif variant == "nocf":
        keep = np.ones(len(even), dtype=bool)
        q_tilde, d_tilde = _score_rows(nuisances, data.X, even, swap=False)
    elif variant == "ss":
        keep = ~even
        q_tilde = nuisances.outcome_even.predict(data.X[keep])[:, 0]
        if nuisances.treatment_even is not None:
            d_tilde = nuisances.treatment_even.predict(data.X[keep])[:, 0]
        else:
            d_tilde = np.zeros(int(keep.sum()))
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return keep, q_tilde, d_tilde


def path_calibration(
    panel: Panel,
    data: WindowTrainingData,
    nuisances: NuisanceSet,
    variant: str,
) -> NuisanceCalibration:
    """Per-article level/trend/seasonal recentering for one scoring path."""
    keep, q_tilde, d_tilde = _raw_path_predictions(data, nuisances, variant)
    rows = data.rows[keep]
    targets = (data.origins + data.steps)[keep].astype(float)
    cal = NuisanceCalibration.zero(panel.n_articles)
    cal.week_center = float(targets.mean())
    cal.period = panel.season_period
    cal.shifts = panel.season_shift.astype(float)
    basis = cal._basis(rows, targets)
    cal.outcome_coef = _article_basis_fit(rows, basis, data.y_demand[keep] - q_tilde, panel.n_articles)
    if nuisances.treatment_even is not None:
        cal.treatment_coef = _article_basis_fit(
            rows, basis, data.y_discount[keep] - d_tilde, panel.n_articles
        )
    return cal


def build_effect_training(
    panel: Panel,
    data: WindowTrainingData,
    nuisances: NuisanceSet,
    variant: str = "cf",
    calibration: NuisanceCalibration | None = None,
) -> EffectTrainingData:
    """Attach nuisance predictions to every training row.

    cf: rows are scored by the opposite-parity nets. nocf: same-parity nets.
    ss: only odd rows are kept, scored by the even-trained nets.
    """
    keep, q_tilde, d_tilde = _raw_path_predictions(data, nuisances, variant)
    rows = data.rows[keep]
    if calibration is not None:
        targets = (data.origins + data.steps)[keep].astype(float)
        q_tilde = np.maximum(q_tilde + calibration.outcome_offset(rows, targets), 1e-6)
        d_tilde = d_tilde + calibration.treatment_offset(rows, targets)
    return EffectTrainingData(
        X=data.X_effect[keep],
        q_tilde=q_tilde,
        d_tilde=d_tilde,
        d=data.y_discount[keep],
        q=data.y_demand[keep],
        article_ids=panel.article_ids[rows],
        even_mask=data.even_mask[keep],
    )


def _elastic_effect_adapter(loss: str):
    def adapter(out, aux):
        psi = out[:, 0]
        ratio = (1.0 - aux["d"]) / (1.0 - np.minimum(aux["d_tilde"], D_TILDE_CLAMP))
        q_hat = aux["q_tilde"] * ratio**psi
        err = q_hat - aux["q"]
        n = out.shape[0]
        dq_dpsi = q_hat * np.log(ratio)
        if loss == "l1":
            return float(np.mean(np.abs(err))), (np.sign(err) * dq_dpsi / n)[:, None]
        return float(np.mean(err**2)), (2.0 * err * dq_dpsi / n)[:, None]

    return adapter


def _linear_effect_adapter(loss: str):
    def adapter(out, aux):
        psi = out[:, 0]
        delta = aux["d"] - aux["d_tilde"]
        pre = aux["q_tilde"] + psi * delta
        q_hat = np.maximum(pre, 0.0)
        err = q_hat - aux["q"]
        n = out.shape[0]
        dq_dpsi = delta * (pre > 0.0)
        if loss == "l1":
            return float(np.mean(np.abs(err))), (np.sign(err) * dq_dpsi / n)[:, None]
        return float(np.mean(err**2)), (2.0 * err * dq_dpsi / n)[:, None]

    return adapter


def _effect_scale_and_start(eff_data: EffectTrainingData, head_kind: str) -> tuple[float, float]:
    """Output scale and warm-start level for the effect head.

    The scale is the slope magnitude that would explain all residual outcome
    variance, so the net learns per-article deviations in O(1) units; the
    warm start is the global residual-on-residual slope.
    """
    res = residuals(eff_data.q, eff_data.d, eff_data.q_tilde, eff_data.d_tilde, head_kind)
    sd_treat = float(res.treatment.std())
    scale = max(float(res.outcome.std()) / max(sd_treat, 1e-3), 1.0)
    denom = float(res.treatment @ res.treatment)
    psi0 = float(res.treatment @ res.outcome) / denom if denom > 1e-12 else 0.0
    return scale, psi0


def _warm_start_psi(effect: Network, scale: float, psi0: float, head_kind: str) -> None:
    effect.set_output_scale(scale)
    if head_kind == "elastic":
        # raw bias z with -softplus(z)*scale = psi0; only reachable for psi0 < 0
        if psi0 < -1e-6 * scale:
            effect.set_output_bias(softplus_inverse(-psi0 / scale))
    else:
        effect.set_output_bias(psi0 / scale)


def fit_effect(
    eff_data: EffectTrainingData,
    cfg: ModelConfig,
) -> Network:
    """Train the single effect net psi(z) through the demand head."""
    activation = "negative_softplus" if cfg.head_kind == "elastic" else "identity"
    net = _network(cfg, eff_data.X.shape[1], activation, seed_tag=50)
    net.set_input_normalization(eff_data.X.mean(axis=0), eff_data.X.std(axis=0))
    scale, psi0 = _effect_scale_and_start(eff_data, cfg.head_kind)
    _warm_start_psi(net, scale, psi0, cfg.head_kind)
    adapter = (
        _elastic_effect_adapter(cfg.effect_loss)
        if cfg.head_kind == "elastic"
        else _linear_effect_adapter(cfg.effect_loss)
    )
    tc = TrainConfig(
        loss=cfg.effect_loss,
        learning_rate=cfg.effect_learning_rate,
        epochs=cfg.effect_epochs,
        batch_size=cfg.effect_batch_size,
        weight_decay=cfg.effect_weight_decay,
        lr_schedule=cfg.lr_schedule,
        lr_gamma=cfg.lr_gamma,
        seed=_derive_seed(cfg.seed, 51),
    )
    aux = {
        "q_tilde": eff_data.q_tilde,
        "d_tilde": eff_data.d_tilde,
        "d": eff_data.d,
        "q": eff_data.q,
    }
    train_with_adapter(net, eff_data.X, aux, adapter, tc)
    return net


def fit_dml(
    panel: Panel,
    window: tuple[int, int],
    cfg: ModelConfig,
    variant: str = "cf",
    sdml: bool = False,
    data: WindowTrainingData | None = None,
) -> DmlModel:
    """Full two-stage fit of the forecaster or one of its ablation variants."""
    if data is None:
        data = prepare_window(panel, window, cfg)
    nuisances = fit_nuisances(panel, data, cfg, sdml=sdml, sample_split=(variant == "ss"))
    if cfg.calibrate_nuisances:
        cal_cf = path_calibration(panel, data, nuisances, "ss" if variant == "ss" else "cf")
        cal_f = cal_cf if variant == "ss" else path_calibration(panel, data, nuisances, "nocf")
    else:
        cal_cf = NuisanceCalibration.zero(panel.n_articles)
        cal_f = cal_cf
    cal_train = {"cf": cal_cf, "nocf": cal_f, "ss": cal_cf}[variant]
    eff_data = build_effect_training(panel, data, nuisances, variant=variant, calibration=cal_train)
    effect = fit_effect(eff_data, cfg)
    return DmlModel(
        outcome_even=nuisances.outcome_even,
        outcome_odd=nuisances.outcome_odd,
        treatment_even=nuisances.treatment_even,
        treatment_odd=nuisances.treatment_odd,
        effect=effect,
        head_kind=cfg.head_kind,
        variant=variant,
        sdml=sdml,
        feature_spec=cfg.feature_spec(),
        effect_feature_spec=cfg.effect_feature_spec(),
        horizon=cfg.horizon,
        window=tuple(window),
        config=cfg,
        article_ids=panel.article_ids.copy(),
        calibration_cf=cal_cf,
        calibration_f=cal_f,
        train_article_ids=nuisances.train_article_ids,
    )


def fit_sdml(panel: Panel, window, cfg: ModelConfig, variant: str = "cf", data=None) -> DmlModel:
    """Ablation without treatment residualization: d_tilde is identically 0."""
    return fit_dml(panel, window, cfg, variant=variant, sdml=True, data=data)


def fit_no_crossfit_variant(panel: Panel, window, cfg: ModelConfig, sdml: bool = False, data=None) -> DmlModel:
    """Effect-training rows scored by their own half's nuisance nets."""
    return fit_dml(panel, window, cfg, variant="nocf", sdml=sdml, data=data)


def fit_sample_split_variant(panel: Panel, window, cfg: ModelConfig, sdml: bool = False, data=None) -> DmlModel:
    """Nuisances on the even half only; effect trained on the odd half."""
    return fit_dml(panel, window, cfg, variant="ss", sdml=sdml, data=data)


# ---------------------------------------------------------------------------
# single-model baseline (S-learner with a monotone or linear demand head)
# ---------------------------------------------------------------------------


@dataclass
class TfModel:
    """One network whose trunk sees the nuisance features and whose head
    consumes the future discount."""

    net: Network
    head_kind: str
    segments: int
    feature_spec: FeatureSpec
    horizon: int
    window: tuple[int, int]
    config: ModelConfig

    @property
    def kind(self) -> str:
        return "tf"

    def submodels(self) -> dict[str, Network]:
        return {"joint": self.net}


def fit_tf_baseline(
    panel: Panel,
    window: tuple[int, int],
    cfg: ModelConfig,
    data: WindowTrainingData | None = None,
) -> TfModel:
    """Jointly train the outcome trunk and the discount head on all articles."""
    if data is None:
        data = prepare_window(panel, window, cfg)
    if cfg.head_kind == "elastic":
        activations = ("softplus",) + ("negative_softplus",) * cfg.tf_segments
    else:
        activations = ("softplus", "identity")
    net = _network(cfg, data.X.shape[1], activations, seed_tag=60)
    net.set_input_normalization(data.X.mean(axis=0), data.X.std(axis=0))
    # demand trunk learns in units of the demand spread; head slopes in units
    # of the slope that would explain the full demand spread
    q_scale = max(float(data.y_demand.std()), 1e-3)
    if cfg.head_kind == "elastic":
        r_q = np.log1p(data.y_demand) - np.log1p(data.y_demand).mean()
        r_d = np.log1p(-data.y_discount)
        slope_scale = max(float(r_q.std()) / max(float(r_d.std()), 1e-3), 1.0)
    else:
        slope_scale = max(q_scale / max(float(data.y_discount.std()), 1e-3), 1.0)
    scales = np.array([q_scale] + [slope_scale] * (len(activations) - 1))
    net.set_output_scale(scales)
    bias = np.zeros(len(activations))
    bias[0] = softplus_inverse(max(float(data.y_demand.mean()), 1e-6) / q_scale)
    if cfg.head_kind == "linear":
        d_centered = data.y_discount - data.y_discount.mean()
        var_d = float(d_centered @ d_centered)
        if var_d > 1e-12:
            slope0 = float(d_centered @ (data.y_demand - data.y_demand.mean())) / var_d
            bias[1] = slope0 / slope_scale
    net.set_output_bias(bias)

    loss = cfg.loss
    if cfg.head_kind == "elastic":
        basis_all = piecewise_log_basis(data.y_discount, cfg.tf_segments)

        def adapter(out, aux):
            q_raw = out[:, 0]
            slopes = out[:, 1:]
            basis = aux["basis"]
            scale = np.exp((slopes * basis).sum(axis=1))
            q_hat = q_raw * scale
            err = q_hat - aux["q"]
            n = out.shape[0]
            if loss == "l1":
                outer = np.sign(err) / n
            else:
                outer = 2.0 * err / n
            grad = np.empty_like(out)
            grad[:, 0] = outer * scale
            grad[:, 1:] = (outer * q_hat)[:, None] * basis
            val = float(np.mean(np.abs(err))) if loss == "l1" else float(np.mean(err**2))
            return val, grad

        aux = {"q": data.y_demand, "basis": basis_all}
    else:

        def adapter(out, aux):
            q_raw = out[:, 0]
            psi = out[:, 1]
            pre = q_raw + psi * aux["d"]
            q_hat = np.maximum(pre, 0.0)
            err = q_hat - aux["q"]
            n = out.shape[0]
            if loss == "l1":
                outer = np.sign(err) / n
            else:
                outer = 2.0 * err / n
            alive = pre > 0.0
            grad = np.empty_like(out)
            grad[:, 0] = outer * alive
            grad[:, 1] = outer * alive * aux["d"]
            val = float(np.mean(np.abs(err))) if loss == "l1" else float(np.mean(err**2))
            return val, grad

        aux = {"q": data.y_demand, "d": data.y_discount}

    tc = TrainConfig(
        loss=cfg.loss,
        learning_rate=cfg.learning_rate,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        weight_decay=cfg.weight_decay,
        lr_schedule=cfg.lr_schedule,
        lr_gamma=cfg.lr_gamma,
        seed=_derive_seed(cfg.seed, 61),
    )
    train_with_adapter(net, data.X, aux, adapter, tc)
    return TfModel(
        net=net,
        head_kind=cfg.head_kind,
        segments=cfg.tf_segments,
        feature_spec=cfg.feature_spec(),
        horizon=cfg.horizon,
        window=tuple(window),
        config=cfg,
    )


def fit_forecaster(panel: Panel, window, cfg: ModelConfig, kind: str, data=None):
    """Dispatch on the model roster name."""
    if kind == "dml":
        return fit_dml(panel, window, cfg, variant="cf", data=data)
    if kind == "dml-nocf":
        return fit_dml(panel, window, cfg, variant="nocf", data=data)
    if kind == "dml-ss":
        return fit_dml(panel, window, cfg, variant="ss", data=data)
    if kind == "sdml":
        return fit_sdml(panel, window, cfg, variant="cf", data=data)
    if kind == "sdml-nocf":
        return fit_sdml(panel, window, cfg, variant="nocf", data=data)
    if kind == "tf":
        return fit_tf_baseline(panel, window, cfg, data=data)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def _scenario_matrix(panel: Panel, request: ForecastRequest) -> np.ndarray:
    """Discount matrix (n_articles, horizon) for the requested scenario."""
    h = request.horizon
    weeks = request.origin + 1 + np.arange(h)
    if (weeks >= panel.n_weeks).any():
        raise InferenceError("forecast horizon runs past the panel")
    if isinstance(request.discount_scenario, str):
        if request.discount_scenario != "logged":
            raise InferenceError(f"unknown scenario {request.discount_scenario!r}")
        return panel.discount[:, weeks]
    forced = np.asarray(request.discount_scenario, dtype=float)
    return np.broadcast_to(forced, (panel.n_articles, h)).copy() if forced.ndim <= 1 else forced


def _model_row_map(model: DmlModel, panel: Panel) -> np.ndarray | None:
    """Map panel rows to the model's training-panel article index."""
    if model.article_ids.size == 0:
        return None
    pos = {int(a): k for k, a in enumerate(model.article_ids)}
    unseen = [int(a) for a in panel.article_ids if int(a) not in pos]
    if unseen:
        raise InferenceError(f"articles unseen at training time: {unseen[:5]}")
    return np.array([pos[int(a)] for a in panel.article_ids])


def _path_predictions(model: DmlModel, X: np.ndarray, even_rows: np.ndarray, swap: bool):
    """(q_tilde, d_tilde) per flat row using the chosen parity routing."""
    n = X.shape[0]
    q_tilde = np.empty(n)
    d_tilde = np.zeros(n)
    for parity, mask in (("even", even_rows), ("odd", ~even_rows)):
        if not mask.any():
            continue
        if model.variant == "ss":
            outcome, treatment = model.outcome_even, model.treatment_even
        else:
            source = {"even": "odd", "odd": "even"}[parity] if swap else parity
            outcome = getattr(model, f"outcome_{source}")
            treatment = getattr(model, f"treatment_{source}")
        q_tilde[mask] = outcome.predict(X[mask])[:, 0]
        if treatment is not None:
            d_tilde[mask] = treatment.predict(X[mask])[:, 0]
    return q_tilde, d_tilde


def predict(model: DmlModel | TfModel, panel: Panel, request: ForecastRequest) -> np.ndarray:
    """Forecast demand for every article, shape (n_articles, horizon)."""
    h = request.horizon
    n = panel.n_articles
    rows = np.repeat(np.arange(n), h)
    origins = np.full(n * h, request.origin)
    steps = np.tile(np.arange(1, h + 1), n)
    d_matrix = _scenario_matrix(panel, request)
    d_flat = d_matrix.reshape(-1)

    if isinstance(model, TfModel):
        X = feature_matrix(panel, rows, origins, steps, model.feature_spec)
        out = model.net.predict(X)
        if model.head_kind == "elastic":
            q_hat = tf_head_elastic(out[:, 0], out[:, 1:], d_flat)
        else:
            q_hat = tf_head_linear(out[:, 0], out[:, 1], d_flat)
        return q_hat.reshape(n, h)

    X = feature_matrix(panel, rows, origins, steps, model.feature_spec)
    X_eff = feature_matrix(
        panel, np.arange(n), np.full(n, request.origin), np.zeros(n, dtype=int), model.effect_feature_spec
    )
    psi = np.repeat(model.effect.predict(X_eff)[:, 0], h)
    even_rows = panel.article_ids[rows] % 2 == 0
    head = effect_head_elastic if model.head_kind == "elastic" else effect_head_linear
    idx_map = _model_row_map(model, panel)

    target_weeks = (origins + steps).astype(float)

    def one_path(swap: bool) -> np.ndarray:
        q_tilde, d_tilde = _path_predictions(model, X, even_rows, swap)
        cal = model.calibration_cf if swap else model.calibration_f
        if cal is not None and idx_map is not None:
            m_rows = idx_map[rows]
            q_tilde = np.maximum(q_tilde + cal.outcome_offset(m_rows, target_weeks), 1e-6)
            if not model.sdml:
                d_tilde = d_tilde + cal.treatment_offset(m_rows, target_weeks)
        return np.maximum(head(q_tilde, d_flat, d_tilde, psi), 0.0)

    if request.mode == "cross_fit":
        q_hat = one_path(swap=True)
    elif request.mode == "forecast":
        q_hat = one_path(swap=False)
    else:
        q_hat = ensemble_demand(one_path(swap=True), one_path(swap=False))
    return q_hat.reshape(n, h)


def save_model(model: DmlModel | TfModel, out_dir) -> dict:
    """Write a model directory: one parameter dump per submodel + manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    nets = model.submodels()
    for name, net in nets.items():
        net.save(out / f"{name}.json")
    manifest = {
        "format": "elastic-dml-model",
        "version": 1,
        "kind": model.kind,
        "head_kind": model.head_kind,
        "horizon": model.horizon,
        "window": list(model.window),
        "feature_spec": model.feature_spec.to_dict(),
        "config": model.config.to_dict(),
        "submodels": sorted(nets),
    }
    if isinstance(model, DmlModel):
        manifest["variant"] = model.variant
        manifest["sdml"] = model.sdml
        manifest["effect_feature_spec"] = model.effect_feature_spec.to_dict()
        manifest["article_ids"] = model.article_ids.tolist()
        for tag, cal in (("cf", model.calibration_cf), ("f", model.calibration_f)):
            if cal is not None:
                manifest[f"calibration_{tag}"] = cal.to_dict()
    else:
        manifest["segments"] = model.segments
    (out / "model.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return manifest


def load_model(model_dir) -> DmlModel | TfModel:
    """Reload a model directory written by save_model."""
    out = Path(model_dir)
    manifest = json.loads((out / "model.json").read_text(encoding="utf-8"))
    if manifest.get("format") != "elastic-dml-model":
        raise ValueError(f"{model_dir} is not a model directory")
    nets = {name: Network.load(out / f"{name}.json") for name in manifest["submodels"]}
    spec = FeatureSpec(**manifest["feature_spec"])
    cfg = ModelConfig.from_dict(manifest["config"])
    if manifest["kind"] == "tf":
        return TfModel(
            net=nets["joint"],
            head_kind=manifest["head_kind"],
            segments=manifest["segments"],
            feature_spec=spec,
            horizon=manifest["horizon"],
            window=tuple(manifest["window"]),
            config=cfg,
        )
    def calibration(tag: str) -> NuisanceCalibration | None:
        payload = manifest.get(f"calibration_{tag}")
        return None if payload is None else NuisanceCalibration.from_dict(payload)

    return DmlModel(
        outcome_even=nets["outcome_even"],
        outcome_odd=nets.get("outcome_odd"),
        treatment_even=nets.get("treatment_even"),
        treatment_odd=nets.get("treatment_odd"),
        effect=nets["effect"],
        head_kind=manifest["head_kind"],
        variant=manifest["variant"],
        sdml=manifest["sdml"],
        feature_spec=spec,
        effect_feature_spec=FeatureSpec(**manifest["effect_feature_spec"]),
        horizon=manifest["horizon"],
        window=tuple(manifest["window"]),
        config=cfg,
        article_ids=np.array(manifest.get("article_ids", []), dtype=int),
        calibration_cf=calibration("cf"),
        calibration_f=calibration("f"),
    )


def effect_estimates(model: DmlModel | TfModel, panel: Panel, origin: int) -> np.ndarray:
    """Per-article fitted head parameter psi at the forecast origin.

    For the single-model baseline the head parameter varies with the horizon
    step, so it is averaged over the forecast window.
    """
    n = panel.n_articles
    if isinstance(model, TfModel):
        if model.head_kind != "linear":
            raise InferenceError("per-article effect readout is defined for the linear head")
        h = model.horizon
        rows = np.repeat(np.arange(n), h)
        origins = np.full(n * h, origin)
        steps = np.tile(np.arange(1, h + 1), n)
        X = feature_matrix(panel, rows, origins, steps, model.feature_spec)
        return model.net.predict(X)[:, 1].reshape(n, h).mean(axis=1)
    X_eff = feature_matrix(panel, np.arange(n), np.full(n, origin), np.zeros(n, dtype=int), model.effect_feature_spec)
    return model.effect.predict(X_eff)[:, 0]
