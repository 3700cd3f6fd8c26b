"""Panel data containers and file formats.

A Panel holds weekly (demand, discount, stock, price) series for a set of
articles plus their static attributes. Simulated panels additionally carry
truth channels (latent base demand and the per-article price effect) that
power counterfactual queries; panels loaded without a truth file are treated
as external observational data.

File formats (CSV with header, UTF-8, '.' decimal, floats at 9 significant
digits):

  panel.csv    article_id, week, demand, discount, stock, price
  statics.csv  article_id, cat_d, cat_k, season_shift, black_price, promo
  truth.csv    article_id, week, base_demand, effect
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

FLOAT_FMT = "%.9g"

PANEL_COLUMNS = ["article_id", "week", "demand", "discount", "stock", "price"]
STATICS_COLUMNS = ["article_id", "cat_d", "cat_k", "season_shift", "black_price", "promo"]
TRUTH_COLUMNS = ["article_id", "week", "base_demand", "effect"]


class PanelSchemaError(ValueError):
    """A panel file does not match the expected schema."""


class UnsupportedPanelError(ValueError):
    """Operation needs simulator truth channels that this panel lacks."""


@dataclass
class ArticleStatic:
    """Static attributes of one article.

    Latent simulator parameters (alpha_d, beta_k, gamma, sigma_tau,
    effect_magnitude, initial_stock) are None for external panels.
    """

    article_id: int
    cat_d: int
    cat_k: int
    season_shift: int
    black_price: float
    promo: int
    alpha_d: float | None = None
    beta_k: float | None = None
    gamma: float | None = None
    sigma_tau: float | None = None
    effect_magnitude: float | None = None
    initial_stock: float | None = None
    attempt: int = 0  # resampling attempt whose noise streams realized this article


@dataclass
class SeriesPoint:
    """One (article, week) observation; base_demand is simulator-only."""

    week: int
    demand: float
    discount: float
    stock: float
    price: float
    base_demand: float | None = None


@dataclass
class Panel:
    """Weekly panel of articles; the universal interchange object.

    Series arrays are shaped (n_articles, n_weeks) and indexed by row, with
    `article_ids` mapping rows to external ids.
    """

    article_ids: np.ndarray          # (n,) int
    cat_d: np.ndarray                # (n,) int, 1-based
    cat_k: np.ndarray                # (n,) int, 1-based
    season_shift: np.ndarray         # (n,) int
    black_price: np.ndarray          # (n,) float, undiscounted price p0
    promo: np.ndarray                # (n,) int in {0,1}
    demand: np.ndarray               # (n, T) float
    discount: np.ndarray             # (n, T) float
    stock: np.ndarray                # (n, T) float
    price: np.ndarray                # (n, T) float
    base_demand: np.ndarray | None = None   # (n, T) truth channel
    effect: np.ndarray | None = None         # (n,) truth channel (magnitude e_i > 0)
    provenance: str = "external"              # "simulated" | "external"
    master_seed: int | None = None
    season_period: int = 30
    statics: list[ArticleStatic] = field(default_factory=list)

    def __post_init__(self) -> None:
        n, t = self.demand.shape
        for name in ("discount", "stock", "price"):
            if getattr(self, name).shape != (n, t):
                raise PanelSchemaError(f"series '{name}' shape mismatch")
        if len(self.article_ids) != n:
            raise PanelSchemaError("statics/series article count mismatch")
        self._row_of = {int(a): i for i, a in enumerate(self.article_ids)}

    @property
    def n_articles(self) -> int:
        return self.demand.shape[0]

    @property
    def n_weeks(self) -> int:
        return self.demand.shape[1]

    @property
    def is_simulated(self) -> bool:
        return self.provenance == "simulated" and self.base_demand is not None and self.effect is not None

    def row(self, article_id: int) -> int:
        try:
            return self._row_of[int(article_id)]
        except KeyError:
            raise KeyError(f"unknown article_id {article_id}") from None

    def static(self, article_id: int) -> ArticleStatic:
        i = self.row(article_id)
        if self.statics:
            return self.statics[i]
        return ArticleStatic(
            article_id=int(self.article_ids[i]),
            cat_d=int(self.cat_d[i]),
            cat_k=int(self.cat_k[i]),
            season_shift=int(self.season_shift[i]),
            black_price=float(self.black_price[i]),
            promo=int(self.promo[i]),
            effect_magnitude=None if self.effect is None else float(self.effect[i]),
        )

    def point(self, article_id: int, week: int) -> SeriesPoint:
        i = self.row(article_id)
        qb = None if self.base_demand is None else float(self.base_demand[i, week])
        return SeriesPoint(
            week=week,
            demand=float(self.demand[i, week]),
            discount=float(self.discount[i, week]),
            stock=float(self.stock[i, week]),
            price=float(self.price[i, week]),
            base_demand=qb,
        )

    def subset(self, rows: np.ndarray) -> "Panel":
        """Panel restricted to the given row indices (article order preserved)."""
        return Panel(
            article_ids=self.article_ids[rows],
            cat_d=self.cat_d[rows],
            cat_k=self.cat_k[rows],
            season_shift=self.season_shift[rows],
            black_price=self.black_price[rows],
            promo=self.promo[rows],
            demand=self.demand[rows],
            discount=self.discount[rows],
            stock=self.stock[rows],
            price=self.price[rows],
            base_demand=None if self.base_demand is None else self.base_demand[rows],
            effect=None if self.effect is None else self.effect[rows],
            provenance=self.provenance,
            master_seed=self.master_seed,
            season_period=self.season_period,
            statics=[self.statics[i] for i in rows] if self.statics else [],
        )

    def copy(self) -> "Panel":
        p = self.subset(np.arange(self.n_articles))
        p.statics = list(self.statics)
        return p

    # -- file IO ----------------------------------------------------------

    def panel_frame(self) -> pd.DataFrame:
        n, t = self.demand.shape
        return pd.DataFrame(
            {
                "article_id": np.repeat(self.article_ids, t),
                "week": np.tile(np.arange(t), n),
                "demand": self.demand.ravel(),
                "discount": self.discount.ravel(),
                "stock": self.stock.ravel(),
                "price": self.price.ravel(),
            }
        )

    def statics_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "article_id": self.article_ids,
                "cat_d": self.cat_d,
                "cat_k": self.cat_k,
                "season_shift": self.season_shift,
                "black_price": self.black_price,
                "promo": self.promo,
            }
        )

    def truth_frame(self) -> pd.DataFrame:
        if self.base_demand is None or self.effect is None:
            raise UnsupportedPanelError("panel has no truth channels")
        n, t = self.demand.shape
        return pd.DataFrame(
            {
                "article_id": np.repeat(self.article_ids, t),
                "week": np.tile(np.arange(t), n),
                "base_demand": self.base_demand.ravel(),
                "effect": np.repeat(self.effect, t),
            }
        )

    def write_csv(self, out_dir: str | Path) -> dict[str, Path]:
        """Write panel.csv / statics.csv (+ truth.csv for simulated panels)."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "panel": out / "panel.csv",
            "statics": out / "statics.csv",
        }
        self.panel_frame().to_csv(paths["panel"], index=False, float_format=FLOAT_FMT)
        self.statics_frame().to_csv(paths["statics"], index=False, float_format=FLOAT_FMT)
        if self.is_simulated:
            paths["truth"] = out / "truth.csv"
            self.truth_frame().to_csv(paths["truth"], index=False, float_format=FLOAT_FMT)
        return paths


def _require_columns(df: pd.DataFrame, cols: list[str], name: str) -> None:
    missing = [c for c in cols if c not in df.columns]
    if missing:
        raise PanelSchemaError(f"{name} is missing columns {missing}")


def load_panel(
    panel_csv: str | Path,
    statics_csv: str | Path,
    truth_csv: str | Path | None = None,
    season_period: int = 30,
) -> Panel:
    """Assemble a Panel from CSV files; truth.csv marks it as simulated."""
    pf = pd.read_csv(panel_csv)
    sf = pd.read_csv(statics_csv)
    _require_columns(pf, PANEL_COLUMNS, "panel.csv")
    _require_columns(sf, STATICS_COLUMNS, "statics.csv")

    sf = sf.sort_values("article_id").reset_index(drop=True)
    ids = sf["article_id"].to_numpy()
    pf = pf.sort_values(["article_id", "week"])
    weeks = np.sort(pf["week"].unique())
    t = len(weeks)
    if not np.array_equal(weeks, np.arange(t)):
        raise PanelSchemaError("weeks must be contiguous starting at 0")
    if len(pf) != len(ids) * t:
        raise PanelSchemaError("panel.csv is not a balanced article x week grid")

    def grid(col: str) -> np.ndarray:
        return pf[col].to_numpy(dtype=float).reshape(len(ids), t)

    base = None
    effect = None
    provenance = "external"
    if truth_csv is not None:
        tf = pd.read_csv(truth_csv)
        _require_columns(tf, TRUTH_COLUMNS, "truth.csv")
        tf = tf.sort_values(["article_id", "week"])
        if len(tf) != len(ids) * t:
            raise PanelSchemaError("truth.csv does not match the panel grid")
        base = tf["base_demand"].to_numpy(dtype=float).reshape(len(ids), t)
        effect = tf["effect"].to_numpy(dtype=float).reshape(len(ids), t)[:, 0]
        provenance = "simulated"

    return Panel(
        article_ids=ids.astype(int),
        cat_d=sf["cat_d"].to_numpy(dtype=int),
        cat_k=sf["cat_k"].to_numpy(dtype=int),
        season_shift=sf["season_shift"].to_numpy(dtype=int),
        black_price=sf["black_price"].to_numpy(dtype=float),
        promo=sf["promo"].to_numpy(dtype=int),
        demand=grid("demand"),
        discount=grid("discount"),
        stock=grid("stock"),
        price=grid("price"),
        base_demand=base,
        effect=effect,
        provenance=provenance,
        season_period=season_period,
    )
