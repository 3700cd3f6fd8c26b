import numpy as np
import pandas as pd
import pytest

from elastic_dml.evaluate import (
    DegenerateTruthError,
    EvalReport,
    LengthMismatchError,
    ModelSpec,
    ProtocolConfig,
    ProtocolError,
    ReplacementError,
    aggregate_metrics,
    demand_error,
    effect_error,
    holdout_replacement,
    mae,
    mse,
    run_protocol,
)
from elastic_dml.panel import UnsupportedPanelError
from elastic_dml.sim import counterfactual_matrix


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def test_mae_mse_hand_cases():
    assert mae([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mae([2.0], [1.0]) == 1.0
    assert mse([2.0], [1.0]) == 1.0
    assert mae([0.0, 4.0], [2.0, 2.0]) == 2.0
    assert mse([0.0, 4.0], [2.0, 2.0]) == 4.0
    with pytest.raises(LengthMismatchError):
        mae([1.0], [1.0, 2.0])
    with pytest.raises(LengthMismatchError):
        mse([], [])


def test_demand_error_hand_cases():
    assert demand_error([[1.0]], [[1.0]], [1.0]) == 0.0
    assert demand_error([[2.0]], [[1.0]], [1.0]) == pytest.approx(1.0, abs=1e-12)
    # two articles with prices 1 and 2: sqrt(9/22)
    value = demand_error([[1.0], [1.0]], [[2.0], [3.0]], [1.0, 2.0])
    assert value == pytest.approx(np.sqrt(9.0 / 22.0), abs=1e-12)


def test_demand_error_validation():
    with pytest.raises(DegenerateTruthError):
        demand_error([[1.0]], [[0.0]], [1.0])
    with pytest.raises(ValueError):
        demand_error([[1.0]], [[1.0]], [0.0])
    with pytest.raises(LengthMismatchError):
        demand_error([[1.0, 2.0]], [[1.0]], [1.0])


def test_demand_error_scale_invariance(rng):
    for _ in range(1000):
        n, t = rng.integers(1, 6), rng.integers(1, 5)
        pred = rng.uniform(0, 50, (n, t))
        truth = rng.uniform(0.1, 50, (n, t))
        prices = rng.uniform(0.1, 20, n)
        base = demand_error(pred, truth, prices)
        lam = rng.uniform(0.1, 10)
        assert demand_error(lam * pred, lam * truth, prices) == pytest.approx(base, rel=1e-9)
        assert demand_error(pred, truth, lam * prices) == pytest.approx(base, rel=1e-9)


def test_effect_error_cases():
    psi = np.array([1.0, -2.0, 3.0])
    assert effect_error(psi, psi) == (0.0, 0.0)
    e_mae, e_mse = effect_error(np.zeros(3), psi)
    assert e_mae == pytest.approx(2.0)
    assert e_mse == pytest.approx((1 + 4 + 9) / 3)
    with pytest.raises(LengthMismatchError):
        effect_error(psi, psi[:2])


# ---------------------------------------------------------------------------
# holdout replacement
# ---------------------------------------------------------------------------


def test_holdout_replacement_contract(tiny_panel):
    target = [30, 31, 32]
    out = holdout_replacement(tiny_panel, target, seed=9)
    assert out.demand.shape == tiny_panel.demand.shape
    untouched = np.setdiff1d(np.arange(tiny_panel.n_weeks), target)
    np.testing.assert_array_equal(out.demand[:, untouched], tiny_panel.demand[:, untouched])
    # replaced rows match some contiguous non-target source triple
    for i in range(tiny_panel.n_articles):
        block = np.stack([out.demand[i, target], out.discount[i, target], out.price[i, target]])
        found = False
        for s in range(tiny_panel.n_weeks - 2):
            if s + 2 >= target[0] and s <= target[-1]:
                continue
            src = np.stack(
                [
                    tiny_panel.demand[i, s : s + 3],
                    tiny_panel.discount[i, s : s + 3],
                    tiny_panel.price[i, s : s + 3],
                ]
            )
            if np.array_equal(block, src):
                found = True
                break
        assert found


def test_holdout_replacement_deterministic(tiny_panel):
    a = holdout_replacement(tiny_panel, [10, 11, 12], seed=4)
    b = holdout_replacement(tiny_panel, [10, 11, 12], seed=4)
    np.testing.assert_array_equal(a.demand, b.demand)
    c = holdout_replacement(tiny_panel, [10, 11, 12], seed=5)
    assert not np.array_equal(a.demand, c.demand)


def test_holdout_replacement_errors(tiny_panel):
    with pytest.raises(ReplacementError):
        holdout_replacement(tiny_panel, [10, 11], seed=0)
    with pytest.raises(ReplacementError):
        holdout_replacement(tiny_panel, [10, 12, 14], seed=0)
    with pytest.raises(ReplacementError):
        holdout_replacement(tiny_panel, [58, 59, 60], seed=0)


# ---------------------------------------------------------------------------
# protocol
# ---------------------------------------------------------------------------


def tiny_protocol(models, n_seeds=2):
    return ProtocolConfig(
        models=models,
        train_windows=((20, 40), (25, 45)),
        horizon=3,
        off_policy_levels=(0.0, 0.25, 0.5),
        n_seeds=n_seeds,
        base_seed=123,
    )


def test_protocol_validation(tiny_panel):
    with pytest.raises(ProtocolError):
        ProtocolConfig(models=[])
    with pytest.raises(ProtocolError):
        ProtocolConfig(models=[ModelSpec(kind="oracle")], off_policy_levels=(0.6,))
    with pytest.raises(ProtocolError):
        ModelSpec(kind="prophet")
    cfg = ProtocolConfig(models=[ModelSpec(kind="oracle")], train_windows=((30, 58),), horizon=3)
    with pytest.raises(ProtocolError):
        cfg.validate_against(tiny_panel)


def test_protocol_rows_and_oracle(tiny_panel):
    cfg = tiny_protocol([ModelSpec(kind="oracle"), ModelSpec(kind="naive", naive_kind="last_value")])
    report = run_protocol(tiny_panel, cfg, workers=1)
    m = report.metrics
    # 2 windows x 2 policies x 2 seeds rows per metric per model
    for model in ("oracle", "naive-last_value"):
        assert len(m[(m.model == model) & (m.metric == "MAE")]) == 8
    oracle_rows = m[(m.model == "oracle") & (m.metric.isin(["MAE", "MSE", "demand_error"]))]
    assert (oracle_rows.value.abs() < 1e-12).all()
    eff = m[(m.model == "oracle") & (m.metric == "effect_MAE")]
    assert (eff.value.abs() < 1e-12).all()


def test_protocol_off_policy_truth_consistency(tiny_panel):
    # forcing the logged discount reproduces the logged demand through the
    # whole counterfactual harness
    weeks = np.arange(tiny_panel.n_weeks)
    for i in range(0, tiny_panel.n_articles, 5):
        cf = counterfactual_matrix(tiny_panel, weeks, tiny_panel.discount[i])[i]
        np.testing.assert_array_equal(cf, tiny_panel.demand[i])


def test_protocol_aggregates_match_recompute(tiny_panel):
    cfg = tiny_protocol([ModelSpec(kind="naive", naive_kind="last_value"), ModelSpec(kind="twfe")])
    report = run_protocol(tiny_panel, cfg, workers=1)
    again = aggregate_metrics(report.metrics)
    pd.testing.assert_frame_equal(report.aggregates, again)
    ok = report.metrics[report.metrics.status == "ok"]
    one = report.aggregates[
        (report.aggregates.model == "twfe")
        & (report.aggregates.window == "20-40")
        & (report.aggregates.policy == "off")
        & (report.aggregates.metric == "MAE")
    ]
    raw = ok[
        (ok.model == "twfe") & (ok.window == "20-40") & (ok.policy == "off") & (ok.metric == "MAE")
    ].value
    assert one["mean"].iloc[0] == pytest.approx(raw.mean(), abs=1e-12)
    assert one["sd"].iloc[0] == pytest.approx(raw.std(ddof=1), abs=1e-12)


def test_protocol_worker_invariance(tiny_panel):
    cfg = tiny_protocol([ModelSpec(kind="oracle"), ModelSpec(kind="twfe")], n_seeds=1)
    r1 = run_protocol(tiny_panel, cfg, workers=1)
    r2 = run_protocol(tiny_panel, cfg, workers=2)
    pd.testing.assert_frame_equal(r1.metrics, r2.metrics)
    pd.testing.assert_frame_equal(r1.per_level, r2.per_level)


def test_protocol_marks_failed_cells(tiny_panel):
    # seasonal naive needs 30 weeks of history; the 20-40 window origin lacks it
    cfg = ProtocolConfig(
        models=[ModelSpec(kind="naive", naive_kind="seasonal_naive")],
        train_windows=((20, 25),),
        horizon=3,
        off_policy_levels=(0.0,),
        n_seeds=1,
    )
    report = run_protocol(tiny_panel, cfg, workers=1)
    assert (report.metrics.status == "failed").all()
    assert report.metrics.value.isna().all()


def test_protocol_requires_truth(tiny_panel):
    ext = tiny_panel.copy()
    ext.provenance = "external"
    cfg = tiny_protocol([ModelSpec(kind="naive")])
    with pytest.raises(UnsupportedPanelError):
        run_protocol(ext, cfg)


def test_report_write_and_files(tmp_path, tiny_panel):
    cfg = tiny_protocol([ModelSpec(kind="oracle")], n_seeds=1)
    report = run_protocol(tiny_panel, cfg, workers=1)
    paths = report.write(tmp_path)
    assert paths["metrics"].exists() and paths["report"].exists() and paths["levels"].exists()
    loaded = pd.read_csv(paths["metrics"])
    assert list(loaded.columns) == ["model", "window", "policy", "seed", "metric", "value", "status"]


def test_small_forecaster_protocol(small_panel):
    # one real forecaster end to end through the harness at smoke scale
    spec = ModelSpec(
        kind="sdml",
        head_kind="linear",
        loss="l2",
        config={"hidden_dims": [8], "epochs": 2, "effect_epochs": 2, "lag_window": 8},
    )
    cfg = ProtocolConfig(
        models=[spec],
        train_windows=((20, 50),),
        horizon=3,
        off_policy_levels=(0.0, 0.25),
        n_seeds=1,
        base_seed=1,
    )
    report = run_protocol(small_panel, cfg, workers=1)
    ok = report.metrics[report.metrics.status == "ok"]
    assert len(ok) == 8  # 3 metrics x 2 policies + 2 effect metrics
    assert np.isfinite(ok.value).all()
