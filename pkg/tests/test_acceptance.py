"""Acceptance gate: every criterion at its stated tolerance.

Each test prints one `criterion N: PASS/FAIL` line. The panel-scale protocol
(criterion 2) dominates the runtime; everything else is seconds.
"""

import hashlib
import json
import time

import numpy as np
import pandas as pd
import pytest
from scipy import stats
from scipy.integrate import solve_ivp

from elastic_dml import dml, evaluate as ev
from elastic_dml.cli import main as cli_main
from elastic_dml.nnet import Network, NetworkSpec, gradient_check
from elastic_dml.sim import SimConfig, category_tables, simulate_policy

PANEL_SEED = 2024
PROTOCOL_SEED = 7


def announce(num: int, passed: bool, detail: str) -> None:
    print(f"\ncriterion {num}: {'PASS' if passed else 'FAIL'} ({detail})")


@pytest.fixture(scope="module")
def default_panel():
    return simulate_policy(SimConfig(n_articles=450, master_seed=PANEL_SEED))


@pytest.fixture(scope="module")
def protocol_report(default_panel):
    cfg = ev.ProtocolConfig(models=ev.desk_scale_models(), n_seeds=5, base_seed=PROTOCOL_SEED)
    started = time.time()
    report = ev.run_protocol(default_panel, cfg, workers=2)
    report.elapsed = time.time() - started
    return report


# -- criterion 1: orthogonalization beats the single learner -----------------


def test_criterion_1_dml_bias_reduction():
    started = time.time()
    theta = -2.0
    worst_dml = 0.0
    worst_ratio = np.inf
    for seed in range(5):
        rng = np.random.default_rng(seed)
        n, p = 5000, 200
        Z = rng.standard_normal((n, p))
        gamma = np.full(p, 3.0 / np.sqrt(p))
        sign = np.concatenate([np.full(p // 2, 1.0), np.full(p - p // 2, -1.0)])
        delta = 0.4 * gamma / 3.0 + 0.3 * sign / np.sqrt(p)
        d = Z @ delta + 0.5 * rng.standard_normal(n)
        q = theta * d + Z @ gamma + rng.standard_normal(n)
        err_dml = abs(dml.residualized_theta(q, d, Z, l2=150.0) - theta)
        err_s = abs(dml.slearner_theta(q, d, Z, l2=150.0) - theta)
        worst_dml = max(worst_dml, err_dml)
        worst_ratio = min(worst_ratio, err_s / max(err_dml, 1e-12))
    elapsed = time.time() - started
    passed = worst_dml <= 0.1 and worst_ratio >= 3.0 and elapsed < 60
    announce(1, passed, f"max |theta_err|={worst_dml:.4f}, min bias ratio={worst_ratio:.1f}, {elapsed:.1f}s")
    assert worst_dml <= 0.1
    assert worst_ratio >= 3.0
    assert elapsed < 60


# -- criteria 3, 4: closed-form algebra and the demand error ------------------


def test_criterion_3_elasticity_algebra():
    from elastic_dml.econ import elasticity_demand, implied_elasticity

    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(10_000):
        q0, p0, p1 = rng.uniform(0.1, 100.0, 3)
        eps = rng.uniform(-8.0, 2.0)
        q1 = elasticity_demand(q0, p0, p1, eps)
        worst = max(worst, abs(implied_elasticity(q0, q1, p0, p1) - eps))
    ode_worst = 0.0
    for eps in (-3.0, -1.0, 0.5):
        sol = solve_ivp(lambda p, q: eps * q / p, (4.0, 9.0), [50.0], rtol=1e-10, atol=1e-12)
        closed = elasticity_demand(50.0, 4.0, 9.0, eps)
        ode_worst = max(ode_worst, abs(sol.y[0, -1] - closed) / closed)
    passed = worst <= 1e-12 and ode_worst <= 1e-6
    announce(3, passed, f"round-trip max err={worst:.2e}, ODE rel err={ode_worst:.2e}")
    assert worst <= 1e-12
    assert ode_worst <= 1e-6


def test_criterion_4_demand_error():
    hand = [
        (ev.demand_error([[1.0]], [[1.0]], [1.0]), 0.0),
        (ev.demand_error([[2.0]], [[1.0]], [1.0]), 1.0),
        (ev.demand_error([[1.0], [1.0]], [[2.0], [3.0]], [1.0, 2.0]), np.sqrt(9.0 / 22.0)),
    ]
    hand_ok = all(abs(got - want) <= 1e-12 for got, want in hand)
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(1000):
        n, t = rng.integers(1, 6), rng.integers(1, 5)
        pred = rng.uniform(0, 50, (n, t))
        truth = rng.uniform(0.1, 50, (n, t))
        prices = rng.uniform(0.1, 20, n)
        lam = rng.uniform(0.1, 10)
        base = ev.demand_error(pred, truth, prices)
        worst = max(
            worst,
            abs(ev.demand_error(lam * pred, lam * truth, prices) - base),
            abs(ev.demand_error(pred, truth, lam * prices) - base),
        )
    passed = hand_ok and worst < 1e-9
    announce(4, passed, f"hand cases exact, scale-invariance max drift={worst:.2e}")
    assert hand_ok
    assert worst < 1e-9


# -- criterion 5: TWFE recovery ----------------------------------------------


def test_criterion_5_twfe_recovery():
    from elastic_dml.econ import _twfe_poisson_arrays

    started = time.time()

    def panel(eps_true, seed):
        rng = np.random.default_rng(seed)
        n, t = 200, 50
        u = rng.normal(3.0, 0.4, n)
        c = np.concatenate([[0.0], rng.normal(0.0, 0.3, t - 1)])
        d = rng.choice([0.0, 0.1, 0.2, 0.3, 0.4], size=(n, t))
        mu = np.exp(eps_true * np.log1p(-d) + u[:, None] + c[None, :])
        return rng.poisson(mu).astype(float), np.log1p(-d)

    y, x = panel(-2.0, seed=21)
    eps_hat, *_ = _twfe_poisson_arrays(y, x, tol=1e-8, max_iter=200)
    y0, x0 = panel(0.0, seed=22)
    eps_null, *_ = _twfe_poisson_arrays(y0, x0, tol=1e-8, max_iter=200)
    elapsed = time.time() - started
    passed = abs(eps_hat + 2.0) <= 0.05 and abs(eps_null) <= 0.05 and elapsed < 60
    announce(5, passed, f"eps_hat={eps_hat:.4f}, null={eps_null:.4f}, {elapsed:.1f}s")
    assert abs(eps_hat + 2.0) <= 0.05
    assert abs(eps_null) <= 0.05
    assert elapsed < 60


# -- criterion 6: simulator statistics ----------------------------------------


def test_criterion_6_simulator_statistics(default_panel):
    panel = default_panel
    mean_d = panel.discount.mean()

    t = np.arange(panel.n_weeks)
    season = np.sin(2 * np.pi * (t[None, :] + panel.season_shift[:, None]) / panel.season_period)
    rho = np.corrcoef(panel.discount.ravel(), season.ravel())[0, 1]

    # noise-free seasonal series: largest interior autocorrelation peak
    from test_sim import autocorrelation_peak_lag, flat_article, zero_noise_config

    from elastic_dml.sim import base_demand_series

    peak = autocorrelation_peak_lag(base_demand_series(zero_noise_config(), flat_article(shift=7)))

    cfg = SimConfig(n_cat_d=10_000, n_cat_k=10_000, master_seed=77)
    tables = category_tables(cfg)
    se_mean_a, se_sd_a = 3.0 / 100.0, 3.0 / np.sqrt(2e4)
    se_mean_b, se_sd_b = 50.0 / 100.0, 50.0 / np.sqrt(2e4)
    moments_ok = (
        abs(tables.alpha.mean() - 10.0) <= 3 * se_mean_a
        and abs(tables.alpha.std() - 3.0) <= 3 * se_sd_a
        and abs(tables.beta.mean() - 300.0) <= 3 * se_mean_b
        and abs(tables.beta.std() - 50.0) <= 3 * se_sd_b
    )

    passed = abs(mean_d - 0.14) <= 0.05 and peak == 30 and rho < -0.1 and moments_ok
    announce(6, passed, f"mean d={mean_d:.3f}, peak lag={peak}, rho={rho:.3f}, moments ok={moments_ok}")
    assert abs(mean_d - 0.14) <= 0.05
    assert peak == 30
    assert rho < -0.1
    assert moments_ok


# -- criterion 7: gradient checks ---------------------------------------------


def test_criterion_7_gradient_checks():
    rng = np.random.default_rng(31)
    worst = 0.0
    for trial in range(20):
        loss = "l1" if trial % 2 else "l2"
        act = ("identity", "softplus", "negative_softplus")[trial % 3]
        net = Network(NetworkSpec(input_dim=6, hidden_dims=(9, 7), output_activation=act, seed=trial))
        x = rng.standard_normal(6)
        y = float(net.forward(x)) + float(rng.choice([-1.0, 1.0]) * (1.0 + rng.random()))
        worst = max(worst, gradient_check(net, x, y, loss_kind=loss))
    passed = worst < 1e-4
    announce(7, passed, f"max relative gradient error={worst:.2e}")
    assert worst < 1e-4


# -- criterion 8: byte-identical runs at any worker count ---------------------


def digest(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_criterion_8_determinism(tmp_path):
    sim_cfg = tmp_path / "sim.json"
    sim_cfg.write_text(json.dumps({"n_articles": 12, "n_weeks": 60, "master_seed": 99}))
    assert cli_main(["simulate", "--config", str(sim_cfg), "--out", str(tmp_path / "s1"), "--workers", "1"]) == 0
    assert cli_main(["simulate", "--config", str(sim_cfg), "--out", str(tmp_path / "s2"), "--workers", "3"]) == 0
    sim_ok = all(
        digest(tmp_path / "s1" / name) == digest(tmp_path / "s2" / name)
        for name in ("panel.csv", "statics.csv", "truth.csv", "sim_config.json")
    )

    proto = tmp_path / "proto.json"
    proto.write_text(
        json.dumps(
            {
                "panel_dir": str(tmp_path / "s1"),
                "train_windows": [[20, 40], [25, 45]],
                "horizon": 3,
                "off_policy_levels": [0.0, 0.25],
                "n_seeds": 2,
                "base_seed": 3,
                "models": [{"kind": "oracle"}, {"kind": "twfe"}, {"kind": "naive"}],
            }
        )
    )
    assert cli_main(["evaluate", "--protocol", str(proto), "--out", str(tmp_path / "e1"), "--workers", "1"]) == 0
    assert cli_main(["evaluate", "--protocol", str(proto), "--out", str(tmp_path / "e2"), "--workers", "2"]) == 0
    eval_ok = all(
        digest(tmp_path / "e1" / name) == digest(tmp_path / "e2" / name)
        for name in ("metrics.csv", "report.csv", "plotdata/off_policy_levels.csv")
    )
    passed = sim_ok and eval_ok
    announce(8, passed, f"simulate identical={sim_ok}, evaluate identical={eval_ok}")
    assert sim_ok
    assert eval_ok


# -- criterion 9: head identities and ensemble bounds -------------------------


def test_criterion_9_head_identities_exact():
    rng = np.random.default_rng(41)
    n = 10_000
    q = rng.uniform(0.0, 100.0, n)
    d = rng.uniform(0.0, 0.7, n)
    psi_e = -rng.uniform(0.0, 10.0, n)
    psi_l = rng.uniform(-200.0, 200.0, n)
    elastic_ok = np.array_equal(dml.effect_head_elastic(q, d, d, psi_e), q)
    linear_ok = np.array_equal(dml.effect_head_linear(q, d, d, psi_l), q)

    a = rng.uniform(0.0, 100.0, n)
    b = rng.uniform(0.0, 100.0, n)
    mean = dml.ensemble_demand(a, b)
    lo = np.minimum(np.maximum(a, 1e-9), np.maximum(b, 1e-9))
    hi = np.maximum(np.maximum(a, 1e-9), np.maximum(b, 1e-9))
    bounds_ok = bool((mean >= lo).all() and (mean <= hi).all())
    equal_ok = np.array_equal(dml.ensemble_demand(a, a.copy()), np.maximum(a, 1e-9))

    passed = elastic_ok and linear_ok and bounds_ok and equal_ok
    announce(9, passed, f"identities exact={elastic_ok and linear_ok}, bounds exact={bounds_ok and equal_ok}")
    assert elastic_ok and linear_ok
    assert bounds_ok and equal_ok


# -- criterion 2: ablation orderings at desk scale ----------------------------


def pooled_per_seed(metrics: pd.DataFrame, model: str, policy: str, metric: str) -> np.ndarray:
    ok = metrics[(metrics.status == "ok") & (metrics.model == model)]
    rows = ok[(ok.policy == policy) & (ok.metric == metric)]
    return rows.groupby("seed")["value"].mean().sort_index().to_numpy()


def test_criterion_2_desk_scale_orderings(protocol_report):
    m = protocol_report.metrics

    dml_off = pooled_per_seed(m, "dml", "off", "MAE")
    sdml_off = pooled_per_seed(m, "sdml", "off", "MAE")
    a_wins = int((dml_off < sdml_off).sum())

    dml_eff = pooled_per_seed(m, "dml", "off", "effect_MAE")
    sdml_eff = pooled_per_seed(m, "sdml", "off", "effect_MAE")
    b_wins = int((dml_eff < sdml_eff).sum())

    nocf_off = pooled_per_seed(m, "dml-nocf", "off", "MAE")
    lo1, hi1 = dml_off.mean() - dml_off.std(ddof=1), dml_off.mean() + dml_off.std(ddof=1)
    lo2, hi2 = nocf_off.mean() - nocf_off.std(ddof=1), nocf_off.mean() + nocf_off.std(ddof=1)
    c_overlap = max(lo1, lo2) <= min(hi1, hi2)

    tf_off = pooled_per_seed(m, "tf", "off", "MAE")
    tf_on = pooled_per_seed(m, "tf", "on", "MAE")
    dml_on = pooled_per_seed(m, "dml", "on", "MAE")
    gap_on = tf_on.mean() - dml_on.mean()
    gap_off = tf_off.mean() - dml_off.mean()
    d_ok = gap_on < gap_off

    runtime_ok = protocol_report.elapsed < 1800
    passed = a_wins >= 4 and b_wins >= 4 and c_overlap and d_ok and runtime_ok
    announce(
        2,
        passed,
        f"(a) off-MAE wins {a_wins}/5 [dml {dml_off.mean():.2f} vs sdml {sdml_off.mean():.2f}]; "
        f"(b) effect-MAE wins {b_wins}/5 [{dml_eff.mean():.1f} vs {sdml_eff.mean():.1f}]; "
        f"(c) cf {dml_off.mean():.2f}±{dml_off.std(ddof=1):.2f} vs no-cf "
        f"{nocf_off.mean():.2f}±{nocf_off.std(ddof=1):.2f} overlap={c_overlap}; "
        f"(d) gap on={gap_on:.2f} < off={gap_off:.2f}; runtime {protocol_report.elapsed:.0f}s",
    )
    assert a_wins >= 4
    assert b_wins >= 4
    assert c_overlap
    assert d_ok
    assert runtime_ok
