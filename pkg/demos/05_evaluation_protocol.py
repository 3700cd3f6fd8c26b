"""The on-/off-policy evaluation protocol at demo scale.

Rolls the full harness: per (window, seed, model) cells, on-policy scoring
against logged demand, off-policy scoring against the counterfactual oracle
at forced discount levels, and mean +/- sd aggregation over seeds. Uses a
reduced roster and scale so it finishes in about two minutes; the acceptance
suite runs the full desk-scale version.
"""

import numpy as np

from elastic_dml import ModelSpec, ProtocolConfig, SimConfig, holdout_replacement, run_protocol, simulate_policy

panel = simulate_policy(SimConfig(n_articles=150, master_seed=11))

small_net = {"hidden_dims": [32, 16], "epochs": 10, "effect_epochs": 10}
cfg = ProtocolConfig(
    models=[
        ModelSpec(kind="dml", head_kind="linear", loss="l2", config=dict(small_net)),
        ModelSpec(kind="sdml", head_kind="linear", loss="l2", config=dict(small_net)),
        ModelSpec(kind="tf", head_kind="linear", loss="l2", config={**small_net, "dropout_rate": 0.4}),
        ModelSpec(kind="twfe"),
        ModelSpec(kind="naive", naive_kind="last_value"),
    ],
    train_windows=((20, 65), (30, 75)),
    n_seeds=2,
    base_seed=0,
)

report = run_protocol(panel, cfg, workers=2)
agg = report.aggregates
pooled = agg[(agg.window == "all") & (agg.metric == "MAE")]
print("pooled MAE (mean ± sd over seeds):")
for _, row in pooled.iterrows():
    print(f"  {row.model:16s} {row.policy:3s}  {row['mean']:6.2f} ± {row.sd:.2f}")

eff = agg[(agg.window == "all") & (agg.metric == "effect_MAE")]
print("\nper-article effect error (off-policy):")
for _, row in eff.iterrows():
    print(f"  {row.model:16s}      {row['mean']:6.1f} ± {row.sd:.1f}")

# the holdout-replacement device used for natural-experiment style tests:
# discard three consecutive weeks and splice in a resampled same-article run
replaced = holdout_replacement(panel, target_weeks=[50, 51, 52], seed=1)
changed = (replaced.discount[:, 50:53] != panel.discount[:, 50:53]).mean()
print(f"\nholdout replacement rewrote {changed:.0%} of target-week discounts")
print("(training on the replaced panel hides the original high-discount period)")
