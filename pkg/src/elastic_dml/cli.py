"""Command-line driver: simulate / train / forecast / evaluate / report.

Every run writes a manifest recording the command, a platform-stable config
hash, input file digests, the tool version and wall-clock duration. Data
outputs are byte-identical across reruns with the same inputs and seed at any
worker count; the manifest is run metadata and carries timing.

Exit codes: 0 success, 2 usage/config error, 3 data schema error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, dml, econ, evaluate as ev
from .nnet import SpecError, TrainingDivergedError
from .panel import FLOAT_FMT, Panel, PanelSchemaError, UnsupportedPanelError, load_panel
from .sim import ConfigError, SimConfig, simulate_policy

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_SCHEMA = 3
EXIT_NUMERIC = 4

CLI_MODELS = ("dml", "dml-nocf", "sdml", "sdml-nocf", "tf", "twfe", "naive")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _config_hash(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(
    out_dir: Path,
    command: str,
    config: dict,
    seed: int | None,
    inputs: list[Path],
    started: float,
) -> None:
    manifest = {
        "command": command,
        "config_hash": _config_hash(config),
        "seed": seed,
        "input_digests": {str(p): _file_digest(p) for p in sorted(inputs)},
        "tool_version": __version__,
        "duration_seconds": round(time.time() - started, 3),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")


def _load_json(path: str, what: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} file not found: {path}", EXIT_SCHEMA)
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(f"invalid JSON in {path}: {exc}", EXIT_USAGE) from exc


def _load_panel_args(args) -> Panel:
    for name in ("panel", "statics"):
        if not Path(getattr(args, name)).exists():
            raise CliError(f"missing input file: {getattr(args, name)}", EXIT_SCHEMA)
    truth = getattr(args, "truth", None)
    if truth is not None and not Path(truth).exists():
        raise CliError(f"missing input file: {truth}", EXIT_SCHEMA)
    return load_panel(args.panel, args.statics, truth)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    started = time.time()
    payload = _load_json(args.config, "sim config") if args.config else {}
    if args.seed is not None:
        payload["master_seed"] = args.seed
    try:
        config = SimConfig(**payload)
        config.validate()
    except (TypeError, ConfigError) as exc:
        raise CliError(f"config error: {exc}", EXIT_USAGE) from exc

    panel = simulate_policy(config, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    panel.write_csv(out)
    (out / "sim_config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True), encoding="utf-8"
    )
    inputs = [Path(args.config)] if args.config else []
    _write_manifest(out, "simulate", config.to_dict(), config.master_seed, inputs, started)
    print(f"simulated {panel.n_articles} articles x {panel.n_weeks} weeks -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    panel = _load_panel_args(args)
    overrides = _load_json(args.config, "model config") if args.config else {}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = [Path(args.panel), Path(args.statics)] + ([Path(args.truth)] if args.truth else [])

    window = tuple(args.window) if args.window else (0, panel.n_weeks)
    if args.model in dml.MODEL_KINDS:
        overrides.setdefault("head_kind", args.head)
        overrides.setdefault("loss", args.loss)
        overrides["seed"] = args.seed
        try:
            cfg = dml.ModelConfig.from_dict(overrides)
        except (TypeError, ValueError) as exc:
            raise CliError(f"config error: {exc}", EXIT_USAGE) from exc
        try:
            model = dml.fit_forecaster(panel, window, cfg, args.model)
        except TrainingDivergedError as exc:
            raise CliError(f"training diverged: {exc}", EXIT_NUMERIC) from exc
        manifest = dml.save_model(model, out)
        print(f"trained {manifest['kind']} ({manifest['head_kind']} head) -> {out}")
    elif args.model == "twfe":
        try:
            y = panel.demand[:, window[0] : window[1]]
            x = np.log1p(-panel.discount[:, window[0] : window[1]])
            eps_hat, u, c, status, it, grad = econ._twfe_poisson_arrays(y, x, tol=1e-8, max_iter=200)
        except econ.RankDeficientError as exc:
            raise CliError(f"numerical failure: {exc}", EXIT_NUMERIC) from exc
        fit = econ.ElasticityFit(
            epsilon=float(eps_hat),
            article_effects={int(a): float(v) for a, v in zip(panel.article_ids, u)},
            week_effects=c,
            convergence=status,
            iterations=it,
            final_gradient_norm=float(grad),
        )
        (out / "twfe_fit.json").write_text(json.dumps(fit.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        print(f"fitted elasticity {fit.epsilon:+.4f} ({fit.convergence}) -> {out}")
    else:  # naive
        spec = {"kind": "naive", "naive_kind": args.naive_kind, "window": list(window)}
        (out / "naive.json").write_text(json.dumps(spec, indent=2, sort_keys=True), encoding="utf-8")
        print(f"stored naive forecaster ({args.naive_kind}) -> {out}")

    config_payload = {"model": args.model, "head": args.head, "loss": args.loss, "window": list(window), **overrides}
    _write_manifest(out, "train", config_payload, args.seed, inputs, started)
    return EXIT_OK


def cmd_forecast(args) -> int:
    started = time.time()
    panel = _load_panel_args(args)
    model_dir = Path(args.model_dir)
    if not (model_dir / "model.json").exists():
        raise CliError(f"{model_dir} does not contain a trained model", EXIT_SCHEMA)
    model = dml.load_model(model_dir)
    origin = args.origin if args.origin is not None else panel.n_weeks - model.horizon - 1
    scenario = "logged" if args.discount == "logged" else float(args.discount)
    request = dml.ForecastRequest(
        origin=origin, horizon=args.horizon or model.horizon, discount_scenario=scenario, mode=args.mode
    )
    pred = dml.predict(model, panel, request)
    weeks = origin + 1 + np.arange(request.horizon)
    frame = pd.DataFrame(
        {
            "article_id": np.repeat(panel.article_ids, request.horizon),
            "week": np.tile(weeks, panel.n_articles),
            "model": model.kind,
            "q_hat": pred.ravel(),
        }
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False, float_format=FLOAT_FMT)
    print(f"wrote {len(frame)} forecasts -> {out}")
    _write_manifest(
        out.parent,
        "forecast",
        {"origin": origin, "horizon": request.horizon, "discount": args.discount, "mode": args.mode},
        None,
        [Path(args.panel), Path(args.statics)],
        started,
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    started = time.time()
    payload = _load_json(args.protocol, "protocol")
    base = Path(args.protocol).parent

    def resolve(name: str) -> Path | None:
        value = payload.pop(name, None)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else base / p

    panel_dir = resolve("panel_dir")
    if panel_dir is not None:
        paths = {
            "panel": panel_dir / "panel.csv",
            "statics": panel_dir / "statics.csv",
            "truth": panel_dir / "truth.csv",
        }
    else:
        paths = {"panel": resolve("panel"), "statics": resolve("statics"), "truth": resolve("truth")}
    for name in ("panel", "statics", "truth"):
        if paths[name] is None or not paths[name].exists():
            raise CliError(f"protocol needs an existing {name} file (got {paths[name]})", EXIT_SCHEMA)
    panel = load_panel(paths["panel"], paths["statics"], paths["truth"])

    try:
        cfg = ev.ProtocolConfig.from_dict(payload)
        cfg.validate_against(panel)
    except (TypeError, ev.ProtocolError) as exc:
        raise CliError(f"protocol error: {exc}", EXIT_USAGE) from exc

    workers = args.workers if args.workers is not None else ev.default_workers()
    report = ev.run_protocol(panel, cfg, workers=workers)
    out = Path(args.out)
    report.write(out)
    _write_manifest(out, "evaluate", cfg.to_dict(), cfg.base_seed, list(paths.values()), started)
    n_failed = int((report.metrics["status"] == "failed").sum())
    print(f"evaluated {len(cfg.models)} models over {len(cfg.train_windows)} windows -> {out}"
          + (f" ({n_failed} failed cells)" if n_failed else ""))
    return EXIT_OK


def cmd_report(args) -> int:
    started = time.time()
    metrics_path = Path(args.metrics)
    if not metrics_path.exists():
        raise CliError(f"missing metrics file: {metrics_path}", EXIT_SCHEMA)
    metrics = pd.read_csv(metrics_path)
    missing = [c for c in ev.METRICS_COLUMNS if c not in metrics.columns]
    if missing:
        raise CliError(f"metrics.csv is missing columns {missing}", EXIT_SCHEMA)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ev.aggregate_metrics(metrics).to_csv(out / "report.csv", index=False, float_format=FLOAT_FMT)
    _write_manifest(out, "report", {"metrics": str(metrics_path)}, None, [metrics_path], started)
    print(f"aggregated {len(metrics)} metric rows -> {out / 'report.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="elastic-dml", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic panel")
    p.add_argument("--config", help="sim config JSON (defaults used when omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="overrides master_seed")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train one model on a panel")
    p.add_argument("--panel", required=True)
    p.add_argument("--statics", required=True)
    p.add_argument("--truth", default=None)
    p.add_argument("--model", required=True, choices=CLI_MODELS)
    p.add_argument("--head", choices=dml.HEAD_KINDS, default="elastic")
    p.add_argument("--loss", choices=("l1", "l2"), default="l1")
    p.add_argument("--naive-kind", choices=("last_value", "seasonal_naive"), default="last_value")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window", type=int, nargs=2, metavar=("START", "END"))
    p.add_argument("--config", help="model config JSON overrides")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("forecast", help="forecast demand with a trained model")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--panel", required=True)
    p.add_argument("--statics", required=True)
    p.add_argument("--truth", default=None)
    p.add_argument("--origin", type=int, default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--discount", default="logged", help="'logged' or a forced level in [0, 0.7)")
    p.add_argument("--mode", choices=dml.PREDICT_MODES, default="ensemble")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("evaluate", help="run the on-/off-policy protocol")
    p.add_argument("--protocol", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="recompute aggregates from metrics.csv")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "workers", None) is None and hasattr(args, "workers"):
        args.workers = ev.default_workers()
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ev.ProtocolError, SpecError, dml.InferenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PanelSchemaError, UnsupportedPanelError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (TrainingDivergedError, econ.RankDeficientError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
