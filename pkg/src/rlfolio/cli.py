"""Command-line pipeline: ingest, train, backtest, compare, report.

A single JSON config file drives every command (format documented in the
README).  All artifacts embed a hash of the resolved config so mismatched
outputs cannot be combined, and reruns with the same config and seed are
byte-identical.
"""
from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from .allocators import allocation_strategy
from .backtest import (BacktestResult, CostModel, curve_csv_text, read_result_csv,
                       run_backtest, weights_csv_text)
from .errors import ValidationError
from .autodiff import checkpoint_blob
from .market import (PriceSeries, add_cash_asset, ingest_ohlc, ohlc_csv_text,
                     series_content_hash, split_train_test, synth_gbm)
from .policies import load_policy
from .training import TrainConfig, evaluate, run_manifest, train

CLASSICAL_STRATEGIES = ("equal_weight", "mean_variance", "risk_parity", "min_variance")
RL_STRATEGIES = ("cnn", "rnn", "lstm")
ALL_STRATEGIES = CLASSICAL_STRATEGIES + RL_STRATEGIES

METRIC_COLUMNS = ("total_return", "sharpe", "max_drawdown", "daily_turnover")

DATASET_FILE = "dataset.csv"


class ConfigError(ValueError):
    """Invalid run configuration; message names the offending field."""


@dataclass
class RunConfig:
    data: dict
    strategies: list[str]
    out_dir: str
    seed: int = 0
    train_fraction: float = 0.75
    window: int = 50
    cost_rate: float = 0.0005
    cash: bool = False
    overrides: dict[str, dict] = field(default_factory=dict)

    KNOWN_FIELDS = ("data", "strategies", "out_dir", "seed", "train_fraction",
                    "window", "cost_rate", "cash", "overrides")

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: not valid JSON ({exc})") from exc
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config: top level must be an object")
        unknown = set(raw) - set(cls.KNOWN_FIELDS)
        if unknown:
            raise ConfigError(f"config: unknown fields {sorted(unknown)}")
        for required in ("data", "strategies", "out_dir"):
            if required not in raw:
                raise ConfigError(f"{required}: missing required field")
        cfg = cls(**{k: raw[k] for k in cls.KNOWN_FIELDS if k in raw})
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not isinstance(self.data, dict) or not ({"csv", "synthetic"} & set(self.data)):
            raise ConfigError("data: need a 'csv' or 'synthetic' source")
        if not self.strategies:
            raise ConfigError("strategies: select at least one")
        for name in self.strategies:
            if name not in ALL_STRATEGIES:
                raise ConfigError(f"strategies: unknown strategy {name!r}")
        if len(set(self.strategies)) != len(self.strategies):
            raise ConfigError("strategies: duplicates not allowed")
        for name in self.overrides:
            if name not in self.strategies:
                raise ConfigError(
                    f"overrides: {name!r} is not among the selected strategies")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction: must lie in (0, 1)")
        if not 0.0 <= self.cost_rate < 1.0:
            raise ConfigError("cost_rate: must lie in [0, 1)")
        if self.window < 2:
            raise ConfigError("window: must be at least 2")
        if not isinstance(self.seed, int):
            raise ConfigError("seed: must be an integer")

    def resolved(self) -> dict:
        return {
            "data": self.data, "strategies": list(self.strategies),
            "out_dir": self.out_dir, "seed": self.seed,
            "train_fraction": self.train_fraction, "window": self.window,
            "cost_rate": self.cost_rate, "cash": self.cash,
            "overrides": self.overrides,
        }

    def config_hash(self) -> str:
        canon = dict(self.resolved())
        canon.pop("out_dir")  # artifacts stay valid when a run is relocated
        return hashlib.sha256(
            json.dumps(canon, sort_keys=True).encode()).hexdigest()[:16]


def _strategy_seed(base_seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{base_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def _build_series(cfg: RunConfig) -> PriceSeries:
    if "csv" in cfg.data:
        series = ingest_ohlc(cfg.data["csv"], schema=cfg.data.get("schema"))
    else:
        spec = dict(cfg.data["synthetic"])
        start = spec.pop("start_date", None)
        if start is not None:
            spec["start_date"] = dt.date.fromisoformat(start)
        corr = spec.get("corr")
        if corr is not None:
            spec["corr"] = np.asarray(corr, dtype=np.float64)
        spec.setdefault("seed", cfg.seed)
        series = synth_gbm(**spec)
    if cfg.cash:
        series = add_cash_asset(series)
    return series


def _load_series(cfg: RunConfig) -> PriceSeries:
    """Prefer the dataset cached by ``ingest`` so every command sees one universe."""
    cached = os.path.join(cfg.out_dir, DATASET_FILE)
    if os.path.exists(cached):
        return ingest_ohlc(cached)
    return _build_series(cfg)


class _ArtifactWriter:
    """Collects artifacts in memory and flushes them only on success, so a
    failed command leaves no partial outputs behind."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.pending: list[tuple[str, str]] = []

    def add_text(self, name: str, text: str) -> None:
        self.pending.append((name, text))

    def add_json(self, name: str, payload) -> None:
        self.add_text(name, json.dumps(payload, sort_keys=True, indent=2) + "\n")

    def flush(self) -> list[str]:
        os.makedirs(self.out_dir, exist_ok=True)
        written = []
        for name, text in self.pending:
            path = os.path.join(self.out_dir, name)
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            written.append(path)
        return written


def _train_config(cfg: RunConfig, kind: str) -> TrainConfig:
    options = dict(cfg.overrides.get(kind, {}))
    options.setdefault("window", cfg.window)
    options.setdefault("cost_rate", cfg.cost_rate)
    options.setdefault("seed", _strategy_seed(cfg.seed, kind))
    if "conv_maps" in options:
        options["conv_maps"] = tuple(options["conv_maps"])
    return TrainConfig(kind=kind, **options)


def _checkpoint_path(cfg: RunConfig, kind: str) -> str:
    return os.path.join(cfg.out_dir, f"checkpoint_{kind}.json")


def _run_one_strategy(cfg: RunConfig, name: str, train_series: PriceSeries,
                      test_series: PriceSeries) -> BacktestResult:
    cost = CostModel(cfg.cost_rate)
    if name in CLASSICAL_STRATEGIES:
        options = cfg.overrides.get(name, {})
        strategy = allocation_strategy(
            name, lookback=cfg.window,
            baseline_return=options.get("baseline_return"),
            vol_target=options.get("vol_target"))
        return run_backtest(strategy, test_series, cost, cfg.window)
    checkpoint = _checkpoint_path(cfg, name)
    if os.path.exists(checkpoint):
        spec = load_policy(checkpoint)
    else:
        spec, _ = train(_train_config(cfg, name), train_series)
    ablated = bool(cfg.overrides.get(name, {}).get("memory_ablated", False))
    return evaluate(spec, test_series, cost, window=cfg.window, memory_ablated=ablated)


def cmd_ingest(cfg: RunConfig) -> int:
    series = _build_series(cfg)
    writer = _ArtifactWriter(cfg.out_dir)
    writer.add_text(DATASET_FILE, ohlc_csv_text(series))
    writer.add_json("dataset_manifest.json", {
        "config_hash": cfg.config_hash(),
        "data_hash": series_content_hash(series),
        "tickers": list(series.tickers),
        "n_dates": len(series.dates),
    })
    writer.flush()
    return 0


def cmd_train(cfg: RunConfig) -> int:
    rl = [s for s in cfg.strategies if s in RL_STRATEGIES]
    if not rl:
        raise ConfigError("strategies: train requires at least one of cnn, rnn, lstm")
    series = _load_series(cfg)
    train_series, test_series = split_train_test(series, cfg.train_fraction, cfg.window)
    writer = _ArtifactWriter(cfg.out_dir)
    manifest: dict = {"config_hash": cfg.config_hash(), "config": cfg.resolved(),
                      "data_hash": series_content_hash(series), "strategies": {}}
    for kind in rl:
        tc = _train_config(cfg, kind)
        spec, history = train(tc, train_series)
        result = evaluate(spec, test_series, CostModel(cfg.cost_rate), window=cfg.window)
        blob = checkpoint_blob(spec.params, header=spec.header())
        writer.add_text(f"checkpoint_{kind}.json", json.dumps(blob, sort_keys=True))
        manifest["strategies"][kind] = {
            "checkpoint": f"checkpoint_{kind}.json",
            "steps_completed": len(history),
            "steps_skipped": len(history.skipped_steps),
            "final_batch_reward": history.rewards[-1] if history.rewards else None,
            "test_metrics": result.metrics.as_dict(),
            "train_manifest": run_manifest(tc, train_series, result.metrics.as_dict()),
        }
    writer.add_json("manifest.json", manifest)
    writer.flush()
    return 0


def _metrics_rows(cfg: RunConfig, results: list[tuple[str, BacktestResult]]) -> dict:
    rows = []
    for name, result in results:
        row = {"strategy": name}
        row.update(result.metrics.as_dict())
        rows.append(row)
    return {"config_hash": cfg.config_hash(), "columns": list(METRIC_COLUMNS), "rows": rows}


def _compare(cfg: RunConfig, names: list[str]) -> int:
    series = _load_series(cfg)
    train_series, test_series = split_train_test(series, cfg.train_fraction, cfg.window)
    results = [(name, _run_one_strategy(cfg, name, train_series, test_series))
               for name in names]
    writer = _ArtifactWriter(cfg.out_dir)
    chash = cfg.config_hash()
    writer.add_json("metrics.json", _metrics_rows(cfg, results))
    for name, result in results:
        writer.add_text(f"curve_{name}.csv", curve_csv_text(result, chash))
        writer.add_text(f"weights_{name}.csv", weights_csv_text(result, chash))
    writer.add_json("manifest.json", {
        "config_hash": chash,
        "config": cfg.resolved(),
        "data_hash": series_content_hash(series),
        "artifacts": ["metrics.json"] + [f"curve_{n}.csv" for n in names]
        + [f"weights_{n}.csv" for n in names],
    })
    writer.flush()
    return 0


def cmd_backtest(cfg: RunConfig) -> int:
    if len(cfg.strategies) != 1:
        raise ConfigError("strategies: backtest runs exactly one strategy")
    return _compare(cfg, list(cfg.strategies))


def cmd_compare(cfg: RunConfig) -> int:
    return _compare(cfg, list(cfg.strategies))


def cmd_report(cfg: RunConfig) -> int:
    """Convert a compare run into plot-ready figure CSVs."""
    metrics_path = os.path.join(cfg.out_dir, "metrics.json")
    if not os.path.exists(metrics_path):
        raise ConfigError(f"out_dir: no metrics.json in {cfg.out_dir}; run compare first")
    with open(metrics_path, "r", encoding="utf-8") as fh:
        metrics = json.load(fh)
    expected_hash = metrics.get("config_hash")
    if expected_hash != cfg.config_hash():
        raise ValidationError(
            f"config hash mismatch: metrics.json has {expected_hash}, "
            f"config resolves to {cfg.config_hash()}")
    names = [row["strategy"] for row in metrics["rows"]]
    curves: dict[str, dict[str, str]] = {}
    dates: list[str] = []
    writer = _ArtifactWriter(cfg.out_dir)
    for name in names:
        header, rows, embedded = read_result_csv(os.path.join(cfg.out_dir, f"curve_{name}.csv"))
        if embedded != expected_hash:
            raise ValidationError(
                f"config hash mismatch in curve_{name}.csv ({embedded} != {expected_hash})")
        curves[name] = {row[0]: row[1] for row in rows}
        if len(rows) > len(dates):
            dates = [row[0] for row in rows]
        wheader, wrows, whash = read_result_csv(os.path.join(cfg.out_dir, f"weights_{name}.csv"))
        if whash != expected_hash:
            raise ValidationError(
                f"config hash mismatch in weights_{name}.csv ({whash} != {expected_hash})")
        lines = [",".join(wheader)] + [",".join(r) for r in wrows]
        lines.append(f"# config_hash={expected_hash}")
        writer.add_text(f"fig_weights_{name}.csv", "\n".join(lines) + "\n")
    lines = ["date," + ",".join(names)]
    for date in dates:
        lines.append(",".join([date] + [curves[n].get(date, "") for n in names]))
    lines.append(f"# config_hash={expected_hash}")
    writer.add_text("fig_value_curves.csv", "\n".join(lines) + "\n")
    writer.flush()
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "backtest": cmd_backtest,
    "compare": cmd_compare,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rlfolio",
        description="Train RL allocation agents and benchmark them against "
                    "classical allocators in a shared cost-aware backtester.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="path to the JSON run config")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--strategies", default=None,
                        help="comma-separated strategy subset override")
    parser.add_argument("--cost-bps", type=float, default=None,
                        help="transaction cost in basis points (overrides cost_rate)")
    return parser


def run(command: str, config: RunConfig) -> int:
    """Execute one pipeline command; returns the process exit status."""
    handler = COMMANDS.get(command)
    if handler is None:
        raise ConfigError(f"command: unknown command {command!r}")
    return handler(config)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.from_file(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out_dir = args.out
        if args.strategies is not None:
            cfg.strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
        if args.cost_bps is not None:
            cfg.cost_rate = args.cost_bps * 1e-4
        cfg.validate()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return run(args.command, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - single CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
