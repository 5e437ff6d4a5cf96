"""Cost-aware portfolio simulation and summary performance metrics.

One shared loop serves the classical allocators and the trained agents: a
strategy callback sees the series only up to the decision index t, emits
weights at the close of t, and the portfolio earns the next day's gross
relatives minus a proportional cost on the traded weight.
"""
from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, RuinError, ValidationError
from .market import PriceSeries, price_relatives
from .policies import check_weights

TRADING_DAYS_PER_YEAR = 252

# Below this, the sample deviation of log returns is treated as zero and
# the Sharpe ratio reported as undefined rather than blowing up.
_ZERO_VARIANCE_TOL = 1e-12


@dataclass(frozen=True)
class CostModel:
    """Proportional transaction cost per unit of traded weight."""

    rate: float = 0.0005

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValidationError(f"cost rate must lie in [0, 1), got {self.rate}")


@dataclass
class MetricsBlock:
    """Summary statistics of one backtest run (percent units throughout)."""

    total_return: float
    sharpe: float | None
    max_drawdown: float
    daily_turnover: float

    def as_dict(self) -> dict:
        return {
            "total_return": self.total_return,
            "sharpe": self.sharpe,
            "max_drawdown": self.max_drawdown,
            "daily_turnover": self.daily_turnover,
        }


@dataclass
class BacktestResult:
    """Per-period record of one run.

    ``value_curve`` has one more entry than ``dates``: the leading 1.0 is
    the pre-trade value, and entry i+1 is the value after the decision on
    dates[i] has earned the following day's relatives.
    """

    dates: tuple[dt.date, ...]
    value_curve: np.ndarray
    weights: np.ndarray
    rolled_weights: np.ndarray
    gross_returns: np.ndarray
    period_costs: np.ndarray
    turnovers: np.ndarray
    metrics: MetricsBlock | None = field(default=None)

    def __post_init__(self):
        steps = len(self.dates)
        if self.value_curve.shape != (steps + 1,) or np.any(self.value_curve <= 0.0):
            raise ValidationError("value curve must be positive with one leading entry")
        if self.weights.shape[0] != steps or self.rolled_weights.shape != self.weights.shape:
            raise ValidationError("weights and dates disagree in length")
        for name in ("gross_returns", "period_costs", "turnovers"):
            if getattr(self, name).shape != (steps,):
                raise ValidationError(f"{name} and dates disagree in length")


def roll_weights(w: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Weights drifted by market moves: w_i y_i / (w . y)."""
    w = np.asarray(w, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if w.shape != y.shape:
        raise ValueError(f"weights shape {w.shape} != relatives shape {y.shape}")
    gross = float(w @ y)
    if gross <= 0.0:
        raise ValueError(f"non-positive portfolio relative {gross}")
    return w * y / gross


def portfolio_value_step(value: float, w: np.ndarray, w_prev_rolled: np.ndarray,
                         y: np.ndarray, cost: CostModel) -> tuple[float, float]:
    """One value update: V * [(w . y) - rate * sum|w - w_prev_rolled|].

    Returns the next value and the cost paid (in value units).  Raises
    RuinError when the bracket is non-positive.
    """
    w = np.asarray(w, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w_prev_rolled = np.asarray(w_prev_rolled, dtype=np.float64)
    if value <= 0.0:
        raise ValueError(f"portfolio value must be positive, got {value}")
    if w.shape != y.shape or w.shape != w_prev_rolled.shape:
        raise ValueError("weights, previous rolled weights and relatives must share a shape")
    traded = float(np.abs(w - w_prev_rolled).sum())
    bracket = float(w @ y) - cost.rate * traded
    if bracket <= 0.0:
        raise RuinError(
            f"cost {cost.rate * traded:.6f} wiped out the gross return {float(w @ y):.6f}")
    return value * bracket, value * cost.rate * traded


def run_backtest(strategy, series: PriceSeries, cost: CostModel,
                 window: int = 50) -> BacktestResult:
    """Simulate ``strategy(series, t) -> weights`` over every tradable date.

    The first tradable index is max(window, series.warmup); the prior
    position is all cash, so the first allocation pays the cost of funding
    the whole book.  The decision at t earns the relatives of t+1.
    """
    t_first = max(window, series.warmup)
    t_last = len(series.dates) - 2
    if t_first > t_last:
        raise ValueError(
            f"series too short: first tradable index {t_first}, last {t_last}")
    n = series.n_assets
    prev_rolled = np.zeros(n)
    value = 1.0
    values = [value]
    weights, rolled, gross, costs, turns = [], [], [], [], []
    for t in range(t_first, t_last + 1):
        w = strategy(series, t)
        try:
            w = check_weights(w, n)
        except (ValidationError, ValueError) as exc:
            raise ContractError(f"strategy emitted invalid weights at index {t}: {exc}") from exc
        y = price_relatives(series, t + 1)
        value, paid = portfolio_value_step(value, w, prev_rolled, y, cost)
        turns.append(float(np.abs(w - prev_rolled).sum()))
        gross.append(float(w @ y))
        prev_rolled = roll_weights(w, y)
        values.append(value)
        weights.append(w)
        rolled.append(prev_rolled)
        costs.append(paid)
    result = BacktestResult(
        dates=tuple(series.dates[t_first:t_last + 1]),
        value_curve=np.asarray(values),
        weights=np.asarray(weights),
        rolled_weights=np.asarray(rolled),
        gross_returns=np.asarray(gross),
        period_costs=np.asarray(costs),
        turnovers=np.asarray(turns),
    )
    result.metrics = compute_metrics(result)
    return result


def compute_metrics(result: BacktestResult,
                    periods_per_year: int = TRADING_DAYS_PER_YEAR) -> MetricsBlock:
    """Total return, annualized Sharpe, max drawdown, mean daily turnover.

    Sharpe uses daily log returns with an n-1 deviation and a zero
    risk-free rate; it is None (undefined) when the return variance
    vanishes.  Turnover averages the traded weight of every rebalance
    after the initial all-cash funding step, so a strategy that always
    holds its rolled weights scores exactly zero.
    """
    curve = result.value_curve
    if curve.size < 2:
        raise ValueError("need at least two value points")
    total_return = 100.0 * (curve[-1] / curve[0] - 1.0)
    log_returns = np.diff(np.log(curve))
    if log_returns.size >= 2:
        deviation = float(log_returns.std(ddof=1))
        scale = max(1.0, float(np.abs(log_returns.mean())))
        sharpe = None if deviation <= _ZERO_VARIANCE_TOL * scale else float(
            log_returns.mean() / deviation * np.sqrt(periods_per_year))
    else:
        sharpe = None
    peaks = np.maximum.accumulate(curve)
    max_drawdown = 100.0 * float(((peaks - curve) / peaks).max())
    rebalance_turns = result.turnovers[1:]
    daily_turnover = 100.0 * float(rebalance_turns.mean()) if rebalance_turns.size else 0.0
    return MetricsBlock(total_return=float(total_return), sharpe=sharpe,
                        max_drawdown=max_drawdown, daily_turnover=daily_turnover)


def reward(result: BacktestResult) -> float:
    """Average log return of the value curve, (1/T) log(V_T / V_0)."""
    curve = result.value_curve
    periods = curve.size - 1
    if periods < 1:
        raise ValueError("need at least one period")
    return float(np.log(curve[-1] / curve[0]) / periods)


def summary_dict(result: BacktestResult, strategy: str, config_hash: str | None = None) -> dict:
    out = {"strategy": strategy, "metrics": result.metrics.as_dict()}
    if config_hash is not None:
        out["config_hash"] = config_hash
    return out


def _fmt(x: float) -> str:
    return repr(float(x))


def curve_csv_text(result: BacktestResult, config_hash: str | None = None) -> str:
    """Plot-ready per-period series: date,value,cost,turnover,w_1..w_N."""
    n = result.weights.shape[1]
    lines = ["date,value,cost,turnover," + ",".join(f"w_{i + 1}" for i in range(n))]
    for i, date in enumerate(result.dates):
        cells = [date.isoformat(), _fmt(result.value_curve[i + 1]),
                 _fmt(result.period_costs[i]), _fmt(result.turnovers[i])]
        cells += [_fmt(x) for x in result.weights[i]]
        lines.append(",".join(cells))
    if config_hash is not None:
        lines.append(f"# config_hash={config_hash}")
    return "\n".join(lines) + "\n"


def weights_csv_text(result: BacktestResult, config_hash: str | None = None) -> str:
    """Stackplot-ready weights: date,w_1..w_N."""
    n = result.weights.shape[1]
    lines = ["date," + ",".join(f"w_{i + 1}" for i in range(n))]
    for i, date in enumerate(result.dates):
        lines.append(",".join([date.isoformat()] + [_fmt(x) for x in result.weights[i]]))
    if config_hash is not None:
        lines.append(f"# config_hash={config_hash}")
    return "\n".join(lines) + "\n"


def read_result_csv(path) -> tuple[list[str], list[list[str]], str | None]:
    """Rows of a curve/weights CSV plus the embedded config hash, if any."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    config_hash = None
    if rows and rows[-1] and rows[-1][0].startswith("# config_hash="):
        config_hash = rows[-1][0].split("=", 1)[1]
        rows = rows[:-1]
    if not rows:
        raise ValueError(f"empty CSV {path}")
    return rows[0], rows[1:], config_hash
