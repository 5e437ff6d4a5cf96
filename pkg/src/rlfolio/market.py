"""OHLC ingestion, calendar alignment, state windows, and synthetic markets.

The canonical interchange format is a long CSV with header
``date,ticker,open,high,low,close`` (ISO dates, decimal-point prices,
rows in any order).  Everything downstream works on the aligned
:class:`PriceSeries`.
"""
from __future__ import annotations

import csv
import datetime as dt
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ParseError, ValidationError

OHLC_COLUMNS = ("date", "ticker", "open", "high", "low", "close")

# A ticker whose forward-filled cells exceed this fraction of the calendar
# is rejected: heavy silent interpolation corrupts covariance estimates.
MAX_FILL_FRACTION = 0.10


@dataclass(frozen=True)
class PriceSeries:
    """Aligned per-asset OHLC history on a common trading calendar.

    All four price arrays have shape (n_dates, n_assets) and are strictly
    positive.  ``warmup`` marks how many leading dates are context only
    (present for lookback windows, never traded).
    """

    tickers: tuple[str, ...]
    dates: tuple[dt.date, ...]
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    warmup: int = 0

    def __post_init__(self):
        shape = (len(self.dates), len(self.tickers))
        for name in ("open", "high", "low", "close"):
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValidationError(f"{name} array has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
                raise ValidationError(f"{name} prices must be finite and strictly positive")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise ValidationError("dates must be strictly increasing")
        if np.any(self.low > self.high):
            raise ValidationError("low price above high price")
        for name in ("open", "close"):
            arr = getattr(self, name)
            if np.any(arr < self.low) or np.any(arr > self.high):
                raise ValidationError(f"{name} outside the [low, high] range")
        if not 0 <= self.warmup <= len(self.dates):
            raise ValidationError("warmup outside the series length")
        for name in ("open", "high", "low", "close"):
            getattr(self, name).setflags(write=False)

    @property
    def n_assets(self) -> int:
        return len(self.tickers)

    def __len__(self) -> int:
        return len(self.dates)

    def slice(self, start: int, stop: int, warmup: int = 0) -> "PriceSeries":
        """Copy of the date range [start, stop)."""
        return PriceSeries(
            tickers=self.tickers,
            dates=self.dates[start:stop],
            open=self.open[start:stop].copy(),
            high=self.high[start:stop].copy(),
            low=self.low[start:stop].copy(),
            close=self.close[start:stop].copy(),
            warmup=warmup,
        )


@dataclass(frozen=True)
class PriceTensor:
    """Normalized (3, n_assets, window) high/low/close window ending at anchor_date.

    Each asset's entries are divided by its close on the anchor date, so the
    last close column is exactly one.
    """

    values: np.ndarray
    anchor_date: dt.date

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[0] != 3:
            raise ValidationError(f"expected (3, n_assets, window), got {self.values.shape}")
        if np.any(self.values <= 0.0):
            raise ValidationError("price tensor entries must be strictly positive")
        self.values.setflags(write=False)


def _parse_row(row, line_no, idx):
    try:
        date = dt.date.fromisoformat(row[idx["date"]].strip())
    except ValueError as exc:
        raise ParseError(f"line {line_no}: bad date {row[idx['date']]!r}") from exc
    ticker = row[idx["ticker"]].strip()
    if not ticker:
        raise ParseError(f"line {line_no}: empty ticker")
    prices = []
    for col in ("open", "high", "low", "close"):
        raw = row[idx[col]].strip()
        try:
            value = float(raw)
        except ValueError as exc:
            raise ParseError(f"line {line_no}: non-numeric {col} {raw!r}") from exc
        if not np.isfinite(value) or value <= 0.0:
            raise ValidationError(f"line {line_no}: non-positive {col} price {raw!r}")
        prices.append(value)
    o, h, l, c = prices
    if l > h or not (l <= o <= h) or not (l <= c <= h):
        raise ValidationError(f"line {line_no}: open/close outside [low, high]")
    return date, ticker, (o, h, l, c)


def ingest_ohlc(path, schema: dict[str, str] | None = None) -> PriceSeries:
    """Load a long-format OHLC CSV into a calendar-aligned PriceSeries.

    ``schema`` maps canonical column names to the file's header names when
    they differ.  Dates before the latest first-observation across tickers
    are dropped for all tickers (intersection calendar); remaining gaps are
    forward-filled.  A ticker needing more than 10% filled cells is
    rejected.
    """
    mapping = dict.fromkeys(OHLC_COLUMNS)
    for key in mapping:
        mapping[key] = (schema or {}).get(key, key)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("line 1: empty file") from None
        header = [h.strip() for h in header]
        idx = {}
        for key, col in mapping.items():
            if col not in header:
                raise ParseError(f"line 1: missing column {col!r} in header {header}")
            idx[key] = header.index(col)
        observed: dict[str, dict[dt.date, tuple]] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                raise ParseError(f"line {line_no}: expected {len(header)} fields, got {len(row)}")
            date, ticker, prices = _parse_row(row, line_no, idx)
            per_ticker = observed.setdefault(ticker, {})
            if date in per_ticker:
                raise ParseError(f"line {line_no}: duplicate row for ({date}, {ticker})")
            per_ticker[date] = prices
    if not observed:
        raise DataError("no data rows")

    tickers = tuple(sorted(observed))
    first_common = max(min(days) for days in observed.values())
    calendar = sorted({d for days in observed.values() for d in days if d >= first_common})
    if not calendar:
        raise DataError("empty intersection calendar: tickers never overlap")

    arrays = {name: np.empty((len(calendar), len(tickers))) for name in ("open", "high", "low", "close")}
    for j, ticker in enumerate(tickers):
        days = observed[ticker]
        # Seed the fill state from the newest observation before the calendar
        # starts, so a ticker missing the first common date is still covered.
        earlier = [d for d in days if d < calendar[0]]
        last = days[max(earlier)] if earlier else None
        filled = 0
        for i, date in enumerate(calendar):
            if date in days:
                last = days[date]
            else:
                filled += 1
            o, h, l, c = last
            arrays["open"][i, j] = o
            arrays["high"][i, j] = h
            arrays["low"][i, j] = l
            arrays["close"][i, j] = c
        if filled / len(calendar) > MAX_FILL_FRACTION:
            raise DataError(
                f"ticker {ticker!r} requires {filled}/{len(calendar)} forward-filled dates "
                f"(limit {MAX_FILL_FRACTION:.0%})")
    return PriceSeries(tickers=tickers, dates=tuple(calendar), **arrays)


def ohlc_csv_text(series: PriceSeries) -> str:
    """Canonical CSV serialization; ingest(write(s)) round-trips bit-identically."""
    lines = [",".join(OHLC_COLUMNS)]
    for i, date in enumerate(series.dates):
        for j, ticker in enumerate(series.tickers):
            lines.append(",".join([
                date.isoformat(), ticker,
                repr(float(series.open[i, j])), repr(float(series.high[i, j])),
                repr(float(series.low[i, j])), repr(float(series.close[i, j])),
            ]))
    return "\n".join(lines) + "\n"


def write_ohlc(series: PriceSeries, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(ohlc_csv_text(series))


def build_price_tensor(series: PriceSeries, t: int, window: int = 50) -> PriceTensor:
    """High/low/close window over dates (t-window+1 .. t), scaled by each asset's latest close."""
    if t >= len(series.dates):
        raise ValueError(f"t={t} beyond the series (length {len(series.dates)})")
    if t < window:
        raise ValueError(f"need t >= window, got t={t}, window={window}")
    lo = t - window + 1
    block = np.stack([
        series.high[lo:t + 1].T,
        series.low[lo:t + 1].T,
        series.close[lo:t + 1].T,
    ])
    scale = series.close[t][None, :, None]
    return PriceTensor(values=block / scale, anchor_date=series.dates[t])


def price_relatives(series: PriceSeries, t: int, include_cash: bool = False) -> np.ndarray:
    """Gross one-period relatives close_t / close_{t-1}; optional leading cash 1."""
    if t < 1:
        raise ValueError(f"need t >= 1 for a previous close, got t={t}")
    if t >= len(series.dates):
        raise ValueError(f"t={t} beyond the series (length {len(series.dates)})")
    y = series.close[t] / series.close[t - 1]
    if include_cash:
        y = np.concatenate([[1.0], y])
    return y


def split_train_test(series: PriceSeries, train_fraction: float = 0.75,
                     window: int = 50) -> tuple[PriceSeries, PriceSeries]:
    """Chronological split at floor(T * fraction), no shuffling.

    The test segment keeps the final ``window`` training dates as warm-up
    context, flagged via ``warmup`` so they are never traded.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if len(series) < 2:
        raise ValueError("need at least two dates to split")
    cut = int(len(series) * train_fraction)
    if cut < 1 or cut >= len(series):
        raise ValueError(f"fraction {train_fraction} leaves an empty segment for T={len(series)}")
    warm = min(window, cut)
    train = series.slice(0, cut)
    test = series.slice(cut - warm, len(series), warmup=warm)
    return train, test


def synth_gbm(n_assets: int, n_dates: int, drift, vol, corr=None, seed: int = 0,
              start_date: dt.date = dt.date(2015, 1, 2),
              initial_price: float = 100.0) -> PriceSeries:
    """Correlated geometric Brownian motion closes with synthesized open/high/low.

    Daily log returns are drift + vol * z with z standard normal under the
    given correlation, so sample moments of log returns converge to (drift,
    vol).  The intraday range scales with vol; at vol = 0 the path is the
    exact exponential drift line.
    """
    if n_assets < 1 or n_dates < 2:
        raise ValueError("need n_assets >= 1 and n_dates >= 2")
    drift = np.broadcast_to(np.asarray(drift, dtype=np.float64), (n_assets,)).copy()
    vol = np.broadcast_to(np.asarray(vol, dtype=np.float64), (n_assets,)).copy()
    if np.any(vol < 0.0):
        raise ValueError("vol must be non-negative")
    if corr is None:
        corr = np.eye(n_assets)
    corr = np.asarray(corr, dtype=np.float64)
    if corr.shape != (n_assets, n_assets) or not np.allclose(corr, corr.T, atol=1e-12):
        raise ValueError("corr must be a symmetric (n_assets, n_assets) matrix")
    if not np.allclose(np.diag(corr), 1.0, atol=1e-12):
        raise ValueError("corr must have a unit diagonal")
    eigvals, eigvecs = np.linalg.eigh(corr)
    if eigvals.min() < -1e-10:
        raise ValueError(f"corr is not positive semi-definite (min eigenvalue {eigvals.min():.3e})")
    root = eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))

    rng = np.random.default_rng(seed)
    shocks = rng.standard_normal((n_dates - 1, n_assets)) @ root.T
    log_returns = drift + shocks * vol
    log_close = np.vstack([np.zeros(n_assets), np.cumsum(log_returns, axis=0)])
    close = initial_price * np.exp(log_close)

    span = np.abs(rng.standard_normal((n_dates, n_assets))) * (vol * 0.5)
    open_ = np.empty_like(close)
    open_[0] = close[0]
    open_[1:] = close[:-1]
    high = np.maximum(open_, close) * np.exp(span)
    low = np.minimum(open_, close) * np.exp(-span)

    dates = []
    day = start_date
    while len(dates) < n_dates:
        if day.weekday() < 5:
            dates.append(day)
        day += dt.timedelta(days=1)
    tickers = tuple(f"A{i:02d}" for i in range(n_assets))
    return PriceSeries(tickers=tickers, dates=tuple(dates),
                       open=open_, high=high, low=low, close=close)


def add_cash_asset(series: PriceSeries, ticker: str = "CASH") -> PriceSeries:
    """Prepend a constant-price asset (gross relative exactly 1)."""
    ones = np.ones((len(series), 1))
    return PriceSeries(
        tickers=(ticker,) + series.tickers,
        dates=series.dates,
        open=np.hstack([ones, series.open]),
        high=np.hstack([ones, series.high]),
        low=np.hstack([ones, series.low]),
        close=np.hstack([ones, series.close]),
        warmup=series.warmup,
    )


def series_content_hash(series: PriceSeries) -> str:
    """Stable content hash of tickers, dates, and all price arrays."""
    digest = hashlib.sha256()
    digest.update(",".join(series.tickers).encode())
    digest.update(",".join(d.isoformat() for d in series.dates).encode())
    for name in ("open", "high", "low", "close"):
        digest.update(np.ascontiguousarray(getattr(series, name)).tobytes())
    return digest.hexdigest()
