import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rlfolio.errors import DataError, ParseError, ValidationError
from rlfolio.market import (PriceSeries, add_cash_asset, build_price_tensor,
                            ingest_ohlc, ohlc_csv_text, price_relatives,
                            series_content_hash, split_train_test, synth_gbm,
                            write_ohlc)


def write_csv(tmp_path, text, name="prices.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


BASIC_CSV = """date,ticker,open,high,low,close
2020-01-02,XX,10.0,10.5,9.5,10.2
2020-01-03,XX,10.2,10.6,10.0,10.4
2020-01-06,XX,10.4,10.8,10.2,10.6
2020-01-02,YY,20.0,21.0,19.0,20.5
2020-01-03,YY,20.5,21.5,20.0,21.0
2020-01-06,YY,21.0,22.0,20.5,21.5
"""


class TestIngest:
    def test_basic_shape(self, tmp_path):
        series = ingest_ohlc(write_csv(tmp_path, BASIC_CSV))
        assert series.tickers == ("XX", "YY")
        assert len(series.dates) == 3
        assert series.close.shape == (3, 2)
        assert series.close[0, 0] == 10.2

    def test_rows_in_any_order(self, tmp_path):
        lines = BASIC_CSV.strip().splitlines()
        shuffled = [lines[0]] + lines[4:] + lines[1:4]
        series = ingest_ohlc(write_csv(tmp_path, "\n".join(shuffled) + "\n"))
        assert series.close[0, 0] == 10.2
        assert series.close[2, 1] == 21.5

    def test_forward_fill_missing_date(self, tmp_path):
        # 12 dates so that a single gap stays under the 10% fill limit
        rows = ["date,ticker,open,high,low,close"]
        for i in range(12):
            day = dt.date(2020, 1, 1) + dt.timedelta(days=i)
            cx, cy = 10 + i * 0.1, 20 + i * 0.1
            rows.append(f"{day},XX,{cx:.1f},{cx + 0.5:.1f},{cx - 0.5:.1f},{cx:.1f}")
            if i != 1:  # YY misses the second date
                rows.append(f"{day},YY,{cy:.1f},{cy + 1:.1f},{cy - 1:.1f},{cy:.1f}")
        series = ingest_ohlc(write_csv(tmp_path, "\n".join(rows) + "\n"))
        assert series.close[1, 1] == series.close[0, 1] == 20.0
        assert series.high[1, 1] == 21.0
        assert series.close[2, 1] == pytest.approx(20.2)

    def test_negative_price_names_row(self, tmp_path):
        text = BASIC_CSV.replace("10.2,10.6,10.0,10.4", "-3.0,10.6,10.0,10.4")
        with pytest.raises(ValidationError, match="line 3"):
            ingest_ohlc(write_csv(tmp_path, text))

    def test_malformed_row_names_line(self, tmp_path):
        text = BASIC_CSV.replace("2020-01-06,XX", "not-a-date,XX")
        with pytest.raises(ParseError, match="line 4"):
            ingest_ohlc(write_csv(tmp_path, text))

    def test_duplicate_row_rejected(self, tmp_path):
        text = BASIC_CSV + "2020-01-02,XX,10.0,10.5,9.5,10.2\n"
        with pytest.raises(ParseError, match="duplicate"):
            ingest_ohlc(write_csv(tmp_path, text))

    def test_leading_dates_dropped_to_intersection(self, tmp_path):
        text = BASIC_CSV.replace("2020-01-02,YY,20.0,21.0,19.0,20.5\n", "")
        series = ingest_ohlc(write_csv(tmp_path, text))
        # YY first observed on Jan 3, so Jan 2 is dropped for everyone
        assert series.dates[0] == dt.date(2020, 1, 3)
        assert len(series.dates) == 2

    def test_disjoint_ranges_are_data_error(self, tmp_path):
        # XX ends before YY begins: the one-date overlap is all fill
        text = """date,ticker,open,high,low,close
2020-01-02,XX,10.0,10.5,9.5,10.2
2020-01-03,YY,20.5,21.5,20.0,21.0
"""
        with pytest.raises(DataError):
            ingest_ohlc(write_csv(tmp_path, text))

    def test_excessive_fill_rejected(self, tmp_path):
        rows = ["date,ticker,open,high,low,close"]
        day = dt.date(2020, 1, 1)
        for i in range(30):
            rows.append(f"{day + dt.timedelta(days=i)},XX,10,10,10,10")
        rows.append(f"{day},YY,20,20,20,20")
        rows.append(f"{day + dt.timedelta(days=29)},YY,21,21,21,21")
        with pytest.raises(DataError, match="YY"):
            ingest_ohlc(write_csv(tmp_path, "\n".join(rows) + "\n"))

    def test_schema_mapping(self, tmp_path):
        text = BASIC_CSV.replace("date,ticker,open,high,low,close",
                                 "day,symbol,o,h,l,c")
        schema = {"date": "day", "ticker": "symbol", "open": "o",
                  "high": "h", "low": "l", "close": "c"}
        series = ingest_ohlc(write_csv(tmp_path, text), schema=schema)
        assert series.tickers == ("XX", "YY")

    def test_round_trip_bit_identical(self, tmp_path):
        original = ingest_ohlc(write_csv(tmp_path, BASIC_CSV))
        out = tmp_path / "roundtrip.csv"
        write_ohlc(original, out)
        again = ingest_ohlc(out)
        assert again.tickers == original.tickers
        assert again.dates == original.dates
        for name in ("open", "high", "low", "close"):
            assert np.array_equal(getattr(again, name), getattr(original, name))

    def test_gbm_round_trip_bit_identical(self, tmp_path, small_market):
        out = tmp_path / "gbm.csv"
        write_ohlc(small_market, out)
        again = ingest_ohlc(out)
        for name in ("open", "high", "low", "close"):
            assert np.array_equal(getattr(again, name), getattr(small_market, name))
        assert series_content_hash(again) == series_content_hash(small_market)


class TestPriceSeries:
    def test_arrays_immutable(self, small_market):
        with pytest.raises(ValueError):
            small_market.close[0, 0] = 1.0

    def test_invariants_enforced(self):
        dates = (dt.date(2020, 1, 2), dt.date(2020, 1, 3))
        good = np.full((2, 1), 10.0)
        with pytest.raises(ValidationError, match="low"):
            PriceSeries(("X",), dates, good, np.full((2, 1), 9.0), good, good)
        with pytest.raises(ValidationError, match="positive"):
            PriceSeries(("X",), dates, good, good, good, np.full((2, 1), -1.0))


class TestPriceTensor:
    def test_constant_prices_all_ones(self, flat_market):
        tensor = build_price_tensor(flat_market, 60, 50)
        assert np.all(tensor.values == 1.0)

    def test_doubling_close_normalization(self):
        closes = np.array([[1.0], [2.0], [4.0], [8.0]])
        series = PriceSeries(("X",), tuple(dt.date(2020, 1, i + 1) for i in range(4)),
                             closes, closes, closes, closes)
        tensor = build_price_tensor(series, 3, 3)
        assert np.allclose(tensor.values[2, 0], [0.25, 0.5, 1.0], atol=0)

    def test_last_close_column_is_one(self, small_market):
        tensor = build_price_tensor(small_market, 123, 50)
        assert np.array_equal(tensor.values[2, :, -1], np.ones(4))
        assert np.all(tensor.values > 0)

    def test_insufficient_history_is_range_error(self, small_market):
        with pytest.raises(ValueError, match="window"):
            build_price_tensor(small_market, 49, 50)
        build_price_tensor(small_market, 50, 50)  # boundary passes


class TestRelatives:
    def test_direct_arithmetic(self):
        closes = np.array([[100.0], [102.0]])
        series = PriceSeries(("X",), (dt.date(2020, 1, 2), dt.date(2020, 1, 3)),
                             closes, closes, closes, closes)
        assert price_relatives(series, 1)[0] == pytest.approx(1.02, abs=0)

    def test_constant_prices_identity(self, flat_market):
        assert np.all(price_relatives(flat_market, 5) == 1.0)

    def test_cash_component(self, flat_market):
        y = price_relatives(flat_market, 5, include_cash=True)
        assert y.shape == (4,)
        assert y[0] == 1.0

    def test_t_zero_is_range_error(self, flat_market):
        with pytest.raises(ValueError):
            price_relatives(flat_market, 0)

    @given(t=st.integers(1, 290), k=st.integers(1, 9))
    @settings(max_examples=30, deadline=None)
    def test_telescoping(self, t, k):
        series = synth_gbm(3, 300, 0.0005, 0.02, seed=99)
        product = np.ones(3)
        for step in range(t, t + k):
            product = product * price_relatives(series, step)
        direct = series.close[t + k - 1] / series.close[t - 1]
        assert np.allclose(product, direct, rtol=1e-12, atol=0)


class TestSplit:
    def test_75_25(self, small_market):
        train, test = split_train_test(small_market, 0.75, window=50)
        assert len(train.dates) == 225
        assert len(test.dates) - test.warmup == 75
        assert test.warmup == 50

    def test_floor_rule(self):
        series = synth_gbm(2, 4, 0.0, 0.0, seed=0)
        train, test = split_train_test(series, 0.75, window=1)
        assert len(train.dates) == 3
        assert len(test.dates) - test.warmup == 1

    def test_fraction_bounds(self, small_market):
        with pytest.raises(ValueError):
            split_train_test(small_market, 1.0)
        with pytest.raises(ValueError):
            split_train_test(small_market, 0.0)

    def test_concatenation_reproduces_original(self, small_market):
        train, test = split_train_test(small_market, 0.6, window=30)
        dates = train.dates + test.dates[test.warmup:]
        assert dates == small_market.dates
        closes = np.vstack([train.close, test.close[test.warmup:]])
        assert np.array_equal(closes, small_market.close)


class TestSynthGbm:
    def test_zero_vol_exact_exponential(self):
        series = synth_gbm(2, 50, [0.01, -0.002], 0.0, seed=5)
        t = np.arange(50)[:, None]
        expected = 100.0 * np.exp(np.array([0.01, -0.002]) * t)
        assert np.allclose(series.close, expected, rtol=1e-12)
        assert np.array_equal(series.high, np.maximum(series.open, series.close))

    def test_same_seed_identical(self):
        a = synth_gbm(3, 100, 0.001, 0.02, seed=77)
        b = synth_gbm(3, 100, 0.001, 0.02, seed=77)
        assert np.array_equal(a.close, b.close)
        assert np.array_equal(a.high, b.high)

    def test_sample_moments_match(self):
        drift, vol = 0.005, 0.01
        series = synth_gbm(2, 50_000, drift, vol, seed=21)
        log_returns = np.diff(np.log(series.close), axis=0)
        assert np.all(np.abs(log_returns.mean(axis=0) - drift) < 0.05 * drift)
        assert np.all(np.abs(log_returns.std(axis=0, ddof=1) - vol) < 0.05 * vol)

    def test_correlation_respected(self):
        corr = np.array([[1.0, 0.8], [0.8, 1.0]])
        series = synth_gbm(2, 50_000, 0.0, 0.02, corr=corr, seed=3)
        log_returns = np.diff(np.log(series.close), axis=0)
        sample = np.corrcoef(log_returns.T)[0, 1]
        assert abs(sample - 0.8) < 0.02

    def test_non_psd_corr_rejected(self):
        bad = np.array([[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(ValueError, match="positive semi-definite"):
            synth_gbm(2, 10, 0.0, 0.01, corr=bad, seed=0)

    def test_ohlc_invariants_hold(self, small_market):
        assert np.all(small_market.low <= small_market.high)
        assert np.all(small_market.open >= small_market.low)
        assert np.all(small_market.close <= small_market.high)


class TestCashAsset:
    def test_constant_relative(self, small_market):
        with_cash = add_cash_asset(small_market)
        assert with_cash.tickers[0] == "CASH"
        y = price_relatives(with_cash, 10)
        assert y[0] == 1.0
        assert np.array_equal(y[1:], price_relatives(small_market, 10))


def test_csv_text_matches_file_writer(tmp_path, flat_market):
    path = tmp_path / "x.csv"
    write_ohlc(flat_market, path)
    assert path.read_text() == ohlc_csv_text(flat_market)
