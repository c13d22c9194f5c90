import csv
import math
from datetime import date

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from etacnn.dataio import DayMatrix
from etacnn.errors import ConfigurationError
from etacnn.evalbench import (
    ARBaseline,
    CoverageError,
    ExternalPredictions,
    HistoricalMeanBaseline,
    ar_predict_next,
    compute_metrics,
    fit_ar,
    format_table,
    run_benchmark,
    write_benchmark_report,
    write_external_predictions,
)

from conftest import constant_days


def _day(values, d=1):
    return DayMatrix(np.asarray(values, dtype=float), route_id="R", service_date=date(2021, 3, d))


# metrics ---------------------------------------------------------------------------------------


def test_single_trip_example():
    m = compute_metrics([110, 190], [100, 200])
    assert m.mae == pytest.approx(10.0)
    assert m.mape == pytest.approx(7.5)
    assert m.rmse == pytest.approx(10.0)
    assert m.n_cells == 2


def test_per_trip_rmse_differs_from_pooled():
    actual = np.array([[100.0, 100.0], [100.0, 100.0]])
    predicted = actual + np.array([[10.0, -10.0], [20.0, -20.0]])
    m = compute_metrics(predicted, actual)
    assert m.rmse == pytest.approx(15.0)
    assert m.rmse_pooled == pytest.approx(math.sqrt(250.0))


def test_perfect_prediction_is_all_zero():
    a = np.array([[50.0, 60.0], [70.0, 0.0]])
    m = compute_metrics(a, a)
    assert (m.mae, m.mape, m.rmse, m.rmse_pooled) == (0.0, 0.0, 0.0, 0.0)


def test_zero_actuals_are_excluded_from_mape_only():
    m = compute_metrics([[10.0, 110.0]], [[0.0, 100.0]])
    assert m.n_excluded == 1 and m.n_mape_cells == 1
    assert m.n_mape_cells + m.n_excluded == m.n_cells
    assert m.mape == pytest.approx(10.0)
    assert m.mae == pytest.approx(10.0)


def test_missing_cells_are_ignored():
    m = compute_metrics([[110.0, 999.0]], [[100.0, np.nan]])
    assert m.n_cells == 1 and m.mae == pytest.approx(10.0)
    m = compute_metrics([[110.0, 999.0]], [[100.0, 5.0]], validity=[[True, False]])
    assert m.n_cells == 1


def test_per_stop_breakdown():
    m = compute_metrics([[110.0, 200.0], [90.0, 180.0]], [[100.0, 200.0], [100.0, 200.0]])
    np.testing.assert_allclose(m.per_stop_mae, [10.0, 10.0])
    np.testing.assert_allclose(m.per_stop_mape, [10.0, 5.0])


@pytest.mark.parametrize("pred, actual", [([1.0], [1.0, 2.0]), ([np.nan], [1.0])])
def test_metric_input_errors(pred, actual):
    with pytest.raises(ConfigurationError):
        compute_metrics(pred, actual)


def test_no_ground_truth_is_an_error():
    with pytest.raises(ConfigurationError):
        compute_metrics([1.0], [np.nan])


positive = st.floats(1.0, 1000.0)


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, (3, 4), elements=positive),
    arrays(np.float64, (3, 4), elements=positive),
    st.floats(0.01, 100.0),
)
def test_scale_property(pred, actual, c):
    a = compute_metrics(pred, actual)
    b = compute_metrics(pred * c, actual * c)
    assert b.mae == pytest.approx(a.mae * c, rel=1e-9)
    assert b.rmse == pytest.approx(a.rmse * c, rel=1e-9)
    assert b.rmse_pooled == pytest.approx(a.rmse_pooled * c, rel=1e-9)
    assert b.mape == pytest.approx(a.mape, rel=1e-9)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (1, 5), elements=positive), arrays(np.float64, (1, 5), elements=positive))
def test_mae_bounded_by_rmse_on_one_trip(pred, actual):
    m = compute_metrics(pred, actual)
    assert m.mae <= m.rmse_pooled + 1e-9
    assert m.rmse == pytest.approx(m.rmse_pooled)


# baselines -------------------------------------------------------------------------------------


def test_historical_mean_of_a_cell():
    days = [_day([[v, 50.0]], d) for d, v in enumerate([100.0, 110.0, 120.0], start=1)]
    hm = HistoricalMeanBaseline(days)
    assert hm.predict(0, 0) == pytest.approx(110.0)


def test_historical_mean_unseen_slot_falls_back():
    days = [_day([[100.0], [200.0]]), _day([[120.0]], 2)]
    hm = HistoricalMeanBaseline(days)
    assert hm.predict(5, 0) == pytest.approx(140.0)
    assert hm.predict_day(_day([[0.0]] * 4)).ravel()[3] == pytest.approx(140.0)


def test_historical_mean_constant_data_is_exact():
    days = constant_days()
    hm = HistoricalMeanBaseline(days[:2])
    assert compute_metrics(hm.predict_day(days[2]), days[2].travel_times).mae == 0.0


def test_historical_mean_needs_data():
    with pytest.raises(ConfigurationError):
        HistoricalMeanBaseline([])


def test_ar1_through_origin():
    coef, const = fit_ar([np.array([1.0, 2.0, 4.0, 8.0])], p=1)
    assert coef[0] == pytest.approx(2.0)
    assert const == 0.0
    assert ar_predict_next([1.0, 2.0, 4.0, 8.0], coef) == pytest.approx(16.0)


def test_ar_matches_lstsq_oracle(rng):
    s = np.cumsum(rng.normal(size=60)) + 50
    coef, const = fit_ar([s], p=3, intercept=True)
    X = np.column_stack([s[2:-1], s[1:-2], s[:-3], np.ones(57)])
    ref = np.linalg.lstsq(X, s[3:], rcond=None)[0]
    np.testing.assert_allclose(np.append(coef, const), ref, rtol=1e-8)


def test_constant_series_predicts_constant():
    coef, const = fit_ar([np.full(10, 7.0)], p=1)
    assert ar_predict_next(np.full(10, 7.0), coef, const) == pytest.approx(7.0)


def test_ar_order_too_large():
    with pytest.raises(ConfigurationError):
        fit_ar([np.array([1.0, 2.0])], p=2)


def test_ar_baseline_singular_fit_falls_back():
    days = constant_days()
    ar = ARBaseline(days[:2], p=1, intercept=True)  # constant lags + intercept: singular
    assert ar.fallback == list(range(days[0].n_segments))
    assert compute_metrics(ar.predict_day(days[2]), days[2].travel_times).mae == 0.0


def test_ar_baseline_uses_previous_trip(small_days):
    ar = ARBaseline(small_days[:4], p=1)
    day = small_days[4]
    pred = ar.predict_day(day)
    t = day.travel_times
    k = 2
    for tau in range(1, day.n_trips):
        if np.isfinite(t[tau - 1, k]) and k not in ar.fallback:
            assert pred[tau, k] == pytest.approx(ar.coef[k, 0] * t[tau - 1, k] + ar.const[k])


# benchmark -------------------------------------------------------------------------------------


class Oracle:
    name = "oracle"

    def predict_day(self, day):
        return day.travel_times.copy()


class Partial:
    name = "partial"

    def predict_day(self, day):
        out = day.travel_times.copy()
        out[0, 0] = np.nan
        return out


def test_oracle_row_is_all_zero(small_days):
    days = [_day(d.travel_times, i + 1) for i, d in enumerate(small_days[4:])]
    for d in days:
        d.travel_times[np.isnan(d.travel_times)] = 100.0
    rows = run_benchmark(None, [Oracle()], days, trip_start=False)
    assert len(rows) == 1
    m = rows[0].report
    assert (m.mape, m.mae, m.rmse) == (0.0, 0.0, 0.0)


def test_uncovered_cells_are_listed():
    day = _day([[100.0, 100.0]])
    with pytest.raises(CoverageError) as info:
        run_benchmark(None, [Partial()], [day])
    assert info.value.cells == [(date(2021, 3, 1), 1, 1)]


def test_benchmark_rows_and_report(small_checkpoint, small_days, tmp_path):
    test = small_days[4:]
    rows = run_benchmark(small_checkpoint, [HistoricalMeanBaseline(small_days[:4]),
                                            ARBaseline(small_days[:4], p=1)], test)
    assert [(r.predictor, r.mode) for r in rows] == [
        ("mask-CNN", "one-step"), ("historical-mean", "one-step"), ("AR(1)", "one-step"),
        ("mask-CNN", "trip-start"), ("historical-mean", "trip-start"), ("AR(1)", "trip-start"),
    ]
    n = sum(int((~d.missing).sum()) for d in test)
    assert all(r.report.n_cells == n for r in rows)
    write_benchmark_report(rows, tmp_path / "b.csv")
    table = list(csv.reader(open(tmp_path / "b.csv")))
    assert table[0][:6] == ["route", "predictor", "mode", "MAPE_pct", "MAE_s", "RMSE_s"]
    assert len(table) == 7
    assert "mask-CNN" in format_table(rows)


def test_external_predictions_round_trip(small_days, tmp_path):
    test = small_days[4:]
    hm = HistoricalMeanBaseline(small_days[:4])
    preds = [hm.predict_day(d) for d in test]
    write_external_predictions(test, preds, tmp_path / "ext.csv")
    ext = ExternalPredictions.from_csv(tmp_path / "ext.csv", name="ext")
    a = run_benchmark(None, [hm], test, trip_start=False)[0].report
    b = run_benchmark(None, [ext], test, trip_start=False)[0].report
    assert (a.mape, a.mae, a.rmse) == (b.mape, b.mae, b.rmse)


def test_external_predictions_bad_header(tmp_path):
    (tmp_path / "x.csv").write_text("date,trip,seg,value\n")
    with pytest.raises(ConfigurationError):
        ExternalPredictions.from_csv(tmp_path / "x.csv")
