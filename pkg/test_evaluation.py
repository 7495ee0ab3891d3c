import json

import numpy as np
import pandas as pd
import pytest

from errors import ConfigurationError, DatasetSchemaError, DimensionError, MetricError
from evaluation import (ALL_ZONES, EvaluationConfig, ForecastSet, cvrmse, export_metrics, interval_coverage,
                        per_horizon_cvrmse, pinball_scores, plateau_step, read_forecast_dump,
                        summarize, write_forecast_dump)

LEVELS = [0.005, 0.025, 0.05, 0.5, 0.95, 0.975, 0.995]
NORMAL_Z = [-2.5758293, -1.9599640, -1.6448536, 0.0, 1.6448536, 1.9599640, 2.5758293]


def _forecast_set(actuals, center, spread=1.0):
    offsets = np.asarray(NORMAL_Z) * spread
    return ForecastSet(np.asarray(center)[..., None] + offsets, actuals, LEVELS)


def test_cvrmse_examples():
    assert cvrmse([10.0, 10.0], [9.5, 10.5]) == pytest.approx(5.0)
    assert cvrmse([20.0, 22.0, 24.0], [20.0, 22.0, 24.0]) == 0.0
    with pytest.raises(MetricError):
        cvrmse([1.0, -1.0], [0.0, 0.0])
    with pytest.raises(DimensionError):
        cvrmse([1.0, 2.0], [1.0])


def test_constant_bias_gives_scaled_error():
    actual = 20.0 + np.array([-1.0, 1.0])[:, None, None] * np.ones((2, 6, 5))
    metrics = per_horizon_cvrmse(_forecast_set(actual, actual + 0.4))
    np.testing.assert_allclose(metrics.per_zone, np.full((5, 6), 100 * 0.4 / 20.0))
    np.testing.assert_allclose(metrics.aggregate, 2.0)
    np.testing.assert_allclose(metrics.mean_curve, 2.0)


def test_single_instance_and_last_step_agree_with_cvrmse(rng):
    actual = rng.uniform(18, 24, size=(1, 4, 5))
    center = actual + rng.normal(0, 0.3, size=actual.shape)
    metrics = per_horizon_cvrmse(_forecast_set(actual, center))
    for z in range(5):
        for h in range(4):
            assert metrics.per_zone[z, h] == pytest.approx(100 * abs(actual[0, h, z] - center[0, h, z])
                                                           / actual[0, h, z])
    many = rng.uniform(18, 24, size=(30, 4, 5))
    guess = many + rng.normal(0, 0.5, size=many.shape)
    metrics = per_horizon_cvrmse(_forecast_set(many, guess))
    for z in range(5):
        assert metrics.per_zone[z, -1] == pytest.approx(cvrmse(many[:, -1, z], guess[:, -1, z]))


def test_horizon_frame_has_zone_and_mean_rows(rng):
    actual = rng.uniform(18, 24, size=(3, 96, 5))
    frame = per_horizon_cvrmse(_forecast_set(actual, actual + 0.1)).to_frame()
    assert list(frame.columns) == ["zone", "step", "cvrmse_pct"]
    counts = frame["zone"].value_counts()
    assert all(counts[str(z)] == 96 for z in range(1, 6))
    assert counts[ALL_ZONES] == 96


def test_coverage_extremes(rng):
    actual = rng.uniform(18, 24, size=(10, 4, 5))
    wide = interval_coverage(_forecast_set(actual, actual, spread=100.0))
    assert wide.coverage == [1.0, 1.0, 1.0]
    far = ForecastSet(np.repeat((actual + 50.0)[..., None], len(LEVELS), axis=-1), actual, LEVELS)
    assert interval_coverage(far).coverage == [0.0, 0.0, 0.0]
    assert interval_coverage(far).crossing_freq == 0.0


def test_coverage_of_calibrated_gaussian():
    rng = np.random.default_rng(42)
    center = rng.uniform(18, 24, size=(2000, 4, 5))
    actual = center + rng.normal(size=center.shape)
    report = interval_coverage(_forecast_set(actual, center))
    for nominal, observed in zip(report.levels, report.coverage):
        assert abs(observed - nominal) < 0.02
    assert report.coverage == sorted(report.coverage)


def test_coverage_grows_with_interval_level(rng):
    actual = rng.uniform(18, 24, size=(60, 6, 5))
    center = actual + rng.normal(0.4, 1.0, size=actual.shape)
    spread = rng.uniform(0.1, 2.0, size=actual.shape)[..., None]
    values = center[..., None] + np.asarray(NORMAL_Z) * spread + rng.normal(0.0, 0.3, size=actual.shape + (7,))
    report = interval_coverage(ForecastSet(values, actual, LEVELS), levels=[0.9, 0.95, 0.99])
    assert report.crossing_freq > 0.0
    assert np.all(np.diff(report.coverage) >= 0.0)


def test_crossed_quantiles_are_sorted_and_counted():
    actual = np.full((1, 1, 1), 20.0)
    values = np.array([19.0, 19.5, 21.0, 20.0, 19.8, 20.5, 21.5]).reshape(1, 1, 1, 7)
    report = interval_coverage(ForecastSet(values, actual, LEVELS), levels=[0.99])
    assert report.crossing_freq == 1.0
    assert report.coverage == [1.0]


def test_coverage_needs_matching_quantiles(rng):
    actual = rng.uniform(18, 24, size=(2, 3, 5))
    with pytest.raises(ConfigurationError):
        interval_coverage(_forecast_set(actual, actual), levels=[0.8])


def test_pinball_scores_zero_for_exact_forecast():
    actual = np.full((2, 3, 5), 21.0)
    scores = pinball_scores(ForecastSet(np.repeat(actual[..., None], 7, axis=-1), actual, LEVELS))
    assert set(scores) == set(LEVELS)
    assert all(v == 0.0 for v in scores.values())


def test_plateau_step():
    assert plateau_step([1.0, 2.0, 3.0, 4.0, 4.0, 4.0, 4.0, 4.0]) == 4
    assert plateau_step([2.0, 2.0, 2.0, 2.0]) == 1
    assert plateau_step([1.0, 2.0, 3.0, 10.0], tolerance=0.01) == 4


def test_summary_structure(rng):
    actual = rng.uniform(18, 24, size=(5, 8, 5))
    forecasts = _forecast_set(actual, actual + rng.normal(0, 0.2, actual.shape))
    summary = summarize(per_horizon_cvrmse(forecasts), interval_coverage(forecasts), pinball_scores(forecasts),
                        len(forecasts))
    assert summary["instances"] == 5 and summary["horizon"] == 8
    assert set(summary["cvrmse_pct"]) == {"1", "2", "3", "4", "5", ALL_ZONES}
    assert [c["level"] for c in summary["coverage"]] == [0.9, 0.95, 0.99]
    assert 1 <= summary["plateau_step"] <= 8
    json.dumps(summary)


def test_forecast_set_shape_checks():
    with pytest.raises(DimensionError):
        ForecastSet(np.zeros((2, 3, 5, 7)), np.zeros((2, 3, 4)), LEVELS)
    with pytest.raises(DimensionError):
        ForecastSet(np.zeros((2, 3, 5, 6)), np.zeros((2, 3, 5)), LEVELS)
    with pytest.raises(ConfigurationError):
        per_horizon_cvrmse(ForecastSet(np.zeros((0, 3, 5, 7)), np.zeros((0, 3, 5)), LEVELS))


def test_forecast_dump_round_trip(rng, tmp_path):
    actual = np.round(rng.uniform(18, 24, size=(3, 4, 5)), 3)
    center = np.round(actual + rng.normal(0, 0.3, size=actual.shape), 3)
    original = ForecastSet(np.round(center[..., None] + np.asarray(NORMAL_Z), 3), actual, LEVELS,
                           instances=[100, 104, 108])
    path = tmp_path / "forecasts.csv"
    write_forecast_dump(original, str(path))
    loaded = read_forecast_dump(str(path))
    np.testing.assert_array_equal(loaded.forecasts, original.forecasts)
    np.testing.assert_array_equal(loaded.actuals, original.actuals)
    np.testing.assert_array_equal(loaded.instances, [100, 104, 108])
    assert loaded.quantile_levels == LEVELS


def test_forecast_dump_reports_bad_row(rng, tmp_path):
    actual = rng.uniform(18, 24, size=(1, 2, 5))
    path = tmp_path / "forecasts.csv"
    write_forecast_dump(_forecast_set(actual, actual), str(path))
    lines = path.read_text().splitlines()
    fields = lines[7].split(",")
    fields[4] = "warm"
    lines[7] = ",".join(fields)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetSchemaError) as info:
        read_forecast_dump(str(path))
    assert (info.value.column, info.value.row) == ("value_c", 8)


def test_metrics_export_round_trip(rng, tmp_path):
    actual = rng.uniform(18, 24, size=(4, 96, 5))
    metrics = per_horizon_cvrmse(_forecast_set(actual, actual + rng.normal(0, 0.2, actual.shape)))
    csv_path, jsonl_path = tmp_path / "horizon.csv", tmp_path / "horizon.jsonl"
    export_metrics(metrics, str(csv_path))
    export_metrics(metrics, str(jsonl_path), format="jsonl")
    for frame in (pd.read_csv(csv_path, dtype={"zone": str}), pd.read_json(jsonl_path, lines=True, dtype={"zone": str})):
        assert len(frame) == 6 * 96
        zone_three = frame[frame["zone"] == "3"]
        assert len(zone_three) == 96
        np.testing.assert_allclose(zone_three["cvrmse_pct"].to_numpy(), metrics.per_zone[2], rtol=1e-5)
    with pytest.raises(ConfigurationError):
        export_metrics(metrics, str(tmp_path / "horizon.xml"), format="xml")


def test_evaluation_config_validation():
    EvaluationConfig().validate()
    with pytest.raises(ConfigurationError):
        EvaluationConfig(intervals=[1.0]).validate()
    with pytest.raises(ConfigurationError):
        EvaluationConfig(plateau_tolerance=0.0).validate()
