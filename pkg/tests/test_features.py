import io
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from blinkwise.detection import BlinkEvent
from blinkwise.exceptions import PreconditionError, TooFewBlinksError
from blinkwise.features import (
    CalibrationStats,
    GlobalStandardizer,
    SubjectCalibrator,
    extract_features,
    read_features,
    write_features,
)
from blinkwise.landmarks import EarSeries


def _series(n=600):
    ear = np.full(n, 0.30)
    ear[105] = 0.10
    return EarSeries.from_values(ear)


def test_duration_and_amplitude():
    X = extract_features([BlinkEvent(100, 105, 110)], _series())
    assert X[0, 0] == 11
    assert X[0, 1] == pytest.approx(0.20)
    assert X[0, 2] == pytest.approx(0.20 / 5)


def test_frequency_of_fifth_blink():
    blinks = [BlinkEvent(s, s + 2, s + 4) for s in (10, 100, 200, 300, 495)]
    X = extract_features(blinks, _series())
    assert X[4, 3] == pytest.approx(1.0)
    assert X[0, 3] == pytest.approx(100.0 / 15)


def test_frequency_counts_from_stream_origin():
    series = EarSeries.from_values(np.full(50, 0.3), first_frame=1000)
    X = extract_features([BlinkEvent(1010, 1012, 1019)], series)
    assert X[0, 3] == pytest.approx(5.0)


def test_no_blinks_gives_empty_matrix():
    assert extract_features([], _series()).shape == (0, 4)


def test_unordered_blinks_rejected():
    with pytest.raises(ValueError):
        extract_features([BlinkEvent(50, 52, 54), BlinkEvent(10, 12, 14)], _series())


def test_calibration_uses_first_third():
    X = np.arange(120, dtype=float).reshape(30, 4)
    cal = SubjectCalibrator().fit(X)
    assert cal.n_calibration_ == 10
    np.testing.assert_allclose(cal.mean_, X[:10].mean(axis=0))
    np.testing.assert_array_equal(cal.remaining(X), X[10:])


def test_calibration_sigma_floor_warns():
    X = np.random.default_rng(0).normal(size=(12, 4))
    X[:, 2] = 7.0
    with pytest.warns(RuntimeWarning, match="velocity"):
        cal = SubjectCalibrator().fit(X)
    assert cal.scale_[2] == 1e-6


def test_too_few_alert_blinks():
    with pytest.raises(TooFewBlinksError):
        SubjectCalibrator().fit(np.ones((5, 4)))


def test_normalization_examples():
    cal = SubjectCalibrator.from_stats(CalibrationStats(np.full(4, 10.0), np.full(4, 2.0), 10))
    np.testing.assert_allclose(cal.transform([[10.0, 12.0, 7.0, 10.0]]), [[0.0, 1.0, -1.5, 0.0]])


@given(arrays(float, (9, 4), elements=st.floats(-50, 50)))
def test_calibrator_inverse(X):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cal = SubjectCalibrator().fit(X)
    np.testing.assert_allclose(cal.inverse_transform(cal.transform(X)), X, atol=1e-6)


def test_calibration_stats_round_trip():
    stats = CalibrationStats(np.array([1.0, 0.2, 0.03, 4.0]), np.array([0.5, 0.1, 0.01, 1.0]), 7)
    buf = io.StringIO()
    stats.write(buf, {"seed": 2})
    buf.seek(0)
    back = CalibrationStats.read(buf)
    np.testing.assert_array_equal(back.mu, stats.mu)
    assert back.count_used == 7


def test_global_standardizer():
    X = np.random.default_rng(1).normal(3.0, 2.0, size=(200, 4))
    std = GlobalStandardizer().fit(X)
    Z = std.transform(X)
    np.testing.assert_allclose(Z.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(Z.std(axis=0), 1, atol=1e-12)
    held_out = std.transform(X[:20] + 1.0)
    assert np.all(np.abs(held_out.mean(axis=0)) > 0)


def test_global_standardizer_single_row():
    with pytest.warns(RuntimeWarning):
        std = GlobalStandardizer().fit(np.ones((1, 4)))
    np.testing.assert_array_equal(std.scale_, 1e-6)


def test_global_standardizer_empty():
    with pytest.raises(PreconditionError):
        GlobalStandardizer().fit(np.empty((0, 4)))


def test_feature_file_round_trip(tmp_path):
    X = np.random.default_rng(2).normal(size=(6, 4))
    write_features(X, tmp_path / "f.csv", normalized=True, blink_idx=np.arange(3, 9), provenance={"seed": 0})
    table = read_features(tmp_path / "f.csv")
    np.testing.assert_array_equal(table.values, X)
    np.testing.assert_array_equal(table.blink_idx, np.arange(3, 9))
    assert table.normalized
