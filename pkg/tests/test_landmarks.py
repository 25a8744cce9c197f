import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blinkwise.exceptions import DegenerateEyeError, MalformedRowError, UnsupportedFormatError
from blinkwise.landmarks import (
    EarSeries,
    LandmarkFrame,
    compute_ear,
    ear_to_eye,
    frame_ear,
    load_stream,
    write_ear,
    write_landmarks,
)

from conftest import eye_points

OPEN_EYE = np.array([[0, 0], [1, 1], [3, 1], [4, 0], [3, -1], [1, -1]], dtype=float)


def test_ear_hand_value():
    assert compute_ear(OPEN_EYE) == pytest.approx(1.0)


def test_closed_eye_is_zero():
    closed = OPEN_EYE.copy()
    closed[[1, 2, 4, 5], 1] = 0.0
    assert compute_ear(closed) == 0.0


def test_ear_scale_invariant():
    assert compute_ear(2.0 * OPEN_EYE) == pytest.approx(compute_ear(OPEN_EYE))


def test_coincident_corners_raise():
    eye = OPEN_EYE.copy()
    eye[3] = eye[0]
    with pytest.raises(DegenerateEyeError):
        compute_ear(eye)


@given(st.floats(0.0, 0.6), st.floats(5.0, 80.0), st.floats(-np.pi, np.pi))
def test_ear_to_eye_round_trip(ear, width, angle):
    assert compute_ear(ear_to_eye(ear, width, (10.0, 20.0), angle)) == pytest.approx(ear, abs=1e-9)


def test_binocular_mean():
    frame = LandmarkFrame(0, 0.0, eye_points(0.30), eye_points(0.20))
    sample = frame_ear(frame)
    assert sample.ear == pytest.approx(0.25)
    assert not sample.single_eye


def test_single_eye_fallback():
    left = eye_points(0.1)
    left[3] = left[0]
    sample = frame_ear(LandmarkFrame(3, 100.0, left, eye_points(0.28)))
    assert sample.ear == pytest.approx(0.28)
    assert sample.single_eye


def _landmark_text(rows):
    frames = [LandmarkFrame(i, i * 33.3, eye_points(e), eye_points(e)) for i, e in enumerate(rows)]
    buf = io.StringIO()
    write_landmarks(frames, buf)
    return buf.getvalue()


def test_three_landmark_rows():
    series = load_stream(io.StringIO(_landmark_text([0.3, 0.2, 0.3])))
    assert len(series) == 3
    np.testing.assert_allclose(series.ear, [0.3, 0.2, 0.3])
    assert series.report.rows_read == 3


def test_empty_file_gives_empty_series():
    series = load_stream(io.StringIO(""))
    assert len(series) == 0
    assert series.report.rows_read == 0


def test_short_landmark_row_is_malformed():
    text = _landmark_text([0.3, 0.3]).rstrip("\n")
    lines = text.split("\n")
    lines[-1] = ",".join(lines[-1].split(",")[:-1])
    with pytest.raises(MalformedRowError) as info:
        load_stream(io.StringIO("\n".join(lines) + "\n"))
    assert info.value.line_number == len(lines)


def test_unknown_version_line():
    with pytest.raises(UnsupportedFormatError):
        load_stream(io.StringIO("# something-else v9\nframe,ts_ms,ear\n0,0,0.3\n"))


def test_provenance_lines_are_skipped():
    text = "# blinkwise-ear v1\n# seed: 3\n# tool: x\nframe,ts_ms,ear\n0,0,0.3\n1,33.3,0.25\n"
    series = load_stream(io.StringIO(text))
    np.testing.assert_allclose(series.ear, [0.3, 0.25])


def test_short_gap_is_interpolated():
    text = "frame,ts_ms,ear\n0,0,0.3\n1,33.3,0.3\n4,133.3,0.0\n"
    series = load_stream(io.StringIO(text))
    np.testing.assert_array_equal(series.frames, [0, 1, 2, 3, 4])
    np.testing.assert_allclose(series.ear[2:4], [0.2, 0.1])
    assert series.report.frames_interpolated == 2


def test_long_gap_splits_segments():
    text = "frame,ts_ms,ear\n0,0,0.3\n1,33,0.3\n20,660,0.3\n21,693,0.3\n"
    series = load_stream(io.StringIO(text))
    assert [len(s) for s in series.segments()] == [2, 2]


def test_ear_file_round_trip(tmp_path):
    series = EarSeries.from_values([0.3, 0.1, 0.2875], fps=25.0)
    write_ear(series, tmp_path / "x.ear.csv", {"seed": 1})
    back = load_stream(tmp_path / "x.ear.csv")
    np.testing.assert_array_equal(back.ear, series.ear)
    assert back.fps == pytest.approx(25.0)


@settings(max_examples=30)
@given(st.lists(st.floats(0.0, 0.5, allow_nan=False), min_size=1, max_size=40))
def test_write_read_identity(values):
    buf = io.StringIO()
    write_ear(EarSeries.from_values(values), buf)
    buf.seek(0)
    np.testing.assert_array_equal(load_stream(buf).ear, values)
