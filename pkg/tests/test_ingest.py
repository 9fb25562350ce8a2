import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_pose
from crowdspeak.errors import MissingDataError, ParseError, RangeError, SchemaError
from crowdspeak.ingest import (AccelSeries, VadSeries, aggregate_label, frames_per_segment, group_key,
                               load_accel_csv, load_pose_frames, load_vad_csv, resample_accel,
                               segment_track, write_accel_csv, write_pose_frames, write_vad_csv)
from crowdspeak.tracking import PoseTrack


def _write_lines(path, recs):
    path.write_text("".join(json.dumps(r) + "\n" for r in recs))


def test_all_undetected_pose(tmp_path):
    p = tmp_path / "poses.ndjson"
    _write_lines(p, [{"frame": 0, "kp": [[0, 0, 0]] * 25}])
    frames = load_pose_frames(p)
    assert list(frames) == [0] and len(frames[0]) == 1
    assert not frames[0][0].detected.any()


def test_same_frame_grouped_in_file_order(tmp_path):
    p = tmp_path / "poses.ndjson"
    _write_lines(p, [{"frame": 3, "person": "a", "kp": [[1, 1, 1]] * 25},
                     {"frame": 3, "person": "b", "kp": [[2, 2, 1]] * 25}])
    frames = load_pose_frames(p)
    assert [q.person for q in frames[3]] == ["a", "b"]


def test_malformed_line_reports_line_number(tmp_path):
    p = tmp_path / "poses.ndjson"
    p.write_text(json.dumps({"frame": 0, "kp": [[0, 0, 0]] * 25}) + "\n{broken\n")
    with pytest.raises(ParseError) as e:
        load_pose_frames(p)
    assert e.value.line == 2


def test_wrong_keypoint_count(tmp_path):
    p = tmp_path / "poses.ndjson"
    _write_lines(p, [{"frame": 0, "kp": [[0, 0, 0]] * 24}])
    with pytest.raises(SchemaError):
        load_pose_frames(p)


def test_pose_roundtrip(tmp_path, rng):
    frames = {}
    for n in range(100):
        frames[n] = []
        for a in range(3):
            kp = np.c_[rng.uniform(0, 1920, (25, 2)), rng.uniform(0, 1, 25)]
            kp[rng.random(25) < 0.2, 2] = 0
            frames[n].append(type(make_pose(0))(kp, n, f"P{a}"))
    p = tmp_path / "poses.ndjson"
    write_pose_frames(p, frames)
    back = load_pose_frames(p)
    assert back == frames


def test_aggregate_label_examples():
    assert aggregate_label(VadSeries(np.ones(300)), 0, 3.0, 0.25) == 1
    v = np.zeros(300)
    v[:90] = 1
    assert aggregate_label(VadSeries(v), 0, 3.0, 0.25) == 1
    v = np.zeros(300)
    v[:74] = 1
    assert aggregate_label(VadSeries(v), 0, 3.0, 0.25) == 0


def test_aggregate_label_out_of_range():
    with pytest.raises(RangeError):
        aggregate_label(VadSeries(np.ones(100)), 0.5, 1.0)


@given(st.lists(st.booleans(), min_size=300, max_size=300), st.integers(0, 299))
def test_label_monotone_in_positives(bits, flip):
    v = np.array(bits, dtype=np.uint8)
    before = aggregate_label(VadSeries(v), 0, 3.0)
    v[flip] = 1
    assert aggregate_label(VadSeries(v), 0, 3.0) >= before


def _track(n_frames, start=0):
    return PoseTrack(0, start, [make_pose(start + i, {1: (10, 10)}) for i in range(n_frames)],
                     [False] * n_frames, "P0")


def test_segment_counts():
    segs = segment_track(_track(300), VadSeries(np.zeros(1000)), fps=30.0)
    assert [(s.start_frame, s.start_frame + s.n_frames) for s in segs] == [(0, 90), (90, 180), (180, 270)]
    assert len(segment_track(_track(90), VadSeries(np.zeros(300)), fps=30.0)) == 1
    assert segment_track(_track(89), VadSeries(np.zeros(300)), fps=30.0) == []


def test_segment_labels_match_recount(rng):
    vad = VadSeries((rng.random(1200) < 0.3).astype(np.uint8))
    segs = segment_track(_track(330, start=15), vad, fps=30.0)
    for s in segs:
        i0 = int(round(s.start_frame / 30.0 * 100))
        assert s.label == int(vad.values[i0:i0 + 300].mean() >= 0.25)
        assert s.group_key == group_key("P0", "cam0")


@given(st.integers(90, 2000), st.integers(0, 500), st.sampled_from([15.0, 25.0, 29.97, 30.0]))
def test_segmentation_is_partition(n, start, fps):
    segs = segment_track(_track(n, start), VadSeries(np.zeros(int((n + start) / fps * 100) + 200)), fps=fps)
    nf = frames_per_segment(fps)
    assert len(segs) == n // nf
    for k, s in enumerate(segs):
        assert s.start_frame == start + k * nf and s.n_frames == nf


def test_frames_per_segment_ceil():
    assert frames_per_segment(30.0) == 90
    assert frames_per_segment(29.97) == 90
    assert frames_per_segment(15.0) == 45


def test_vad_short_pad_and_error():
    segs = segment_track(_track(90), VadSeries(np.ones(250)), fps=30.0)
    assert len(segs) == 1
    with pytest.raises(RangeError):
        segment_track(_track(90), VadSeries(np.ones(150)), fps=30.0)


def test_resample_constant_and_ramp():
    t = np.arange(0, 5, 1 / 40)
    const = AccelSeries(40.0, t, np.tile([1.0, 2.0, 3.0], (len(t), 1)))
    w = resample_accel(const, 20.0, 1.0, 3.0)
    assert w.shape == (3, 60)
    np.testing.assert_allclose(w, np.array([[1.0], [2.0], [3.0]]) * np.ones(60))
    ramp = AccelSeries(40.0, t, np.c_[t, t, t])
    w = resample_accel(ramp, 20.0, 1.0, 3.0)
    np.testing.assert_allclose(w[0], 1.0 + np.arange(60) / 20.0, atol=1e-9)


def test_resample_matches_piecewise_linear_oracle(rng):
    t = np.arange(0, 6, 1 / 50)
    x = rng.normal(size=(len(t), 3))
    w = resample_accel(AccelSeries(50.0, t, x), 20.0, 0.73, 3.0)
    grid = 0.73 + np.arange(60) / 20.0
    for a in range(3):
        for g, val in zip(grid, w[a]):
            i = int(np.searchsorted(t, g, side="right")) - 1
            i = min(i, len(t) - 2)
            lam = (g - t[i]) / (t[i + 1] - t[i])
            assert abs(val - ((1 - lam) * x[i, a] + lam * x[i + 1, a])) < 1e-9


def test_resample_gap_is_missing_data():
    t = np.r_[np.arange(0, 2, 0.05), np.arange(2.5, 5, 0.05)]
    with pytest.raises(MissingDataError):
        resample_accel(AccelSeries(20.0, t, np.zeros((len(t), 3))), 20.0, 1.0, 3.0)
    with pytest.raises(MissingDataError):
        resample_accel(AccelSeries(20.0, t, np.zeros((len(t), 3))), 20.0, 4.0, 3.0)


def test_accel_and_vad_csv_roundtrip(tmp_path, rng):
    t = np.arange(200) / 20.0
    a = AccelSeries(20.0, t, rng.normal(size=(200, 3)))
    write_accel_csv(tmp_path / "a.csv", a)
    b = load_accel_csv(tmp_path / "a.csv")
    assert np.array_equal(a.t, b.t) and np.array_equal(a.xyz, b.xyz)
    assert abs(b.sample_rate - 20.0) < 1e-9
    v = VadSeries((rng.random(500) < 0.5).astype(np.uint8))
    write_vad_csv(tmp_path / "v.csv", v)
    w = load_vad_csv(tmp_path / "v.csv")
    assert np.array_equal(v.values, w.values) and w.rate == 100.0


def test_bad_csv_header(tmp_path):
    (tmp_path / "v.csv").write_text("time,value\n0,1\n")
    with pytest.raises(ParseError):
        load_vad_csv(tmp_path / "v.csv")
