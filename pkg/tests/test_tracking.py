import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_pose
from oracles import brute_force_assignment
from crowdspeak.errors import RangeError, ValidationError
from crowdspeak.tracking import (PoseTrack, TrackerConfig, assign_poses, build_tracks, head_keypoint,
                                 load_tracks, pose_distance, solve_gated_assignment, split_track,
                                 write_tracks)


def chest(x, y, frame=0, person=None):
    return make_pose(frame, {1: (x, y)}, person)


def test_pose_distance_examples(rng):
    a = chest(0, 0)
    assert pose_distance(a, a) == 0.0
    assert pose_distance(a, chest(3, 4)) == 5.0
    for _ in range(50):
        p, q = rng.normal(size=2) * 100, rng.normal(size=2) * 100
        d = pose_distance(chest(*p), chest(*q))
        assert abs(d - np.sqrt(((p - q) ** 2).sum())) < 1e-12
    assert pose_distance(a, make_pose(0, {0: (1, 1)})) == float("inf")


def test_assign_empty_and_unique():
    cfg = TrackerConfig(5.0, 10)
    m, u = assign_poses([], [chest(0, 0), chest(1, 1)], cfg)
    assert m == [] and len(u) == 2
    t0, t1 = PoseTrack(0, 0), PoseTrack(1, 0)
    d0, d1 = chest(1, 0), chest(9, 0)
    m, u = assign_poses([(t0, chest(0, 0), 0), (t1, chest(10, 0), 0)], [d0, d1], cfg)
    assert {(t.track_id, id(d)) for t, d in m} == {(0, id(d0)), (1, id(d1))} and u == []


def test_assignment_matches_brute_force_5x5(rng):
    for _ in range(20):
        cost = rng.uniform(0, 10, (5, 5))
        pairs = solve_gated_assignment(cost, 6.0)
        n, total = brute_force_assignment(cost, 6.0)
        assert len(pairs) == n
        assert abs(sum(cost[i, j] for i, j in pairs) - total) < 1e-9


@given(st.integers(0, 6), st.integers(0, 6), st.integers(0, 2**31 - 1))
def test_assignment_optimal_property(r, c, seed):
    cost = np.random.default_rng(seed).uniform(0, 10, (r, c))
    pairs = solve_gated_assignment(cost, 5.0)
    assert all(cost[i, j] <= 5.0 for i, j in pairs)
    assert len({i for i, _ in pairs}) == len(pairs) == len({j for _, j in pairs})
    if r and c:
        n, total = brute_force_assignment(cost, 5.0)
        assert len(pairs) == n
        assert abs(sum(cost[i, j] for i, j in pairs) - total) < 1e-9


def test_single_pose_per_frame_one_track():
    frames = {n: [chest(100 + 0.5 * n, 200, n)] for n in range(100)}
    tracks = build_tracks(frames, TrackerConfig(10.0, 30))
    assert len(tracks) == 1 and len(tracks[0]) == 100


def test_gap_is_interpolated_linearly():
    frames = {n: [chest(10.0 * n, 5.0 * n, n)] for n in list(range(10)) + list(range(12, 21))}
    tr = build_tracks(frames, TrackerConfig(50.0, 5))
    assert len(tr) == 1
    t = tr[0]
    assert t.start_frame == 0 and t.end_frame == 20
    assert [i for i, f in enumerate(t.interpolated) if f] == [10, 11]
    a, b = t.pose_at(9).keypoints[1, :2], t.pose_at(12).keypoints[1, :2]
    for m in (10, 11):
        p = t.pose_at(m).keypoints[1, :2]
        np.testing.assert_allclose(p, a + (m - 9) / 3 * (b - a), atol=1e-12)


def test_stale_track_closed():
    frames = {n: [chest(0, 0, n)] for n in list(range(5)) + list(range(20, 25))}
    tr = build_tracks(frames, TrackerConfig(50.0, 10))
    assert [(t.start_frame, t.end_frame) for t in tr] == [(0, 4), (20, 24)]


def test_four_agents_no_identity_switch(rng):
    d_th = 30.0
    base = np.array([[0, 0], [120, 0], [0, 120], [120, 120]], float) + 500
    frames = {}
    pos = base.copy()
    for n in range(200):
        pos = pos + rng.normal(scale=1.0, size=pos.shape)
        order = rng.permutation(4)
        frames[n] = [chest(*pos[a], n, f"A{a}") for a in order]
    tracks = build_tracks(frames, TrackerConfig(d_th, 15))
    assert len(tracks) == 4
    for t in tracks:
        assert len({p.person for p in t.poses}) == 1 and len(t) == 200


def test_undetected_chest_dropped():
    stats = {}
    frames = {0: [make_pose(0, {0: (1, 1)})], 1: [chest(0, 0, 1)]}
    tr = build_tracks(frames, TrackerConfig(5.0, 3), stats)
    assert len(tr) == 1 and tr[0].start_frame == 1
    assert stats["dropped_undetected_chest"] == 1


def test_tracker_config_validation():
    with pytest.raises(ValidationError):
        TrackerConfig(0.0, 5)
    with pytest.raises(ValidationError):
        TrackerConfig(5.0, 0)


def _long_track(n=100):
    return PoseTrack(0, 0, [chest(i, 0, i) for i in range(n)], [False] * n)


def test_split_track():
    a, b = split_track(_long_track(), 50, 7)
    assert (a.start_frame, a.end_frame, b.start_frame, b.end_frame, b.track_id) == (0, 49, 50, 99, 7)
    a, b = split_track(_long_track(), 1, 7)
    assert len(a) == 1
    with pytest.raises(RangeError):
        split_track(_long_track(), 0, 7)
    with pytest.raises(RangeError):
        split_track(_long_track(), 100, 7)


@given(st.integers(1, 99))
def test_split_reassembles(frame):
    t = _long_track()
    a, b = split_track(t, frame, 1)
    assert a.poses + b.poses == t.poses
    assert a.interpolated + b.interpolated == t.interpolated


def test_head_keypoint():
    assert np.array_equal(head_keypoint(make_pose(0, {0: (5, 5)})), [5, 5])
    np.testing.assert_allclose(head_keypoint(make_pose(0, {0: (0, 0), 15: (2, 0), 16: (-2, 0)})), [0, 0])
    assert head_keypoint(make_pose(0, {4: (1, 1)})) is None


@given(st.sets(st.sampled_from([0, 15, 16, 17, 18]), min_size=1), st.integers(0, 10**6))
def test_head_keypoint_mean(subset, seed):
    r = np.random.default_rng(seed)
    pts = {j: tuple(r.normal(size=2)) for j in subset}
    np.testing.assert_allclose(head_keypoint(make_pose(0, pts)), np.mean(list(pts.values()), axis=0),
                               atol=1e-12)


def test_tracks_roundtrip_and_determinism(tmp_path, rng):
    frames = {n: [chest(*(rng.uniform(0, 500, 2)), n, "P1") for _ in range(3)] for n in range(30)}
    cfg = TrackerConfig(40.0, 5)
    a, b = build_tracks(frames, cfg), build_tracks(frames, cfg)
    write_tracks(tmp_path / "a.ndjson", a)
    write_tracks(tmp_path / "b.ndjson", b)
    assert (tmp_path / "a.ndjson").read_bytes() == (tmp_path / "b.ndjson").read_bytes()
    back = load_tracks(tmp_path / "a.ndjson")
    def key(ts):
        return [(t.track_id, t.start_frame, t.person, t.interpolated,
                 [(p.frame_index, p.keypoints.tobytes()) for p in t.poses]) for t in ts]
    assert key(back) == key(a)
    for t in a:
        assert [p.frame_index for p in t.poses] == list(range(t.start_frame, t.end_frame + 1))
