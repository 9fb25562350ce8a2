import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from crowdspeak.errors import FormatError, ValidationError
from crowdspeak.synth import FrameConfig, gen_frames
from crowdspeak.trajectories import (DEFAULT_PARAMS, DESCRIPTOR_DIM, TRAJ_MAGIC, FlowField, TrajectoryBatch,
                                     TrajectoryParams, describe, estimate_flow, extract, grid_nodes, prune,
                                     read_traj_bin, sample_points, track_point, write_traj_bin,
                                     write_traj_csv)

P = DEFAULT_PARAMS


def texture(h, w, seed=0, sigma=1.5):
    t = ndimage.gaussian_filter(np.random.default_rng(seed).random((h + 40, w + 40)), sigma)
    return (t - t.min()) / np.ptp(t)


def test_layout_fixed():
    lay = P.layout
    assert (lay["shape"].start, lay["shape"].stop) == (0, 30)
    assert (lay["hog"].start, lay["hog"].stop) == (30, 126)
    assert (lay["hof"].start, lay["hof"].stop) == (126, 234)
    assert (lay["mbh"].start, lay["mbh"].stop) == (234, 426)
    assert DESCRIPTOR_DIM == 426


# ---------------------------------------------------------------- flow

def test_flow_identical_frames_zero():
    img = texture(80, 100)[:80, :100]
    f = estimate_flow(img, img)
    assert np.abs(f.u).max() == 0 and np.abs(f.v).max() == 0


def test_flow_integer_translation():
    big = texture(80, 120)
    a, b = big[10:90, 10:130], big[10:90, 7:127]  # content moves +3 in x
    f = estimate_flow(a, b)
    inner = (slice(15, -15), slice(15, -15))
    assert np.abs(f.u[inner] - 3).max() <= 0.5
    assert np.abs(f.v[inner]).max() <= 0.5


def test_flow_rotation_endpoint_error():
    big = texture(160, 160, seed=3, sigma=2.0)
    h = w = 120
    cy, cx = h / 2, w / 2
    theta = np.deg2rad(1.5)
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    a = ndimage.map_coordinates(big, [yy + 20, xx + 20], order=3)
    # b(x') = a(x) with x' = R (x - c) + c, so sample a at R^-1 (x' - c) + c
    c, s = np.cos(theta), np.sin(theta)
    sx = c * (xx - cx) + s * (yy - cy) + cx
    sy = -s * (xx - cx) + c * (yy - cy) + cy
    b = ndimage.map_coordinates(big, [sy + 20, sx + 20], order=3)
    tu = c * (xx - cx) - s * (yy - cy) + cx - xx
    tv = s * (xx - cx) + c * (yy - cy) + cy - yy
    f = estimate_flow(a, b)
    inner = (slice(20, -20), slice(20, -20))
    epe = np.hypot(f.u - tu, f.v - tv)[inner].mean()
    assert epe < 1.0


def test_flow_shape_mismatch():
    with pytest.raises(ValidationError):
        estimate_flow(np.zeros((40, 40)), np.zeros((40, 41)))


# ---------------------------------------------------------------- sampling

def test_textureless_frame_has_no_samples():
    assert sample_points(np.full((120, 160), 0.3)) == []


def test_grid_count_before_gating():
    assert len(grid_nodes(160, 120, 5)) == (160 // 5) * (120 // 5)
    img = texture(120, 160)[:120, :160]
    pts = sample_points(img, params=TrajectoryParams(texture_quality=1e-12))
    at0 = [p for p, s in pts if s == 0]
    assert len(at0) == (160 // 5) * (120 // 5)


def test_occupied_node_not_resampled():
    img = texture(120, 160)[:120, :160]
    pts = [p for p, s in sample_points(img) if s == 0]
    node = pts[10]
    again = [p for p, s in sample_points(img, [(node, 0)]) if s == 0]
    assert not any(np.array_equal(node, q) for q in again)
    assert len(again) == len(pts) - 1


# ---------------------------------------------------------------- tracking and pruning

def test_track_point_zero_and_uniform():
    zero = [FlowField.zeros(50, 60)] * 15
    pts = track_point([20.0, 20.0], zero)
    assert pts.shape == (16, 2) and np.all(pts == [20, 20])
    one = [FlowField(np.ones((50, 60)), np.zeros((50, 60)))] * 15
    pts = track_point([20.0, 20.0], one)
    np.testing.assert_array_equal(pts, np.c_[20 + np.arange(16), np.full(16, 20.0)])
    assert track_point([55.0, 20.0], one) is None


def test_track_point_matches_stepping_oracle(rng):
    h, w = 60, 80
    flows = []
    for k in range(15):
        u = ndimage.gaussian_filter(rng.normal(size=(h, w)), 4) * 8
        v = ndimage.gaussian_filter(rng.normal(size=(h, w)), 4) * 8
        flows.append(FlowField(u, v))
    p = np.array([40.3, 30.7])
    got = track_point(p, flows)
    cur = p.copy()
    want = [cur.copy()]
    for fl in flows:
        xi, yi = int(np.rint(cur[0])), int(np.rint(cur[1]))
        du = np.median(np.pad(fl.u, 1, mode="edge")[yi:yi + 3, xi:xi + 3])
        dv = np.median(np.pad(fl.v, 1, mode="edge")[yi:yi + 3, xi:xi + 3])
        cur = cur + [du, dv]
        want.append(cur.copy())
    np.testing.assert_allclose(got, np.array(want), atol=1e-9)


def test_prune_rules():
    assert not prune(np.zeros((16, 2)))
    jump = np.zeros((16, 2))
    jump[8:, 0] = 50
    assert not prune(jump)
    drift = np.c_[np.arange(16.0), np.zeros(16)]
    std = drift.std(axis=0)
    assert std[0] >= P.min_flow_var  # oracle: sqrt((16^2-1)/12) > sqrt(3)
    assert prune(drift)


@given(st.floats(0.05, 3.0), st.floats(-np.pi, np.pi))
def test_prune_straight_line(speed, angle):
    pts = np.outer(np.arange(16.0), [np.cos(angle), np.sin(angle)]) * speed
    std = pts.std(axis=0)
    expected = (std.max() >= P.min_flow_var) and std.max() <= P.max_displacement
    assert prune(pts) == expected


# ---------------------------------------------------------------- description

def _const_inputs(h=64, w=64, value=0.5, flow=(0.0, 0.0)):
    frames = [np.full((h, w), value)] * 15
    flows = [FlowField(np.full((h, w), flow[0]), np.full((h, w), flow[1]))] * 15
    return frames, flows


def test_shape_descriptor_uniform():
    frames, flows = _const_inputs()
    pts = np.c_[20 + np.arange(16.0), np.full(16, 30.0)]
    d = describe(pts, frames, flows)
    np.testing.assert_allclose(d[:30].reshape(15, 2), np.tile([1 / 15, 0], (15, 1)), atol=1e-15)
    assert np.all(d[30:126] == 0)


def _edge_inputs(h=64, w=96):
    frames = []
    for k in range(15):
        x = np.arange(w)
        frames.append(np.tile((x >= 40 + k).astype(float), (h, 1)))
    flows = [FlowField(np.ones((h, w)), np.zeros((h, w)))] * 15
    return frames, flows


def _oracle_histograms(pts, frames, flows, hof_zero=0.4):
    """Scalar per-pixel loops over each cell of the tube."""
    n_xy, n_t, N = 2, 3, 32
    cell = N // n_xy
    hog = np.zeros((n_t, n_xy, n_xy, 8))
    hof = np.zeros((n_t, n_xy, n_xy, 9))
    for k in range(15):
        img, fl = frames[k], flows[k]
        h, w = img.shape
        x0 = int(np.rint(pts[k, 0])) - N // 2
        y0 = int(np.rint(pts[k, 1])) - N // 2
        for yy in range(y0, y0 + N):
            for xx in range(x0, x0 + N):
                if not (0 <= yy < h and 0 <= xx < w):
                    continue
                cy, cx, ct = (yy - y0) // cell, (xx - x0) // cell, k // 5
                gx = (img[yy, min(xx + 1, w - 1)] - img[yy, max(xx - 1, 0)]) / 2
                gy = (img[min(yy + 1, h - 1), xx] - img[max(yy - 1, 0), xx]) / 2
                mag = np.hypot(gx, gy)
                ang = np.arctan2(gy, gx) % np.pi
                hog[ct, cy, cx, int(np.floor(ang / (np.pi / 8) + 0.5)) % 8] += mag
                u, v = fl.u[yy, xx], fl.v[yy, xx]
                m = np.hypot(u, v)
                if m < hof_zero:
                    hof[ct, cy, cx, 8] += 1.0
                else:
                    a = np.arctan2(v, u) % (2 * np.pi)
                    hof[ct, cy, cx, int(np.floor(a / (np.pi / 4) + 0.5)) % 8] += m

    def l2(x):
        n = np.linalg.norm(x, axis=-1, keepdims=True)
        return np.divide(x, n, out=np.zeros_like(x), where=n > 0)
    return l2(hog).ravel(), l2(hof).ravel()


def test_moving_edge_histograms():
    frames, flows = _edge_inputs()
    pts = np.c_[40 + np.arange(16.0), np.full(16, 32.0)]
    d = describe(pts, frames, flows)
    hog = d[30:126].reshape(12, 8)
    hof = d[126:234].reshape(12, 9)
    assert np.all(hog.sum(axis=0)[1:] == 0) and hog[:, 0].sum() > 0
    assert np.all(hof[:, 1:] == 0) and np.all(hof[:, 0] > 0)
    want_hog, want_hof = _oracle_histograms(pts, frames, flows)
    np.testing.assert_allclose(d[30:126], want_hog, atol=1e-12)
    np.testing.assert_allclose(d[126:234], want_hof, atol=1e-12)


def test_random_tube_matches_oracle(rng):
    h, w = 70, 90
    frames = [texture(h, w, seed=k)[:h, :w] for k in range(15)]
    flows = [FlowField(rng.normal(size=(h, w)), rng.normal(size=(h, w))) for _ in range(15)]
    pts = np.c_[30 + 1.3 * np.arange(16.0), 35 - 0.7 * np.arange(16.0)]
    d = describe(pts, frames, flows)
    want_hog, want_hof = _oracle_histograms(pts, frames, flows)
    np.testing.assert_allclose(d[30:126], want_hog, atol=1e-12)
    np.testing.assert_allclose(d[126:234], want_hof, atol=1e-12)


def _check_norms(d):
    assert abs(np.abs(d[:30].reshape(15, 2)).sum() - 0) >= 0  # layout sanity
    steps = d[:30].reshape(15, 2)
    assert abs(np.hypot(steps[:, 0], steps[:, 1]).sum() - 1) < 1e-6
    for sl, nb in ((slice(30, 126), 8), (slice(126, 234), 9), (slice(234, 426), 8)):
        norms = np.linalg.norm(d[sl].reshape(-1, nb), axis=1)
        assert np.all((norms == 0) | (np.abs(norms - 1) < 1e-6))


# ---------------------------------------------------------------- extraction

def test_static_scene_no_trajectories():
    frames, flows, _ = gen_frames(FrameConfig(blobs=((40.0, 40.0, 0.0, 0.0),), n_frames=20))
    assert len(extract(frames, flows)) == 0


@pytest.fixture(scope="module")
def moving_blob():
    cfg = FrameConfig(blobs=((30.0, 40.0, 2.0, 0.0),), n_frames=31)
    frames, flows, masks = gen_frames(cfg)
    return frames, flows, masks, extract(frames, flows)


def test_moving_blob_trajectories_on_blob(moving_blob):
    frames, flows, masks, batch = moving_blob
    assert len(batch) > 20
    on = 0
    for tr in batch:
        x, y = tr.origin
        m = ndimage.binary_dilation(masks[tr.start_frame][0], iterations=2)
        yi, xi = int(np.rint(y)), int(np.rint(x))
        on += bool(m[min(yi, m.shape[0] - 1), min(xi, m.shape[1] - 1)])
    assert on / len(batch) >= 0.95


def test_moving_blob_displacement(moving_blob):
    _, _, _, batch = moving_blob
    d = np.diff(batch.points, axis=1).mean(axis=1)
    assert np.all(np.abs(d[:, 0] - 2.0) <= 0.5) and np.all(np.abs(d[:, 1]) <= 0.5)
    for desc in batch.descriptors:
        _check_norms(desc)


def test_estimated_flow_close_to_analytic():
    frames, flows, masks = gen_frames(FrameConfig(blobs=((30.0, 40.0, 2.0, 0.0),), n_frames=4))
    est = estimate_flow(frames[1], frames[2])
    m = ndimage.binary_erosion(masks[1][0], iterations=4)
    epe = np.hypot(est.u - flows[1].u, est.v - flows[1].v)
    assert epe[m].mean() < 1.0


def test_extraction_deterministic(moving_blob):
    frames, flows, _, batch = moving_blob
    again = extract(frames, flows)
    assert np.array_equal(again.points, batch.points)
    assert np.array_equal(again.descriptors, batch.descriptors)


def test_extract_flow_count_checked():
    frames, flows, _ = gen_frames(FrameConfig(n_frames=5))
    with pytest.raises(ValidationError):
        extract(frames, flows[:-1])


def test_gen_frames_resolution_limit():
    with pytest.raises(ValidationError):
        FrameConfig(width=640)


# ---------------------------------------------------------------- IO

def _random_batch(rng, n=7):
    return TrajectoryBatch(rng.integers(0, 1000, n), rng.integers(0, 8, n),
                           rng.uniform(0, 500, (n, 16, 2)).astype(np.float32).astype(np.float64),
                           rng.normal(size=(n, 426)).astype(np.float32).astype(np.float64))


def test_traj_bin_roundtrip(tmp_path, rng):
    b = _random_batch(rng)
    write_traj_bin(tmp_path / "t.bin", b)
    r = read_traj_bin(tmp_path / "t.bin")
    for a in ("start_frame", "scale", "points", "descriptors"):
        assert np.array_equal(getattr(b, a), getattr(r, a))
    raw = (tmp_path / "t.bin").read_bytes()
    assert raw[:5] == TRAJ_MAGIC and len(raw) == 9 + 7 * (4 + 1 + 32 * 4 + 426 * 4)
    write_traj_csv(tmp_path / "t.csv", b)
    assert len((tmp_path / "t.csv").read_text().splitlines()) == 8


def test_traj_bin_corruption(tmp_path, rng):
    write_traj_bin(tmp_path / "t.bin", _random_batch(rng))
    raw = bytearray((tmp_path / "t.bin").read_bytes())
    bad = bytes(b"XTRJ1") + bytes(raw[5:])
    (tmp_path / "m.bin").write_bytes(bad)
    with pytest.raises(FormatError) as e:
        read_traj_bin(tmp_path / "m.bin")
    assert e.value.offset == 0
    (tmp_path / "s.bin").write_bytes(bytes(raw[:-10]))
    with pytest.raises(FormatError) as e:
        read_traj_bin(tmp_path / "s.bin")
    assert e.value.offset > 0
