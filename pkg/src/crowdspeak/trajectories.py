"""Dense trajectories: multi-scale sampling, median-filtered flow tracking, pruning
and shape/HOG/HOF/MBH description of the surrounding spatio-temporal tube."""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import FormatError, ValidationError

log = logging.getLogger(__name__)

TRAJ_MAGIC = b"DTRJ1"
N_BINS = 8
TEXTURE_FLOOR = 1e-12


@dataclass(frozen=True)
class TrajectoryParams:
    W: int = 5
    L: int = 15
    N: int = 32
    n_xy: int = 2
    n_t: int = 3
    n_scales: int = 8
    scale_step: float = 1 / math.sqrt(2)
    min_flow_var: float = math.sqrt(3)
    max_displacement: float = 50.0
    erratic_ratio: float = 0.7
    texture_quality: float = 0.001
    hof_zero: float = 0.4

    def __post_init__(self):
        ints = (self.W, self.L, self.N, self.n_xy, self.n_t, self.n_scales)
        if min(ints) <= 0 or min(self.scale_step, self.min_flow_var, self.max_displacement,
                                 self.erratic_ratio, self.texture_quality, self.hof_zero) <= 0:
            raise ValidationError("trajectory parameters must be positive")
        if self.L % self.n_t or self.N % self.n_xy:
            raise ValidationError("L must divide into n_t cells and N into n_xy cells")

    @property
    def n_cells(self) -> int:
        return self.n_xy * self.n_xy * self.n_t

    @property
    def layout(self) -> dict[str, slice]:
        """Descriptor slices: shape, HOG, HOF, MBH (x then y)."""
        sizes = [("shape", 2 * self.L), ("hog", N_BINS * self.n_cells),
                 ("hof", (N_BINS + 1) * self.n_cells), ("mbh", 2 * N_BINS * self.n_cells)]
        out, o = {}, 0
        for name, n in sizes:
            out[name] = slice(o, o + n)
            o += n
        return out

    @property
    def dim(self) -> int:
        return self.layout["mbh"].stop

    def scale(self, s: int) -> float:
        return self.scale_step ** s


DEFAULT_PARAMS = TrajectoryParams()
DESCRIPTOR_DIM = DEFAULT_PARAMS.dim


class FlowField:
    """Dense per-pixel displacement (u along x/columns, v along y/rows) in pixels per frame."""

    __slots__ = ("u", "v")

    def __init__(self, u, v):
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if u.shape != v.shape or u.ndim != 2:
            raise ValidationError(f"flow components must be equal 2-D arrays, got {u.shape}, {v.shape}")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValidationError("flow field has non-finite values")
        self.u, self.v = u, v

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def shape(self):
        return self.u.shape


# ---------------------------------------------------------------- image helpers

def _gradient(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences with replicated borders: g(x) = (I(x+1) - I(x-1)) / 2."""
    p = np.pad(img, 1, mode="edge")
    gx = (p[1:-1, 2:] - p[1:-1, :-2]) * 0.5
    gy = (p[2:, 1:-1] - p[:-2, 1:-1]) * 0.5
    return gx, gy


def _resample(img: np.ndarray, shape, factor: float) -> np.ndarray:
    """Bilinear sample of ``img`` at (index / factor) for an output of ``shape``."""
    if factor == 1.0 and tuple(shape) == img.shape:
        return img
    yy, xx = np.meshgrid(np.arange(shape[0]) / factor, np.arange(shape[1]) / factor, indexing="ij")
    return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")


def _scaled_shape(shape, factor: float) -> tuple[int, int]:
    return max(1, int(round(shape[0] * factor))), max(1, int(round(shape[1] * factor)))


def _scale_image(img: np.ndarray, factor: float) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if factor == 1.0:
        return img
    smoothed = ndimage.gaussian_filter(img, sigma=0.5 / factor - 0.5 + 1e-9)
    return _resample(smoothed, _scaled_shape(img.shape, factor), factor)


def _scale_flow(flow: FlowField, factor: float) -> FlowField:
    if factor == 1.0:
        return flow
    shape = _scaled_shape(flow.shape, factor)
    return FlowField(_resample(flow.u, shape, factor) * factor, _resample(flow.v, shape, factor) * factor)


def _median_flow(flow: FlowField) -> tuple[np.ndarray, np.ndarray]:
    return (ndimage.median_filter(flow.u, size=3, mode="nearest"),
            ndimage.median_filter(flow.v, size=3, mode="nearest"))


def _as_gray(frame) -> np.ndarray:
    a = np.asarray(frame, dtype=np.float64)
    if a.ndim == 3:
        a = a.mean(axis=2)
    if a.ndim != 2:
        raise ValidationError(f"expected a grayscale image, got shape {a.shape}")
    return a


# ---------------------------------------------------------------- optical flow

def _block_match(a, b, u, v, radius, block):
    h, w = a.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    warped = ndimage.map_coordinates(b, [yy + v, xx + u], order=1, mode="nearest")
    padded = np.pad(warped, radius, mode="edge")
    offs = np.arange(-radius, radius + 1)
    n = len(offs)
    cost = np.empty((n, n, h, w))
    # a mild pull towards zero update decides ties (flat regions, identical frames)
    tie = 1e-9 * block * block * (1.0 + float(np.abs(a).max()) ** 2)
    for i, dy in enumerate(offs):
        for j, dx in enumerate(offs):
            shifted = padded[radius + dy:radius + dy + h, radius + dx:radius + dx + w]
            cost[i, j] = ndimage.uniform_filter((a - shifted) ** 2, block, mode="nearest")
    pull = tie * (offs[:, None] ** 2 + offs[None, :] ** 2)
    best = (cost + pull[:, :, None, None]).reshape(n * n, h, w).argmin(axis=0)
    bi, bj = np.divmod(best, n)
    r_idx, c_idx = np.mgrid[0:h, 0:w]

    def refine(c_m, c_0, c_p):
        den = c_m - 2 * c_0 + c_p
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(den > 0, 0.5 * (c_m - c_p) / den, 0.0)
        return np.clip(d, -0.5, 0.5)

    c0 = cost[bi, bj, r_idx, c_idx]
    exact = c0 <= 1e-12 * (1.0 + float(np.abs(a).max()) ** 2)  # a perfect integer match needs no refinement
    inner_j = (bj > 0) & (bj < n - 1)
    inner_i = (bi > 0) & (bi < n - 1)
    jm, jp = np.clip(bj - 1, 0, n - 1), np.clip(bj + 1, 0, n - 1)
    im, ip = np.clip(bi - 1, 0, n - 1), np.clip(bi + 1, 0, n - 1)
    inner_j &= ~exact
    inner_i &= ~exact
    sx = np.where(inner_j, refine(cost[bi, jm, r_idx, c_idx], c0, cost[bi, jp, r_idx, c_idx]), 0.0)
    sy = np.where(inner_i, refine(cost[im, bj, r_idx, c_idx], c0, cost[ip, bj, r_idx, c_idx]), 0.0)
    return u + offs[bj] + sx, v + offs[bi] + sy


def estimate_flow(frame_a, frame_b, levels: int = 3, radius: int = 3, block: int = 9) -> FlowField:
    """Pyramidal block matching with parabolic sub-pixel refinement."""
    a, b = _as_gray(frame_a), _as_gray(frame_b)
    if a.shape != b.shape:
        raise ValidationError(f"frame shapes differ: {a.shape} vs {b.shape}")
    pyr = [(a, b)]
    for _ in range(levels - 1):
        pa, pb = pyr[-1]
        if min(pa.shape) < 2 * block:
            break
        pyr.append((ndimage.gaussian_filter(pa, 1.0)[::2, ::2], ndimage.gaussian_filter(pb, 1.0)[::2, ::2]))
    u = v = None
    for la, lb in reversed(pyr):
        if u is None:
            u = np.zeros(la.shape)
            v = np.zeros(la.shape)
        else:
            yy, xx = np.mgrid[0:la.shape[0], 0:la.shape[1]] / 2.0
            yy = np.minimum(yy, u.shape[0] - 1)
            xx = np.minimum(xx, u.shape[1] - 1)
            u = ndimage.map_coordinates(u, [yy, xx], order=1, mode="nearest") * 2
            v = ndimage.map_coordinates(v, [yy, xx], order=1, mode="nearest") * 2
        u, v = _block_match(la, lb, u, v, radius, block)
        u = ndimage.median_filter(u, size=3, mode="nearest")
        v = ndimage.median_filter(v, size=3, mode="nearest")
    return FlowField(u, v)


# ---------------------------------------------------------------- sampling

def grid_nodes(width: int, height: int, W: int) -> np.ndarray:
    """Grid node coordinates (x, y): floor(w/W) * floor(h/W) nodes centred in their cells."""
    xs = W // 2 + W * np.arange(width // W)
    ys = W // 2 + W * np.arange(height // W)
    gx, gy = np.meshgrid(xs, ys)
    return np.c_[gx.ravel(), gy.ravel()].astype(np.float64)


def min_eigenvalue_map(img: np.ndarray) -> np.ndarray:
    gx, gy = _gradient(img)
    a = ndimage.uniform_filter(gx * gx, 3, mode="nearest")
    b = ndimage.uniform_filter(gx * gy, 3, mode="nearest")
    c = ndimage.uniform_filter(gy * gy, 3, mode="nearest")
    return np.maximum((a + c) / 2 - np.sqrt(((a - c) / 2) ** 2 + b * b), 0.0)


def _sample_local(img: np.ndarray, existing: np.ndarray, params: TrajectoryParams) -> np.ndarray:
    """Scale-local candidate points kept by the texture gate and occupancy test."""
    h, w = img.shape
    nodes = grid_nodes(w, h, params.W)
    if len(nodes) == 0:
        return nodes
    eig = min_eigenvalue_map(img)
    # the absolute floor keeps resampling round-off on flat images from passing a relative gate
    thr = max(params.texture_quality * eig.max(), TEXTURE_FLOOR)
    xi, yi = nodes[:, 0].astype(int), nodes[:, 1].astype(int)
    nodes = nodes[eig[yi, xi] > thr]
    if len(existing) and len(nodes):
        # grid-bucket the existing points so the test stays local
        cell = np.floor(existing / params.W).astype(np.int64)
        buckets: dict[tuple, list[int]] = {}
        for i, key in enumerate(map(tuple, cell)):
            buckets.setdefault(key, []).append(i)
        keep = np.ones(len(nodes), bool)
        for k, (x, y) in enumerate(nodes):
            cx, cy = int(x // params.W), int(y // params.W)
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    for i in buckets.get((cx + dx, cy + dy), ()):
                        ex, ey = existing[i]
                        if (ex - x) ** 2 + (ey - y) ** 2 < params.W ** 2:
                            keep[k] = False
                            break
                    if not keep[k]:
                        break
                if not keep[k]:
                    break
        nodes = nodes[keep]
    return nodes


def active_scales(shape, params: TrajectoryParams) -> list[int]:
    out = []
    for s in range(params.n_scales):
        hs, ws = _scaled_shape(shape, params.scale(s))
        if min(hs, ws) >= params.N:
            out.append(s)
    return out


def sample_points(frame, existing_points=(), params: TrajectoryParams = DEFAULT_PARAMS):
    """Dense grid samples over all usable scales.

    ``existing_points`` is a sequence of (point, scale) with points in full-resolution pixels.
    Returns a list of (point, scale), points again in full-resolution pixels.
    """
    img = _as_gray(frame)
    by_scale: dict[int, list] = {}
    for p, s in existing_points:
        by_scale.setdefault(int(s), []).append(np.asarray(p, dtype=np.float64) * params.scale(int(s)))
    out = []
    for s in active_scales(img.shape, params):
        f = params.scale(s)
        ex = np.array(by_scale.get(s, []), dtype=np.float64).reshape(-1, 2)
        for p in _sample_local(_scale_image(img, f), ex, params):
            out.append((p / f, s))
    return out


# ---------------------------------------------------------------- tracking

def _step(p: np.ndarray, mu: np.ndarray, mv: np.ndarray) -> np.ndarray:
    """Advance points (n, 2) by the median-filtered flow at their rounded positions."""
    h, w = mu.shape
    xi = np.clip(np.rint(p[:, 0]).astype(np.int64), 0, w - 1)
    yi = np.clip(np.rint(p[:, 1]).astype(np.int64), 0, h - 1)
    return p + np.c_[mu[yi, xi], mv[yi, xi]]


def _inside(p: np.ndarray, shape) -> np.ndarray:
    h, w = shape
    return (p[:, 0] >= 0) & (p[:, 0] <= w - 1) & (p[:, 1] >= 0) & (p[:, 1] <= h - 1)


def track_point(p, flows: Sequence[FlowField]) -> np.ndarray | None:
    """Points p_0..p_L, or None once the point leaves the frame."""
    pts = [np.asarray(p, dtype=np.float64).reshape(1, 2)]
    if not _inside(pts[0], flows[0].shape)[0]:
        return None
    for fl in flows:
        mu, mv = _median_flow(fl)
        nxt = _step(pts[-1], mu, mv)
        if not _inside(nxt, fl.shape)[0]:
            return None
        pts.append(nxt)
    return np.concatenate(pts)


def prune(points, params: TrajectoryParams = DEFAULT_PARAMS) -> bool:
    """True when the trajectory is kept: neither static, wandering, nor erratic."""
    pts = np.asarray(points, dtype=np.float64)
    std = pts.std(axis=0)
    if std[0] < params.min_flow_var and std[1] < params.min_flow_var:
        return False
    if std[0] > params.max_displacement or std[1] > params.max_displacement:
        return False
    steps = np.hypot(*np.diff(pts, axis=0).T)
    length = steps.sum()
    if length <= 0 or steps.max() > params.erratic_ratio * length:
        return False
    return True


# ---------------------------------------------------------------- description

def _orient_bins(gx, gy, full_circle: bool) -> np.ndarray:
    period = 2 * np.pi if full_circle else np.pi
    theta = np.mod(np.arctan2(gy, gx), period)
    return np.floor(theta / (period / N_BINS) + 0.5).astype(np.int64) % N_BINS


def _frame_channels(img: np.ndarray, flow: FlowField, params: TrajectoryParams) -> np.ndarray:
    """Per-pixel histogram contributions, (8 HOG + 9 HOF + 8 MBHx + 8 MBHy, h, w)."""
    h, w = img.shape
    ch = np.zeros((4 * N_BINS + 1, h, w))
    r, c = np.mgrid[0:h, 0:w]

    def put(offset, bins, weight):
        ch[offset + bins, r, c] = weight

    gx, gy = _gradient(img)
    put(0, _orient_bins(gx, gy, False), np.hypot(gx, gy))
    mag = np.hypot(flow.u, flow.v)
    hof_bins = np.where(mag < params.hof_zero, N_BINS, _orient_bins(flow.u, flow.v, True))
    put(N_BINS, hof_bins, np.where(mag < params.hof_zero, 1.0, mag))
    for k, comp in enumerate((flow.u, flow.v)):
        cx, cy = _gradient(comp)
        put(2 * N_BINS + 1 + k * N_BINS, _orient_bins(cx, cy, False), np.hypot(cx, cy))
    return ch


def _integral(ch: np.ndarray) -> np.ndarray:
    out = np.zeros((ch.shape[0], ch.shape[1] + 1, ch.shape[2] + 1))
    out[:, 1:, 1:] = ch.cumsum(axis=1).cumsum(axis=2)
    return out


def _cell_sums(integ: np.ndarray, pts: np.ndarray, params: TrajectoryParams) -> np.ndarray:
    """Channel sums over the n_xy x n_xy spatial cells of the N x N patch at each point.

    Returns (n, n_xy, n_xy, channels); pixels outside the image contribute nothing.
    """
    h, w = integ.shape[1] - 1, integ.shape[2] - 1
    cell = params.N // params.n_xy
    x0 = np.rint(pts[:, 0]).astype(np.int64) - params.N // 2
    y0 = np.rint(pts[:, 1]).astype(np.int64) - params.N // 2
    out = np.empty((len(pts), params.n_xy, params.n_xy, integ.shape[0]))
    for cy in range(params.n_xy):
        ya = np.clip(y0 + cy * cell, 0, h)
        yb = np.clip(y0 + (cy + 1) * cell, 0, h)
        for cx in range(params.n_xy):
            xa = np.clip(x0 + cx * cell, 0, w)
            xb = np.clip(x0 + (cx + 1) * cell, 0, w)
            s = integ[:, yb, xb] - integ[:, ya, xb] - integ[:, yb, xa] + integ[:, ya, xa]
            out[:, cy, cx] = s.T
    return out


def _l2_cells(h: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(h, axis=-1, keepdims=True)
    return np.divide(h, n, out=np.zeros_like(h), where=n > 0)


def _shape_descriptor(pts: np.ndarray) -> np.ndarray:
    d = np.diff(pts, axis=0)
    total = np.hypot(d[:, 0], d[:, 1]).sum()
    assert total > 0, "degenerate trajectory shape reached the descriptor stage"
    return (d / total).ravel()


def _assemble(pts: np.ndarray, acc: np.ndarray, params: TrajectoryParams) -> np.ndarray:
    """acc: (n_t, n_xy, n_xy, 33) accumulated channel sums."""
    hog = _l2_cells(acc[..., :N_BINS])
    hof = _l2_cells(acc[..., N_BINS:2 * N_BINS + 1])
    mbhx = _l2_cells(acc[..., 2 * N_BINS + 1:3 * N_BINS + 1])
    mbhy = _l2_cells(acc[..., 3 * N_BINS + 1:])
    return np.concatenate([_shape_descriptor(pts), hog.ravel(), hof.ravel(), mbhx.ravel(), mbhy.ravel()])


def describe(points, frames, flows: Sequence[FlowField], params: TrajectoryParams = DEFAULT_PARAMS):
    """Descriptor of one trajectory, with points, frames and flows at a common resolution.

    frames[k] and flows[k] (k < L) are the image and flow at the time of points[k].
    """
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) != params.L + 1:
        raise ValidationError(f"need {params.L + 1} points, got {len(pts)}")
    acc = np.zeros((params.n_t, params.n_xy, params.n_xy, 4 * N_BINS + 1))
    per_cell = params.L // params.n_t
    for k in range(params.L):
        integ = _integral(_frame_channels(_as_gray(frames[k]), flows[k], params))
        acc[k // per_cell] += _cell_sums(integ, pts[k:k + 1], params)[0]
    return _assemble(pts, acc, params)


# ---------------------------------------------------------------- batch container and IO

@dataclass
class Trajectory:
    start_frame: int
    scale_index: int
    points: np.ndarray
    descriptor: np.ndarray

    @property
    def origin(self) -> np.ndarray:
        return self.points[0]


class TrajectoryBatch:
    """Struct-of-arrays trajectory set; points in full-resolution pixels."""

    def __init__(self, start_frame, scale, points, descriptors):
        self.start_frame = np.asarray(start_frame, dtype=np.int64).reshape(-1)
        self.scale = np.asarray(scale, dtype=np.int64).reshape(-1)
        n = len(self.start_frame)
        self.points = np.asarray(points, dtype=np.float64)
        self.descriptors = np.asarray(descriptors, dtype=np.float64)
        if self.points.ndim != 3 or self.points.shape[2] != 2 or self.descriptors.ndim != 2:
            raise ValidationError("points must be (n, P, 2) and descriptors (n, D)")
        if not (len(self.scale) == len(self.points) == len(self.descriptors) == n):
            raise ValidationError("trajectory arrays have inconsistent lengths")

    @classmethod
    def empty(cls, n_points: int = DEFAULT_PARAMS.L + 1, dim: int = DESCRIPTOR_DIM):
        return cls(np.zeros(0), np.zeros(0), np.zeros((0, n_points, 2)), np.zeros((0, dim)))

    @classmethod
    def concat(cls, batches: Sequence["TrajectoryBatch"]) -> "TrajectoryBatch":
        batches = list(batches)
        if not batches:
            return cls.empty()
        return cls(np.concatenate([b.start_frame for b in batches]),
                   np.concatenate([b.scale for b in batches]),
                   np.concatenate([b.points for b in batches]),
                   np.concatenate([b.descriptors for b in batches]))

    def __len__(self) -> int:
        return len(self.start_frame)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return Trajectory(int(self.start_frame[idx]), int(self.scale[idx]),
                              self.points[idx], self.descriptors[idx])
        return TrajectoryBatch(self.start_frame[idx], self.scale[idx], self.points[idx],
                               self.descriptors[idx])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def origins(self) -> np.ndarray:
        return self.points[:, 0, :]

    def sorted(self) -> "TrajectoryBatch":
        order = np.lexsort((self.points[:, 0, 1], self.points[:, 0, 0], self.scale, self.start_frame))
        return self[order]


def _record_dtype(n_points: int, dim: int) -> np.dtype:
    return np.dtype([("start_frame", "<u4"), ("scale", "u1"),
                     ("points", "<f4", (2 * n_points,)), ("descriptor", "<f4", (dim,))])


RECORD_DTYPE = _record_dtype(DEFAULT_PARAMS.L + 1, DESCRIPTOR_DIM)
HEADER_SIZE = len(TRAJ_MAGIC) + 4


def write_traj_bin(path, batch: TrajectoryBatch) -> None:
    if batch.points.shape[1:] != (DEFAULT_PARAMS.L + 1, 2) or batch.descriptors.shape[1] != DESCRIPTOR_DIM:
        raise ValidationError("traj.bin holds 16-point trajectories with 426-dim descriptors")
    rec = np.zeros(len(batch), dtype=RECORD_DTYPE)
    rec["start_frame"] = batch.start_frame
    rec["scale"] = batch.scale
    rec["points"] = batch.points.reshape(len(batch), -1)
    rec["descriptor"] = batch.descriptors
    with open(path, "wb") as fh:
        fh.write(TRAJ_MAGIC + struct.pack("<I", len(batch)))
        fh.write(rec.tobytes())


def read_traj_bin(path) -> TrajectoryBatch:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise FormatError(path, 0, f"cannot read: {e.strerror}") from None
    if data[:len(TRAJ_MAGIC)] != TRAJ_MAGIC:
        raise FormatError(path, 0, f"bad magic {data[:len(TRAJ_MAGIC)]!r}, expected {TRAJ_MAGIC!r}")
    if len(data) < HEADER_SIZE:
        raise FormatError(path, len(TRAJ_MAGIC), "truncated header")
    (count,) = struct.unpack_from("<I", data, len(TRAJ_MAGIC))
    need = HEADER_SIZE + count * RECORD_DTYPE.itemsize
    if len(data) != need:
        bad = min(len(data), need)
        raise FormatError(path, bad, f"header declares {count} records ({need} bytes), file has {len(data)}")
    rec = np.frombuffer(data, dtype=RECORD_DTYPE, count=count, offset=HEADER_SIZE)
    return TrajectoryBatch(rec["start_frame"].astype(np.int64), rec["scale"].astype(np.int64),
                           rec["points"].astype(np.float64).reshape(count, -1, 2),
                           rec["descriptor"].astype(np.float64))


def write_traj_csv(path, batch: TrajectoryBatch) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        n_pts = batch.points.shape[1]
        wr.writerow(["start_frame", "scale"] + [f"{a}{i}" for i in range(n_pts) for a in "xy"]
                    + [f"d{i}" for i in range(batch.descriptors.shape[1])])
        for i in range(len(batch)):
            wr.writerow([int(batch.start_frame[i]), int(batch.scale[i])]
                        + [repr(float(v)) for v in batch.points[i].ravel()]
                        + [repr(float(v)) for v in batch.descriptors[i]])


# ---------------------------------------------------------------- extraction

def _extract_scale(frames, flows, s: int, params: TrajectoryParams) -> list[Trajectory]:
    f = params.scale(s)
    L = params.L
    per_cell = L // params.n_t
    n_frames = len(frames)
    n_ch = 4 * N_BINS + 1
    pts = np.zeros((0, L + 1, 2))
    age = np.zeros(0, np.int64)
    start = np.zeros(0, np.int64)
    acc = np.zeros((0, params.n_t, params.n_xy, params.n_xy, n_ch))
    out: list[Trajectory] = []

    img = _scale_image(frames[0], f)
    shape = img.shape

    def spawn(frame_idx, image):
        nonlocal pts, age, start, acc
        if frame_idx + L > n_frames - 1:
            return
        current = pts[np.arange(len(pts)), age] if len(pts) else np.zeros((0, 2))
        new = _sample_local(image, current, params)
        if not len(new):
            return
        block = np.zeros((len(new), L + 1, 2))
        block[:, 0] = new
        pts = np.concatenate([pts, block])
        age = np.concatenate([age, np.zeros(len(new), np.int64)])
        start = np.concatenate([start, np.full(len(new), frame_idx)])
        acc = np.concatenate([acc, np.zeros((len(new),) + acc.shape[1:])])

    spawn(0, img)
    for t in range(n_frames - 1):
        if not len(pts):
            img = _scale_image(frames[t + 1], f)
            spawn(t + 1, img)
            continue
        flow = _scale_flow(flows[t], f)
        cur = pts[np.arange(len(pts)), age]
        integ = _integral(_frame_channels(img, flow, params))
        sums = _cell_sums(integ, cur, params)
        np.add.at(acc, (np.arange(len(pts)), age // per_cell), sums)
        mu, mv = _median_flow(flow)
        nxt = _step(cur, mu, mv)
        alive = _inside(nxt, shape)
        pts[np.arange(len(pts)), age + 1] = nxt
        age = age + 1
        done = alive & (age == L)
        for i in np.flatnonzero(done):
            if prune(pts[i], params):
                desc = _assemble(pts[i], acc[i], params)
                out.append(Trajectory(int(start[i]), s, pts[i] / f, desc))
        keep = alive & ~done
        pts, age, start, acc = pts[keep], age[keep], start[keep], acc[keep]
        img = _scale_image(frames[t + 1], f)
        spawn(t + 1, img)
    return out


def extract(frames, flows: Sequence[FlowField], params: TrajectoryParams = DEFAULT_PARAMS) -> TrajectoryBatch:
    """Sample, track, prune and describe over all usable scales.

    Output order: by scale, then by completion frame, then by sampling order.
    """
    frames = [_as_gray(fr) for fr in frames]
    if len(flows) != len(frames) - 1:
        raise ValidationError(f"need {len(frames) - 1} flow fields for {len(frames)} frames, got {len(flows)}")
    for fr, fl in zip(frames, flows):
        if fl.shape != fr.shape:
            raise ValidationError(f"flow shape {fl.shape} does not match frame shape {fr.shape}")
    found: list[Trajectory] = []
    for s in active_scales(frames[0].shape, params):
        found.extend(_extract_scale(frames, flows, s, params))
    if not found:
        return TrajectoryBatch.empty(params.L + 1, params.dim)
    return TrajectoryBatch([t.start_frame for t in found], [t.scale_index for t in found],
                           np.stack([t.points for t in found]), np.stack([t.descriptor for t in found]))
