"""Pose-guided trajectory selection, upper-body boxes and cross-contamination scores."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateDataError, MissingDataError, ValidationError
from .geometry import Homography
from .ingest import (L_ELBOW, L_SHOULDER, L_WRIST, NECK, R_ELBOW, R_SHOULDER, R_WRIST,
                     KeypointSet, Segment)
from .tracking import HEAD_POINTS, PoseTrack
from .trajectories import TrajectoryBatch

UPPER_BODY = ("head", "neck", "r_shoulder", "l_shoulder", "r_elbow", "l_elbow", "r_wrist", "l_wrist")
_BODY25 = {"neck": NECK, "r_shoulder": R_SHOULDER, "l_shoulder": L_SHOULDER, "r_elbow": R_ELBOW,
           "l_elbow": L_ELBOW, "r_wrist": R_WRIST, "l_wrist": L_WRIST}
SUBSETS = {
    "UpperBody": UPPER_BODY,
    "HandsAndHead": ("head", "r_wrist", "l_wrist"),
}
DEFAULT_R_GRID = (16.0, 24.0, 32.0, 48.0, 64.0)
DEFAULT_BOX_PAD = 0.15


@dataclass(frozen=True)
class FilterConfig:
    """``radii`` in pixels at the homography's reference position, one per upper-body point."""

    radii: tuple = (32.0,) * 8
    subset: tuple = UPPER_BODY
    subset_name: str = "UpperBody"
    frame_window: int = 1

    def __post_init__(self):
        if len(self.radii) != len(UPPER_BODY) or min(self.radii) <= 0:
            raise ValidationError("need 8 positive radii")
        if not self.subset or any(k not in UPPER_BODY for k in self.subset):
            raise ValidationError(f"subset must be a nonempty selection of {UPPER_BODY}")
        if self.frame_window < 0:
            raise ValidationError("frame_window must be >= 0")

    @classmethod
    def make(cls, subset: str | Sequence[str] = "UpperBody", radius: float | Sequence[float] = 32.0,
             frame_window: int = 1) -> "FilterConfig":
        if isinstance(subset, str):
            if subset not in SUBSETS:
                raise ValidationError(f"unknown subset {subset!r}; expected one of {sorted(SUBSETS)}")
            name, pts = subset, SUBSETS[subset]
        else:
            pts = tuple(subset)
            name = "custom:" + "+".join(pts)
        radii = (float(radius),) * 8 if np.isscalar(radius) else tuple(float(r) for r in radius)
        return cls(radii, tuple(pts), name, frame_window)

    @property
    def mask(self) -> np.ndarray:
        return np.array([k in self.subset for k in UPPER_BODY])


def upper_body_points(pose: KeypointSet) -> np.ndarray:
    """(8, 2) upper-body positions, NaN where undetected; the head is the mean of face points."""
    out = np.full((len(UPPER_BODY), 2), np.nan)
    kp = pose.keypoints
    face = kp[list(HEAD_POINTS)]
    det = face[:, 2] > 0
    if det.any():
        out[0] = face[det, :2].mean(axis=0)
    for i, name in enumerate(UPPER_BODY[1:], start=1):
        j = _BODY25[name]
        if kp[j, 2] > 0:
            out[i] = kp[j, :2]
    return out


class TrackGeometry:
    """Per-frame upper-body points and their scale factors for one track, computed once."""

    def __init__(self, track: PoseTrack, h: Homography):
        self.track = track
        self.start = track.start_frame
        n = len(track.poses)
        self.points = np.stack([upper_body_points(p) for p in track.poses]) if n else np.zeros((0, 8, 2))
        self.detected = ~np.isnan(self.points[..., 0])
        self.scale = np.full(self.points.shape[:2], np.nan)
        if self.detected.any():
            self.scale[self.detected] = h.scale_factor(self.points[self.detected])

    def lookup(self, frames: np.ndarray):
        """Points, scales and validity at absolute ``frames`` (any shape)."""
        k = np.asarray(frames) - self.start
        ok = (k >= 0) & (k < len(self.points))
        kc = np.clip(k, 0, max(len(self.points) - 1, 0))
        if len(self.points) == 0:
            shape = np.shape(frames) + (len(UPPER_BODY),)
            return np.zeros(shape + (2,)), np.zeros(shape), np.zeros(shape, bool)
        return self.points[kc], self.scale[kc], self.detected[kc] & ok[..., None]


def selection_mask(origins: np.ndarray, start_frames: np.ndarray, geom: TrackGeometry,
                   cfg: FilterConfig) -> np.ndarray:
    """Boolean mask over trajectories: selected iff some subset keypoint j in some frame
    m in [n - w, n + w] satisfies |o - p_mj| < R_j * S(p_mj)."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 2)
    start_frames = np.asarray(start_frames, dtype=np.int64).reshape(-1)
    if len(origins) == 0:
        return np.zeros(0, bool)
    offsets = np.arange(-cfg.frame_window, cfg.frame_window + 1)
    frames = start_frames[:, None] + offsets[None, :]
    pts, scale, valid = geom.lookup(frames)  # (T, F, 8, ...)
    valid = valid & cfg.mask
    dx = origins[:, None, None, 0] - pts[..., 0]
    dy = origins[:, None, None, 1] - pts[..., 1]
    d = np.sqrt(dx * dx + dy * dy)
    radii = np.asarray(cfg.radii, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        hit = valid & (d < radii * scale)
    return hit.any(axis=(1, 2))


def select_trajectories(trajs: TrajectoryBatch, target_track: PoseTrack, h: Homography,
                        cfg: FilterConfig, geom: TrackGeometry | None = None) -> TrajectoryBatch:
    geom = geom or TrackGeometry(target_track, h)
    return trajs[selection_mask(trajs.origins, trajs.start_frame, geom, cfg)]


# ---------------------------------------------------------------- boxes and contamination

@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def area(self) -> float:
        return max(0.0, self.x1 - self.x0) * max(0.0, self.y1 - self.y0)

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2])

    def intersection(self, other: "Box") -> float:
        w = min(self.x1, other.x1) - max(self.x0, other.x0)
        h = min(self.y1, other.y1) - max(self.y0, other.y0)
        return w * h if w > 0 and h > 0 else 0.0

    def contains(self, pts: np.ndarray) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64)
        return (p[..., 0] >= self.x0) & (p[..., 0] <= self.x1) & (p[..., 1] >= self.y0) & (p[..., 1] <= self.y1)


def _box_from_points(pts: np.ndarray, h: Homography, pad_ground: float) -> Box | None:
    det = ~np.isnan(pts[:, 0])
    if not det.any():
        return None
    p = pts[det]
    lo, hi = p.min(axis=0), p.max(axis=0)
    pad = 0.0
    if pad_ground:
        pad = pad_ground * float(h.pixels_per_meter((lo + hi) / 2))
    return Box(lo[0] - pad, lo[1] - pad, hi[0] + pad, hi[1] + pad)


def upper_body_bounding_box(pose: KeypointSet, h: Homography, pad_ground: float = DEFAULT_BOX_PAD) -> Box:
    """Box around detected upper-body points, padded by ``pad_ground`` metres on each side."""
    box = _box_from_points(upper_body_points(pose), h, pad_ground)
    if box is None:
        raise MissingDataError(f"frame {pose.frame_index}: no upper-body keypoint detected")
    return box


def contamination_frame(target: Box, others: Iterable[Box]) -> float:
    area = target.area
    if not area > 0:
        raise DegenerateDataError("target box has zero area")
    return sum(target.intersection(b) for b in others) / area


def lower_median(values) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    if not len(v):
        raise MissingDataError("median of an empty set")
    return float(v[(len(v) - 1) // 2])


class BoxCache:
    """Upper-body boxes of every track pose, keyed by (track_id, frame)."""

    def __init__(self, tracks: Sequence[PoseTrack], h: Homography, pad_ground: float = DEFAULT_BOX_PAD):
        self.by_frame: dict[int, list[tuple[int, Box]]] = {}
        self.by_track: dict[int, dict[int, Box | None]] = {}
        for tr in tracks:
            boxes = self.by_track.setdefault(tr.track_id, {})
            for pose in tr.poses:
                box = _box_from_points(upper_body_points(pose), h, pad_ground)
                boxes[pose.frame_index] = box
                if box is not None:
                    self.by_frame.setdefault(pose.frame_index, []).append((tr.track_id, box))

    def box(self, track_id: int, frame: int) -> Box | None:
        return self.by_track.get(track_id, {}).get(frame)

    def frame_score(self, track_id: int, frame: int) -> float | None:
        target = self.box(track_id, frame)
        if target is None or not target.area > 0:
            return None
        return contamination_frame(target, (b for t, b in self.by_frame.get(frame, ()) if t != track_id))


def contamination_segment(segment: Segment, all_tracks: Sequence[PoseTrack], h: Homography,
                          pad_ground: float = DEFAULT_BOX_PAD, cache: BoxCache | None = None) -> float:
    """Lower median over the segment's frames of the per-frame contamination score."""
    cache = cache or BoxCache(all_tracks, h, pad_ground)
    scores = [s for f in segment.frames if (s := cache.frame_score(segment.track_id, f)) is not None]
    if not scores:
        raise MissingDataError(f"segment {segment.segment_id}: no frame with a valid target box")
    return lower_median(scores)


def full_set_mask(origins: np.ndarray, start_frames: np.ndarray, track_id: int, cache: BoxCache) -> np.ndarray:
    """Trajectories whose origin lies inside the target's padded box at their start frame."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 2)
    out = np.zeros(len(origins), bool)
    boxes = cache.by_track.get(track_id, {})
    for f in np.unique(start_frames):
        box = boxes.get(int(f))
        if box is None:
            continue
        sel = start_frames == f
        out[sel] = box.contains(origins[sel])
    return out


def write_filter_report(path, rows: Iterable[dict]) -> None:
    cols = ["segment_id", "n_total", "n_selected", "contamination", "subset"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        wr.writeheader()
        for r in rows:
            wr.writerow(r)
