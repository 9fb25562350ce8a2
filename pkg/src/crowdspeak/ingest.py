"""Readers/writers for pose, acceleration and VAD streams, and fixed-length segmentation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .errors import MissingDataError, ParseError, RangeError, SchemaError, ValidationError

if TYPE_CHECKING:
    from .tracking import PoseTrack

N_KEYPOINTS = 25

# BODY25 indices used across the package
NOSE, NECK = 0, 1
R_SHOULDER, R_ELBOW, R_WRIST = 2, 3, 4
L_SHOULDER, L_ELBOW, L_WRIST = 5, 6, 7
R_EYE, L_EYE, R_EAR, L_EAR = 15, 16, 17, 18

SEGMENT_SECONDS = 3.0
LABEL_THRESHOLD = 0.25
ACCEL_RATE = 20.0
VAD_RATE = 100.0
VAD_MAX_PAD = 1.0


@dataclass
class KeypointSet:
    """One detected skeleton: ``keypoints`` is (25, 3) rows of (x, y, confidence)."""

    keypoints: np.ndarray
    frame_index: int
    person: str | None = None

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=np.float64)
        if kp.shape != (N_KEYPOINTS, 3):
            raise SchemaError(f"expected {N_KEYPOINTS}x3 keypoints, got shape {kp.shape}")
        self.keypoints = kp
        self.frame_index = int(self.frame_index)

    @property
    def detected(self) -> np.ndarray:
        return self.keypoints[:, 2] > 0

    def xy(self, j: int) -> np.ndarray | None:
        if self.keypoints[j, 2] <= 0:
            return None
        return self.keypoints[j, :2]

    def to_record(self) -> dict:
        rec = {"frame": self.frame_index}
        if self.person is not None:
            rec["person"] = self.person
        rec["kp"] = self.keypoints.tolist()
        return rec

    def __eq__(self, other):
        if not isinstance(other, KeypointSet):
            return NotImplemented
        return (self.frame_index == other.frame_index and self.person == other.person
                and np.array_equal(self.keypoints, other.keypoints, equal_nan=True))


def _parse_pose(rec: dict, path, lineno: int) -> KeypointSet:
    if not isinstance(rec, dict) or "frame" not in rec or "kp" not in rec:
        raise ParseError(path, lineno, "record needs 'frame' and 'kp'")
    frame = rec["frame"]
    if not isinstance(frame, int) or isinstance(frame, bool):
        raise ParseError(path, lineno, f"'frame' must be an integer, got {frame!r}")
    kp = rec["kp"]
    if not isinstance(kp, list) or len(kp) != N_KEYPOINTS:
        n = len(kp) if isinstance(kp, list) else "non-list"
        raise SchemaError(f"{path}:{lineno}: expected {N_KEYPOINTS} keypoints, got {n}")
    try:
        arr = np.array(kp, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ParseError(path, lineno, f"bad keypoint values: {exc}") from None
    if arr.shape != (N_KEYPOINTS, 3):
        raise SchemaError(f"{path}:{lineno}: each keypoint must be [x, y, c]")
    det = arr[:, 2] > 0
    if not np.all(np.isfinite(arr[det, :2])):
        raise SchemaError(f"{path}:{lineno}: non-finite coordinates on a detected keypoint")
    person = rec.get("person")
    if person is not None:
        person = str(person)
    return KeypointSet(arr, frame, person)


def load_pose_frames(path) -> dict[int, list[KeypointSet]]:
    """Read ``poses.ndjson``; returns frame -> poses in file order, frames ascending."""
    frames: dict[int, list[KeypointSet]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"invalid JSON: {exc.msg}") from None
            pose = _parse_pose(rec, path, lineno)
            frames.setdefault(pose.frame_index, []).append(pose)
    return dict(sorted(frames.items()))


def write_pose_frames(path, frames: dict[int, list[KeypointSet]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for n in sorted(frames):
            for pose in frames[n]:
                fh.write(json.dumps(pose.to_record(), separators=(",", ":")))
                fh.write("\n")


@dataclass
class AccelSeries:
    sample_rate: float
    t: np.ndarray
    xyz: np.ndarray  # (n, 3)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        if self.sample_rate <= 0:
            raise ValidationError("sample_rate must be positive")
        if len(self.t) != len(self.xyz):
            raise ValidationError("t and xyz lengths differ")
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0):
            raise ValidationError("accelerometer timestamps must be strictly increasing")

    def is_uniform(self, tol: float = 0.01) -> bool:
        if len(self.t) < 2:
            return True
        return bool(np.all(np.abs(np.diff(self.t) * self.sample_rate - 1.0) <= tol))


@dataclass
class VadSeries:
    values: np.ndarray
    rate: float = VAD_RATE

    def __post_init__(self):
        self.values = np.asarray(self.values).astype(np.uint8)
        if self.rate <= 0:
            raise ValidationError("VAD rate must be positive")
        if np.any(self.values > 1):
            raise ValidationError("VAD values must be binary")

    @property
    def duration(self) -> float:
        return len(self.values) / self.rate


def _read_csv(path, header: list[str]) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise ParseError(path, 1, "empty file") from None
        if [h.strip() for h in first] != header:
            raise ParseError(path, 1, f"expected header {','.join(header)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(path, lineno, f"expected {len(header)} columns")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ParseError(path, lineno, "non-numeric value") from None
    return np.array(rows, dtype=np.float64).reshape(-1, len(header))


def load_accel_csv(path, sample_rate: float | None = None) -> AccelSeries:
    data = _read_csv(path, ["t", "x", "y", "z"])
    if sample_rate is None:
        if len(data) < 2:
            raise ValidationError(f"{path}: cannot infer sample rate from <2 rows")
        sample_rate = 1.0 / float(np.median(np.diff(data[:, 0])))
    return AccelSeries(sample_rate, data[:, 0], data[:, 1:])


def write_accel_csv(path, series: AccelSeries) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("t,x,y,z\n")
        for t, (x, y, z) in zip(series.t.tolist(), series.xyz.tolist()):
            fh.write(f"{t!r},{x!r},{y!r},{z!r}\n")


def load_vad_csv(path, rate: float | None = None) -> VadSeries:
    data = _read_csv(path, ["t", "v"])
    if not np.all(np.isin(data[:, 1], (0.0, 1.0))):
        raise ValidationError(f"{path}: VAD values must be 0 or 1")
    if rate is None:
        rate = VAD_RATE if len(data) < 2 else 1.0 / float(np.median(np.diff(data[:, 0])))
        rate = float(np.round(rate, 6))
    return VadSeries(data[:, 1].astype(np.uint8), rate)


def write_vad_csv(path, vad: VadSeries) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("t,v\n")
        for i, v in enumerate(vad.values.tolist()):
            fh.write(f"{i / vad.rate!r},{v}\n")


def aggregate_label(vad: VadSeries, start: float, duration: float,
                    threshold: float = LABEL_THRESHOLD) -> int:
    """1 iff the fraction of positive VAD samples in [start, start+duration) reaches ``threshold``."""
    if not 0 < threshold < 1:
        raise ValidationError("threshold must lie in (0, 1)")
    i0 = int(round(start * vad.rate))
    n = int(round(duration * vad.rate))
    if i0 < 0 or n <= 0 or i0 + n > len(vad.values):
        raise RangeError(f"window [{start}, {start + duration}) s outside VAD series "
                         f"of {vad.duration} s")
    positives = int(vad.values[i0:i0 + n].sum())
    return int(positives / n >= threshold)


def resample_accel(series: AccelSeries, target_rate: float = ACCEL_RATE, start: float = 0.0,
                   duration: float = SEGMENT_SECONDS) -> np.ndarray:
    """Linear-interpolation resampling of a window to (3, round(duration*target_rate))."""
    n = int(round(duration * target_rate))
    grid = start + np.arange(n) / target_rate
    t = series.t
    if len(t) < 2 or grid[0] < t[0] or grid[-1] > t[-1]:
        raise MissingDataError(f"acceleration does not cover [{start}, {start + duration}) s")
    lo = max(int(np.searchsorted(t, grid[0], side="right")) - 1, 0)
    hi = min(int(np.searchsorted(t, grid[-1], side="left")) + 1, len(t))
    if hi - lo > 1 and np.max(np.diff(t[lo:hi])) > 2.0 / series.sample_rate:
        raise MissingDataError(f"acceleration gap longer than 2 samples in [{start}, "
                               f"{start + duration}) s")
    return np.stack([np.interp(grid, t, series.xyz[:, a]) for a in range(3)])


@dataclass
class Segment:
    """A fixed-length example cut from one person's track in one camera."""

    person_id: str
    camera_id: str
    track_id: int
    start_frame: int
    n_frames: int
    fps: float
    poses: list = field(default_factory=list, repr=False)
    label: int = 0
    accel_window: np.ndarray | None = field(default=None, repr=False)
    traj_index: np.ndarray | None = field(default=None, repr=False)
    contamination: float | None = None
    duration: float = SEGMENT_SECONDS

    @property
    def group_key(self) -> str:
        return group_key(self.person_id, self.camera_id)

    @property
    def segment_id(self) -> str:
        return f"{self.camera_id}/{self.track_id}/{self.start_frame}"

    @property
    def frames(self) -> range:
        return range(self.start_frame, self.start_frame + self.n_frames)

    @property
    def start_time(self) -> float:
        return self.start_frame / self.fps


def group_key(person_id, camera_id) -> str:
    return f"{person_id}:{camera_id}"


def frames_per_segment(fps: float, duration: float = SEGMENT_SECONDS) -> int:
    # guard against 3*fps landing a hair above an integer
    return int(math.ceil(round(duration * fps, 9)))


def _padded_vad(vad: VadSeries, end_time: float) -> VadSeries:
    short = end_time - vad.duration
    if short <= 1e-9:
        return vad
    if short > VAD_MAX_PAD:
        raise RangeError(f"VAD ends {short:.3f} s before the track (max pad {VAD_MAX_PAD} s)")
    n_pad = int(math.ceil(short * vad.rate - 1e-9))
    return VadSeries(np.concatenate([vad.values, np.zeros(n_pad, np.uint8)]), vad.rate)


def segment_track(track: "PoseTrack", vad: VadSeries, accel: AccelSeries | None = None,
                  fps: float = 30.0, camera_id: str = "cam0", person_id: str | None = None,
                  duration: float = SEGMENT_SECONDS, threshold: float = LABEL_THRESHOLD,
                  accel_rate: float = ACCEL_RATE) -> list[Segment]:
    """Cut a track into consecutive non-overlapping windows; the trailing remainder is dropped."""
    if fps <= 0:
        raise ValidationError("fps must be positive")
    n_f = frames_per_segment(fps, duration)
    n_seg = len(track.poses) // n_f
    if n_seg == 0:
        return []
    person = person_id if person_id is not None else (track.person or f"track{track.track_id}")
    end_time = (track.start_frame + n_seg * n_f) / fps
    vad = _padded_vad(vad, end_time)
    out = []
    for k in range(n_seg):
        s = track.start_frame + k * n_f
        t0 = s / fps
        window = None
        if accel is not None:
            try:
                window = resample_accel(accel, accel_rate, t0, duration)
            except MissingDataError:
                window = None
        out.append(Segment(
            person_id=str(person), camera_id=str(camera_id), track_id=track.track_id,
            start_frame=s, n_frames=n_f, fps=fps,
            poses=track.poses[k * n_f:(k + 1) * n_f],
            label=aggregate_label(vad, t0, duration, threshold),
            accel_window=window, duration=duration,
        ))
    return out
