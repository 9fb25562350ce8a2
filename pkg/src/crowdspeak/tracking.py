"""Chest-keypoint pose tracking with gated optimal assignment and gap interpolation."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ParseError, RangeError, ValidationError
from .ingest import (L_EAR, L_EYE, NECK, NOSE, R_EAR, R_EYE, KeypointSet,
                     _parse_pose)

HEAD_POINTS = (NOSE, R_EYE, L_EYE, R_EAR, L_EAR)


@dataclass
class TrackerConfig:
    dist_threshold: float
    max_staleness: int
    chest_index: int = NECK

    def __post_init__(self):
        if not self.dist_threshold > 0:
            raise ValidationError("dist_threshold must be > 0")
        if int(self.max_staleness) < 1:
            raise ValidationError("max_staleness must be >= 1")
        self.max_staleness = int(self.max_staleness)

    @classmethod
    def for_fps(cls, fps: float, dist_threshold: float = 40.0, chest_index: int = NECK):
        """Staleness window of one second."""
        return cls(dist_threshold, max(1, int(round(fps))), chest_index)


@dataclass
class PoseTrack:
    track_id: int
    start_frame: int
    poses: list[KeypointSet] = field(default_factory=list, repr=False)
    interpolated: list[bool] = field(default_factory=list, repr=False)
    person: str | None = None

    @property
    def end_frame(self) -> int:
        return self.start_frame + len(self.poses) - 1

    def __len__(self):
        return len(self.poses)

    def pose_at(self, frame: int) -> KeypointSet | None:
        k = frame - self.start_frame
        if 0 <= k < len(self.poses):
            return self.poses[k]
        return None

    def assign_person(self) -> None:
        """Majority vote over the person labels of real (non-imputed) detections."""
        votes = Counter(p.person for p, interp in zip(self.poses, self.interpolated)
                        if p.person is not None and not interp)
        if votes:
            best = max(votes.values())
            self.person = min(k for k, v in votes.items() if v == best)


def pose_distance(a: KeypointSet, b: KeypointSet, chest_index: int = NECK) -> float:
    """Chest-to-chest Euclidean distance; ``inf`` when either chest is undetected."""
    if a.keypoints[chest_index, 2] <= 0 or b.keypoints[chest_index, 2] <= 0:
        return float("inf")
    dx = a.keypoints[chest_index, 0] - b.keypoints[chest_index, 0]
    dy = a.keypoints[chest_index, 1] - b.keypoints[chest_index, 1]
    return float(np.sqrt(dx * dx + dy * dy))


def solve_gated_assignment(cost: np.ndarray, max_cost: float) -> list[tuple[int, int]]:
    """Largest feasible matching, and among those the cheapest.

    Pairs with cost > ``max_cost`` (or non-finite) are infeasible. Infeasible
    entries get a penalty larger than any feasible matching's total, so the
    solver first minimises the number of infeasible pairs and then the cost.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    feasible = np.isfinite(cost) & (cost <= max_cost)
    if not feasible.any():
        return []
    big = (min(cost.shape) + 1) * (float(cost[feasible].max()) + 1.0)
    rows, cols = linear_sum_assignment(np.where(feasible, cost, big))
    return [(int(r), int(c)) for r, c in zip(rows, cols) if feasible[r, c]]


def assign_poses(open_tracks, detections: list[KeypointSet], cfg: TrackerConfig):
    """Match detections to open tracks given as ``(track, last_pose, last_frame)`` tuples.

    Returns ``(matches, unmatched)`` with ``matches`` a list of ``(track, detection)``.
    """
    if not detections:
        return [], []
    if not open_tracks:
        return [], list(detections)
    cost = np.array([[pose_distance(last, det, cfg.chest_index) for det in detections]
                     for _, last, _ in open_tracks])
    pairs = solve_gated_assignment(cost, cfg.dist_threshold)
    matched = {c for _, c in pairs}
    matches = [(open_tracks[r][0], detections[c]) for r, c in pairs]
    unmatched = [d for i, d in enumerate(detections) if i not in matched]
    return matches, unmatched


def interpolate_pose(a: KeypointSet, b: KeypointSet, frame: int) -> KeypointSet:
    """Linear imputation between two poses; keypoints missing at either end stay undetected."""
    w = (frame - a.frame_index) / (b.frame_index - a.frame_index)
    both = (a.keypoints[:, 2] > 0) & (b.keypoints[:, 2] > 0)
    kp = np.zeros_like(a.keypoints)
    kp[both, :2] = (1 - w) * a.keypoints[both, :2] + w * b.keypoints[both, :2]
    kp[both, 2] = np.minimum(a.keypoints[both, 2], b.keypoints[both, 2])
    return KeypointSet(kp, frame, a.person if a.person == b.person else None)


def _extend(track: PoseTrack, det: KeypointSet) -> None:
    last = track.poses[-1]
    for m in range(last.frame_index + 1, det.frame_index):
        track.poses.append(interpolate_pose(last, det, m))
        track.interpolated.append(True)
    track.poses.append(det)
    track.interpolated.append(False)


def build_tracks(frames: dict[int, list[KeypointSet]], cfg: TrackerConfig,
                 stats: dict | None = None) -> list[PoseTrack]:
    """Greedy-in-time tracking: each frame's poses are assigned to recent track heads."""
    active: list[PoseTrack] = []
    done: list[PoseTrack] = []
    next_id = 0
    dropped = 0
    for n in sorted(frames):
        still = []
        for tr in active:
            (still if n - tr.end_frame < cfg.max_staleness else done).append(tr)
        active = still
        dets = []
        for p in frames[n]:
            if p.keypoints[cfg.chest_index, 2] > 0:
                dets.append(p)
            else:
                dropped += 1
        heads = [(tr, tr.poses[-1], tr.end_frame) for tr in active]
        matches, unmatched = assign_poses(heads, dets, cfg)
        for tr, det in matches:
            _extend(tr, det)
        for det in unmatched:
            active.append(PoseTrack(next_id, det.frame_index, [det], [False]))
            next_id += 1
    done.extend(active)
    done.sort(key=lambda t: t.track_id)
    for tr in done:
        tr.assign_person()
    if stats is not None:
        stats["dropped_undetected_chest"] = stats.get("dropped_undetected_chest", 0) + dropped
        stats["n_tracks"] = len(done)
    return done


def split_track(track: PoseTrack, frame: int, new_track_id: int) -> tuple[PoseTrack, PoseTrack]:
    """Split before ``frame``: the first part ends at frame-1, the second keeps the rest."""
    if not track.start_frame < frame <= track.end_frame:
        raise RangeError(f"split frame {frame} outside ({track.start_frame}, {track.end_frame}]")
    k = frame - track.start_frame
    a = PoseTrack(track.track_id, track.start_frame, track.poses[:k], track.interpolated[:k])
    b = PoseTrack(new_track_id, frame, track.poses[k:], track.interpolated[k:])
    a.assign_person()
    b.assign_person()
    return a, b


def split_tracks(tracks: list[PoseTrack], track_id: int, frame: int) -> list[PoseTrack]:
    """Apply a manual split correction to a track list, giving the tail the next free id."""
    out = []
    new_id = max(t.track_id for t in tracks) + 1
    for tr in tracks:
        out.extend(split_track(tr, frame, new_id) if tr.track_id == track_id else [tr])
    return sorted(out, key=lambda t: t.track_id)


def head_keypoint(pose: KeypointSet) -> np.ndarray | None:
    """Mean of detected nose/eye/ear keypoints, or ``None``."""
    kp = pose.keypoints[list(HEAD_POINTS)]
    det = kp[:, 2] > 0
    if not det.any():
        return None
    return kp[det, :2].mean(axis=0)


def write_tracks(path, tracks: list[PoseTrack]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tr in tracks:
            for pose, interp in zip(tr.poses, tr.interpolated):
                rec = {"track": tr.track_id}
                if tr.person is not None:
                    rec["person"] = tr.person
                rec["frame"] = pose.frame_index
                rec["kp"] = pose.keypoints.tolist()
                rec["interp"] = bool(interp)
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_tracks(path) -> list[PoseTrack]:
    tracks: dict[int, PoseTrack] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"invalid JSON: {exc.msg}") from None
            if "track" not in rec:
                raise ParseError(path, lineno, "missing 'track'")
            pose = _parse_pose({"frame": rec.get("frame"), "kp": rec.get("kp")}, path, lineno)
            tid = int(rec["track"])
            tr = tracks.get(tid)
            if tr is None:
                tr = tracks[tid] = PoseTrack(tid, pose.frame_index, person=rec.get("person"))
            elif pose.frame_index != tr.end_frame + 1:
                raise ParseError(path, lineno, f"track {tid} is not frame-contiguous")
            tr.poses.append(pose)
            tr.interpolated.append(bool(rec.get("interp", False)))
    return [tracks[k] for k in sorted(tracks)]
