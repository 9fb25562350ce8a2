"""Dataset manifests and the segment table shared by training and evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, MissingDataError, SchemaError
from .filtering import (DEFAULT_BOX_PAD, DEFAULT_R_GRID, SUBSETS, BoxCache, FilterConfig, TrackGeometry,
                        contamination_segment, full_set_mask, selection_mask)
from .geometry import Homography, load_calibration
from .ingest import Segment, frames_per_segment, load_accel_csv, load_pose_frames, load_vad_csv, segment_track
from .tracking import PoseTrack, TrackerConfig, build_tracks, load_tracks
from .trajectories import TrajectoryBatch, read_traj_bin

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


@dataclass
class Manifest:
    root: Path
    fps: float
    cameras: list[dict]
    persons: list[dict]
    raw: dict = field(repr=False, default_factory=dict)

    def path(self, rel: str) -> Path:
        return self.root / rel


def load_manifest(root) -> Manifest:
    root = Path(root)
    path = root / MANIFEST if root.is_dir() else root
    root = path.parent
    if not path.exists():
        raise InputError(f"{path}: manifest not found")
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc.msg})") from None
    for key in ("fps", "cameras", "persons"):
        if key not in raw:
            raise SchemaError(f"{path}: missing key {key!r}")
    for cam in raw["cameras"]:
        for key in ("id", "poses", "traj", "calib"):
            if key not in cam:
                raise SchemaError(f"{path}: camera entry missing {key!r}")
    for p in raw["persons"]:
        if "id" not in p or "vad" not in p:
            raise SchemaError(f"{path}: person entry needs 'id' and 'vad'")
    return Manifest(root, float(raw["fps"]), raw["cameras"], raw["persons"], raw)


@dataclass
class CameraData:
    id: str
    homography: Homography
    tracks: list[PoseTrack]
    trajectories: TrajectoryBatch
    offset: int
    boxes: BoxCache
    geometry: dict[int, TrackGeometry]


@dataclass
class SegmentTable:
    """Per-segment arrays; trajectory indices refer to the concatenated descriptor pool."""

    segments: list[Segment]
    camera: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    contamination: np.ndarray
    accel: np.ndarray  # (n, 3, T) raw windows, zeros where missing
    has_accel: np.ndarray
    full: list[np.ndarray]
    descriptors: np.ndarray  # pool (N, 426) float32
    cameras: list[CameraData] = field(repr=False, default_factory=list)
    r_grid: tuple = DEFAULT_R_GRID
    frame_window: int = 1
    selections: dict = field(repr=False, default_factory=dict)

    def __len__(self):
        return len(self.segments)

    @property
    def segment_ids(self) -> list[str]:
        return [s.segment_id for s in self.segments]

    def selection(self, subset: str, radius: float) -> list[np.ndarray]:
        key = (subset, float(radius))
        if key not in self.selections:
            self.selections[key] = self._select(FilterConfig.make(subset, radius, self.frame_window))
        return self.selections[key]

    def _select(self, cfg: FilterConfig) -> list[np.ndarray]:
        out = []
        for i, seg in enumerate(self.segments):
            cam = self.cameras[self.camera[i]]
            idx = self.full[i]
            if not len(idx):
                out.append(idx)
                continue
            local = idx - cam.offset
            tr = cam.trajectories
            mask = selection_mask(tr.origins[local], tr.start_frame[local], cam.geometry[seg.track_id], cfg)
            out.append(idx[mask])
        return out


def _camera_tracks(manifest: Manifest, cam: dict, tracker: TrackerConfig, tracks_dir) -> list[PoseTrack]:
    if tracks_dir is not None:
        p = Path(tracks_dir) / f"{cam['id']}.tracks.ndjson"
        if p.exists():
            return load_tracks(p)
    pose_path = manifest.path(cam["poses"])
    if not pose_path.exists():
        raise InputError(f"{pose_path}: pose file not found")
    return build_tracks(load_pose_frames(pose_path), tracker)


def prepare(root, dist_threshold: float = 40.0, box_pad: float = DEFAULT_BOX_PAD,
            r_grid=DEFAULT_R_GRID, tracks_dir=None, traj_dir=None, with_accel: bool = True,
            max_staleness: int = 0, chest_index: int = 1, frame_window: int = 1) -> SegmentTable:
    """Track, segment and label every camera view, and index each segment's trajectories.

    Per camera, ``tracks_dir``/``traj_dir`` outputs of earlier stages take precedence over
    the manifest's files when present. ``max_staleness=0`` means one second of frames."""
    manifest = load_manifest(root)
    fps = manifest.fps
    tracker = TrackerConfig(dist_threshold, max_staleness or max(1, int(round(fps))), chest_index)
    vad, accel = {}, {}
    for p in manifest.persons:
        path = manifest.path(p["vad"])
        if not path.exists():
            raise InputError(f"{path}: VAD file not found")
        vad[p["id"]] = load_vad_csv(path)
        if with_accel and p.get("accel"):
            apath = manifest.path(p["accel"])
            if apath.exists():
                accel[p["id"]] = load_accel_csv(apath)
    n_f = frames_per_segment(fps)

    cameras: list[CameraData] = []
    segments, cam_idx, full = [], [], []
    descs = []
    offset = 0
    for ci, cam in enumerate(manifest.cameras):
        h = load_calibration(manifest.path(cam["calib"]))
        tracks = _camera_tracks(manifest, cam, tracker, tracks_dir)
        traj_path = manifest.path(cam["traj"])
        if traj_dir is not None and (Path(traj_dir) / f"{cam['id']}.traj.bin").exists():
            traj_path = Path(traj_dir) / f"{cam['id']}.traj.bin"
        if not traj_path.exists():
            raise InputError(f"{traj_path}: trajectory file not found")
        trajs = read_traj_bin(traj_path)
        boxes = BoxCache(tracks, h, box_pad)
        geometry = {}
        data = CameraData(cam["id"], h, tracks, trajs, offset, boxes, geometry)
        order = np.argsort(trajs.start_frame, kind="stable")
        starts = trajs.start_frame[order]
        for tr in tracks:
            if tr.person not in vad:
                log.warning("camera %s track %d has no labelled person; skipped", cam["id"], tr.track_id)
                continue
            segs = segment_track(tr, vad[tr.person], accel.get(tr.person), fps, cam["id"], tr.person)
            if not segs:
                continue
            geometry[tr.track_id] = TrackGeometry(tr, h)
            for seg in segs:
                lo = np.searchsorted(starts, seg.start_frame, side="left")
                hi = np.searchsorted(starts, seg.start_frame + n_f, side="left")
                cand = np.sort(order[lo:hi])
                m = full_set_mask(trajs.origins[cand], trajs.start_frame[cand], tr.track_id, boxes)
                try:
                    seg.contamination = contamination_segment(seg, tracks, h, box_pad, boxes)
                except MissingDataError:
                    seg.contamination = None
                segments.append(seg)
                cam_idx.append(ci)
                full.append(cand[m] + offset)
        cameras.append(data)
        descs.append(trajs.descriptors.astype(np.float32))
        offset += len(trajs)

    n = len(segments)
    if n == 0:
        raise MissingDataError("no labelled segments could be built from the dataset")
    t_len = max((s.accel_window.shape[1] for s in segments if s.accel_window is not None), default=60)
    acc = np.zeros((n, 3, t_len))
    has = np.zeros(n, bool)
    for i, s in enumerate(segments):
        if s.accel_window is not None:
            acc[i], has[i] = s.accel_window, True
    return SegmentTable(
        segments=segments, camera=np.array(cam_idx), labels=np.array([s.label for s in segments]),
        groups=np.array([s.group_key for s in segments]),
        contamination=np.array([np.nan if s.contamination is None else s.contamination for s in segments]),
        accel=acc, has_accel=has, full=full,
        descriptors=np.concatenate(descs) if descs else np.zeros((0, 426), np.float32),
        cameras=cameras, r_grid=tuple(float(r) for r in r_grid), frame_window=frame_window)


def subset_names() -> list[str]:
    return sorted(SUBSETS)
