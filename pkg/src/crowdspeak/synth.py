"""Seeded synthetic crowded-scene datasets with planted speaking effects.

Agents stand in conversation groups on a floor seen by calibrated pinhole cameras.
Each agent has a 3-D skeleton whose projection gives the pose detections; dense
trajectories are emitted directly (origin near a body part, descriptor drawn from a
low-rank latent model whose mean shifts while the source agent speaks).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import ValidationError
from .filtering import Box, contamination_frame, lower_median, upper_body_points
from .geometry import Homography, save_calibration
from .ingest import (N_KEYPOINTS, AccelSeries, KeypointSet, VadSeries, frames_per_segment,
                     write_accel_csv, write_pose_frames, write_vad_csv)
from .trajectories import DESCRIPTOR_DIM, DEFAULT_PARAMS, FlowField, TrajectoryBatch, write_traj_bin

MANIFEST = "manifest.json"
KINDS = ("head", "wrist", "body", "torso", "clutter")
N_LATENT = 8
BOX_PAD = 0.15

# BODY25 template in metres: (lateral, forward, height); lateral > 0 is the agent's right
_TEMPLATE = np.zeros((N_KEYPOINTS, 3))
for _j, _p in {
    0: (0.0, 0.10, 1.60), 1: (0.0, 0.0, 1.45), 2: (0.18, 0.0, 1.43), 3: (0.23, 0.04, 1.16),
    4: (0.20, 0.22, 0.98), 5: (-0.18, 0.0, 1.43), 6: (-0.23, 0.04, 1.16), 7: (-0.20, 0.22, 0.98),
    8: (0.0, 0.0, 0.95), 9: (0.10, 0.0, 0.95), 10: (0.10, 0.02, 0.50), 11: (0.10, 0.0, 0.08),
    12: (-0.10, 0.0, 0.95), 13: (-0.10, 0.02, 0.50), 14: (-0.10, 0.0, 0.08), 15: (0.035, 0.09, 1.64),
    16: (-0.035, 0.09, 1.64), 17: (0.075, 0.0, 1.62), 18: (-0.075, 0.0, 1.62), 19: (-0.08, 0.15, 0.02),
    20: (-0.13, 0.12, 0.02), 21: (-0.10, -0.05, 0.02), 22: (0.08, 0.15, 0.02), 23: (0.13, 0.12, 0.02),
    24: (0.10, -0.05, 0.02),
}.items():
    _TEMPLATE[_j] = _p
_HEAD = (0, 15, 16, 17, 18)
_BODY = (1, 2, 3, 5, 6)
_WRISTS = (4, 7)


@dataclass(frozen=True)
class CameraSpec:
    id: str
    position: tuple
    yaw_deg: float
    pitch_deg: float
    focal: float = 1400.0
    size: tuple = (1920, 1080)

    def _rt(self):
        psi, th = math.radians(self.yaw_deg), math.radians(self.pitch_deg)
        d = np.array([math.cos(th) * math.cos(psi), math.cos(th) * math.sin(psi), -math.sin(th)])
        r = np.array([math.sin(psi), -math.cos(psi), 0.0])
        rot = np.stack([r, np.cross(d, r), d])
        return rot, -rot @ np.asarray(self.position, dtype=np.float64)

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.focal, 0, self.size[0] / 2], [0, self.focal, self.size[1] / 2], [0, 0, 1.0]])

    def project(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Image points and a visibility mask (in front of the camera and inside the frame)."""
        rot, t = self._rt()
        c = np.asarray(pts, dtype=np.float64) @ rot.T + t
        z = c[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([self.focal * c[..., 0] / z + self.size[0] / 2,
                           self.focal * c[..., 1] / z + self.size[1] / 2], axis=-1)
        vis = (z > 0.1) & (uv[..., 0] >= 0) & (uv[..., 0] <= self.size[0] - 1) \
            & (uv[..., 1] >= 0) & (uv[..., 1] <= self.size[1] - 1)
        return uv, vis

    def ground_homography(self) -> np.ndarray:
        rot, t = self._rt()
        m = self.intrinsics @ np.c_[rot[:, 0], rot[:, 1], t]
        return m / m[2, 2]


DEFAULT_CAMERAS = (
    CameraSpec("cam0", (4.0, -3.5, 3.2), 90.0, 28.0),
    CameraSpec("cam1", (-2.5, 7.5, 3.2), -34.7, 24.0),
)
DEFAULT_RATES = {"head": 8.0, "wrist": 6.0, "body": 8.0, "torso": 12.0, "clutter": 30.0}
DEFAULT_SHIFT = {"head": 1.0, "wrist": 0.8, "body": 0.15, "torso": 0.05, "clutter": 0.0}


@dataclass(frozen=True)
class SceneConfig:
    """Scene generator settings. Trajectory rates are expected counts per agent per
    3-second window; ``video_effect`` scales the speaking shift of descriptor latents."""

    n_agents: int = 16
    duration: float = 192.0
    fps: float = 15.0
    mean_on: float = 2.0
    mean_off: float = 4.0
    gesture_gain: float = 1.0
    contamination: float = 0.5
    keypoint_noise: float = 0.012
    dropout: float = 0.03
    chest_dropout: float = 0.005
    accel_rate: float = 50.0
    accel_gain: float = 0.25
    accel_noise: float = 0.12
    confuser_rate: float = 0.2
    video_effect: float = 1.6
    kind_separation: float = 0.5
    agent_spread: float = 0.3
    traj_rates: tuple = tuple(DEFAULT_RATES.items())
    speech_shift: tuple = tuple(DEFAULT_SHIFT.items())
    cameras: tuple = DEFAULT_CAMERAS
    seed: int = 0

    def __post_init__(self):
        positive = (self.n_agents, self.duration, self.fps, self.mean_on, self.mean_off, self.accel_rate)
        if min(positive) <= 0:
            raise ValidationError("n_agents, duration, fps, dwell means and accel_rate must be positive")
        if not 0 <= self.contamination <= 1:
            raise ValidationError("contamination must lie in [0, 1]")
        if self.contamination > 0 and self.n_agents < 2:
            raise ValidationError("a contamination target needs at least two agents")
        if not self.cameras:
            raise ValidationError("need at least one camera")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.fps))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["traj_rates"] = dict(self.traj_rates)
        d["speech_shift"] = dict(self.speech_shift)
        d["cameras"] = [asdict(c) for c in self.cameras]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        if "traj_rates" in d:
            d["traj_rates"] = tuple(dict(d["traj_rates"]).items())
        if "speech_shift" in d:
            d["speech_shift"] = tuple(dict(d["speech_shift"]).items())
        if "cameras" in d:
            d["cameras"] = tuple(CameraSpec(c["id"], tuple(c["position"]), c["yaw_deg"], c["pitch_deg"],
                                            c.get("focal", 1400.0), tuple(c.get("size", (1920, 1080))))
                                 for c in d["cameras"])
        return cls(**d)


@dataclass
class GroundTruth:
    speaking: dict  # agent id -> [[t0, t1], ...]
    traj_source: dict  # camera id -> agent index per trajectory
    traj_kind: dict  # camera id -> kind index per trajectory
    contamination: dict  # camera id -> agent id -> planted score per window
    traj_counts: dict = field(default_factory=dict)  # camera id -> agent id -> in-box count per window

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(**d)


def agent_id(i: int) -> str:
    return f"P{i:02d}"


# ---------------------------------------------------------------- streams

def _streams(seed: int, n_agents: int):
    """Independent per-agent generators plus a scene-level one, derived from the master seed."""
    root = np.random.SeedSequence(seed)
    scene, *agents = root.spawn(n_agents + 1)
    return np.random.default_rng(scene), [np.random.default_rng(s) for s in agents]


def _semi_markov(rng, n: int, rate: float, mean_on: float, mean_off: float) -> np.ndarray:
    out = np.zeros(n, np.uint8)
    state = int(rng.random() < mean_on / (mean_on + mean_off))
    i = 0
    while i < n:
        mean = mean_on if state else mean_off
        dwell = max(1, int(round(rng.gamma(2.0, mean / 2.0) * rate)))
        out[i:i + dwell] = state
        i += dwell
        state ^= 1
    return out


def _group_floor(rng, n: int, rate: float, size: int, mean_on: float, mean_off: float) -> np.ndarray:
    """Turn-taking inside a conversation group: one floor holder at a time, short gaps
    between turns, plus rare brief backchannels. Returns (size, n) binary streams."""
    if size == 1:
        return _semi_markov(rng, n, rate, mean_on, mean_off)[None]
    out = np.zeros((size, n), np.uint8)
    gap_mean = mean_off / size
    i = int(round(rng.gamma(2.0, gap_mean / 2.0) * rate))
    holder = int(rng.integers(size))
    while i < n:
        dwell = max(1, int(round(rng.gamma(2.0, mean_on / 2.0) * rate)))
        out[holder, i:i + dwell] = 1
        i += dwell + int(round(rng.gamma(2.0, gap_mean / 2.0) * rate))
        holder = (holder + int(rng.integers(1, size))) % size
    for k in range(size):
        out[k] |= _semi_markov(rng, n, rate, 0.4, 12.0)
    return out


def _intervals(v: np.ndarray, rate: float) -> list:
    d = np.diff(np.r_[0, v.astype(np.int8), 0])
    starts, ends = np.flatnonzero(d == 1), np.flatnonzero(d == -1)
    return [[s / rate, e / rate] for s, e in zip(starts.tolist(), ends.tolist())]


def _ou(rng, n: int, dt: float, tau: float, sigma: float, dim: int = 2) -> np.ndarray:
    a = math.exp(-dt / tau)
    b = sigma * math.sqrt(1 - a * a)
    x = np.zeros((n, dim))
    x[0] = rng.normal(0, sigma, dim)
    noise = rng.normal(0, b, (n, dim))
    for i in range(1, n):
        x[i] = a * x[i - 1] + noise[i]
    return x


def _smooth(x: np.ndarray, width: int) -> np.ndarray:
    if width <= 1:
        return x.astype(np.float64)
    k = np.ones(width) / width
    return np.convolve(x.astype(np.float64), k, mode="same")


# ---------------------------------------------------------------- agents

def _layout(cfg: SceneConfig, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Group anchors, per-agent slot positions around them and each agent's group index."""
    n = cfg.n_agents
    sizes = []
    left = n
    while left > 0:
        s = min(left, int(rng.integers(2, 5)) if left > 1 else 1)
        sizes.append(s)
        left -= s
    n_groups = len(sizes)
    cols = int(math.ceil(math.sqrt(n_groups * 1.4)))
    rows = int(math.ceil(n_groups / cols))
    xs = np.linspace(1.6, 6.4, cols) if cols > 1 else np.array([4.0])
    ys = np.linspace(1.6, 4.4, rows) if rows > 1 else np.array([3.0])
    cells = [(x, y) for y in ys for x in xs]
    order = rng.permutation(len(cells))[:n_groups]
    spacing = 1.9 - 1.2 * cfg.contamination
    anchors, slots, member = [], [], []
    for g, s in enumerate(sizes):
        cx, cy = cells[order[g]]
        cx += rng.uniform(-0.2, 0.2)
        cy += rng.uniform(-0.2, 0.2)
        radius = 0.0 if s == 1 else spacing / (2 * math.sin(math.pi / s))
        phase = rng.uniform(0, 2 * math.pi)
        for k in range(s):
            a = phase + 2 * math.pi * k / s
            anchors.append((cx, cy))
            slots.append((cx + radius * math.cos(a), cy + radius * math.sin(a)))
            member.append(g)
    return np.array(anchors), np.array(slots), np.array(member)


@dataclass
class _Agent:
    pos: np.ndarray  # (T, 2) ground position
    facing: np.ndarray  # (T,)
    speak_vad: np.ndarray  # 100 Hz
    speak_frame: np.ndarray  # per video frame, smoothed to [0, 1]
    skeleton: np.ndarray  # (T, 25, 3)


def _simulate_agent(cfg: SceneConfig, rng, anchor, slot, vad: np.ndarray) -> _Agent:
    T = cfg.n_frames
    dt = 1.0 / cfg.fps
    t = np.arange(T) * dt
    idx = np.minimum((t * 100).astype(np.int64), len(vad) - 1)
    speak = _smooth(vad[idx], max(1, int(round(0.2 * cfg.fps))))
    wander = _ou(rng, T, dt, 6.0, cfg.agent_spread * (0.4 + 0.6 * (1 - cfg.contamination)))
    drift = _ou(rng, T, dt, 40.0, 0.25)
    pos = np.asarray(slot) + wander + drift
    to_centre = np.asarray(anchor) - pos
    facing = np.arctan2(to_centre[:, 1], to_centre[:, 0])
    if np.allclose(anchor, slot):
        facing = np.full(T, rng.uniform(0, 2 * np.pi)) + 0.3 * _ou(rng, T, dt, 10.0, 1.0, 1)[:, 0]

    sk = np.repeat(_TEMPLATE[None], T, axis=0)
    ph = rng.uniform(0, 2 * np.pi, 6)
    sway = 0.02 * np.sin(2 * np.pi * 0.25 * t + ph[0])
    upper = _TEMPLATE[:, 2] > 0.9
    sk[:, upper, 0] += sway[:, None] * (_TEMPLATE[upper, 2] - 0.9)[None] / 0.7
    g = cfg.gesture_gain * speak
    nod = 0.015 * g * np.sin(2 * np.pi * 2.0 * t + ph[1])
    sk[:, list(_HEAD), 2] += nod[:, None]
    for w, p in zip(_WRISTS, (ph[2], ph[3])):
        base = 0.015 * np.sin(2 * np.pi * 0.4 * t + p)
        amp = 0.02 + 0.08 * g
        sk[:, w, 0] += base + amp * np.sin(2 * np.pi * 1.3 * t + p)
        sk[:, w, 1] += amp * np.sin(2 * np.pi * 1.7 * t + 2 * p)
        sk[:, w, 2] += base + 0.8 * amp * np.sin(2 * np.pi * 1.1 * t + 3 * p)
    for e, w in ((3, 4), (6, 7)):
        sk[:, e] += 0.4 * (sk[:, w] - _TEMPLATE[w])
    # local (lateral, forward, height) -> world
    c, s = np.cos(facing), np.sin(facing)
    lat, fwd = sk[..., 0], sk[..., 1]
    world = np.empty_like(sk)
    # forward = (cos f, sin f); right = (sin f, -cos f)
    world[..., 0] = pos[:, None, 0] + fwd * c[:, None] + lat * s[:, None]
    world[..., 1] = pos[:, None, 1] + fwd * s[:, None] - lat * c[:, None]
    world[..., 2] = sk[..., 2]
    return _Agent(pos, facing, vad, speak, world)


# ---------------------------------------------------------------- detections and boxes

def _ppm(h: Homography, p: np.ndarray) -> np.ndarray:
    return h.pixels_per_meter(p)


def _clean_boxes(cam: CameraSpec, h: Homography, agents: list[_Agent], pad: float = BOX_PAD):
    """Noise-free upper-body boxes (T, n_agents, 4); NaN where the agent is not visible."""
    T = len(agents[0].pos)
    boxes = np.full((T, len(agents), 4), np.nan)
    for a, ag in enumerate(agents):
        uv, vis = cam.project(ag.skeleton)
        kp = np.zeros((T, N_KEYPOINTS, 3))
        kp[..., :2] = uv
        kp[..., 2] = vis.astype(float)
        ub = np.stack([upper_body_points(KeypointSet(kp[f], f)) for f in range(T)])
        ok = ~np.all(np.isnan(ub[..., 0]), axis=1)
        lo = np.nanmin(np.where(ok[:, None, None], ub, 0), axis=1)
        hi = np.nanmax(np.where(ok[:, None, None], ub, 0), axis=1)
        centre = (lo + hi) / 2
        padpx = np.zeros(T)
        if ok.any():
            padpx[ok] = pad * _ppm(h, centre[ok])
        boxes[ok, a] = np.c_[lo[ok] - padpx[ok, None], hi[ok] + padpx[ok, None]]
    return boxes


def _planted_contamination(boxes: np.ndarray, n_f: int) -> dict:
    T, n = boxes.shape[:2]
    out = {}
    for a in range(n):
        scores = np.full(T, np.nan)
        for f in range(T):
            if np.isnan(boxes[f, a, 0]):
                continue
            tb = Box(*boxes[f, a])
            if not tb.area > 0:
                continue
            others = [Box(*boxes[f, b]) for b in range(n) if b != a and not np.isnan(boxes[f, b, 0])]
            scores[f] = contamination_frame(tb, others)
        per = []
        for k in range(T // n_f):
            w = scores[k * n_f:(k + 1) * n_f]
            w = w[~np.isnan(w)]
            per.append(lower_median(w) if len(w) else None)
        out[agent_id(a)] = per
    return out


def _box_counts(boxes: np.ndarray, batch: TrajectoryBatch, n_f: int) -> dict:
    """Per agent and window: trajectories of any source starting inside the agent's clean box."""
    T, n = boxes.shape[:2]
    f = np.clip(batch.start_frame.astype(np.int64), 0, T - 1)
    o = batch.origins
    out = {}
    for a in range(n):
        b = boxes[f, a]
        with np.errstate(invalid="ignore"):
            inside = (o[:, 0] >= b[:, 0]) & (o[:, 0] <= b[:, 2]) & (o[:, 1] >= b[:, 1]) & (o[:, 1] <= b[:, 3])
        out[agent_id(a)] = np.bincount(f[inside] // n_f, minlength=T // n_f)[:T // n_f].tolist()
    return out


def _detections(cfg: SceneConfig, cam: CameraSpec, agents: list[_Agent], rng) -> dict[int, list[KeypointSet]]:
    T = cfg.n_frames
    frames: dict[int, list[KeypointSet]] = {f: [] for f in range(T)}
    for a, ag in enumerate(agents):
        noisy = ag.skeleton + rng.normal(0, cfg.keypoint_noise, ag.skeleton.shape)
        uv, vis = cam.project(noisy)
        conf = rng.uniform(0.55, 0.95, vis.shape)
        drop = rng.random(vis.shape) < cfg.dropout
        chest_drop = rng.random(T) < cfg.chest_dropout
        det = vis & ~drop
        det[chest_drop, 1] = False
        kp = np.zeros((T, N_KEYPOINTS, 3))
        kp[..., :2] = np.where(det[..., None], np.round(uv, 2), 0.0)
        kp[..., 2] = np.where(det, np.round(conf, 3), 0.0)
        for f in range(T):
            if det[f].any():
                frames[f].append(KeypointSet(kp[f], f, agent_id(a)))
    return frames


# ---------------------------------------------------------------- trajectories and descriptors

@dataclass
class _Appearance:
    mix: np.ndarray  # (D - 30, N_LATENT)
    means: np.ndarray  # (n_kinds, N_LATENT)
    shift_dir: np.ndarray  # (n_kinds, N_LATENT)


def _appearance(rng, separation: float) -> _Appearance:
    d = DESCRIPTOR_DIM - 2 * DEFAULT_PARAMS.L
    q, _ = np.linalg.qr(rng.normal(size=(d, N_LATENT)))
    means = rng.normal(0, separation, (len(KINDS), N_LATENT))
    dirs = rng.normal(size=(len(KINDS), N_LATENT))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return _Appearance(q * 3.0, means, dirs)


def _anchor_points(kind: str, skel: np.ndarray, facing: np.ndarray, frames: np.ndarray, rng,
                   camera_xy=None) -> np.ndarray:
    """3-D anchor tracks (n, L+1, 3) for trajectories of a given kind starting at ``frames``.

    Clutter is background behind the person as seen from ``camera_xy``."""
    L1 = DEFAULT_PARAMS.L + 1
    span = frames[:, None] + np.arange(L1)[None]
    n = len(frames)
    if kind == "head":
        j = rng.choice(_HEAD, n)
        base = skel[span, j[:, None]]
        off = rng.normal(0, 0.03, (n, 3))
    elif kind == "wrist":
        j = rng.choice(_WRISTS, n)
        base = skel[span, j[:, None]]
        off = rng.normal(0, 0.035, (n, 3))
    elif kind == "body":
        j = rng.choice(_BODY, n)
        base = skel[span, j[:, None]]
        off = rng.normal(0, 0.04, (n, 3))
    else:
        neck = skel[span, 1]
        f = facing[frames]
        if kind == "torso":
            lat = rng.uniform(-0.15, 0.15, n)
            hgt = rng.uniform(1.05, 1.38, n)
            c, s = np.cos(f), np.sin(f)
            off = np.c_[0.10 * c + lat * s, 0.10 * s - lat * c, hgt - 1.45]
        else:
            away = neck[:, 0, :2] - np.asarray(camera_xy, dtype=np.float64)[:2]
            away /= np.linalg.norm(away, axis=1, keepdims=True)
            side = np.c_[-away[:, 1], away[:, 0]]
            depth = rng.uniform(0.4, 1.2, n)[:, None]
            lat = rng.uniform(-0.7, 0.7, n)[:, None]
            off = np.c_[depth * away + lat * side, rng.uniform(0.9, 1.9, n) - 1.45]
        base = neck
    jitter = np.cumsum(rng.normal(0, 0.002, (n, L1, 3)), axis=1)
    return base + off[:, None, :] + jitter


def _shape_part(points: np.ndarray) -> np.ndarray:
    d = np.diff(points, axis=1)
    tot = np.hypot(d[..., 0], d[..., 1]).sum(axis=1, keepdims=True)
    tot = np.where(tot > 0, tot, 1.0)
    return (d / tot[..., None]).reshape(len(points), -1)


def _agent_trajectories(cfg: SceneConfig, cam: CameraSpec, ag: _Agent, a: int, app: _Appearance,
                        offsets: np.ndarray, rng):
    """Trajectories sourced on one agent, visible in ``cam``. Returns arrays and kind ids."""
    T = cfg.n_frames
    L = DEFAULT_PARAMS.L
    n_f = frames_per_segment(cfg.fps)
    rates = dict(cfg.traj_rates)
    shifts = dict(cfg.speech_shift)
    out = []
    for k, kind in enumerate(KINDS):
        lam = rates.get(kind, 0.0) / n_f * (T - L)
        n = int(rng.poisson(lam))
        if n == 0 or T <= L:
            continue
        starts = np.sort(rng.integers(0, T - L, n))
        pts3 = _anchor_points(kind, ag.skeleton, ag.facing, starts, rng, cam.position)
        uv, vis = cam.project(pts3)
        ok = vis.all(axis=1)
        mid = np.minimum(((starts + L / 2) / cfg.fps * 100).astype(np.int64), len(ag.speak_vad) - 1)
        spk = ag.speak_vad[mid].astype(np.float64)
        z = app.means[k] + offsets[k] + rng.normal(0, 1.0, (n, N_LATENT))
        z += (cfg.video_effect * shifts.get(kind, 0.0) * spk)[:, None] * app.shift_dir[k]
        noise = rng.normal(0, 0.02, (n, DESCRIPTOR_DIM - 2 * L))
        desc = np.c_[_shape_part(uv), z @ app.mix.T + noise]
        out.append((starts[ok], uv[ok], desc[ok], np.full(ok.sum(), a), np.full(ok.sum(), k)))
    if not out:
        return None
    return [np.concatenate(x) for x in zip(*out)]


# ---------------------------------------------------------------- acceleration

def _accel(cfg: SceneConfig, ag: _Agent, rng) -> AccelSeries:
    fs = cfg.accel_rate
    n = int(round(cfg.duration * fs))
    t = np.arange(n) / fs
    idx = np.minimum((t * 100).astype(np.int64), len(ag.speak_vad) - 1)
    speak = _smooth(ag.speak_vad[idx], max(1, int(round(0.2 * fs))))
    # confusers: non-speech movement bursts (laughing, fidgeting) at random times
    conf = np.zeros(n)
    n_ev = rng.poisson(cfg.confuser_rate * cfg.duration)
    for c0 in rng.uniform(0, cfg.duration, n_ev):
        d = rng.uniform(0.5, 2.0)
        conf[(t >= c0) & (t < c0 + d)] = rng.uniform(0.6, 1.0)
    env = np.maximum(speak, conf)
    b, a = signal.butter(4, [2.0, min(8.0, 0.45 * fs)], btype="band", fs=fs)
    band = signal.lfilter(b, a, rng.normal(0, 1.0, (3, n)), axis=1)
    band /= band.std(axis=1, keepdims=True) + 1e-12
    tilt = rng.normal(0, 0.25, 3)
    g = np.array([math.sin(tilt[1]), -math.sin(tilt[0]), math.cos(tilt[0]) * math.cos(tilt[1])]) * 9.81
    sway = 0.05 * np.sin(2 * np.pi * 0.3 * t[None] + rng.uniform(0, 2 * np.pi, (3, 1)))
    xyz = g[:, None] + sway + cfg.accel_gain * 0.3 * env[None] * band + rng.normal(0, cfg.accel_noise, (3, n))
    return AccelSeries(fs, t, np.round(xyz.T, 5))


# ---------------------------------------------------------------- scene

def _atomic_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, separators=(",", ":"))
    os.replace(tmp, path)


def calibration_marks(cam: CameraSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Floor marks on a 3x3 grid and their exact images; reference = image of the floor centre."""
    h = cam.ground_homography()
    ground = np.array([(x, y) for y in (1.0, 3.0, 5.0) for x in (1.0, 4.0, 7.0)])
    hom = Homography(h, (0.0, 0.0))
    return ground, hom.to_image(ground), hom.to_image(np.array([4.0, 3.0]))


def simulate(cfg: SceneConfig):
    """In-memory scene: agents, per-camera detections, trajectories, accel and ground truth."""
    scene_rng, agent_rngs = _streams(cfg.seed, cfg.n_agents)
    anchors, slots, member = _layout(cfg, scene_rng)
    app = _appearance(scene_rng, cfg.kind_separation)
    n_vad = int(round(cfg.duration * 100))
    vads = np.zeros((cfg.n_agents, n_vad), np.uint8)
    for g in np.unique(member):
        idx = np.flatnonzero(member == g)
        vads[idx] = _group_floor(scene_rng, n_vad, 100.0, len(idx), cfg.mean_on, cfg.mean_off)
    agents = [_simulate_agent(cfg, agent_rngs[i], anchors[i], slots[i], vads[i]) for i in range(cfg.n_agents)]
    offsets = [agent_rngs[i].normal(0, 0.3, (len(KINDS), N_LATENT)) for i in range(cfg.n_agents)]
    n_f = frames_per_segment(cfg.fps)
    cams = {}
    gt = GroundTruth({agent_id(i): _intervals(ag.speak_vad, 100.0) for i, ag in enumerate(agents)},
                     {}, {}, {}, {})
    for ci, cam in enumerate(cfg.cameras):
        ground, image, ref = calibration_marks(cam)
        h = Homography(cam.ground_homography(), ref)
        cam_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1000 + ci]))
        dets = _detections(cfg, cam, agents, cam_rng)
        parts = []
        for i, ag in enumerate(agents):
            r = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2000 + ci, i]))
            p = _agent_trajectories(cfg, cam, ag, i, app, offsets[i], r)
            if p is not None:
                parts.append(p)
        if parts:
            starts, pts, desc, src, kind = [np.concatenate(x) for x in zip(*parts)]
            order = np.argsort(starts, kind="stable")
            batch = TrajectoryBatch(starts[order], np.zeros(len(order), np.int64), pts[order],
                                    desc[order].astype(np.float32).astype(np.float64))
            src, kind = src[order], kind[order]
        else:
            batch = TrajectoryBatch.empty()
            src = kind = np.zeros(0, np.int64)
        boxes = _clean_boxes(cam, h, agents)
        gt.contamination[cam.id] = _planted_contamination(boxes, n_f)
        gt.traj_source[cam.id] = src.astype(int).tolist()
        gt.traj_kind[cam.id] = kind.astype(int).tolist()
        gt.traj_counts[cam.id] = _box_counts(boxes, batch, n_f)
        cams[cam.id] = {"spec": cam, "ground": ground, "image": image, "ref": ref,
                        "detections": dets, "trajectories": batch}
    accel = [_accel(cfg, ag, agent_rngs[i]) for i, ag in enumerate(agents)]
    return agents, cams, accel, gt


def gen_scene(cfg: SceneConfig, out_dir) -> GroundTruth:
    """Write a dataset directory (manifest, per-camera poses/calibration/trajectories,
    per-agent accel and VAD) and return the ground truth."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    agents, cams, accel, gt = simulate(cfg)
    cameras = []
    for cid, c in cams.items():
        d = out / cid
        d.mkdir(exist_ok=True)
        write_pose_frames(d / "poses.ndjson", c["detections"])
        write_traj_bin(d / "traj.bin", c["trajectories"])
        save_calibration(d / "calib.json", c["ground"], c["image"], c["ref"])
        cameras.append({"id": cid, "poses": f"{cid}/poses.ndjson", "traj": f"{cid}/traj.bin",
                        "calib": f"{cid}/calib.json"})
    persons = []
    (out / "vad").mkdir(exist_ok=True)
    (out / "accel").mkdir(exist_ok=True)
    for i, ag in enumerate(agents):
        pid = agent_id(i)
        write_vad_csv(out / "vad" / f"{pid}.csv", VadSeries(ag.speak_vad, 100.0))
        write_accel_csv(out / "accel" / f"{pid}.csv", accel[i])
        persons.append({"id": pid, "vad": f"vad/{pid}.csv", "accel": f"accel/{pid}.csv"})
    _atomic_json(out / "ground_truth.json", gt.to_dict())
    manifest = {
        "version": 1, "fps": cfg.fps, "frame_size": list(cfg.cameras[0].size),
        "cameras": cameras, "persons": persons,
        "groups": sorted(f"{p['id']}:{c['id']}" for p in persons for c in cameras),
        "ground_truth": "ground_truth.json", "generator": cfg.to_dict(),
    }
    _atomic_json(out / MANIFEST, manifest)
    return gt


def load_ground_truth(dataset_dir) -> GroundTruth:
    with open(Path(dataset_dir) / "ground_truth.json", encoding="utf-8") as fh:
        return GroundTruth.from_dict(json.load(fh))


def benchmark_config(seed: int = 0, **overrides) -> SceneConfig:
    """The contaminated benchmark scene: 16 agents x 2 cameras x 64 windows = 2048 segments."""
    base = dict(n_agents=16, duration=192.0, fps=15.0, contamination=0.6, seed=seed)
    base.update(overrides)
    return SceneConfig(**base)


# ---------------------------------------------------------------- rendered frames

@dataclass(frozen=True)
class FrameConfig:
    width: int = 160
    height: int = 120
    n_frames: int = 31
    blobs: tuple = ((30.0, 40.0, 2.0, 0.0),)  # (x, y, vx, vy) of each blob's top-left corner
    blob_size: int = 36
    background: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.width > 320 or self.height > 240:
            raise ValidationError("rendered scenes are limited to 320x240")


def gen_frames(cfg: FrameConfig):
    """Textured square blobs translating at constant integer-free velocity over a flat
    background, with their exact flow. Returns (frames, flows, blob_masks)."""
    rng = np.random.default_rng(cfg.seed)
    from scipy import ndimage
    textures = [ndimage.gaussian_filter(rng.random((cfg.blob_size, cfg.blob_size)), 1.0)
                for _ in cfg.blobs]
    textures = [(t - t.min()) / (t.max() - t.min() + 1e-12) for t in textures]
    yy, xx = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
    frames, flows, masks = [], [], []
    for n in range(cfg.n_frames):
        img = np.full((cfg.height, cfg.width), cfg.background)
        u = np.zeros_like(img)
        v = np.zeros_like(img)
        m = np.zeros((len(cfg.blobs), cfg.height, cfg.width), bool)
        for b, ((x0, y0, vx, vy), tex) in enumerate(zip(cfg.blobs, textures)):
            bx, by = x0 + vx * n, y0 + vy * n
            lx, ly = xx - bx, yy - by
            inside = (lx >= 0) & (lx <= cfg.blob_size - 1) & (ly >= 0) & (ly <= cfg.blob_size - 1)
            vals = ndimage.map_coordinates(tex, [ly[inside], lx[inside]], order=1)
            img[inside] = vals
            u[inside], v[inside] = vx, vy
            m[b] = inside
        frames.append(img)
        masks.append(m)
        if n < cfg.n_frames - 1:
            flows.append(FlowField(u, v))
    return frames, flows, masks
