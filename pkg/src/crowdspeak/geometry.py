"""Ground-plane homography from floor marks, and the position-dependent pixel scale."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import GeometryError, ValidationError

DEFAULT_DELTA = 0.01


def _apply(m: np.ndarray, x, y):
    """Projective map of coordinate arrays. Written out elementwise so scalar and
    batched calls round identically."""
    u = m[0, 0] * x + m[0, 1] * y + m[0, 2]
    v = m[1, 0] * x + m[1, 1] * y + m[1, 2]
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    return u, v, w


def _normalizer(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


@dataclass
class Homography:
    """``matrix`` maps ground-plane metres to image pixels."""

    matrix: np.ndarray
    ref_point: np.ndarray
    rms_error: float = 0.0
    inverse: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (3, 3):
            raise ValidationError("homography must be 3x3")
        if abs(np.linalg.det(self.matrix)) < 1e-12 * np.abs(self.matrix).max() ** 3:
            raise GeometryError("singular homography")
        self.inverse = np.linalg.inv(self.matrix)
        self.ref_point = np.asarray(self.ref_point, dtype=np.float64).reshape(2)
        self._ref_sign = np.sign(_apply(self.inverse, *self.ref_point)[2])

    def to_image(self, ground) -> np.ndarray:
        g = np.asarray(ground, dtype=np.float64)
        u, v, w = _apply(self.matrix, g[..., 0], g[..., 1])
        return np.stack([u / w, v / w], axis=-1)

    def to_ground(self, image) -> np.ndarray:
        p = np.asarray(image, dtype=np.float64)
        gx, gy, gw = _apply(self.inverse, p[..., 0], p[..., 1])
        return np.stack([gx / gw, gy / gw], axis=-1)

    def pixels_per_meter(self, points, delta: float = DEFAULT_DELTA) -> np.ndarray:
        """Mean image displacement per metre for unit ground steps along x and y."""
        if not delta > 0:
            raise ValidationError("delta must be positive")
        p = np.asarray(points, dtype=np.float64)
        px, py = p[..., 0], p[..., 1]
        gx, gy, gw = _apply(self.inverse, px, py)
        bad = ~np.isfinite(gw) | (np.abs(gw) < 1e-12) | (np.sign(gw) != self._ref_sign)
        if np.any(bad):
            raise GeometryError("point at or beyond the horizon has no ground position")
        gx, gy = gx / gw, gy / gw
        total = 0.0
        for dx, dy in ((delta, 0.0), (0.0, delta)):
            u, v, w = _apply(self.matrix, gx + dx, gy + dy)
            if np.any(np.sign(w) != np.sign(_apply(self.matrix, gx, gy)[2])):
                raise GeometryError("ground displacement crosses the horizon")
            du, dv = u / w - px, v / w - py
            total = total + np.sqrt(du * du + dv * dv) / delta
        return total / 2.0

    def scale_factor(self, points, delta: float = DEFAULT_DELTA):
        """Pixel scale at ``points`` relative to the reference point (1 at the reference)."""
        out = self.pixels_per_meter(points, delta) / self.pixels_per_meter(self.ref_point, delta)
        return float(out) if np.ndim(out) == 0 else out

    def to_dict(self) -> dict:
        return {"matrix": self.matrix.tolist(), "ref": self.ref_point.tolist(),
                "rms_error": self.rms_error}

    @classmethod
    def from_dict(cls, d: dict) -> "Homography":
        return cls(np.array(d["matrix"]), np.array(d["ref"]), float(d.get("rms_error", 0.0)))


def scale_factor(h: Homography, p, delta: float = DEFAULT_DELTA):
    return h.scale_factor(p, delta)


def _collinear(a, b, c, tol=1e-9) -> bool:
    area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    scale = max(np.ptp([a[0], b[0], c[0]]), np.ptp([a[1], b[1], c[1]]), 1e-300)
    return abs(area) <= tol * scale ** 2


def estimate_homography(ground, image, ref=None) -> Homography:
    """Normalised direct linear transform from >= 4 ground/image correspondences."""
    g = np.asarray(ground, dtype=np.float64).reshape(-1, 2)
    im = np.asarray(image, dtype=np.float64).reshape(-1, 2)
    if len(g) != len(im):
        raise ValidationError("ground and image point counts differ")
    if len(g) < 4:
        raise ValidationError(f"need at least 4 correspondences, got {len(g)}")
    if len(g) == 4 and any(_collinear(*tri) for tri in combinations(g, 3)):
        raise GeometryError("three of the four ground points are collinear")
    tg, ti = _normalizer(g), _normalizer(im)
    gn = (tg @ np.c_[g, np.ones(len(g))].T).T
    imn = (ti @ np.c_[im, np.ones(len(im))].T).T
    rows = []
    for (x, y, _), (u, v, _) in zip(gn, imn):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, s, vt = np.linalg.svd(np.array(rows))
    if s[7] <= 1e-10 * s[0]:
        raise GeometryError("degenerate correspondences (DLT system rank < 8)")
    hn = vt[-1].reshape(3, 3)
    a = np.linalg.inv(ti) @ hn @ tg
    if abs(a[2, 2]) < 1e-12:
        raise GeometryError("homography cannot be normalised (A[2,2] ~ 0)")
    a = a / a[2, 2]
    proj = Homography(a, im.mean(axis=0)).to_image(g)
    rms = float(np.sqrt(np.mean(np.sum((proj - im) ** 2, axis=1))))
    if ref is None:
        gc = g.mean(axis=0)
        u, v, w = _apply(a, gc[0], gc[1])
        ref = (u / w, v / w)
    return Homography(a, np.asarray(ref, dtype=np.float64), rms)


def load_calibration(path) -> Homography:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    if "matrix" in d:
        return Homography.from_dict(d)
    return estimate_homography(d["ground"], d["image"], d.get("ref"))


def save_calibration(path, ground, image, ref=None) -> None:
    d = {"ground": np.asarray(ground, float).tolist(), "image": np.asarray(image, float).tolist()}
    if ref is not None:
        d["ref"] = list(map(float, ref))
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(d, fh)
