"""Late score fusion by unregularised logistic regression."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from ..errors import FitError

log = logging.getLogger(__name__)


@dataclass
class FusionModel:
    w_video: float
    w_accel: float
    intercept: float

    def apply(self, video_scores, accel_scores) -> np.ndarray:
        z = (self.w_video * np.asarray(video_scores, dtype=np.float64)
             + self.w_accel * np.asarray(accel_scores, dtype=np.float64) + self.intercept)
        return 1.0 / (1.0 + np.exp(-z))

    def to_dict(self) -> dict:
        return {"version": 1, "w_video": self.w_video, "w_accel": self.w_accel,
                "intercept": self.intercept}

    @classmethod
    def from_dict(cls, d: dict) -> "FusionModel":
        return cls(float(d["w_video"]), float(d["w_accel"]), float(d["intercept"]))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "FusionModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _nll(beta, x, y):
    z = x @ beta
    return float(np.sum(np.logaddexp(0, z) - y * z))


def _gradient_fit(x, y, iters=2000, max_step=0.5):
    beta = np.zeros(x.shape[1])
    for _ in range(iters):
        p = 1 / (1 + np.exp(-(x @ beta)))
        g = x.T @ (p - y) / len(y)
        n = np.linalg.norm(g)
        if n < 1e-10:
            break
        beta -= g * min(1.0, max_step / n)
    return beta


def fuse_fit(video_scores, accel_scores, labels, max_iter: int = 100) -> FusionModel:
    x = np.c_[np.asarray(video_scores, float), np.asarray(accel_scores, float),
              np.ones(len(labels))]
    y = (np.asarray(labels) > 0).astype(np.float64)
    if y.min() == y.max():
        raise FitError("fusion needs both classes")
    beta = np.zeros(3)
    f = _nll(beta, x, y)
    separated = False
    for _ in range(max_iter):
        p = 1 / (1 + np.exp(-(x @ beta)))
        g = x.T @ (p - y)
        h = (x * (p * (1 - p))[:, None]).T @ x
        try:
            step = np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(h, g, rcond=None)[0]
        t = 1.0
        while t > 1e-8:
            nb = beta - t * step
            nf = _nll(nb, x, y)
            if nf <= f:
                break
            t /= 2
        beta, f_old, f = nb, f, nf
        if np.abs(beta).max() > 1e3 or f < 1e-8:
            separated = True
            break
        if abs(f_old - f) <= 1e-12 * max(1.0, abs(f)) and np.abs(t * step).max() < 1e-10:
            break
    if separated or not np.all(np.isfinite(beta)):
        log.warning("scores perfectly separate the labels; using a bounded-step gradient fit")
        beta = _gradient_fit(x, y)
    return FusionModel(float(beta[0]), float(beta[1]), float(beta[2]))
