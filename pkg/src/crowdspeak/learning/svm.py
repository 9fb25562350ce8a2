"""Linear SVM trained by Pegasos-style SGD, plus Platt calibration."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numba
import numpy as np

from ..errors import FitError, InputError

LAMBDA_GRID = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2)


@dataclass
class LinearSvm:
    weights: np.ndarray
    bias: float
    l2_lambda: float
    platt_A: float = -1.0
    platt_B: float = 0.0

    def decision(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weights + self.bias

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return platt_apply(self.decision(x), self.platt_A, self.platt_B)

    def to_dict(self) -> dict:
        return {"version": 1, "weights": self.weights.tolist(), "bias": self.bias,
                "l2_lambda": self.l2_lambda, "platt_A": self.platt_A, "platt_B": self.platt_B}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearSvm":
        return cls(np.array(d["weights"], dtype=np.float64), float(d["bias"]),
                   float(d["l2_lambda"]), float(d["platt_A"]), float(d["platt_B"]))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "LinearSvm":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def svm_objective(w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray, lam: float) -> float:
    """(lam/2)(|w|^2 + b^2) + mean hinge loss. The bias is an augmented, regularised feature."""
    margins = y * (x @ w + b)
    return 0.5 * lam * (w @ w + b * b) + float(np.maximum(0.0, 1.0 - margins).mean())


def _as_pm1(y) -> np.ndarray:
    y = np.asarray(y)
    u = np.unique(y)
    if len(u) != 2:
        raise FitError(f"SVM training needs both classes, got labels {u.tolist()}")
    return np.where(y == u[1], 1.0, -1.0)


@numba.njit(cache=True)
def _pegasos(x, y, weight, order, lam):
    v = np.zeros(x.shape[1])
    scale = 1.0  # w = scale * v keeps the shrink step O(1)
    sq = 0.0  # |v|^2
    radius = 1.0 / math.sqrt(lam)
    for t in range(1, len(order) + 1):
        i = order[t - 1]
        eta = 1.0 / (lam * t)
        dot = 0.0
        for j in range(x.shape[1]):
            dot += v[j] * x[i, j]
        margin = y[i] * scale * dot
        scale *= 1.0 - eta * lam
        if scale == 0.0:
            v[:] = 0.0
            sq = 0.0
            dot = 0.0
            scale = 1.0
        if margin < 1.0:
            c = eta * weight[i] * y[i] / scale
            xx = 0.0
            for j in range(x.shape[1]):
                v[j] += c * x[i, j]
                xx += x[i, j] * x[i, j]
            sq += 2.0 * c * dot + c * c * xx
        norm = scale * math.sqrt(max(sq, 0.0))
        if norm > radius:
            scale *= radius / norm
    return scale * v


def train_svm(x: np.ndarray, y, lam: float = 1e-4, seed: int = 0, epochs: int = 10) -> LinearSvm:
    """Pegasos SGD on the regularised hinge loss with step 1/(lam t).

    Identical rows are merged and visited once per epoch with a weight equal to
    their multiplicity (relative to the mean), so the result depends only on the
    empirical distribution: duplicating the training set changes nothing.
    """
    x = np.asarray(x, dtype=np.float64)
    y = _as_pm1(y)
    xy = np.c_[x, y]
    uniq, inverse, counts = np.unique(xy, axis=0, return_inverse=True, return_counts=True)
    xu = np.c_[uniq[:, :-1], np.ones(len(uniq))]  # trailing bias feature
    yu = uniq[:, -1]
    weight = counts * len(uniq) / len(x)
    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(len(xu)) for _ in range(epochs)])
    w = _pegasos(xu, yu, weight, order, lam)
    return LinearSvm(w[:-1].copy(), float(w[-1]), lam)


def platt_apply(m, a: float, b: float) -> np.ndarray:
    """p = 1 / (1 + exp(a m + b)), evaluated without overflow."""
    z = a * np.asarray(m, dtype=np.float64) + b
    return np.where(z >= 0, np.exp(-np.abs(z)) / (1 + np.exp(-np.abs(z))),
                    1 / (1 + np.exp(-np.abs(z))))


def platt_nll(margins, labels, a: float, b: float) -> float:
    """Negative log-likelihood against Platt's smoothed targets."""
    m = np.asarray(margins, dtype=np.float64)
    y = np.asarray(labels) > 0
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    t = np.where(y, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))
    z = a * m + b
    # -[t log p + (1-t) log(1-p)] with p = sigmoid(-z)
    return float(np.sum(t * np.logaddexp(0, z) + (1 - t) * np.logaddexp(0, -z)))


def platt_fit(margins, labels, max_iter: int = 100) -> tuple[float, float]:
    """Newton's method with backtracking line search (Lin, Lin and Weng's variant)."""
    m = np.asarray(margins, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise InputError("Platt scaling needs finite margins")
    y = np.asarray(labels) > 0
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise FitError("Platt scaling needs both classes")
    t = np.where(y, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))
    a, b = 0.0, math.log((n_neg + 1.0) / (n_pos + 1.0))
    fval = platt_nll(m, y, a, b)
    sigma = 1e-12
    for _ in range(max_iter):
        p = platt_apply(m, a, b)  # sigmoid(-z)
        q = 1 - p
        d2 = p * q
        h11 = float(np.sum(m * m * d2)) + sigma
        h22 = float(np.sum(d2)) + sigma
        h21 = float(np.sum(m * d2))
        d1 = t - p
        g1 = float(np.sum(m * d1))
        g2 = float(np.sum(d1))
        if abs(g1) < 1e-10 and abs(g2) < 1e-10:
            break
        det = h11 * h22 - h21 * h21
        da = -(h22 * g1 - h21 * g2) / det
        db = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * da + g2 * db
        step = 1.0
        while step >= 1e-10:
            na, nb = a + step * da, b + step * db
            nf = platt_nll(m, y, na, nb)
            if nf < fval + 1e-4 * step * gd:
                a, b, fval = na, nb, nf
                break
            step /= 2
        else:
            break
    return float(a), float(b)
