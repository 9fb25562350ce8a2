"""PCA whitening, diagonal-covariance GMM (EM) and Fisher vector encoding."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateDataError, FitError, InputError, ValidationError

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
NORM_ORDERS = ("power_l2", "l2_power")
LOG_2PI = math.log(2 * math.pi)


@dataclass
class PcaModel:
    mean: np.ndarray
    basis: np.ndarray  # D x D'
    eigenvalues: np.ndarray

    @property
    def n_components(self) -> int:
        return self.basis.shape[1]


def fit_pca(sample: np.ndarray, variance_keep: float = 0.95) -> PcaModel:
    """Keep the fewest leading components whose cumulative variance reaches ``variance_keep``."""
    x = np.asarray(sample, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValidationError("PCA needs an n x D sample with n >= 2")
    if not np.all(np.isfinite(x)):
        raise ValidationError("PCA sample contains non-finite values")
    if not 0 < variance_keep <= 1:
        raise ValidationError("variance_keep must lie in (0, 1]")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (len(x) - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    evals = np.clip(evals, 0.0, None)
    total = evals.sum()
    if not evals[0] > 0:
        raise DegenerateDataError("sample has zero variance")
    cum = np.cumsum(evals) / total
    k = int(np.searchsorted(cum, variance_keep - 1e-12) + 1)
    k = min(k, int(np.count_nonzero(evals > evals[0] * 1e-12)))
    basis = evecs[:, :k]
    # deterministic sign: largest-magnitude loading positive
    flip = np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(k)])
    basis = basis * np.where(flip == 0, 1.0, flip)
    return PcaModel(mean, basis, evals[:k].copy())


def whiten(pca: PcaModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return ((x - pca.mean) @ pca.basis) / np.sqrt(pca.eigenvalues)


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood: list = field(default_factory=list, repr=False)
    n_iter: int = 0

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def _log_joint_fast(gmm: GmmModel, x: np.ndarray) -> np.ndarray:
    """log w_k + log N(x | mu_k, var_k) via the quadratic expansion (n x K)."""
    prec = 1.0 / gmm.variances
    const = (np.log(gmm.weights)
             - 0.5 * (np.log(gmm.variances).sum(1) + gmm.dim * LOG_2PI
                      + (gmm.means ** 2 * prec).sum(1)))
    return const + x @ (gmm.means * prec).T - 0.5 * (x * x) @ prec.T


def _log_joint_direct(gmm: GmmModel, x: np.ndarray) -> np.ndarray:
    diff2 = (x[:, None, :] - gmm.means[None]) ** 2 / gmm.variances[None]
    return (np.log(gmm.weights)
            - 0.5 * (diff2.sum(2) + np.log(gmm.variances).sum(1) + gmm.dim * LOG_2PI))


def posteriors(gmm: GmmModel, x: np.ndarray) -> np.ndarray:
    """Soft assignments, normalised with log-sum-exp. Accepts one vector or a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    lj = _log_joint_direct(gmm, np.atleast_2d(x))
    g = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
    return g[0] if single else g


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for i in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers[i] = x[idx]
        d2 = np.minimum(d2, ((x - centers[i]) ** 2).sum(1))
    return centers


def fit_gmm(data: np.ndarray, n_components: int, seed: int = 0, max_iter: int = 200,
            tol: float = 1e-6, var_floor: float = 1e-4) -> GmmModel:
    """EM for a diagonal GMM with k-means++ seeding.

    Variances are floored at ``var_floor`` times the global per-dimension variance.
    Stops once the mean log-likelihood gain drops below ``tol * |LL|``.
    """
    x = np.asarray(data, dtype=np.float64)
    n, d = x.shape
    k = int(n_components)
    if k < 1 or n < k:
        raise ValidationError(f"cannot fit {k} components to {n} points")
    if n < 10 * k:
        log.warning("fitting %d components to only %d points", k, n)
    rng = np.random.default_rng(seed)
    gvar = x.var(axis=0)
    floor = np.maximum(var_floor * gvar, 1e-12)

    centers = _kmeans_pp(x, k, rng)
    d2 = (x * x).sum(1)[:, None] - 2 * x @ centers.T + (centers * centers).sum(1)[None]
    hard = np.argmin(d2, axis=1)
    counts = np.bincount(hard, minlength=k).astype(np.float64)
    variances = np.tile(gvar, (k, 1))
    for i in range(k):
        if counts[i] >= 2:
            variances[i] = x[hard == i].var(axis=0)
    gmm = GmmModel(np.maximum(counts, 1.0) / np.maximum(counts, 1.0).sum(), centers.copy(),
                   np.maximum(variances, floor))

    reinit_done = np.zeros(k, dtype=bool)
    history = []
    prev = None
    it = 0
    for it in range(max_iter + 1):
        lj = _log_joint_fast(gmm, x)
        lse = logsumexp(lj, axis=1)
        ll = float(lse.mean())
        history.append(ll)
        if prev is not None and ll - prev < tol * abs(ll):
            break
        if it == max_iter:
            break
        resp = np.exp(lj - lse[:, None])
        nk = resp.sum(axis=0)
        empty = nk < 1e-8 * n
        if empty.any():
            if reinit_done[empty].any():
                raise FitError("GMM component emptied twice; reduce K or add data")
            worst = np.argsort(lse)[: int(empty.sum())]
            for i, j in zip(np.flatnonzero(empty), worst):
                resp[:, i] = 0.0
                resp[j, :] = 0.0
                resp[j, i] = 1.0
            reinit_done |= empty
            nk = resp.sum(axis=0)
            log.warning("re-initialised %d empty GMM component(s)", int(empty.sum()))
            prev = None
        else:
            prev = ll
        means = (resp.T @ x) / nk[:, None]
        variances = (resp.T @ (x * x)) / nk[:, None] - means ** 2
        gmm = GmmModel(nk / n, means, np.maximum(variances, floor))
    gmm.log_likelihood = history
    gmm.n_iter = it
    return gmm


@dataclass
class FisherVector:
    values: np.ndarray
    normalized: bool = False


def normalize_fv(v, alpha: float = 0.5, order: str = "power_l2") -> FisherVector:
    """Signed power normalisation and L2 normalisation, in the given order."""
    v = np.asarray(v.values if isinstance(v, FisherVector) else v, dtype=np.float64)
    if order not in NORM_ORDERS:
        raise ValidationError(f"unknown normalisation order {order!r}")
    if not np.any(v):
        raise ValidationError("cannot normalise an all-zero Fisher vector")

    def power(z):
        return np.sign(z) * np.abs(z) ** alpha

    def l2(z):
        return z / np.linalg.norm(z)

    out = l2(power(v)) if order == "power_l2" else power(l2(v))
    return FisherVector(out, True)


def fisher_gradients(gmm: GmmModel, z: np.ndarray) -> np.ndarray:
    """Unnormalised mean and deviation gradients for whitened descriptors ``z`` (T x D')."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    t = len(z)
    if t == 0:
        raise InputError("cannot encode an empty descriptor set")
    gamma = posteriors(gmm, z)
    sigma = np.sqrt(gmm.variances)
    diff = (z[:, None, :] - gmm.means[None]) / sigma[None]
    g_mu = np.einsum("tk,tkd->kd", gamma, diff) / (t * np.sqrt(gmm.weights))[:, None]
    g_sig = (np.einsum("tk,tkd->kd", gamma, diff * diff - 1.0)
             / (t * np.sqrt(2 * gmm.weights))[:, None])
    return np.concatenate([g_mu.ravel(), g_sig.ravel()])


def encode(gmm: GmmModel, pca: PcaModel | None, descriptors: np.ndarray, normalize: bool = True,
           alpha: float = 0.5, order: str = "power_l2") -> FisherVector:
    """Fisher vector of a descriptor set; ``pca=None`` means descriptors are already whitened."""
    d = np.atleast_2d(np.asarray(descriptors, dtype=np.float64))
    if len(d) == 0:
        raise InputError("cannot encode an empty descriptor set")
    z = d if pca is None else whiten(pca, d)
    raw = fisher_gradients(gmm, z)
    return normalize_fv(raw, alpha, order) if normalize else FisherVector(raw, False)


class SetEncoder:
    """Encodes many subsets of one descriptor pool, sharing whitening and posteriors."""

    def __init__(self, gmm: GmmModel, z: np.ndarray, alpha: float = 0.5,
                 order: str = "power_l2", chunk: int = 65536):
        self.gmm, self.alpha, self.order = gmm, alpha, order
        self.z = np.asarray(z, dtype=np.float64)
        self.gamma = np.empty((len(self.z), gmm.n_components))
        for s in range(0, len(self.z), chunk):
            lj = _log_joint_fast(gmm, self.z[s:s + chunk])
            self.gamma[s:s + chunk] = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
        self.sigma = np.sqrt(gmm.variances)

    @property
    def dim(self) -> int:
        return 2 * self.gmm.n_components * self.gmm.dim

    def raw(self, idx) -> np.ndarray | None:
        idx = np.asarray(idx, dtype=np.int64)
        t = len(idx)
        if t == 0:
            return None
        g, z, mu = self.gamma[idx], self.z[idx], self.gmm.means
        s0 = g.sum(0)[:, None]
        s1 = g.T @ z
        s2 = g.T @ (z * z)
        w = self.gmm.weights[:, None]
        g_mu = (s1 - s0 * mu) / self.sigma / (t * np.sqrt(w))
        g_sig = ((s2 - 2 * mu * s1 + mu * mu * s0) / self.gmm.variances - s0) / (t * np.sqrt(2 * w))
        return np.concatenate([g_mu.ravel(), g_sig.ravel()])

    def encode(self, idx) -> np.ndarray | None:
        r = self.raw(idx)
        if r is None or not np.any(r):
            return None
        return normalize_fv(r, self.alpha, self.order).values

    def encode_many(self, index_sets) -> tuple[np.ndarray, np.ndarray]:
        """Returns (n x dim matrix, mask of non-empty sets); empty rows are zero."""
        out = np.zeros((len(index_sets), self.dim))
        ok = np.zeros(len(index_sets), dtype=bool)
        for i, idx in enumerate(index_sets):
            v = self.encode(idx)
            if v is not None:
                out[i], ok[i] = v, True
        return out, ok


@dataclass
class FisherModel:
    pca: PcaModel
    gmm: GmmModel
    alpha: float = 0.5
    norm_order: str = "power_l2"
    seed: int = 0

    def encode(self, descriptors) -> FisherVector:
        return encode(self.gmm, self.pca, descriptors, True, self.alpha, self.norm_order)

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "pca": {"mean": self.pca.mean.tolist(), "basis": self.pca.basis.tolist(),
                    "eigvals": self.pca.eigenvalues.tolist()},
            "gmm": {"w": self.gmm.weights.tolist(), "mu": self.gmm.means.tolist(),
                    "sigma2": self.gmm.variances.tolist()},
            "norm_order": self.norm_order, "alpha": self.alpha,
            "K": self.gmm.n_components, "D": int(self.pca.mean.shape[0]),
            "D_reduced": self.pca.n_components, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FisherModel":
        if d.get("version") != FORMAT_VERSION:
            raise InputError(f"unsupported fisher model version {d.get('version')!r}")
        pca = PcaModel(np.array(d["pca"]["mean"]), np.array(d["pca"]["basis"]),
                       np.array(d["pca"]["eigvals"]))
        gmm = GmmModel(np.array(d["gmm"]["w"]), np.array(d["gmm"]["mu"]),
                       np.array(d["gmm"]["sigma2"]))
        return cls(pca, gmm, float(d["alpha"]), d["norm_order"], int(d.get("seed", 0)))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "FisherModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def fit_fisher_model(descriptors: np.ndarray, n_components: int, seed: int = 0,
                     variance_keep: float = 0.95, alpha: float = 0.5,
                     norm_order: str = "power_l2", max_iter: int = 200) -> FisherModel:
    pca = fit_pca(descriptors, variance_keep)
    gmm = fit_gmm(whiten(pca, descriptors), n_components, seed, max_iter=max_iter)
    return FisherModel(pca, gmm, alpha, norm_order, seed)
