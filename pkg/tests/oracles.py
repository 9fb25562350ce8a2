"""Slow, literal reference implementations used as test oracles."""

import itertools
import math

import numpy as np

from crowdspeak.filtering import UPPER_BODY, upper_body_points


def brute_force_assignment(cost, dmax):
    """(size, total cost) of the largest gated matching, cheapest among equals."""
    r, c = cost.shape
    if r == 0 or c == 0:
        return 0, 0.0
    mat = cost if r <= c else cost.T
    best = None
    for cols in itertools.permutations(range(max(r, c)), min(r, c)):
        pairs = [(i, j) for i, j in enumerate(cols) if mat[i, j] <= dmax]
        key = (-len(pairs), sum(mat[i, j] for i, j in pairs))
        if best is None or key < best:
            best = key
    return -best[0], best[1]


def select_loop(origins, starts, track, h, cfg):
    """Indices kept by pose-guided selection, by explicit iteration over frames and keypoints."""
    keep = []
    for i, (o, n) in enumerate(zip(origins, starts)):
        hit = False
        for m in range(int(n) - cfg.frame_window, int(n) + cfg.frame_window + 1):
            pose = track.pose_at(m)
            if pose is None:
                continue
            pts = upper_body_points(pose)
            for j, name in enumerate(UPPER_BODY):
                if name not in cfg.subset or np.isnan(pts[j, 0]):
                    continue
                radius = cfg.radii[j] * float(h.scale_factor(pts[j]))
                if math.hypot(o[0] - pts[j, 0], o[1] - pts[j, 1]) < radius:
                    hit = True
        if hit:
            keep.append(i)
    return keep


def gaussian_pdf(x, mu, var):
    return math.exp(-0.5 * sum((a - b) ** 2 / v for a, b, v in zip(x, mu, var))) / math.sqrt(
        math.prod(2 * math.pi * v for v in var))


def fv_loop(weights, means, variances, z):
    """Unnormalised Fisher vector [mean block, deviation block] from scalar loops."""
    k_n, d_n = len(weights), len(means[0])
    t_n = len(z)
    g_mu = [[0.0] * d_n for _ in range(k_n)]
    g_sig = [[0.0] * d_n for _ in range(k_n)]
    for x in z:
        dens = [weights[k] * gaussian_pdf(x, means[k], variances[k]) for k in range(k_n)]
        tot = sum(dens)
        for k in range(k_n):
            g = dens[k] / tot
            for d in range(d_n):
                u = (x[d] - means[k][d]) / math.sqrt(variances[k][d])
                g_mu[k][d] += g * u
                g_sig[k][d] += g * (u * u - 1)
    out = []
    for k in range(k_n):
        out += [v / (t_n * math.sqrt(weights[k])) for v in g_mu[k]]
    for k in range(k_n):
        out += [v / (t_n * math.sqrt(2 * weights[k])) for v in g_sig[k]]
    return np.array(out)


def score_gradient(weights, means, variances, z):
    """Mean log-likelihood gradient with respect to the means and standard deviations."""
    k_n, d_n = means.shape
    z = np.atleast_2d(z)
    sd = np.sqrt(variances)
    lj = np.array([[math.log(weights[k] * gaussian_pdf(x, means[k], variances[k])) for k in range(k_n)]
                   for x in z])
    gam = np.exp(lj - lj.max(1, keepdims=True))
    gam /= gam.sum(1, keepdims=True)
    g_mu = np.zeros((k_n, d_n))
    g_sd = np.zeros((k_n, d_n))
    for t, x in enumerate(z):
        g_mu += gam[t][:, None] * (x - means) / variances
        g_sd += gam[t][:, None] * ((x - means) ** 2 / sd ** 3 - 1 / sd)
    return np.concatenate([g_mu.ravel(), g_sd.ravel()]) / len(z)


def fisher_kernel(weights, means, variances, zx, zy):
    """G_X' F^-1 G_Y with the closed-form diagonal information matrix, solved through
    an explicit Cholesky factor rather than by elementwise scaling."""
    info = np.concatenate([(weights[:, None] / variances).ravel(),
                           (2 * weights[:, None] / variances).ravel()])
    chol = np.linalg.cholesky(np.diag(info))
    gx = np.linalg.solve(chol, score_gradient(weights, means, variances, zx))
    gy = np.linalg.solve(chol, score_gradient(weights, means, variances, zy))
    return float(gx @ gy)


def auc_pairs(scores, labels):
    """Fraction of (positive, negative) pairs ranked correctly, ties counting one half."""
    s = np.asarray(scores, float)
    y = np.asarray(labels) > 0
    pos, neg = s[y], s[~y]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))
