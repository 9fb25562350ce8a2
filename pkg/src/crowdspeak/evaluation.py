"""Grouped cross-validation, rank AUC, contamination-binned analysis and the full
method comparison (Fisher-vector variants, acceleration CNN, late fusion)."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .encoding import SetEncoder, fit_fisher_model, whiten
from .errors import FitError, LeakageError, MetricError, ValidationError
from .learning.svm import LAMBDA_GRID, platt_apply, platt_fit, train_svm

log = logging.getLogger(__name__)

VIDEO_METHODS = ("FV-Full", "FV-Sampled", "FV-UpperBody", "FV-HandsAndHead")
ALL_METHODS = VIDEO_METHODS + ("CNN", "Multimodal")
_SUBSET_OF = {"FV-UpperBody": "UpperBody", "FV-HandsAndHead": "HandsAndHead"}


# ---------------------------------------------------------------- folds

@dataclass
class FoldPlan:
    k: int
    assignment: dict  # group -> fold
    seed: int

    def folds_of(self, groups: Sequence[str]) -> np.ndarray:
        return np.array([self.assignment[g] for g in groups], dtype=np.int64)


def grouped_kfold(groups: Sequence[str], k: int = 10, seed: int = 0) -> FoldPlan:
    """Deal seeded-shuffled groups to k folds, largest first, each to the fold with the fewest
    examples among those still allowed a group (fold group counts differ by at most one)."""
    groups = list(groups)
    uniq, counts = np.unique(np.asarray(groups, dtype=str), return_counts=True)
    g = len(uniq)
    if k < 2:
        raise ValidationError("need k >= 2 folds")
    if g < k:
        raise ValidationError(f"{g} groups cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(g)
    order = perm[np.argsort(-counts[perm], kind="stable")]
    base, n_big = divmod(g, k)
    n_groups = np.zeros(k, np.int64)
    n_examples = np.zeros(k, np.int64)
    big_used = 0
    assignment = {}
    for gi in order:
        eligible = (n_groups < base) | ((n_groups == base) & (big_used < n_big))
        cand = np.flatnonzero(eligible)
        f = int(cand[np.argmin(n_examples[cand])])
        if n_groups[f] == base:
            big_used += 1
        n_groups[f] += 1
        n_examples[f] += counts[gi]
        assignment[str(uniq[gi])] = f
    return FoldPlan(k, assignment, seed)


def check_disjoint(train_groups, test_groups, what: str) -> None:
    """Leakage guard: refuse a model fitted on any group of its test fold."""
    overlap = set(map(str, train_groups)) & set(map(str, test_groups))
    if overlap:
        raise LeakageError(f"{what}: fitted on test-fold group(s) {sorted(overlap)[:5]}")


# ---------------------------------------------------------------- metrics

def roc_auc(scores, labels) -> float:
    """P(score+ > score-) + P(tie)/2 via average ranks."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels) > 0
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes")
    if not np.all(np.isfinite(s)):
        raise MetricError("AUC scores must be finite")
    ranks = stats.rankdata(s, method="average")
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _safe_auc(scores, labels) -> float | None:
    try:
        return roc_auc(scores, labels)
    except MetricError:
        return None


def quantile_edges(values, n_bins: int = 10) -> np.ndarray:
    """Distinct inner edges of equal-count bins; edges are data values ('lower' quantiles)."""
    v = np.asarray(values, dtype=np.float64)
    qs = np.arange(1, n_bins) / n_bins
    return np.unique(np.quantile(v, qs, method="lower"))


def assign_bins(values, edges) -> np.ndarray:
    """Bin b holds values in (edge[b-1], edge[b]]; the last bin is unbounded above."""
    return np.searchsorted(np.asarray(edges), np.asarray(values, dtype=np.float64), side="left")


def binned_auc(scores, labels, values, n_bins: int = 10, min_count: int = 20) -> list[dict]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    values = np.asarray(values, dtype=np.float64)
    keep = np.isfinite(values)
    scores, labels, values = scores[keep], labels[keep], values[keep]
    if not len(values):
        return []
    edges = quantile_edges(values, n_bins)
    b = assign_bins(values, edges)
    rows = []
    for i in range(len(edges) + 1):
        m = b == i
        n = int(m.sum())
        if n == 0:
            continue
        row = {"bin": i, "n": n, "lo": float(values[m].min()), "hi": float(values[m].max()),
               "median": float(np.sort(values[m])[(n - 1) // 2]), "auc": None, "suppressed": None}
        if n < min_count:
            row["suppressed"] = f"fewer than {min_count} examples"
        else:
            row["auc"] = _safe_auc(scores[m], labels[m])
            if row["auc"] is None:
                row["suppressed"] = "single class"
        rows.append(row)
    return rows


def trend(rows: list[dict]) -> dict:
    """Spearman rho of binned AUC against bin order, and the least-squares slope against bin median."""
    pts = [(r["bin"], r["median"], r["auc"]) for r in rows if r["auc"] is not None]
    if len(pts) < 3:
        return {"spearman": None, "slope": None, "n_bins": len(pts)}
    b, med, auc = map(np.asarray, zip(*pts))
    rho = stats.spearmanr(b, auc).statistic
    slope = float(np.polyfit(med, auc, 1)[0]) if np.ptp(med) > 0 else None
    return {"spearman": None if not np.isfinite(rho) else float(rho), "slope": slope, "n_bins": len(pts)}


def contamination_analysis(scores, labels, contamination, n_traj=None, n_bins: int = 10,
                           min_count: int = 20) -> dict:
    """Binned AUC against contamination (and, if given, against trajectory count)."""
    out = {"contamination": binned_auc(scores, labels, contamination, n_bins, min_count)}
    out["contamination_trend"] = trend(out["contamination"])
    if n_traj is not None:
        out["n_traj"] = binned_auc(scores, labels, n_traj, n_bins, min_count)
        out["n_traj_trend"] = trend(out["n_traj"])
    return out


# ---------------------------------------------------------------- experiment

@dataclass
class EvalSettings:
    k: int = 10
    inner_k: int = 4
    seed: int = 0
    methods: tuple = ALL_METHODS
    n_components: int = 16
    gmm_sample: int = 50000
    gmm_max_iter: int = 200
    pca_keep: float = 0.95
    alpha: float = 0.5
    norm_order: str = "power_l2"
    lambda_grid: tuple = LAMBDA_GRID
    r_grid: tuple = (16.0, 24.0, 32.0, 48.0, 64.0)
    sample_p: float = 0.34
    svm_epochs: int = 10
    fusion_video: str = "FV-HandsAndHead"
    cnn_max_epochs: int = 100
    cnn_patience: int = 10
    cnn_batch: int = 64
    cnn_lr: float = 1e-3
    n_bins: int = 10
    min_bin: int = 20

    def __post_init__(self):
        unknown = set(self.methods) - set(ALL_METHODS)
        if unknown:
            raise ValidationError(f"unknown methods {sorted(unknown)}")
        if "Multimodal" in self.methods and ("CNN" not in self.methods or self.fusion_video not in self.methods):
            raise ValidationError("Multimodal needs CNN and the fused video method enabled")
        if self.inner_k < 2 or ("Multimodal" in self.methods and self.inner_k < 3):
            # the CNN's inner out-of-fold pass holds out one inner fold and validates on another
            raise ValidationError("inner_k must be >= 2, and >= 3 with Multimodal")
        if not 0 < self.sample_p <= 1:
            raise ValidationError("sample_p must lie in (0, 1]")


def sampled_sets(full: list[np.ndarray], p: float, seed: int) -> list[np.ndarray]:
    """Independent Bernoulli(p) thinning of each example's trajectories, one stream per example."""
    out = []
    for i, idx in enumerate(full):
        rng = np.random.default_rng([seed, 34, i])
        out.append(idx[rng.random(len(idx)) < p])
    return out


def _fit_codebook(table, train: np.ndarray, test: np.ndarray, s: EvalSettings, fold: int):
    train_pool = np.unique(np.concatenate([table.full[i] for i in np.flatnonzero(train)] or [np.zeros(0, int)]))
    test_pool = np.unique(np.concatenate([table.full[i] for i in np.flatnonzero(test)] or [np.zeros(0, int)]))
    # a trajectory seen by a test example (e.g. a neighbour inside its box) never trains the codebook
    pool = np.setdiff1d(train_pool, test_pool, assume_unique=True)
    rng = np.random.default_rng([s.seed, 1, fold])
    if len(pool) > s.gmm_sample:
        pool = np.sort(rng.choice(pool, s.gmm_sample, replace=False))
    if len(pool) < 2 * s.n_components:
        raise FitError(f"fold {fold}: only {len(pool)} codebook descriptors")
    if np.intersect1d(pool, test_pool).size:
        raise LeakageError(f"fold {fold}: codebook sample contains test-fold trajectories")
    model = fit_fisher_model(table.descriptors[pool].astype(np.float64), s.n_components, seed=s.seed + fold,
                             variance_keep=s.pca_keep, alpha=s.alpha, norm_order=s.norm_order,
                             max_iter=s.gmm_max_iter)
    return model


def _whiten_pool(table, model, chunk: int = 65536) -> np.ndarray:
    n = len(table.descriptors)
    out = np.empty((n, model.pca.n_components))
    for a in range(0, n, chunk):
        out[a:a + chunk] = whiten(model.pca, table.descriptors[a:a + chunk].astype(np.float64))
    return out


def _oof_margins(x, ok, y, inner, rows, lam, s: EvalSettings):
    """Out-of-fold SVM margins over ``rows`` (inner fold ids in ``inner``); empty sets get 0."""
    m = np.zeros(len(y))
    for j in np.unique(inner[rows]):
        tr = rows & (inner != j) & ok
        te = rows & (inner == j) & ok
        if not te.any() or len(np.unique(y[tr])) < 2:
            continue
        svm = train_svm(x[tr], y[tr], lam, seed=s.seed, epochs=s.svm_epochs)
        m[te] = svm.decision(x[te])
    return m


def _mean_fold_auc(scores, y, inner, rows) -> float:
    aucs = [a for j in np.unique(inner[rows]) if (a := _safe_auc(scores[rows & (inner == j)],
                                                                   y[rows & (inner == j)])) is not None]
    return float(np.mean(aucs)) if aucs else -np.inf


@dataclass
class _VideoResult:
    test_prob: np.ndarray
    oof_prob: np.ndarray
    params: dict


def _run_video(x, y, groups, train, test, inner, s: EvalSettings, r_candidates, what: str) -> _VideoResult:
    """Tune (R, lambda), fit SVM + Platt on the training rows and score the test rows.

    ``x`` maps a radius (or None) to the encoded matrix and its non-empty mask.
    """
    params = {}
    best = (-np.inf, None, s.lambda_grid[0], None)
    # R and lambda are tuned jointly on the inner folds, each fold held out in turn
    for r in (r_candidates or [None]):
        xr, okr = x(r)
        for lam in s.lambda_grid:
            m = _oof_margins(xr, okr, y, inner, train, lam, s)
            auc = _mean_fold_auc(np.where(okr, m, 0.0), y, inner, train)
            if auc > best[0]:
                best = (auc, r, lam, m)
    _, radius, lam, oof = best
    if r_candidates:
        if radius is None:
            radius = r_candidates[len(r_candidates) // 2]
        params["R"] = radius
    xr, okr = x(radius)
    params["lambda"] = lam
    tr = train & okr
    check_disjoint(groups[tr], groups[test], f"{what} SVM")
    svm = train_svm(xr[tr], y[tr], lam, seed=s.seed, epochs=s.svm_epochs)
    if oof is None:
        oof = _oof_margins(xr, okr, y, inner, train, lam, s)
    cal = train & okr
    try:
        a, b = platt_fit(oof[cal], y[cal])
    except FitError:
        a, b = -1.0, 0.0
    params["platt"] = [a, b]
    test_prob = np.where(okr, platt_apply(svm.decision(xr), a, b), 0.5)
    oof_prob = np.where(okr, platt_apply(oof, a, b), 0.5)
    test_prob[~test] = np.nan
    oof_prob[~train] = np.nan
    return _VideoResult(test_prob, oof_prob, params)


def _cnn_scores(table, train_rows, val_rows, score_rows, s: EvalSettings, seed: int):
    from .learning.cnn import cnn_predict_proba, cnn_train, normalize_window
    y = table.labels
    xw = normalize_window(table.accel)
    model = cnn_train(xw[train_rows], y[train_rows], xw[val_rows], y[val_rows], seed=seed, lr=s.cnn_lr,
                      batch_size=s.cnn_batch, max_epochs=s.cnn_max_epochs, patience=s.cnn_patience)
    out = np.full(len(y), np.nan)
    out[score_rows] = cnn_predict_proba(model, xw[score_rows])
    return out


def _fold_auc(prob, y, rows):
    return _safe_auc(prob[rows], y[rows])


def _summary(fold_aucs: list) -> dict:
    vals = [a for a in fold_aucs if a is not None]
    return {"fold_auc": fold_aucs, "mean": float(np.mean(vals)) if vals else None,
            "std": float(np.std(vals)) if vals else None}


def run_experiment(table, settings: EvalSettings | None = None, progress=None) -> dict:
    """Outer grouped k-fold over the segment table; every fitted model is checked against
    its test fold's groups. Returns a JSON-serialisable report."""
    s = settings or EvalSettings()
    t_start = time.perf_counter()
    y = table.labels.astype(np.int64)
    groups = table.groups
    n = len(y)
    plan = grouped_kfold(groups, s.k, s.seed)
    outer = plan.folds_of(groups)
    video = [m for m in s.methods if m in VIDEO_METHODS]
    want_cnn = "CNN" in s.methods
    want_fusion = "Multimodal" in s.methods

    sets = {"FV-Full": table.full}
    if "FV-Sampled" in video:
        sets["FV-Sampled"] = sampled_sets(table.full, s.sample_p, s.seed)
    probs = {m: np.full(n, np.nan) for m in s.methods}
    fold_aucs = {m: [] for m in s.methods}
    sub_aucs = {m: [] for m in ("video", "CNN", "Multimodal")} if want_fusion else {}
    chosen = {m: [] for m in video}
    n_checks = 0

    for f in range(s.k):
        test = outer == f
        train = ~test
        check_disjoint(groups[train], groups[test], f"fold {f} split")
        inner_plan = grouped_kfold(groups[train], s.inner_k, s.seed + 1 + f)
        inner = np.full(n, -1)
        inner[train] = inner_plan.folds_of(groups[train])

        oof = {}
        if video:
            model = _fit_codebook(table, train, test, s, f)
            n_checks += 1
            enc = SetEncoder(model.gmm, _whiten_pool(table, model), model.alpha, model.norm_order)
            cache = {}

            def encoder(method):
                def get(r):
                    key = (method, r)
                    if key not in cache:
                        idx = sets[method] if r is None else table.selection(_SUBSET_OF[method], r)
                        cache[key] = enc.encode_many(idx)
                    return cache[key]
                return get

            for m in video:
                r_cand = list(s.r_grid) if m in _SUBSET_OF else None
                res = _run_video(encoder(m), y, groups, train, test, inner, s, r_cand, m)
                n_checks += 1
                probs[m][test] = res.test_prob[test]
                oof[m] = res.oof_prob
                chosen[m].append(res.params)
                fold_aucs[m].append(_fold_auc(probs[m], y, test))

        if want_cnn:
            acc_train = train & table.has_accel
            acc_test = test & table.has_accel
            val = acc_train & (inner == 0)
            fit = acc_train & (inner != 0)
            check_disjoint(groups[fit | val], groups[test], "CNN")
            n_checks += 1
            sc = _cnn_scores(table, fit, val, acc_test, s, s.seed + f)
            probs["CNN"][acc_test] = sc[acc_test]
            fold_aucs["CNN"].append(_fold_auc(probs["CNN"], y, acc_test))

            if want_fusion:
                cnn_oof = np.full(n, np.nan)
                for j in range(s.inner_k):
                    held = acc_train & (inner == j)
                    vj = acc_train & (inner == (j + 1) % s.inner_k)
                    fj = acc_train & (inner != j) & (inner != (j + 1) % s.inner_k)
                    check_disjoint(groups[fj | vj], groups[held], f"CNN inner fold {j}")
                    sc_j = _cnn_scores(table, fj, vj, held, s, s.seed + 100 * (f + 1) + j)
                    cnn_oof[held] = sc_j[held]
                from .learning.fusion import fuse_fit
                rows = acc_train & np.isfinite(cnn_oof) & np.isfinite(oof[s.fusion_video])
                check_disjoint(groups[rows], groups[test], "fusion")
                n_checks += 1
                fm = fuse_fit(oof[s.fusion_video][rows], cnn_oof[rows], y[rows])
                both = acc_test & np.isfinite(probs[s.fusion_video])
                probs["Multimodal"][both] = fm.apply(probs[s.fusion_video][both], probs["CNN"][both])
                fold_aucs["Multimodal"].append(_fold_auc(probs["Multimodal"], y, both))
                sub_aucs["video"].append(_fold_auc(probs[s.fusion_video], y, both))
                sub_aucs["CNN"].append(_fold_auc(probs["CNN"], y, both))
                sub_aucs["Multimodal"].append(fold_aucs["Multimodal"][-1])
        if progress:
            progress(f, {m: fold_aucs[m][-1] for m in s.methods if fold_aucs[m]})

    report = {
        "version": 1,
        "settings": _jsonable(asdict(s)),
        "n_segments": int(n),
        "n_groups": int(len(np.unique(groups))),
        "positive_rate": float(y.mean()),
        "folds": {g: int(plan.assignment[g]) for g in sorted(plan.assignment)},
        "leakage_checks": n_checks,
        "methods": {},
    }
    n_full = np.array([len(i) for i in table.full])
    for m in s.methods:
        row = _summary(fold_aucs[m])
        rows = np.isfinite(probs[m])
        row["n_examples"] = int(rows.sum())
        row["pooled_auc"] = _safe_auc(probs[m][rows], y[rows])
        if m in VIDEO_METHODS:
            counts = _method_counts(table, sets, m, chosen[m], outer)
            row["n_traj_mean"] = float(counts.mean())
            row["n_traj_std"] = float(counts.std())
            row["traj_fraction_of_full"] = float(np.mean(counts / np.maximum(n_full, 1)))
            row["chosen"] = chosen[m]
            row["analysis"] = contamination_analysis(probs[m], y, table.contamination, counts,
                                                     s.n_bins, s.min_bin)
        else:
            row["analysis"] = contamination_analysis(probs[m][rows], y[rows], table.contamination[rows],
                                                     None, s.n_bins, s.min_bin)
        report["methods"][m] = row
    if want_fusion:
        report["multimodal_subset"] = {s.fusion_video: _summary(sub_aucs["video"]),
                                       "CNN": _summary(sub_aucs["CNN"]),
                                       "Multimodal": _summary(sub_aucs["Multimodal"])}
    report["predictions"] = {
        "segment_id": table.segment_ids, "group": groups.tolist(), "fold": outer.tolist(),
        "label": y.tolist(), "contamination": [None if not np.isfinite(c) else float(c) for c in table.contamination],
        "n_full": n_full.tolist(),
        "prob": {m: [None if not np.isfinite(p) else float(p) for p in probs[m]] for m in s.methods},
    }
    log.info("experiment finished in %.1f s", time.perf_counter() - t_start)
    return report


def _method_counts(table, sets, m, chosen, outer) -> np.ndarray:
    if m in sets:
        return np.array([len(i) for i in sets[m]], dtype=np.float64)
    out = np.zeros(len(table))
    for f, params in enumerate(chosen):
        sel = table.selection(_SUBSET_OF[m], params["R"])
        for i in np.flatnonzero(outer == f):
            out[i] = len(sel[i])
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


# ---------------------------------------------------------------- report IO

def dumps_report(report: dict) -> str:
    return json.dumps(_jsonable(report), sort_keys=True, indent=1, allow_nan=False) + "\n"


def load_report(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def table_rows(report: dict) -> list[dict]:
    rows = []
    for m, r in report["methods"].items():
        rows.append({"method": m, "mean_auc": r["mean"], "std_auc": r["std"], "n_examples": r["n_examples"],
                     "pooled_auc": r.get("pooled_auc"), "n_traj_mean": r.get("n_traj_mean"),
                     "n_traj_std": r.get("n_traj_std")})
    for m, r in report.get("multimodal_subset", {}).items():
        rows.append({"method": f"{m} (both modalities)", "mean_auc": r["mean"], "std_auc": r["std"]})
    return rows


def write_tables(path, report: dict) -> None:
    import csv
    cols = ["method", "mean_auc", "std_auc", "n_examples", "pooled_auc", "n_traj_mean", "n_traj_std"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.DictWriter(fh, fieldnames=cols)
        wr.writeheader()
        for r in table_rows(report):
            wr.writerow({k: ("" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k]))
                         for k in cols})


def write_plots(out_dir, report: dict, formats=("svg", "png")) -> list[str]:
    """Binned-AUC curves over contamination and trajectory count."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from pathlib import Path
    plt.rcParams["svg.hashsalt"] = "crowdspeak"
    out = Path(out_dir)
    written = []
    for key, xlabel in (("contamination", "cross-contamination (bin median)"), ("n_traj", "trajectories per example (bin median)")):
        fig, ax = plt.subplots(figsize=(6, 4))
        for m, r in report["methods"].items():
            rows = [b for b in r.get("analysis", {}).get(key, []) if b["auc"] is not None]
            if rows:
                ax.plot([b["median"] for b in rows], [b["auc"] for b in rows], marker="o", label=m)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("AUC")
        ax.legend(fontsize=8)
        fig.tight_layout()
        for fmt in formats:
            p = out / f"auc_vs_{key}.{fmt}"
            fig.savefig(p, format=fmt, metadata={"Date": None} if fmt == "svg" else {"Software": None})
            written.append(str(p))
        plt.close(fig)
    return written
