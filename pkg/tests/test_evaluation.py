import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crowdspeak.errors import LeakageError, MetricError, ValidationError
from crowdspeak.evaluation import (EvalSettings, assign_bins, binned_auc, check_disjoint, dumps_report,
                                   grouped_kfold, load_report, quantile_edges, roc_auc, run_experiment,
                                   sampled_sets, trend, write_plots, write_tables)
from oracles import auc_pairs


def test_grouped_kfold_example():
    groups = ["a"] * 5 + ["b"] * 3 + ["c"] * 2 + ["d"] * 2
    plan = grouped_kfold(groups, 2, seed=0)
    folds = plan.folds_of(groups)
    sizes = np.bincount(folds)
    assert sorted(sizes.tolist()) == [5, 7]  # best split with two groups per fold
    with pytest.raises(ValidationError):
        grouped_kfold(["a", "b"], 3)
    with pytest.raises(ValidationError):
        grouped_kfold(["a", "b"], 1)


@given(st.lists(st.integers(0, 30), min_size=10, max_size=200), st.integers(2, 10), st.integers(0, 1000))
def test_grouped_kfold_properties(gids, k, seed):
    groups = [f"g{g}" for g in gids]
    n_groups = len(set(groups))
    if n_groups < k:
        return
    plan = grouped_kfold(groups, k, seed)
    folds = plan.folds_of(groups)
    # every group lands in exactly one fold and all folds are used
    for g in set(groups):
        assert len(set(folds[np.array(groups) == g])) == 1
    per_fold = np.bincount(list(plan.assignment.values()), minlength=k)
    assert per_fold.max() - per_fold.min() <= 1 and per_fold.min() >= 1
    assert np.array_equal(grouped_kfold(groups, k, seed).folds_of(groups), folds)


def test_check_disjoint():
    check_disjoint(["a", "b"], ["c"], "x")
    with pytest.raises(LeakageError):
        check_disjoint(["a", "b"], ["b"], "x")


def test_auc_examples():
    assert roc_auc([0.9, 0.1], [1, 0]) == 1.0
    assert roc_auc([0.1, 0.9], [1, 0]) == 0.0
    assert roc_auc([0.5, 0.5], [1, 0]) == 0.5
    assert roc_auc([0.8, 0.4, 0.6, 0.2], [1, 1, 0, 0]) == 0.75
    with pytest.raises(MetricError):
        roc_auc([1, 2], [1, 1])
    with pytest.raises(MetricError):
        roc_auc([np.nan, 2], [1, 0])


@given(st.lists(st.tuples(st.integers(0, 8), st.booleans()), min_size=2, max_size=80))
def test_auc_equals_pair_count(pairs):
    s, y = map(np.array, zip(*pairs))
    if y.all() or not y.any():
        return
    assert abs(roc_auc(s, y) - auc_pairs(s, y)) < 1e-12
    assert abs(roc_auc(np.exp(s) * 3 - 1, y) - roc_auc(s, y)) < 1e-12


def test_quantile_edges_oracle(rng):
    v = rng.integers(0, 40, 500).astype(float)
    s = np.sort(v)
    want = np.unique([s[int(np.floor(q * (len(v) - 1)))] for q in np.arange(1, 10) / 10])
    assert np.array_equal(quantile_edges(v, 10), want)
    b = assign_bins(v, want)
    for i in range(len(want) + 1):
        m = b == i
        if i > 0:
            assert np.all(v[m] > want[i - 1])
        if i < len(want):
            assert np.all(v[m] <= want[i])


def test_binned_constant_value_single_bin(rng):
    y = rng.integers(0, 2, 100)
    rows = binned_auc(rng.normal(size=100), y, np.zeros(100))
    assert len(rows) == 1 and rows[0]["n"] == 100 and rows[0]["auc"] is not None


def test_binned_suppression(rng):
    v = np.arange(100.0)
    rows = binned_auc(rng.normal(size=100), rng.integers(0, 2, 100), v, n_bins=10, min_count=20)
    assert all(r["suppressed"] and r["auc"] is None for r in rows)


def test_planted_trend(rng):
    n = 4000
    c = rng.uniform(0, 1, n)
    y = rng.integers(0, 2, n)
    s = y * (2.0 - 1.8 * c) + rng.normal(size=n)
    tr = trend(binned_auc(s, y, c))
    assert tr["spearman"] < -0.8 and tr["slope"] < 0
    flat = trend(binned_auc(y * 1.0 + rng.normal(size=n), y, c))
    assert abs(flat["slope"]) < abs(tr["slope"])


def test_sampled_fraction():
    full = [np.arange(i * 1000, i * 1000 + 1000) for i in range(20)]
    s = sampled_sets(full, 0.34, seed=5)
    frac = sum(map(len, s)) / 20000
    assert abs(frac - 0.34) < 0.02
    assert all(np.isin(a, b).all() for a, b in zip(s, full))
    assert all(np.array_equal(a, b) for a, b in zip(s, sampled_sets(full, 0.34, seed=5)))


def test_settings_validation():
    with pytest.raises(ValidationError):
        EvalSettings(methods=("Nope",))
    with pytest.raises(ValidationError):
        EvalSettings(methods=("Multimodal", "CNN"))
    with pytest.raises(ValidationError):
        EvalSettings(inner_k=2)
    EvalSettings(inner_k=2, methods=("FV-Full", "CNN"))


TINY = dict(k=2, inner_k=3, n_components=4, gmm_sample=5000, gmm_max_iter=30, svm_epochs=5,
            lambda_grid=(1e-4, 1e-2), r_grid=(24.0, 48.0), cnn_max_epochs=3, cnn_patience=2, min_bin=5)


def test_tiny_experiment(small_table, tmp_path):
    s = EvalSettings(methods=("FV-Full", "FV-Sampled", "FV-HandsAndHead", "CNN", "Multimodal"), **TINY)
    rep = run_experiment(small_table, s)
    rep2 = run_experiment(small_table, s)
    assert dumps_report(rep) == dumps_report(rep2)
    assert rep["leakage_checks"] > 0
    for m, r in rep["methods"].items():
        vals = [a for a in r["fold_auc"] if a is not None]
        assert r["mean"] == pytest.approx(np.mean(vals)) and r["std"] == pytest.approx(np.std(vals))
        assert 0 <= r["mean"] <= 1
    p = tmp_path / "report.json"
    p.write_text(dumps_report(rep))
    back = load_report(p)
    assert back == json.loads(dumps_report(rep))
    write_tables(tmp_path / "t.csv", back)
    assert (tmp_path / "t.csv").read_text().startswith("method,mean_auc")
    written = write_plots(tmp_path, back, formats=("svg",))
    assert written and all((tmp_path / w).exists() or __import__("os").path.exists(w) for w in written)
    folds = rep["folds"]
    pred = rep["predictions"]
    for g, f in zip(pred["group"], pred["fold"]):
        assert folds[g] == f
