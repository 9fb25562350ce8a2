"""``crowdspeak <stage> --config run.toml [--threads N] [--seed S]``

Each stage reads what earlier stages left in the output directory (falling back to the
dataset's own files) and writes its artifacts atomically. Exit codes: 0 success, 1 other
failure, 2 missing or unreadable input, 3 validation failure, 4 leakage guard.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import platform
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .errors import CrowdspeakError, InputError, ValidationError

log = logging.getLogger("crowdspeak")

LOCK_NAME = ".crowdspeak.lock"
RUN_LOG = "run_log.ndjson"
META_SUFFIX = ".meta.json"


# ---------------------------------------------------------------- artifact plumbing

@contextlib.contextmanager
def atomic_output(path: Path):
    """Yield a temporary sibling path; it replaces ``path`` only if the block succeeds."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_json(path: Path, obj) -> None:
    with atomic_output(path) as tmp:
        tmp.write_text(json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n", encoding="utf-8")


def write_meta(path: Path, cfg: RunConfig, stage: str) -> None:
    """Sidecar carrying the config hash for artifacts whose format has no room for it."""
    write_json(Path(str(path) + META_SUFFIX), {"config_hash": cfg.hash, "stage": stage})


def artifact_hash(path: Path) -> str | None:
    side = Path(str(path) + META_SUFFIX)
    if side.exists():
        return json.loads(side.read_text(encoding="utf-8")).get("config_hash")
    if path.suffix == ".json":
        return json.loads(path.read_text(encoding="utf-8")).get("config_hash")
    if path.suffix == ".bin":
        from .learning.cnn import read_cnn_meta
        return read_cnn_meta(path).get("config_hash")
    return None


def check_upstream(path: Path, cfg: RunConfig) -> None:
    h = artifact_hash(path)
    if h is not None and h != cfg.hash:
        log.warning("%s was produced under config %s (current %s)", path, h, cfg.hash)


class Workspace:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.data = Path(cfg.paths.data)
        self.out = Path(cfg.paths.out)

    def __getattr__(self, name):
        sub = {"tracks": "tracks", "traj": "traj", "filter": "filter", "models": "models",
               "features": "features", "scores": "scores", "eval": "eval", "report": "report"}
        if name in sub:
            return self.out / sub[name]
        raise AttributeError(name)

    def require(self, path: Path, hint: str) -> Path:
        if not Path(path).exists():
            raise InputError(f"{path}: not found ({hint})")
        return Path(path)

    def table(self):
        from .dataset import prepare
        c = self.cfg
        return prepare(self.data, dist_threshold=c.tracker.dist_threshold, box_pad=c.filter.box_pad,
                       r_grid=c.filter.r_grid, tracks_dir=self.tracks, traj_dir=self.traj,
                       max_staleness=c.tracker.max_staleness, chest_index=c.tracker.chest_index,
                       frame_window=c.filter.frame_window)


@contextlib.contextmanager
def output_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    for _ in range(2):
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                pid = int(lock.read_text().strip() or 0)
            except (OSError, ValueError):
                pid = 0
            if pid and _alive(pid):
                raise CrowdspeakError(f"{out} is in use by process {pid} (lock file {lock})") from None
            lock.unlink(missing_ok=True)
    else:
        raise CrowdspeakError(f"could not acquire {lock}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def set_threads(n: int | None) -> None:
    if not n:
        return
    import torch
    from threadpoolctl import threadpool_limits
    torch.set_num_threads(n)
    threadpool_limits(n)  # BLAS/OpenMP pools; the numba kernels are serial


def versions() -> dict:
    import scipy
    import torch
    return {"crowdspeak": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "torch": torch.__version__}


# ---------------------------------------------------------------- stages

def cmd_synth(ws: Workspace, args) -> None:
    from .synth import gen_scene
    scene = ws.cfg.synth.scene(ws.cfg.seed)
    target = ws.data
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        gt = gen_scene(scene, tmp)
        manifest = json.loads((tmp / "manifest.json").read_text(encoding="utf-8"))
        manifest["config_hash"] = ws.cfg.hash
        write_json(tmp / "manifest.json", manifest)
        old = None
        if target.exists():
            old = target.parent / f".{target.name}.old"
            shutil.rmtree(old, ignore_errors=True)
            os.replace(target, old)
        os.replace(tmp, target)
        if old is not None:
            shutil.rmtree(old, ignore_errors=True)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    n_traj = sum(len(v) for v in gt.traj_source.values())
    print(f"synth: {scene.n_agents} agents x {len(scene.cameras)} cameras, {scene.duration:g} s, "
          f"{n_traj} trajectories -> {target}")


def cmd_track(ws: Workspace, args) -> None:
    from .dataset import load_manifest
    from .ingest import load_pose_frames
    from .tracking import TrackerConfig, build_tracks, write_tracks
    m = load_manifest(ws.data)
    t = ws.cfg.tracker
    cfg = TrackerConfig(t.dist_threshold, t.max_staleness or max(1, int(round(m.fps))), t.chest_index)
    for cam in m.cameras:
        frames = load_pose_frames(ws.require(m.path(cam["poses"]), "pose detections"))
        tracks = build_tracks(frames, cfg)
        path = ws.tracks / f"{cam['id']}.tracks.ndjson"
        with atomic_output(path) as tmp:
            write_tracks(tmp, tracks)
        write_meta(path, ws.cfg, "track")
        print(f"track: {cam['id']}: {len(tracks)} tracks -> {path}")


def _load_frames(path: Path):
    from .trajectories import FlowField
    try:
        with np.load(path) as z:
            frames = z["frames"]
            flows = None
            if "u" in z.files and "v" in z.files:
                flows = [FlowField(u, v) for u, v in zip(z["u"], z["v"])]
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"{path}: unreadable frame archive ({exc})") from None
    return frames, flows


def cmd_extract(ws: Workspace, args) -> None:
    from .dataset import load_manifest
    from .trajectories import estimate_flow, extract, write_traj_bin
    m = load_manifest(ws.data)
    todo = [c for c in m.cameras if c.get("frames")]
    if not todo:
        raise InputError(f"{ws.data}: no camera lists a 'frames' archive; nothing to extract")
    block = ws.cfg.trajectories
    params = block.params()
    for cam in todo:
        frames, flows = _load_frames(ws.require(m.path(cam["frames"]), "video frames"))
        if flows is None:
            flows = [estimate_flow(a, b, block.flow_levels, block.flow_radius, block.flow_block)
                     for a, b in zip(frames[:-1], frames[1:])]
        batch = extract(list(frames), flows, params)
        path = ws.traj / f"{cam['id']}.traj.bin"
        with atomic_output(path) as tmp:
            write_traj_bin(tmp, batch)
        write_meta(path, ws.cfg, "extract")
        print(f"extract: {cam['id']}: {len(batch)} trajectories -> {path}")


def cmd_filter(ws: Workspace, args) -> None:
    from .filtering import write_filter_report
    f = ws.cfg.filter
    tab = ws.table()
    sel = tab.selection(f.subset, f.radius)
    rows = [{"segment_id": s.segment_id, "n_total": len(tab.full[i]), "n_selected": len(sel[i]),
             "contamination": "" if not np.isfinite(tab.contamination[i]) else repr(float(tab.contamination[i])),
             "subset": f.subset} for i, s in enumerate(tab.segments)]
    path = ws.filter / "filter_report.csv"
    with atomic_output(path) as tmp:
        write_filter_report(tmp, rows)
    write_meta(path, ws.cfg, "filter")
    kept = sum(r["n_selected"] for r in rows) / max(1, sum(r["n_total"] for r in rows))
    print(f"filter: {len(rows)} segments, {f.subset} keeps {kept:.1%} of trajectories -> {path}")


def _pool_sample(tab, n: int, seed: int) -> np.ndarray:
    pool = np.unique(np.concatenate(tab.full)) if tab.full else np.zeros(0, np.int64)
    if len(pool) > n:
        pool = np.sort(np.random.default_rng([seed, 1]).choice(pool, n, replace=False))
    return pool


def cmd_fit_fv(ws: Workspace, args) -> None:
    from .encoding import fit_fisher_model
    e = ws.cfg.encoder
    tab = ws.table()
    pool = _pool_sample(tab, e.gmm_sample, ws.cfg.seed)
    if len(pool) < 2 * e.n_components:
        raise ValidationError(f"only {len(pool)} descriptors for a {e.n_components}-component codebook")
    model = fit_fisher_model(tab.descriptors[pool].astype(np.float64), e.n_components, ws.cfg.seed,
                             e.variance_keep, e.alpha, e.norm_order, e.gmm_max_iter)
    path = ws.models / "fisher_model.json"
    write_json(path, {**model.to_dict(), "config_hash": ws.cfg.hash})
    print(f"fit-fv: K={e.n_components}, D'={model.pca.n_components} from {len(pool)} descriptors -> {path}")


def _load_fisher(ws: Workspace):
    from .encoding import FisherModel
    path = ws.require(ws.models / "fisher_model.json", "run fit-fv first")
    check_upstream(path, ws.cfg)
    return FisherModel.load(path)


def cmd_encode(ws: Workspace, args) -> None:
    from .encoding import SetEncoder, whiten
    f = ws.cfg.filter
    model = _load_fisher(ws)
    tab = ws.table()
    z = whiten(model.pca, tab.descriptors.astype(np.float64))
    x, ok = SetEncoder(model.gmm, z, model.alpha, model.norm_order).encode_many(tab.selection(f.subset, f.radius))
    path = ws.features / "fv.npz"
    with atomic_output(path) as tmp:
        with open(tmp, "wb") as fh:
            np.savez(fh, x=x, ok=ok, label=tab.labels, group=tab.groups.astype(str),
                     segment_id=np.array(tab.segment_ids, dtype=str),
                     accel=tab.accel, has_accel=tab.has_accel, contamination=tab.contamination,
                     n_traj=np.array([len(i) for i in tab.selection(f.subset, f.radius)]))
    write_meta(path, ws.cfg, "encode")
    print(f"encode: {int(ok.sum())}/{len(ok)} non-empty {f.subset} sets, dim {x.shape[1]} -> {path}")


def _load_features(ws: Workspace) -> dict:
    path = ws.require(ws.features / "fv.npz", "run encode first")
    check_upstream(path, ws.cfg)
    with np.load(path) as z:
        return {k: z[k] for k in z.files}


def _tune_svm(x, y, ok, inner, lr, seed):
    from .evaluation import _mean_fold_auc
    from .learning.svm import train_svm
    best = (-np.inf, lr.lambda_grid[0], None)
    for lam in lr.lambda_grid:
        m = np.zeros(len(y))
        for j in np.unique(inner):
            tr, te = (inner != j) & ok, (inner == j) & ok
            if te.any() and len(np.unique(y[tr])) == 2:
                m[te] = train_svm(x[tr], y[tr], lam, seed=seed, epochs=lr.svm_epochs).decision(x[te])
        auc = _mean_fold_auc(np.where(ok, m, 0.0), y, inner, np.ones(len(y), bool))
        if auc > best[0]:
            best = (auc, lam, m)
    return best


def cmd_train(ws: Workspace, args) -> None:
    from .evaluation import grouped_kfold
    from .learning.cnn import cnn_predict_proba, cnn_train, normalize_window, save_cnn
    from .learning.svm import platt_apply, platt_fit, train_svm
    cfg, lr = ws.cfg, ws.cfg.learner
    d = _load_features(ws)
    x, ok, y, groups = d["x"], d["ok"], d["label"].astype(np.int64), d["group"]
    inner = grouped_kfold(groups, lr.inner_k, cfg.seed).folds_of(groups)
    auc, lam, oof = _tune_svm(x, y, ok, inner, lr, cfg.seed)
    a, b = platt_fit(oof[ok], y[ok])
    svm = train_svm(x[ok], y[ok], lam, seed=cfg.seed, epochs=lr.svm_epochs)
    svm.platt_A, svm.platt_B = a, b
    write_json(ws.models / "svm_model.json", {**svm.to_dict(), "config_hash": cfg.hash,
                                              "inner_auc": auc, "subset": cfg.filter.subset})
    video_oof = np.where(ok, platt_apply(oof, a, b), 0.5)
    print(f"train: SVM lambda={lam:g} (inner AUC {auc:.3f}) -> {ws.models / 'svm_model.json'}")

    accel_oof = np.full(len(y), np.nan)
    has = d["has_accel"].astype(bool)
    if has.sum() >= 2 * lr.inner_k and len(np.unique(y[has])) == 2:
        w = normalize_window(d["accel"])
        kw = dict(lr=lr.cnn_lr, batch_size=lr.cnn_batch, max_epochs=lr.cnn_max_epochs, patience=lr.cnn_patience)
        for j in range(lr.inner_k):
            held = has & (inner == j)
            val = has & (inner == (j + 1) % lr.inner_k)
            fit = has & ~held & ~val
            m = cnn_train(w[fit], y[fit], w[val], y[val], seed=cfg.seed + 1 + j, **kw)
            accel_oof[held] = cnn_predict_proba(m, w[held])
        val = has & (inner == 0)
        model = cnn_train(w[has & ~val], y[has & ~val], w[val], y[val], seed=cfg.seed, **kw)
        path = ws.models / "cnn_model.bin"
        with atomic_output(path) as tmp:
            save_cnn(tmp, model, {"config_hash": cfg.hash})
        print(f"train: CNN on {int(has.sum())} windows -> {path}")
    else:
        print("train: too few acceleration windows; CNN skipped")
    _write_scores(ws.scores / "oof.csv", d, {"video": video_oof, "accel": accel_oof}, cfg)


def _write_scores(path: Path, d: dict, cols: dict, cfg: RunConfig) -> None:
    names = list(cols)
    with atomic_output(path) as tmp:
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["segment_id", "group", "label", "contamination", "n_traj"] + names)
            for i in range(len(d["label"])):
                c = d["contamination"][i]
                wr.writerow([d["segment_id"][i], d["group"][i], int(d["label"][i]),
                             "" if not np.isfinite(c) else repr(float(c)), int(d["n_traj"][i])]
                            + ["" if not np.isfinite(cols[n][i]) else repr(float(cols[n][i])) for n in names])
    write_meta(path, cfg, path.stem)


def _read_scores(path: Path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = {k: [r[k] for r in rows] for k in (rows[0].keys() if rows else [])}
    for k in ("video", "accel", "fused"):
        if k in out:
            out[k] = np.array([float(v) if v else np.nan for v in out[k]])
    if "label" in out:
        out["label"] = np.array([int(v) for v in out["label"]])
    return out


def cmd_score(ws: Workspace, args) -> None:
    from .learning.cnn import cnn_predict_proba, load_cnn, normalize_window
    from .learning.svm import LinearSvm
    d = _load_features(ws)
    svm_path = ws.require(ws.models / "svm_model.json", "run train first")
    check_upstream(svm_path, ws.cfg)
    svm = LinearSvm.load(svm_path)
    if svm.weights.shape[0] != d["x"].shape[1]:
        raise ValidationError("SVM and Fisher-vector dimensions differ; re-run fit-fv, encode and train")
    video = np.where(d["ok"], svm.predict_proba(d["x"]), 0.5)
    accel = np.full(len(video), np.nan)
    cnn_path = ws.models / "cnn_model.bin"
    if cnn_path.exists():
        check_upstream(cnn_path, ws.cfg)
        has = d["has_accel"].astype(bool)
        accel[has] = cnn_predict_proba(load_cnn(cnn_path), normalize_window(d["accel"][has]))
    path = ws.scores / "scores.csv"
    _write_scores(path, d, {"video": video, "accel": accel}, ws.cfg)
    print(f"score: {len(video)} segments -> {path}")


def cmd_fuse(ws: Workspace, args) -> None:
    from .learning.fusion import FusionModel, fuse_fit
    oof = _read_scores(ws.require(ws.scores / "oof.csv", "run train first"))
    rows = np.isfinite(oof["video"]) & np.isfinite(oof["accel"])
    if not rows.any():
        raise InputError("no segment has both video and acceleration scores; nothing to fuse")
    model = fuse_fit(oof["video"][rows], oof["accel"][rows], oof["label"][rows])
    write_json(ws.models / "fusion_model.json", {**model.to_dict(), "config_hash": ws.cfg.hash})
    sc_path = ws.require(ws.scores / "scores.csv", "run score first")
    check_upstream(sc_path, ws.cfg)
    sc = _read_scores(sc_path)
    both = np.isfinite(sc["video"]) & np.isfinite(sc["accel"])
    fused = np.full(len(both), np.nan)
    fused[both] = model.apply(sc["video"][both], sc["accel"][both])
    d = {"segment_id": sc["segment_id"], "group": sc["group"], "label": sc["label"],
         "contamination": np.array([float(c) if c else np.nan for c in sc["contamination"]]),
         "n_traj": np.array([int(n) for n in sc["n_traj"]])}
    path = ws.scores / "fused.csv"
    _write_scores(path, d, {"video": sc["video"], "accel": sc["accel"], "fused": fused}, ws.cfg)
    print(f"fuse: w_video={model.w_video:.3f} w_accel={model.w_accel:.3f} on {int(rows.sum())} pairs -> {path}")


def _write_predictions(path: Path, report: dict) -> None:
    p = report["predictions"]
    methods = list(p["prob"])
    with atomic_output(path) as tmp:
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["segment_id", "group", "fold", "label", "contamination", "n_full"] + methods)
            for i, sid in enumerate(p["segment_id"]):
                c = p["contamination"][i]
                wr.writerow([sid, p["group"][i], p["fold"][i], p["label"][i], "" if c is None else repr(c),
                             p["n_full"][i]] + ["" if p["prob"][m][i] is None else repr(p["prob"][m][i])
                                                for m in methods])


def _render(out_dir: Path, report: dict, cfg: RunConfig, stage: str) -> list[Path]:
    from .evaluation import write_plots, write_tables
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    path = out_dir / "tables.csv"
    with atomic_output(path) as tmp:
        write_tables(tmp, report)
    written.append(path)
    tmpdir = Path(tempfile.mkdtemp(prefix=".plots.", dir=out_dir))
    try:
        for p in write_plots(tmpdir, report):
            dest = out_dir / Path(p).name
            os.replace(p, dest)
            written.append(dest)
    finally:
        shutil.rmtree(tmpdir, ignore_errors=True)
    for p in written:
        write_meta(p, cfg, stage)
    return written


def cmd_evaluate(ws: Workspace, args) -> None:
    from .evaluation import dumps_report, run_experiment
    tab = ws.table()

    def progress(fold, aucs):
        shown = ", ".join(f"{m} {a:.3f}" for m, a in aucs.items() if a is not None)
        print(f"evaluate: fold {fold + 1}/{ws.cfg.eval.k}: {shown}", flush=True)

    report = run_experiment(tab, ws.cfg.eval_settings(), progress=progress)
    report["config_hash"] = ws.cfg.hash
    path = ws.eval / "report.json"
    with atomic_output(path) as tmp:
        tmp.write_text(dumps_report(report), encoding="utf-8")
    pred = ws.eval / "predictions.csv"
    _write_predictions(pred, report)
    write_meta(pred, ws.cfg, "evaluate")
    _render(ws.eval, report, ws.cfg, "evaluate")
    for m, r in report["methods"].items():
        extra = f", {r['n_traj_mean']:.1f} trajectories/example" if "n_traj_mean" in r else ""
        print(f"evaluate: {m}: AUC {r['mean']:.3f} ({r['std']:.3f}){extra}")
    print(f"evaluate: report -> {path}")


def collect_artifacts(out: Path) -> dict[str, str | None]:
    found = {}
    for p in sorted(out.rglob("*")):
        if not p.is_file() or p.name.endswith(META_SUFFIX) or p.name.startswith("."):
            continue
        if p.name == RUN_LOG or p.parent.name == "report":
            continue
        try:
            found[str(p.relative_to(out))] = artifact_hash(p)
        except (OSError, ValueError, CrowdspeakError):
            found[str(p.relative_to(out))] = None
    return found


def cmd_report(ws: Workspace, args) -> None:
    from .evaluation import load_report
    path = ws.require(ws.eval / "report.json", "run evaluate first")
    arts = {k: v for k, v in collect_artifacts(ws.out).items() if v is not None}
    hashes = sorted(set(arts.values()))
    if len(hashes) > 1 and not args.force:
        detail = "; ".join(f"{h}: {', '.join(k for k, v in arts.items() if v == h)}" for h in hashes)
        raise ValidationError(f"artifacts come from different configs ({detail}); pass --force to combine")
    report = load_report(path)
    rendered = _render(ws.report, report, ws.cfg, "report")
    lines = ["# crowdspeak report", "", f"config hash: `{report.get('config_hash')}`", "",
             f"{report['n_segments']} segments, {report['n_groups']} groups, "
             f"positive rate {report['positive_rate']:.3f}", "",
             "| method | AUC mean | AUC std | trajectories / example |", "|---|---|---|---|"]
    for m, r in report["methods"].items():
        nt = f"{r['n_traj_mean']:.1f} ({r['n_traj_std']:.1f})" if r.get("n_traj_mean") is not None else "-"
        lines.append(f"| {m} | {r['mean']:.3f} | {r['std']:.3f} | {nt} |")
    if report.get("multimodal_subset"):
        lines += ["", "Examples with both modalities:", "", "| method | AUC mean | AUC std |", "|---|---|---|"]
        for m, r in report["multimodal_subset"].items():
            lines.append(f"| {m} | {r['mean']:.3f} | {r['std']:.3f} |")
    lines += ["", "Contamination trend (Spearman rho of binned AUC vs bin order):", ""]
    for m, r in report["methods"].items():
        tr = r["analysis"]["contamination_trend"]
        rho = "n/a" if tr["spearman"] is None else f"{tr['spearman']:.2f}"
        lines.append(f"- {m}: {rho} over {tr['n_bins']} bins")
    if len(hashes) > 1:
        lines += ["", f"Warning: combined artifacts from configs {', '.join(hashes)} (--force)."]
    summary = ws.report / "summary.md"
    with atomic_output(summary) as tmp:
        tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_meta(summary, ws.cfg, "report")
    print(f"report: {summary} and {len(rendered)} tables/plots")


STAGES = {
    "track": (cmd_track, "build pose tracks from per-frame detections"),
    "extract": (cmd_extract, "extract dense trajectories from frame archives"),
    "filter": (cmd_filter, "select trajectories around pose keypoints; write the filter report"),
    "fit-fv": (cmd_fit_fv, "fit the PCA + GMM codebook"),
    "encode": (cmd_encode, "encode every segment's selected trajectories as a Fisher vector"),
    "train": (cmd_train, "train the video SVM and the acceleration CNN"),
    "score": (cmd_score, "score every segment with the trained models"),
    "fuse": (cmd_fuse, "fit late fusion on out-of-fold scores and fuse the segment scores"),
    "evaluate": (cmd_evaluate, "grouped cross-validated comparison of all methods"),
    "synth": (cmd_synth, "generate a synthetic dataset"),
    "report": (cmd_report, "summarise evaluation artifacts, checking they share one config"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crowdspeak", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"crowdspeak {__version__}")
    sub = p.add_subparsers(dest="stage", required=True, metavar="stage")
    for name, (_, help_) in STAGES.items():
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", type=Path, help="run configuration (TOML); defaults apply when omitted")
        sp.add_argument("--threads", type=int, help="cap on worker threads")
        sp.add_argument("--seed", type=int, help="override the config's seed")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "report":
            sp.add_argument("--force", action="store_true", help="combine artifacts from different configs")
    return p


def _log_run(out: Path, entry: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / RUN_LOG, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    cfg = None
    code = 0
    try:
        if args.threads is not None and args.threads < 1:
            raise ValidationError("--threads must be >= 1")
        cfg = load_config(args.config, args.seed)
        set_threads(args.threads)
        ws = Workspace(cfg)
        with output_lock(ws.out):
            STAGES[args.stage][0](ws, args)
    except CrowdspeakError as exc:
        code = exc.exit_code
        print(f"crowdspeak {args.stage}: error: {exc}", file=sys.stderr)
    finally:
        if cfg is not None:
            try:
                _log_run(Path(cfg.paths.out), {
                    "stage": args.stage, "config_hash": cfg.hash, "seed": cfg.seed, "exit_code": code,
                    "wall_time_s": round(time.perf_counter() - t0, 3), "versions": versions(),
                    "argv": list(argv) if argv is not None else sys.argv[1:]})
            except OSError as exc:
                log.warning("could not append to the run log: %s", exc)
    return code


if __name__ == "__main__":
    sys.exit(main())
