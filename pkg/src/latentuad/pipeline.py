"""Staged, file-backed pipeline shared by the command line and the end-to-end tests.

Layout of a run directory::

    config.json  folds.json  results.csv
    fold-KK/norm.json  sae.uadm  sae_trace.csv  latents.uadm
            ocsvm.uadm  mmst.uadm  mmst_trace.csv  threshold.json
            maps/<method>/<subject>.raw  reports/<method>/<subject>.csv
            results.csv

Every stage reads only persisted inputs, so any stage can be rerun alone.
All randomness comes from the global seed through named substreams.
"""
from __future__ import annotations

import json
import logging
import os

import numpy as np

from . import container, evaluation, maps, mmst, ocsvm, phantom, sae
from .config import PipelineConfig, substream, substream_seed
from .patching import eligible_mask, eligible_locations, sample_pair_arrays
from .volume import LabelAtlas, NormalizationStats, Volume, brain_mask, fit_normalization, load_atlas, load_volume, normalize

log = logging.getLogger(__name__)

METHODS = ("recon", "ocsvm", "mmst")


class StageError(RuntimeError):
    """A stage failed; ``stage`` and ``path`` name where."""

    def __init__(self, stage, msg, path=None):
        self.stage = stage
        self.path = path
        where = f" ({path})" if path else ""
        super().__init__(f"[{stage}] {msg}{where}")


def _need(stage, path):
    if not os.path.exists(path):
        raise StageError(stage, "missing input", path)
    return path


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_json(stage, path):
    with open(_need(stage, path)) as fh:
        return json.load(fh)


class Run:
    """Resolved paths for one run directory."""

    def __init__(self, cfg: PipelineConfig, run_dir=None):
        self.cfg = cfg
        self.data_dir = cfg.paths.data_dir
        self.dir = run_dir or os.path.join(cfg.paths.output_dir, f"run-{cfg.seed}-{cfg.digest()}")
        os.makedirs(self.dir, exist_ok=True)
        self._volumes = {}

    # paths

    def fold_dir(self, k):
        d = os.path.join(self.dir, f"fold-{k:02d}")
        os.makedirs(d, exist_ok=True)
        return d

    def path(self, k, *parts):
        p = os.path.join(self.fold_dir(k), *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    @property
    def metadata_path(self):
        return self.cfg.paths.metadata or os.path.join(self.data_dir, "metadata.csv")

    def atlas(self) -> LabelAtlas | None:
        lp = self.cfg.paths.atlas or os.path.join(self.data_dir, "atlas.raw")
        npth = self.cfg.paths.atlas_names or os.path.join(self.data_dir, "atlas_names.tsv")
        if not os.path.exists(lp):
            if self.cfg.paths.atlas:
                raise StageError("aggregate", "missing atlas", lp)
            return None
        return load_atlas(lp, _need("aggregate", npth))

    def volume(self, sid) -> Volume:
        if sid not in self._volumes:
            for ext in (".raw", ".nii"):
                p = os.path.join(self.data_dir, sid + ext)
                if os.path.exists(p):
                    self._volumes[sid] = load_volume(p)
                    break
            else:
                raise StageError("load", f"no volume for subject {sid}", os.path.join(self.data_dir, sid + ".raw"))
        return self._volumes[sid]

    def fold(self, k) -> evaluation.Fold:
        folds = evaluation.folds_from_json(open(_need("folds", os.path.join(self.dir, "folds.json"))).read())
        if not 0 <= k < len(folds):
            raise StageError("folds", f"fold {k} out of range (have {len(folds)})")
        return folds[k]

    @property
    def margin(self):
        return (self.cfg.patch_size - 1) // 2


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


def phantom_gen(cfg: PipelineConfig, out_dir=None, delta=None):
    p = cfg.phantom
    spec = phantom.PhantomSpec(dims=tuple(p.dims), corr_length=p.corr_length, amplitude=(p.amplitude,) * 3,
                               semi_axes=tuple(p.semi_axes))
    subjects = phantom.generate_cohort(
        spec, p.n_normal, p.n_anomalous, p.radius, p.delta if delta is None else delta,
        margin=(cfg.patch_size - 1) // 2, seed=substream_seed(cfg.seed, "phantom"),
    )
    phantom.write_cohort(out_dir or cfg.paths.data_dir, subjects, spec)
    return subjects


def make_folds(run: Run):
    meta = evaluation.read_metadata(_need("folds", run.metadata_path))
    controls = [s for s in meta if s.label == evaluation.CONTROL]
    patients = [s for s in meta if s.label == evaluation.PATIENT]
    f = run.cfg.folds
    fc = evaluation.FoldConfig(f.n_folds, f.control_test_fraction, f.control_jitter, f.patient_test_fraction, f.patient_jitter, f.stratify)
    try:
        folds = evaluation.make_folds(controls, patients, fc, seed=substream_seed(run.cfg.seed, "folds"))
    except ValueError as e:
        raise StageError("folds", str(e), run.metadata_path) from e
    with open(os.path.join(run.dir, "folds.json"), "w") as fh:
        fh.write(evaluation.folds_to_json(folds) + "\n")
    log.info("fold sizes: %s", evaluation.fold_size_ranges(folds))
    return folds


def _norm(run: Run, k) -> NormalizationStats:
    return NormalizationStats.from_dict(_read_json("norm", run.path(k, "norm.json")))


def _prepared(run: Run, k, sid, stats):
    """Normalized volume and the eligible scoring mask (foreground taken before normalizing)."""
    v = run.volume(sid)
    return normalize(v, stats), eligible_mask(brain_mask(v), run.margin)


def sae_train(run: Run, k):
    cfg = run.cfg
    fold = run.fold(k)
    vols = [run.volume(s) for s in fold.train_controls]
    stats = fit_normalization(vols)
    _write_json(run.path(k, "norm.json"), stats.to_dict())
    normed = [normalize(v, stats) for v in vols]
    masks = [brain_mask(v) for v in vols]
    n_pairs = max(2, cfg.patches_per_subject * len(vols) // 2)
    a, b = sample_pair_arrays(normed, masks, n_pairs, cfg.patch_size, substream_seed(cfg.seed, "pairs", k))
    n_val = max(1, int(round(cfg.sae.val_fraction * n_pairs)))
    s = cfg.sae
    sc = sae.SaeConfig(cfg.patch_size, vols[0].channels, s.kernels, s.strides, s.filters, s.alpha, s.epochs, s.batch_size, s.lr,
                       seed=substream_seed(cfg.seed, "sae", k))
    try:
        res = sae.train_sae((a[n_val:], b[n_val:]), (a[:n_val], b[:n_val]), sc)
    except FloatingPointError as e:
        raise StageError("sae-train", str(e)) from e
    sae.save_model(run.path(k, "sae.uadm"), res.model)
    sae.write_trace(run.path(k, "sae_trace.csv"), res.trace)
    return res


def features(run: Run, k):
    cfg = run.cfg
    fold = run.fold(k)
    stats = _norm(run, k)
    m = sae.load_model(_need("features", run.path(k, "sae.uadm")))
    out = []
    for i, sid in enumerate(fold.train_controls):
        v, elig = _prepared(run, k, sid, stats)
        locs = eligible_locations(elig, 0)
        rng = substream(cfg.seed, "features", k, i)
        pick = locs[rng.integers(len(locs), size=cfg.features_per_subject)]
        out.append(maps.encode_locations(m, v, pick))
    z = np.concatenate(out)
    container.save(run.path(k, "latents.uadm"), "latents", {"subjects": list(fold.train_controls)}, {"z": z})
    return z


def _latents(run, k, stage):
    _, _, arrays = container.load(_need(stage, run.path(k, "latents.uadm")), "latents")
    return arrays["z"]


def fit_ocsvm_stage(run: Run, k):
    o = run.cfg.ocsvm
    z = _latents(run, k, "fit-ocsvm")
    try:
        e = ocsvm.fit_ensemble(z, o.n_models, o.n_per_model, o.nu, o.tol, seed=substream_seed(run.cfg.seed, "ocsvm", k))
    except (ValueError, ocsvm.ConvergenceError) as err:
        raise StageError("fit-ocsvm", str(err)) from err
    with open(run.path(k, "ocsvm.uadm"), "wb") as fh:
        fh.write(ocsvm.ensemble_to_bytes(e))
    return e


def fit_mmst_stage(run: Run, k):
    c = run.cfg.mmst
    z = _latents(run, k, "fit-mmst")
    mc = mmst.MmstConfig(K=c.K, kappa=c.kappa, t0=c.t0, t_min=c.t_min, refresh_every=c.refresh_every, n_passes=c.n_passes,
                         warmup=c.warmup, heldout=c.heldout, seed=substream_seed(run.cfg.seed, "mmst", k))
    try:
        res = mmst.fit_mmst(z, mc)
    except ValueError as err:
        raise StageError("fit-mmst", str(err)) from err
    with open(run.path(k, "mmst.uadm"), "wb") as fh:
        fh.write(mmst.params_to_bytes(res.params))
    mmst.write_trace(run.path(k, "mmst_trace.csv"), res.trace)
    return res


def _scorers(run, k, methods):
    out = {}
    if "ocsvm" in methods:
        with open(_need("score", run.path(k, "ocsvm.uadm")), "rb") as fh:
            out["ocsvm"] = ocsvm.ensemble_from_bytes(fh.read())
    if "mmst" in methods:
        with open(_need("score", run.path(k, "mmst.uadm")), "rb") as fh:
            out["mmst"] = mmst.params_from_bytes(fh.read())
    return out


def scored_subjects(fold: evaluation.Fold):
    return list(fold.train_controls) + list(fold.test_controls) + list(fold.test_patients)


def score(run: Run, k, methods=METHODS, subjects=None, chunk=4096):
    """Anomaly maps for each requested method; one encoder pass serves all of them."""
    for mth in methods:
        if mth not in METHODS:
            raise StageError("score", f"unknown method {mth!r}; expected one of {METHODS}")
    fold = run.fold(k)
    stats = _norm(run, k)
    m = sae.load_model(_need("score", run.path(k, "sae.uadm")))
    scorers = _scorers(run, k, methods)
    c, p, _ = m.input_shape
    for sid in subjects or scored_subjects(fold):
        v, elig = _prepared(run, k, sid, stats)
        locs = eligible_locations(elig, 0)
        vals = {mth: np.empty(len(locs)) for mth in methods}
        for s in range(0, len(locs), chunk):
            x = maps.extract_patches(v, locs[s:s + chunk], p)
            z = m.encode_batch(x)
            if "recon" in methods:
                r = m.decode_batch(z) - x
                vals["recon"][s:s + chunk] = np.sum(r * r, axis=(1, 2, 3))
            for name, sc in scorers.items():
                vals[name][s:s + chunk] = maps.latent_scores(sc, z)
        for mth in methods:
            maps.save_map(run.path(k, "maps", mth, f"{sid}.raw"), maps.map_from_locations(v.dims, locs, vals[mth]), v.voxel_size_mm)


def _load_map(run, k, mth, sid, stage):
    return maps.load_map(_need(stage, run.path(k, "maps", mth, f"{sid}.raw")))


def threshold(run: Run, k, methods=METHODS):
    fold = run.fold(k)
    out = {}
    for mth in methods:
        train = [_load_map(run, k, mth, sid, "threshold") for sid in fold.train_controls]
        out[mth] = maps.abnormality_threshold(train, run.cfg.threshold_q)
    path = run.path(k, "threshold.json")
    prev = json.load(open(path)) if os.path.exists(path) else {}
    prev.update(out)
    _write_json(path, prev)
    return out


def aggregate(run: Run, k, methods=METHODS):
    fold = run.fold(k)
    thr = _read_json("aggregate", run.path(k, "threshold.json"))
    atlas = run.atlas()
    reports = {}
    for mth in methods:
        if mth not in thr:
            raise StageError("aggregate", f"no threshold for method {mth}", run.path(k, "threshold.json"))
        for sid in list(fold.test_controls) + list(fold.test_patients):
            amap = _load_map(run, k, mth, sid, "aggregate")
            rep = maps.region_aggregate(maps.binarize(amap, thr[mth]), atlas, amap.valid)
            maps.write_report(run.path(k, "reports", mth, f"{sid}.csv"), rep)
            reports[(mth, sid)] = rep
    return reports


def evaluate(run: Run, k, methods=METHODS):
    fold = run.fold(k)
    rows = []
    for mth in methods:
        per_region = {}
        for label, ids in ((evaluation.CONTROL, fold.test_controls), (evaluation.PATIENT, fold.test_patients)):
            for sid in ids:
                rep = maps.read_report(_need("evaluate", run.path(k, "reports", mth, f"{sid}.csv")))
                for r in rep.rows:
                    if r.pct is not None:
                        per_region.setdefault((r.label, r.name), []).append(evaluation.SubjectScore(sid, label, r.pct))
        for (_, name), pts in sorted(per_region.items()):
            if len({p.label for p in pts}) < 2:
                log.warning("fold %d %s region %s: one class only, skipped", k, mth, name)
                continue
            g, t = evaluation.best_gmean(pts)
            rows.append((mth, name, k, g, t))
    evaluation.write_results(run.path(k, "results.csv"), rows)
    return rows


def merge_results(run: Run, folds):
    rows = []
    for k in folds:
        rows += evaluation.read_results(_need("run-all", run.path(k, "results.csv")))
    path = os.path.join(run.dir, "results.csv")
    evaluation.write_results(path, rows)
    return path, rows


STAGES = ("sae-train", "features", "fit-ocsvm", "fit-mmst", "score", "threshold", "aggregate", "evaluate")


def run_fold(run: Run, k, start=None):
    """All per-fold stages in order, optionally resuming at ``start``."""
    todo = STAGES[STAGES.index(start):] if start else STAGES
    for stage in todo:
        log.info("fold %d: %s", k, stage)
        if stage == "sae-train":
            sae_train(run, k)
        elif stage == "features":
            features(run, k)
        elif stage == "fit-ocsvm":
            fit_ocsvm_stage(run, k)
        elif stage == "fit-mmst":
            fit_mmst_stage(run, k)
        elif stage == "score":
            score(run, k)
        elif stage == "threshold":
            threshold(run, k)
        elif stage == "aggregate":
            aggregate(run, k)
        else:
            evaluate(run, k)


def run_all(cfg: PipelineConfig, folds=None, start=None, run_dir=None):
    run = Run(cfg, run_dir)
    with open(os.path.join(run.dir, "config.json"), "w") as fh:
        fh.write(cfg.to_json() + "\n")
    if not os.path.exists(os.path.join(run.dir, "folds.json")) or start in (None, "folds"):
        make_folds(run)
    ks = range(cfg.folds.n_folds) if folds is None else folds
    for k in ks:
        run_fold(run, k, None if start == "folds" else start)
    return merge_results(run, ks)
