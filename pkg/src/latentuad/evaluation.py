"""Subject-level evaluation: ROC sweep, best g-mean and stratified resampled folds.

A subject is called a patient iff its metric is strictly above the
threshold, so ties at the threshold go to the control side.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

CONTROL = "control"
PATIENT = "patient"


@dataclass(frozen=True)
class SubjectScore:
    subject_id: str
    label: str
    metric: float

    def __post_init__(self):
        if self.label not in (CONTROL, PATIENT):
            raise ValueError(f"label must be {CONTROL!r} or {PATIENT!r}, got {self.label!r}")
        if not self.metric >= 0:
            raise ValueError(f"metric must be >= 0, got {self.metric}")


def _split(points):
    metric = np.array([p.metric for p in points], dtype=np.float64)
    patient = np.array([p.label == PATIENT for p in points])
    if patient.all() or not patient.any():
        raise ValueError("ROC needs both controls and patients")
    return metric, patient


def roc(points):
    """Operating points ``(threshold, sensitivity, specificity)`` in increasing threshold order.

    The first threshold is ``-inf`` (everyone a patient); then one per
    distinct metric value, the largest of which calls everyone a control.
    """
    metric, patient = _split(points)
    n_pos = int(patient.sum())
    n_neg = len(patient) - n_pos
    order = np.argsort(metric, kind="stable")
    m_sorted = metric[order]
    pos_sorted = patient[order]
    thresholds = np.unique(m_sorted)
    # subjects at or below each threshold are called controls
    below = np.searchsorted(m_sorted, thresholds, side="right")
    pos_below = np.concatenate([[0], np.cumsum(pos_sorted)])[below]
    neg_below = below - pos_below
    out = [(-math.inf, 1.0, 0.0)]
    for t, pb, nb in zip(thresholds, pos_below, neg_below):
        out.append((float(t), (n_pos - int(pb)) / n_pos, int(nb) / n_neg))
    return out


def auc(points) -> float:
    """Trapezoidal area under the ROC curve."""
    pts = roc(points)
    fpr = np.array([1.0 - s for _, _, s in pts])[::-1]
    tpr = np.array([s for _, s, _ in pts])[::-1]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def best_gmean(points):
    """``(gmean, threshold)`` maximizing ``sqrt(sens * spec)``; ties go to higher specificity.

    Accepts ``SubjectScore`` items or precomputed ROC triples.
    """
    pts = list(points)
    if not pts:
        raise ValueError("empty point set")
    if isinstance(pts[0], SubjectScore):
        pts = roc(pts)
    best = None
    for t, sens, spec in pts:
        key = (math.sqrt(sens * spec), spec)
        if best is None or key > best[0]:
            best = (key, t)
    return best[0][0], best[1]


# --------------------------------------------------------------------------
# folds
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SubjectMeta:
    subject_id: str
    label: str
    age: float
    sex: str


@dataclass(frozen=True)
class Fold:
    index: int
    train_controls: tuple
    test_controls: tuple
    train_patients: tuple
    test_patients: tuple

    def __post_init__(self):
        if set(self.train_controls) & set(self.test_controls):
            raise ValueError("train and test controls overlap")
        if set(self.train_patients) & set(self.test_patients):
            raise ValueError("train and test patients overlap")


@dataclass(frozen=True)
class FoldConfig:
    n_folds: int = 10
    control_test_fraction: float = 0.25
    control_jitter: int = 1
    patient_test_fraction: float = 84 / 124
    patient_jitter: int = 2
    stratify: bool = True

    def __post_init__(self):
        if self.n_folds < 1:
            raise ValueError("n_folds must be >= 1")
        for name in ("control_test_fraction", "patient_test_fraction"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.control_jitter < 0 or self.patient_jitter < 0:
            raise ValueError("jitter must be >= 0")


def age_tercile_edges(ages):
    return np.quantile(np.asarray(ages, dtype=np.float64), [1 / 3, 2 / 3])


def strata(subjects, edges):
    """Stratum key ``(sex, age tercile)`` for each subject."""
    return [(s.sex, int(np.digitize(s.age, edges))) for s in subjects]


def _allocate(sizes, total, caps=None):
    """Largest-remainder split of ``total`` proportional to ``sizes``, each share at most its cap."""
    sizes = np.asarray(sizes, dtype=np.float64)
    caps = sizes.astype(int) if caps is None else np.asarray(caps, dtype=int)
    if total > caps.sum():
        raise ValueError(f"cannot place {total} items within caps {caps.tolist()}")
    raw = total * sizes / sizes.sum()
    base = np.minimum(np.floor(raw).astype(int), caps)
    rem = raw - np.floor(raw)
    while base.sum() < total:
        room = base < caps
        order = np.lexsort((np.arange(len(raw)), -rem, ~room))
        take = order[: min(total - base.sum(), int(room.sum()))]
        base[take] += 1
        rem[take] = -1.0
    return base


def _split_role(subjects, keys, frac, jitter, rng, stratify):
    n = len(subjects)
    if n < 2:
        raise ValueError(f"need at least 2 subjects to split, got {n}")
    size = int(round(frac * n)) + int(rng.integers(-jitter, jitter + 1))
    size = min(max(size, 1), n - 1)
    ids = np.array([s.subject_id for s in subjects], dtype=object)
    if not stratify:
        groups = {None: np.arange(n)}
    else:
        groups = {}
        for i, k in enumerate(keys):
            groups.setdefault(k, []).append(i)
        groups = {k: np.array(v) for k, v in sorted(groups.items())}
    # every stratum keeps at least one training member
    sizes = [len(v) for v in groups.values()]
    try:
        quota = _allocate(sizes, size, [n_s - 1 for n_s in sizes] if len(groups) > 1 else None)
    except ValueError:
        raise ValueError(f"strata {sizes} are too small to put {size} of {n} subjects in test") from None
    test = []
    for members, q in zip(groups.values(), quota):
        test.extend(rng.choice(members, size=int(q), replace=False).tolist())
    mask = np.zeros(n, dtype=bool)
    mask[test] = True
    return tuple(ids[~mask].tolist()), tuple(ids[mask].tolist())


def make_folds(controls, patients, cfg: FoldConfig | None = None, seed=0):
    """Independently re-drawn stratified train/test splits, one per fold."""
    cfg = cfg or FoldConfig()
    controls = list(controls)
    patients = list(patients)
    edges = age_tercile_edges([s.age for s in controls + patients])
    kc = strata(controls, edges)
    kp = strata(patients, edges)
    folds = []
    for f in range(cfg.n_folds):
        rng = np.random.default_rng([seed, f])
        trc, tec = _split_role(controls, kc, cfg.control_test_fraction, cfg.control_jitter, rng, cfg.stratify)
        trp, tep = _split_role(patients, kp, cfg.patient_test_fraction, cfg.patient_jitter, rng, cfg.stratify)
        folds.append(Fold(f, trc, tec, trp, tep))
    return folds


def fold_size_ranges(folds):
    out = {}
    for name in ("train_controls", "test_controls", "train_patients", "test_patients"):
        sizes = [len(getattr(f, name)) for f in folds]
        out[name] = (min(sizes), max(sizes))
    return out


def folds_to_json(folds) -> str:
    return json.dumps([{k: list(v) if isinstance(v, tuple) else v for k, v in asdict(f).items()} for f in folds], indent=1)


def folds_from_json(text) -> list:
    return [Fold(d["index"], *(tuple(d[k]) for k in ("train_controls", "test_controls", "train_patients", "test_patients"))) for d in json.loads(text)]


def read_metadata(path):
    out = []
    with open(path, newline="") as fh:
        for d in csv.DictReader(fh):
            if d["label"] not in (CONTROL, PATIENT):
                raise ValueError(f"{path}: subject {d['id']} has unknown label {d['label']!r}")
            out.append(SubjectMeta(d["id"], d["label"], float(d["age"]), d["sex"]))
    return out


def write_metadata(path, subjects):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "age", "sex"])
        for s in subjects:
            w.writerow([s.subject_id, s.label, repr(float(s.age)), s.sex])


RESULT_FIELDS = ["method", "region", "fold", "gmean", "threshold"]


def write_results(path, rows):
    """Rows are ``(method, region, fold, gmean, threshold)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_FIELDS)
        for method, region, fold, g, t in rows:
            w.writerow([method, region, int(fold), repr(float(g)), repr(float(t))])


def read_results(path):
    with open(path, newline="") as fh:
        return [(d["method"], d["region"], int(d["fold"]), float(d["gmean"]), float(d["threshold"])) for d in csv.DictReader(fh)]
