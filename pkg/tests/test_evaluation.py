import math

import numpy as np
import pytest

from latentuad import evaluation
from latentuad.evaluation import (
    CONTROL,
    PATIENT,
    FoldConfig,
    SubjectMeta,
    SubjectScore,
    auc,
    best_gmean,
    fold_size_ranges,
    make_folds,
    roc,
)

from oracles import best_gmean_exhaustive


def _points(metric, is_patient):
    return [SubjectScore(f"s{i}", PATIENT if p else CONTROL, float(m)) for i, (m, p) in enumerate(zip(metric, is_patient))]


def test_perfect_separation():
    pts = _points([0.1, 0.2, 0.3, 5.0, 6.0], [0, 0, 0, 1, 1])
    assert any(s == 1.0 and sp == 1.0 for _, s, sp in roc(pts))
    g, t = best_gmean(pts)
    assert g == 1.0 and 0.3 <= t < 5.0
    assert auc(pts) == 1.0


def test_all_equal_metrics_give_zero():
    pts = _points([2.0] * 6, [0, 1, 0, 1, 0, 1])
    assert best_gmean(pts)[0] == 0.0


def test_roc_matches_brute_force(rng):
    metric = rng.integers(0, 6, size=25).astype(float)
    patient = rng.random(25) < 0.4
    patient[:2] = [True, False]
    pts = roc(_points(metric, patient))
    thresholds = [-math.inf] + sorted(set(metric.tolist()))
    assert [t for t, _, _ in pts] == thresholds
    for t, sens, spec in pts:
        pred = metric > t
        assert sens == np.sum(pred & patient) / patient.sum()
        assert spec == np.sum(~pred & ~patient) / (~patient).sum()


def test_roc_monotone(rng):
    pts = roc(_points(rng.random(40), rng.random(40) < 0.5))
    sens = [s for _, s, _ in pts]
    spec = [s for _, _, s in pts]
    assert all(b <= a for a, b in zip(sens, sens[1:]))
    assert all(b >= a for a, b in zip(spec, spec[1:]))
    assert pts[-1][1] == 0.0 and pts[-1][2] == 1.0


def test_shuffled_labels_auc_near_half():
    rng = np.random.default_rng(0)
    vals = [auc(_points(rng.random(400), rng.permutation(np.arange(400) < 200))) for _ in range(20)]
    assert abs(np.mean(vals) - 0.5) < 0.05


def test_auc_mann_whitney(rng):
    metric = rng.random(30)
    patient = np.arange(30) % 3 == 0
    pos, neg = metric[patient], metric[~patient]
    u = np.mean([[1.0 if p > n else 0.5 if p == n else 0.0 for n in neg] for p in pos])
    assert auc(_points(metric, patient)) == pytest.approx(u, rel=1e-12)


def test_gmean_exhaustive_random_ten(rng):
    for _ in range(20):
        metric = np.round(rng.random(10), 1)
        patient = np.arange(10) < 5
        rng.shuffle(patient)
        assert best_gmean(_points(metric, patient)) == best_gmean_exhaustive(metric, patient)


def test_tie_breaks_toward_specificity():
    # thresholds 1 and 3 both give g-mean sqrt(0.5); the latter has the higher specificity
    pts = [(-math.inf, 1.0, 0.0), (1.0, 1.0, 0.5), (3.0, 0.5, 1.0)]
    assert best_gmean(pts) == (math.sqrt(0.5), 3.0)


def test_threshold_ties_go_to_control():
    pts = _points([1.0, 1.0, 2.0], [0, 1, 1])
    by_t = {t: (s, sp) for t, s, sp in roc(pts)}
    assert by_t[1.0] == (0.5, 1.0)


def test_score_validation():
    with pytest.raises(ValueError):
        SubjectScore("a", "other", 1.0)
    with pytest.raises(ValueError):
        SubjectScore("a", CONTROL, -1.0)
    with pytest.raises(ValueError):
        roc(_points([1.0, 2.0], [0, 0]))


# --- folds -----------------------------------------------------------------


def _cohort(n_c, n_p, seed=0):
    rng = np.random.default_rng(seed)

    def make(prefix, n, label):
        return [SubjectMeta(f"{prefix}{i:03d}", label, float(rng.uniform(45, 80)), "F" if rng.random() < 0.4 else "M")
                for i in range(n)]

    return make("c", n_c, CONTROL), make("p", n_p, PATIENT)


def test_reference_cohort_fold_sizes():
    controls, patients = _cohort(54, 124)
    folds = make_folds(controls, patients, seed=1)
    assert len(folds) == 10
    r = fold_size_ranges(folds)
    assert 39 <= r["train_controls"][0] and r["train_controls"][1] <= 41
    assert 13 <= r["test_controls"][0] and r["test_controls"][1] <= 15
    for f in folds:
        assert len(f.train_controls) + len(f.test_controls) == 54
        assert len(f.train_patients) + len(f.test_patients) == 124
        assert not set(f.train_controls) & set(f.test_controls)
        assert not set(f.train_patients) & set(f.test_patients)


def test_fold_sex_ratio_balanced():
    controls, patients = _cohort(54, 124, seed=2)
    folds = make_folds(controls, patients, seed=3)
    sex = {s.subject_id: s.sex for s in controls + patients}
    for role, pool in (("test_controls", controls), ("train_controls", controls), ("test_patients", patients)):
        glob = np.mean([s.sex == "F" for s in pool])
        for f in folds:
            ratio = np.mean([sex[i] == "F" for i in getattr(f, role)])
            assert abs(ratio - glob) <= 0.10, (role, f.index)


def test_folds_deterministic_and_json(rng):
    controls, patients = _cohort(30, 30)
    a = make_folds(controls, patients, FoldConfig(n_folds=3), seed=5)
    b = make_folds(controls, patients, FoldConfig(n_folds=3), seed=5)
    assert a == b
    assert evaluation.folds_from_json(evaluation.folds_to_json(a)) == a
    assert make_folds(controls, patients, FoldConfig(n_folds=3), seed=6) != a


def test_single_stratum_plain_split():
    controls = [SubjectMeta(f"c{i}", CONTROL, 60.0, "F") for i in range(8)]
    patients = [SubjectMeta(f"p{i}", PATIENT, 60.0, "F") for i in range(8)]
    for strat in (True, False):
        folds = make_folds(controls, patients, FoldConfig(n_folds=4, control_jitter=0, patient_jitter=0, stratify=strat))
        assert all(len(f.test_controls) == 2 for f in folds)


def test_too_small_stratum():
    controls = [SubjectMeta("c0", CONTROL, 50.0, "F"), SubjectMeta("c1", CONTROL, 70.0, "M")]
    patients = [SubjectMeta(f"p{i}", PATIENT, 60.0, "F") for i in range(4)]
    with pytest.raises(ValueError, match="too small"):
        make_folds(controls, patients, FoldConfig(n_folds=1, control_test_fraction=0.5, control_jitter=0))


def test_metadata_and_results_csv(tmp_path):
    controls, patients = _cohort(3, 2)
    evaluation.write_metadata(tmp_path / "m.csv", controls + patients)
    assert evaluation.read_metadata(tmp_path / "m.csv") == controls + patients
    rows = [("recon", "whole_brain", 0, 0.75, 1.25), ("mmst", "quadrant_lo_x_lo_y", 3, 1.0, 0.0)]
    evaluation.write_results(tmp_path / "r.csv", rows)
    assert evaluation.read_results(tmp_path / "r.csv") == rows
    (tmp_path / "bad.csv").write_text("id,label,age,sex\nx,unknown,50,F\n")
    with pytest.raises(ValueError, match="unknown label"):
        evaluation.read_metadata(tmp_path / "bad.csv")
