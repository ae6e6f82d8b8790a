"""Independent reference implementations used as test oracles.

Each one takes the slow, obvious route to the same quantity the package
computes some faster way.
"""
import math

import numpy as np


def project_capped_simplex(v, C):
    """Euclidean projection onto {a : sum a = 1, 0 <= a <= C} by bisection on the shift."""
    lo, hi = v.min() - C - 1.0, v.max() + 1.0
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        if np.clip(v - mid, 0.0, C).sum() > 1.0:
            lo = mid
        else:
            hi = mid
    return np.clip(v - 0.5 * (lo + hi), 0.0, C)


def ocsvm_dual_pg(Q, nu, iters=50000):
    """Projected gradient descent on 0.5 a^T Q a over the capped simplex, step 1/L."""
    n = len(Q)
    C = 1.0 / (nu * n)
    step = 1.0 / np.linalg.eigvalsh(Q).max()
    a = np.full(n, 1.0 / n)
    for _ in range(iters):
        a_new = project_capped_simplex(a - step * (Q @ a), C)
        if np.abs(a_new - a).max() < 1e-15:
            a = a_new
            break
        a = a_new
    return a


def rho_from_alpha(Q, a, C, eps=1e-9):
    g = Q @ a
    free = (a > eps) & (a < C - eps)
    return float(g[free].mean()) if free.any() else float(g[a > eps].min())


def best_gmean_exhaustive(metric, is_patient):
    """Try every candidate threshold (each value and -inf); strict '>' calls a patient."""
    metric = np.asarray(metric, dtype=float)
    is_patient = np.asarray(is_patient, dtype=bool)
    best = None
    for t in [-math.inf] + sorted(set(metric.tolist())):
        pred = metric > t
        sens = np.sum(pred & is_patient) / is_patient.sum()
        spec = np.sum(~pred & ~is_patient) / (~is_patient).sum()
        key = (math.sqrt(sens * spec), spec)
        if best is None or key > best[0]:
            best = (key, t)
    return best[0][0], best[1]


def student_t_logpdf(x, nu):
    return (math.lgamma((nu + 1) / 2) - math.lgamma(nu / 2) - 0.5 * math.log(nu * math.pi)
            - (nu + 1) / 2 * np.log1p(x * x / nu))
