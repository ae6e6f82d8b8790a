"""Gaussian-kernel nu-one-class SVM trained by SMO, and a mean-decision ensemble.

Dual problem solved::

    min_a  0.5 a^T K a   s.t.  sum(a) = 1,  0 <= a_i <= 1 / (nu n)

The decision function is ``f(z) = sum_i a_i k(z_i, z) - rho``, positive
inside the estimated support.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import container
from ._jit import USE_NUMBA, kernel


class ConvergenceError(RuntimeError):
    pass


def gaussian_kernel(z1, z2, gamma):
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape:
        raise ValueError(f"vector lengths differ: {z1.shape} vs {z2.shape}")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    d = z1 - z2
    return float(np.exp(-gamma * np.dot(d, d)))


def kernel_matrix(a, b, gamma):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sq = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * a @ b.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


def default_gamma(samples) -> float:
    """``1 / (M * mean per-coordinate variance)``."""
    z = np.asarray(samples, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError("need at least two samples")
    v = float(np.mean(np.var(z, axis=0)))
    if v <= 0:
        raise ValueError("samples have zero variance")
    return 1.0 / (z.shape[1] * v)


@kernel
def _smo(Q, alpha, C, tol, max_iter):
    """Maximal-violating-pair SMO on the one-class dual; updates ``alpha`` in place.

    Returns ``(grad, n_iter, gap)`` where ``gap`` is the final KKT violation.
    """
    n = Q.shape[0]
    grad = Q @ alpha
    it = 0
    gap = np.inf
    while it < max_iter:
        # i: may grow (alpha < C) with the smallest gradient
        # j: may shrink (alpha > 0) with the largest gradient
        i = -1
        j = -1
        gmin = np.inf
        gmax = -np.inf
        for t in range(n):
            if alpha[t] < C and grad[t] < gmin:
                gmin = grad[t]
                i = t
            if alpha[t] > 0.0 and grad[t] > gmax:
                gmax = grad[t]
                j = t
        gap = gmax - gmin
        if i < 0 or j < 0 or gap <= tol:
            break
        curv = Q[i, i] + Q[j, j] - 2.0 * Q[i, j]
        if curv <= 1e-12:
            curv = 1e-12
        delta = gap / curv
        room = min(C - alpha[i], alpha[j])
        if delta > room:
            delta = room
        alpha[i] += delta
        alpha[j] -= delta
        # clamp rounding drift onto the box
        if alpha[j] < 1e-16 * C:
            alpha[j] = 0.0
        if alpha[i] > C * (1.0 - 1e-15):
            alpha[i] = C
        for t in range(n):
            grad[t] += delta * (Q[t, i] - Q[t, j])
        it += 1
    return grad, it, gap


def _smo_np(Q, alpha, C, tol, max_iter):
    """Vectorized twin of ``_smo``: same pair selection, same update order."""
    grad = Q @ alpha
    it = 0
    gap = np.inf
    while it < max_iter:
        up = np.where(alpha < C, grad, np.inf)
        down = np.where(alpha > 0.0, grad, -np.inf)
        i = int(np.argmin(up))
        j = int(np.argmax(down))
        gap = down[j] - up[i]
        if not np.isfinite(up[i]) or not np.isfinite(down[j]) or gap <= tol:
            break
        curv = max(Q[i, i] + Q[j, j] - 2.0 * Q[i, j], 1e-12)
        delta = min(gap / curv, C - alpha[i], alpha[j])
        alpha[i] += delta
        alpha[j] -= delta
        if alpha[j] < 1e-16 * C:
            alpha[j] = 0.0
        if alpha[i] > C * (1.0 - 1e-15):
            alpha[i] = C
        grad += delta * (Q[:, i] - Q[:, j])
        it += 1
    return grad, it, gap


@dataclass(frozen=True, eq=False)
class OcsvmModel:
    support_vectors: np.ndarray  # (n_sv, M)
    alphas: np.ndarray  # (n_sv,)
    rho: float
    gamma: float
    nu: float
    n_train: int = 0
    n_iter: int = 0

    @property
    def C(self):
        return 1.0 / (self.nu * self.n_train)

    def decision(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[1] != self.support_vectors.shape[1]:
            raise ValueError(f"expected latent dim {self.support_vectors.shape[1]}, got {z.shape[1]}")
        return kernel_matrix(z, self.support_vectors, self.gamma) @ self.alphas - self.rho


def decision(m: OcsvmModel, z):
    """``f(z)`` for one vector (returns float) or a batch (returns array)."""
    out = m.decision(z)
    return float(out[0]) if np.ndim(z) == 1 else out


def _initial_alpha(n, C):
    a = np.zeros(n)
    full = int(np.floor(1.0 / C + 1e-12))
    full = min(full, n)
    a[:full] = C
    if full < n:
        a[full] = 1.0 - full * C
    return a


def solve_dual(Q, nu, tol=1e-6, max_iter=None, use_numba=USE_NUMBA):
    """Returns ``(alpha, grad, rho, n_iter)`` for a precomputed kernel matrix."""
    n = Q.shape[0]
    if not 0 < nu < 1:
        raise ValueError(f"nu must be in (0, 1), got {nu}")
    if nu * n < 1:
        raise ValueError(f"nu * n must be >= 1 (nu={nu}, n={n})")
    C = 1.0 / (nu * n)
    alpha = _initial_alpha(n, C)
    max_iter = int(max_iter if max_iter is not None else 100_000 * n)
    smo = _smo if use_numba else _smo_np
    grad, it, gap = smo(np.ascontiguousarray(Q, dtype=np.float64), alpha, C, tol, max_iter)
    if gap > tol:
        raise ConvergenceError(f"SMO did not converge in {it} iterations; max KKT violation {gap:.3g}")
    free = (alpha > 0) & (alpha < C)
    if free.any():
        rho = float(np.mean(grad[free]))
    else:
        hi = grad[alpha >= C].max() if np.any(alpha >= C) else -np.inf
        lo = grad[alpha <= 0].min() if np.any(alpha <= 0) else np.inf
        rho = float(0.5 * (hi + lo)) if np.isfinite(hi) and np.isfinite(lo) else float(hi if np.isfinite(hi) else lo)
    return alpha, grad, rho, it


def fit_ocsvm(samples, nu=0.03, gamma=None, tol=1e-6, seed=None, max_iter=None) -> OcsvmModel:
    """Fit on ``samples`` (n, M). ``gamma=None`` uses :func:`default_gamma`.

    ``seed`` is accepted for interface symmetry; the solver is deterministic.
    """
    z = np.asarray(samples, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError("need at least two samples")
    if gamma is None:
        gamma = default_gamma(z)
    Q = kernel_matrix(z, z, gamma)
    alpha, _, rho, it = solve_dual(Q, nu, tol, max_iter)
    sv = alpha > 0
    return OcsvmModel(z[sv].copy(), alpha[sv].copy(), rho, float(gamma), float(nu), z.shape[0], it)


@dataclass(frozen=True, eq=False)
class OcsvmEnsemble:
    models: tuple

    def __post_init__(self):
        if not self.models:
            raise ValueError("ensemble needs at least one model")
        dims = {m.support_vectors.shape[1] for m in self.models}
        if len(dims) != 1:
            raise ValueError(f"members disagree on latent dimension: {sorted(dims)}")

    def decision(self, z):
        return np.mean([m.decision(z) for m in self.models], axis=0)

    def anomaly_score(self, z):
        """Higher means more anomalous: the negated mean member decision."""
        return -self.decision(z)


def fit_ensemble(latents, n_models=5, n_per_model=500, nu=0.03, tol=1e-6, seed=0) -> OcsvmEnsemble:
    z = np.asarray(latents, dtype=np.float64)
    if len(z) < n_per_model:
        raise ValueError(f"need at least {n_per_model} latent samples, got {len(z)}")
    models = []
    for k in range(n_models):
        rng = np.random.default_rng([seed, k])
        idx = rng.choice(len(z), size=n_per_model, replace=False)
        models.append(fit_ocsvm(z[idx], nu=nu, tol=tol))
    return OcsvmEnsemble(tuple(models))


def score(e: OcsvmEnsemble, z):
    out = e.anomaly_score(z)
    return float(out[0]) if np.ndim(z) == 1 else out


def ensemble_to_bytes(e: OcsvmEnsemble) -> bytes:
    meta = {"models": [{"rho": m.rho, "gamma": m.gamma, "nu": m.nu, "n_train": m.n_train, "n_iter": m.n_iter} for m in e.models]}
    arrays = {}
    for k, m in enumerate(e.models):
        arrays[f"{k}/support_vectors"] = m.support_vectors
        arrays[f"{k}/alphas"] = m.alphas
    return container.dumps("ocsvm", meta, arrays)


def ensemble_from_bytes(buf: bytes) -> OcsvmEnsemble:
    _, meta, arrays = container.loads(buf, "ocsvm")
    models = [
        OcsvmModel(arrays[f"{k}/support_vectors"], arrays[f"{k}/alphas"], d["rho"], d["gamma"], d["nu"], d["n_train"], d["n_iter"])
        for k, d in enumerate(meta["models"])
    ]
    return OcsvmEnsemble(tuple(models))
